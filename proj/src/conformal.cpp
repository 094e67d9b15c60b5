#include "cpsmpc/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cpsmpc/errors.hpp"

namespace cpsmpc {

namespace {

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

Moments fit_moments(const TrajectoryDataset& fit, bool zero_mean) {
    const Eigen::Index M = fit.count();
    const Eigen::Index n = fit.dim();
    const Eigen::Index T = fit.length();
    if (M < n + 1)
        throw CalibrationError(
            "fit_moments: " + std::to_string(M) +
                " trajectories cannot identify a rank-" + std::to_string(n) +
                " covariance; need at least " + std::to_string(n + 1) +
                " (or heavier regularization)",
            n + 1);

    Moments out;
    out.mean.reserve(T);
    out.covariance.reserve(T);
    out.factor.reserve(T);
    for (Eigen::Index i = 0; i < T; ++i) {
        Eigen::VectorXd mu = Eigen::VectorXd::Zero(n);
        if (!zero_mean) {
            for (Eigen::Index k = 0; k < M; ++k) mu += fit.trajectory(k).col(i);
            mu /= static_cast<double>(M);
        }
        Eigen::MatrixXd S = Eigen::MatrixXd::Zero(n, n);
        for (Eigen::Index k = 0; k < M; ++k) {
            const Eigen::VectorXd d = fit.trajectory(k).col(i) - mu;
            S.noalias() += d * d.transpose();
        }
        S /= static_cast<double>(M - 1);
        S = 0.5 * (S + S.transpose());
        const double delta =
            std::max(1e-8 * S.trace() / static_cast<double>(n), 1e-12);
        S.diagonal().array() += delta;
        Eigen::LLT<Eigen::MatrixXd> llt(S);
        if (llt.info() != Eigen::Success)
            throw CalibrationError(
                "fit_moments: covariance at step " + std::to_string(i + 1) +
                    " is not positive definite after regularization",
                n + 1);
        out.mean.push_back(std::move(mu));
        out.covariance.push_back(std::move(S));
        out.factor.push_back(std::move(llt));
    }
    return out;
}

std::string score_kind_name(ScoreKind kind) {
    switch (kind) {
        case ScoreKind::max_norm: return "max_norm";
        case ScoreKind::weighted_max_norm: return "weighted_max_norm";
        case ScoreKind::mahalanobis: return "mahalanobis";
    }
    throw std::logic_error("score_kind_name: unknown kind");
}

ScoreKind score_kind_from_name(const std::string& name) {
    if (name == "max_norm") return ScoreKind::max_norm;
    if (name == "weighted_max_norm") return ScoreKind::weighted_max_norm;
    if (name == "mahalanobis") return ScoreKind::mahalanobis;
    throw std::invalid_argument("unknown score kind '" + name + "'");
}

ScoreFunction ScoreFunction::max_norm(Eigen::Index dim, Eigen::Index horizon) {
    if (dim < 1 || horizon < 1)
        throw std::invalid_argument("score: dim and horizon must be positive");
    ScoreFunction sf;
    sf.kind = ScoreKind::max_norm;
    sf.dim = dim;
    sf.horizon = horizon;
    return sf;
}

ScoreFunction ScoreFunction::weighted_max_norm(Eigen::Index dim,
                                               Eigen::VectorXd weights) {
    if (dim < 1 || weights.size() < 1)
        throw std::invalid_argument("score: dim and horizon must be positive");
    if (weights.minCoeff() <= 0.0)
        throw std::invalid_argument("score: weights must be positive");
    ScoreFunction sf;
    sf.kind = ScoreKind::weighted_max_norm;
    sf.dim = dim;
    sf.horizon = weights.size();
    sf.weights = std::move(weights);
    return sf;
}

ScoreFunction ScoreFunction::mahalanobis(Moments moments) {
    if (moments.horizon() < 1)
        throw std::invalid_argument("score: moments are empty");
    ScoreFunction sf;
    sf.kind = ScoreKind::mahalanobis;
    sf.dim = moments.dim();
    sf.horizon = moments.horizon();
    sf.moments = std::move(moments);
    return sf;
}

Eigen::VectorXd score_steps(const ScoreFunction& sf, const Eigen::MatrixXd& E,
                            Eigen::Index steps) {
    if (steps < 0) steps = sf.horizon;
    if (steps < 1 || steps > sf.horizon)
        throw std::invalid_argument("score_steps: steps outside [1, horizon]");
    if (E.rows() != sf.dim)
        throw std::invalid_argument("score_steps: dimension mismatch");
    if (E.cols() < steps)
        throw std::invalid_argument(
            "score_steps: trajectory shorter than the requested step count");
    Eigen::VectorXd values(steps);
    for (Eigen::Index i = 0; i < steps; ++i) {
        double v = 0.0;
        switch (sf.kind) {
            case ScoreKind::max_norm:
                v = E.col(i).norm();
                break;
            case ScoreKind::weighted_max_norm:
                v = sf.weights(i) * E.col(i).norm();
                break;
            case ScoreKind::mahalanobis: {
                const Moments& m = *sf.moments;
                const Eigen::VectorXd d = E.col(i) - m.mean[i];
                v = m.factor[i].matrixL().solve(d).norm();
                break;
            }
        }
        values(i) = v;
    }
    return values;
}

double score_trajectory(const ScoreFunction& sf, const Eigen::MatrixXd& E) {
    return score_steps(sf, E).maxCoeff();
}

double conformal_quantile(std::vector<double> scores, double level) {
    const long M = static_cast<long>(scores.size());
    if (M < 1) throw std::invalid_argument("conformal_quantile: no scores");
    if (!(level > 0.0 && level < 1.0))
        throw std::invalid_argument("conformal_quantile: level must be in (0,1)");
    long k = static_cast<long>(
        std::ceil((static_cast<double>(M) + 1.0) * level - 1e-9));
    if (k < 1) k = 1;
    if (k > M) {
        const long minimal =
            static_cast<long>(std::ceil(level / (1.0 - level) - 1e-9));
        throw CalibrationError(
            "conformal_quantile: rank ceil((M+1)p) = " + std::to_string(k) +
                " exceeds M = " + std::to_string(M) +
                "; the finite-sample region is unbounded. Need at least " +
                std::to_string(minimal) + " calibration trajectories",
            minimal);
    }
    std::sort(scores.begin(), scores.end());
    return scores[static_cast<std::size_t>(k - 1)];
}

double pac_tighten(double theta, double epsilon, long M) {
    if (!(theta > 0.0 && theta < 1.0))
        throw std::invalid_argument("pac_tighten: theta must be in (0,1)");
    if (!(epsilon > 0.0 && epsilon < 1.0))
        throw std::invalid_argument("pac_tighten: epsilon must be in (0,1)");
    if (M < 1) throw std::invalid_argument("pac_tighten: M must be positive");
    const double shrink =
        std::sqrt(-std::log(epsilon) / (2.0 * static_cast<double>(M)));
    const double tightened = theta - shrink;
    if (tightened <= 0.0) {
        const long minimal = static_cast<long>(
            std::ceil(-std::log(epsilon) / (2.0 * theta * theta)));
        throw CalibrationError(
            "pac_tighten: confidence " + fmt17(epsilon) + " at level " +
                fmt17(theta) + " is infeasible with M = " + std::to_string(M) +
                "; need at least " + std::to_string(minimal) + " samples",
            minimal);
    }
    return tightened;
}

double union_bound_levels(double level, long horizon) {
    if (!(level > 0.0 && level < 1.0))
        throw std::invalid_argument("union_bound_levels: level must be in (0,1)");
    if (horizon < 1)
        throw std::invalid_argument("union_bound_levels: horizon must be >= 1");
    return (1.0 - level) / static_cast<double>(horizon);
}

ConfidenceRegion calibrate(const TrajectoryDataset& errors,
                           const SplitSpec& split_spec, ScoreKind kind,
                           double level, std::optional<double> pac_epsilon,
                           bool zero_mean, const Eigen::VectorXd& weights) {
    ScoreFunction sf;
    std::optional<TrajectoryDataset> cal;
    long m_fit = 0;

    if (kind == ScoreKind::mahalanobis) {
        if (split_spec.n_fit < 1)
            throw CalibrationError(
                "calibrate: the mahalanobis score needs a nonempty fit split "
                "to estimate moments",
                1);
        const SplitResult sr = split(errors, split_spec);
        sf = ScoreFunction::mahalanobis(fit_moments(sr.fit, zero_mean));
        cal = sr.cal;
        m_fit = sr.fit.count();
    } else {
        if (kind == ScoreKind::weighted_max_norm) {
            if (weights.size() != errors.length())
                throw std::invalid_argument(
                    "calibrate: weighted score needs one weight per time step");
            sf = ScoreFunction::weighted_max_norm(errors.dim(), weights);
        } else {
            sf = ScoreFunction::max_norm(errors.dim(), errors.length());
        }
        if (split_spec.n_fit > 0) {
            const SplitResult sr = split(errors, split_spec);
            cal = sr.cal;
            m_fit = sr.fit.count();
        } else {
            cal = errors;  // no moments to fit: the full set calibrates
        }
    }

    std::vector<double> scores;
    scores.reserve(static_cast<std::size_t>(cal->count()));
    for (Eigen::Index k = 0; k < cal->count(); ++k)
        scores.push_back(score_trajectory(sf, cal->trajectory(k)));

    ConfidenceRegion region;
    region.score = std::move(sf);
    region.level = level;
    region.M_fit = m_fit;
    region.M_cal = cal->count();
    double effective = level;
    if (pac_epsilon) {
        const double tightened =
            pac_tighten(1.0 - level, *pac_epsilon, region.M_cal);
        region.pac = PacSpec{*pac_epsilon, tightened};
        effective = 1.0 - tightened;
    }
    region.qhat = conformal_quantile(std::move(scores), effective);
    return region;
}

ConfidenceRegion calibrate(const ErrorTrajectorySet& errors,
                           const SplitSpec& split_spec, ScoreKind kind,
                           double level, std::optional<double> pac_epsilon,
                           bool zero_mean, const Eigen::VectorXd& weights) {
    return calibrate(errors.state_errors, split_spec, kind, level, pac_epsilon,
                     zero_mean, weights);
}

Ellipsoid project(const ConfidenceRegion& region, Eigen::Index t) {
    const ScoreFunction& sf = region.score;
    if (t < 1 || t > sf.horizon)
        throw std::invalid_argument("project: time step out of range");
    switch (sf.kind) {
        case ScoreKind::max_norm:
            return Ellipsoid(Eigen::VectorXd::Zero(sf.dim),
                             Eigen::MatrixXd::Identity(sf.dim, sf.dim),
                             region.qhat);
        case ScoreKind::weighted_max_norm:
            return Ellipsoid(Eigen::VectorXd::Zero(sf.dim),
                             Eigen::MatrixXd::Identity(sf.dim, sf.dim),
                             region.qhat / sf.weights(t - 1));
        case ScoreKind::mahalanobis: {
            const Moments& m = *sf.moments;
            return Ellipsoid(m.mean[t - 1], m.covariance[t - 1], region.qhat);
        }
    }
    throw std::logic_error("project: unknown score kind");
}

void save_region(const ConfidenceRegion& region, const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw DataError(DataError::Kind::io,
                        "save_region: cannot open '" + path + "' for writing");
    const ScoreFunction& sf = region.score;
    out << "cpsmpc-region v1\n";
    out << "kind " << score_kind_name(sf.kind) << "\n";
    out << "level " << fmt17(region.level) << "\n";
    out << "qhat " << fmt17(region.qhat) << "\n";
    out << "M_fit " << region.M_fit << "\n";
    out << "M_cal " << region.M_cal << "\n";
    out << "horizon " << sf.horizon << "\n";
    out << "dim " << sf.dim << "\n";
    if (region.pac)
        out << "pac " << fmt17(region.pac->epsilon) << " "
            << fmt17(region.pac->tightened_theta) << "\n";
    if (sf.kind == ScoreKind::weighted_max_norm) {
        out << "weights";
        for (Eigen::Index i = 0; i < sf.weights.size(); ++i)
            out << " " << fmt17(sf.weights(i));
        out << "\n";
    }
    if (sf.kind == ScoreKind::mahalanobis) {
        const Moments& m = *sf.moments;
        for (Eigen::Index i = 0; i < sf.horizon; ++i) {
            out << "t " << (i + 1) << "\n";
            out << "mu";
            for (Eigen::Index j = 0; j < sf.dim; ++j)
                out << " " << fmt17(m.mean[i](j));
            out << "\n";
            out << "sigma";
            for (Eigen::Index r = 0; r < sf.dim; ++r)
                for (Eigen::Index c = 0; c < sf.dim; ++c)
                    out << " " << fmt17(m.covariance[i](r, c));
            out << "\n";
        }
    }
    if (!out)
        throw DataError(DataError::Kind::io,
                        "save_region: write to '" + path + "' failed");
}

namespace {

std::vector<std::string> region_tokens(std::istream& in) {
    std::vector<std::string> tokens;
    std::string tok;
    while (in >> tok) tokens.push_back(tok);
    return tokens;
}

double parse_double(const std::string& tok, const std::string& field) {
    try {
        std::size_t used = 0;
        const double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw DataError(DataError::Kind::parse,
                        "load_region: malformed " + field + " value '" + tok + "'");
    }
}

long parse_long(const std::string& tok, const std::string& field) {
    try {
        std::size_t used = 0;
        const long v = std::stol(tok, &used);
        if (used != tok.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw DataError(DataError::Kind::parse,
                        "load_region: malformed " + field + " value '" + tok + "'");
    }
}

}  // namespace

ConfidenceRegion load_region(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw DataError(DataError::Kind::io,
                        "load_region: cannot open '" + path + "'");
    std::string magic, version;
    in >> magic >> version;
    if (magic != "cpsmpc-region" || version != "v1")
        throw DataError(DataError::Kind::parse,
                        "load_region: '" + path + "' is not a region file");

    const std::vector<std::string> toks = region_tokens(in);
    std::size_t pos = 0;
    auto next = [&](const std::string& what) -> const std::string& {
        if (pos >= toks.size())
            throw DataError(DataError::Kind::parse,
                            "load_region: truncated file, expected " + what);
        return toks[pos++];
    };
    auto expect_key = [&](const std::string& key) {
        const std::string& got = next("key '" + key + "'");
        if (got != key)
            throw DataError(DataError::Kind::parse,
                            "load_region: expected '" + key + "', found '" +
                                got + "'");
    };

    expect_key("kind");
    ScoreKind kind;
    try {
        kind = score_kind_from_name(next("score kind"));
    } catch (const std::invalid_argument& e) {
        throw DataError(DataError::Kind::parse,
                        std::string("load_region: ") + e.what());
    }
    expect_key("level");
    const double level = parse_double(next("level"), "level");
    expect_key("qhat");
    const double qhat = parse_double(next("qhat"), "qhat");
    expect_key("M_fit");
    const long m_fit = parse_long(next("M_fit"), "M_fit");
    expect_key("M_cal");
    const long m_cal = parse_long(next("M_cal"), "M_cal");
    expect_key("horizon");
    const long horizon = parse_long(next("horizon"), "horizon");
    expect_key("dim");
    const long dim = parse_long(next("dim"), "dim");
    if (horizon < 1 || dim < 1)
        throw DataError(DataError::Kind::dimension,
                        "load_region: horizon and dim must be positive");

    std::optional<PacSpec> pac;
    if (pos < toks.size() && toks[pos] == "pac") {
        ++pos;
        PacSpec p;
        p.epsilon = parse_double(next("pac epsilon"), "pac epsilon");
        p.tightened_theta = parse_double(next("pac theta"), "pac theta");
        pac = p;
    }

    ScoreFunction sf;
    if (kind == ScoreKind::max_norm) {
        sf = ScoreFunction::max_norm(dim, horizon);
    } else if (kind == ScoreKind::weighted_max_norm) {
        expect_key("weights");
        Eigen::VectorXd w(horizon);
        for (long i = 0; i < horizon; ++i)
            w(i) = parse_double(next("weight"), "weight");
        sf = ScoreFunction::weighted_max_norm(dim, std::move(w));
    } else {
        Moments m;
        for (long i = 0; i < horizon; ++i) {
            expect_key("t");
            const long ti = parse_long(next("time index"), "time index");
            if (ti != i + 1)
                throw DataError(DataError::Kind::ragged,
                                "load_region: expected step " +
                                    std::to_string(i + 1) + ", found " +
                                    std::to_string(ti));
            expect_key("mu");
            Eigen::VectorXd mu(dim);
            for (long j = 0; j < dim; ++j)
                mu(j) = parse_double(next("mu entry"), "mu entry");
            expect_key("sigma");
            Eigen::MatrixXd S(dim, dim);
            for (long r = 0; r < dim; ++r)
                for (long c = 0; c < dim; ++c)
                    S(r, c) = parse_double(next("sigma entry"), "sigma entry");
            Eigen::LLT<Eigen::MatrixXd> llt(S);
            if (llt.info() != Eigen::Success)
                throw DataError(DataError::Kind::parse,
                                "load_region: sigma at step " +
                                    std::to_string(i + 1) +
                                    " is not positive definite");
            m.mean.push_back(std::move(mu));
            m.covariance.push_back(std::move(S));
            m.factor.push_back(std::move(llt));
        }
        sf = ScoreFunction::mahalanobis(std::move(m));
    }
    if (pos != toks.size())
        throw DataError(DataError::Kind::parse,
                        "load_region: trailing content after region data");

    ConfidenceRegion region;
    region.score = std::move(sf);
    region.qhat = qhat;
    region.level = level;
    region.M_fit = m_fit;
    region.M_cal = m_cal;
    region.pac = pac;
    return region;
}

}  // namespace cpsmpc
