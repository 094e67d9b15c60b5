#include "cpsmpc/trajectory_data.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cpsmpc/errors.hpp"
#include "cpsmpc/rng.hpp"

namespace cpsmpc {

namespace {

std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Deterministic Fisher-Yates; std::shuffle's sequence is
// implementation-defined, which would break byte-identical reports.
std::vector<Eigen::Index> permutation(Eigen::Index n, std::uint64_t seed) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 engine(seed);
    for (Eigen::Index i = n - 1; i > 0; --i) {
        // rejection sampling keeps the draw unbiased
        const std::uint64_t bound = static_cast<std::uint64_t>(i) + 1;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t r = 0;
        do {
            r = engine();
        } while (r >= limit);
        std::swap(idx[static_cast<std::size_t>(i)],
                  idx[static_cast<std::size_t>(r % bound)]);
    }
    return idx;
}

}  // namespace

std::string role_name(Role role) {
    switch (role) {
        case Role::disturbance: return "disturbance";
        case Role::noise: return "noise";
        case Role::error: return "error";
        case Role::estimation_error: return "estimation_error";
        case Role::nominal_error: return "nominal_error";
    }
    throw std::logic_error("unknown role");
}

Role role_from_name(const std::string& name) {
    if (name == "disturbance") return Role::disturbance;
    if (name == "noise") return Role::noise;
    if (name == "error") return Role::error;
    if (name == "estimation_error") return Role::estimation_error;
    if (name == "nominal_error") return Role::nominal_error;
    throw DataError(DataError::Kind::parse, "unknown dataset role '" + name + "'");
}

TrajectoryDataset::TrajectoryDataset(Role role,
                                     std::vector<Eigen::MatrixXd> samples,
                                     std::optional<std::uint64_t> seed)
    : role_(role), samples_(std::move(samples)), seed_(seed) {
    if (samples_.empty())
        throw DataError(DataError::Kind::parse, "dataset must hold at least one trajectory");
    const auto rows = samples_.front().rows();
    const auto cols = samples_.front().cols();
    if (rows < 1 || cols < 1)
        throw DataError(DataError::Kind::dimension, "trajectories must be non-empty");
    for (std::size_t k = 0; k < samples_.size(); ++k) {
        if (samples_[k].rows() != rows || samples_[k].cols() != cols) {
            std::ostringstream msg;
            msg << "trajectory " << k + 1 << " has shape " << samples_[k].rows()
                << "x" << samples_[k].cols() << ", expected " << rows << "x" << cols;
            throw DataError(DataError::Kind::ragged, msg.str());
        }
    }
}

const Eigen::MatrixXd& TrajectoryDataset::trajectory(Eigen::Index k) const {
    if (k < 0 || k >= count())
        throw std::out_of_range("trajectory index out of range");
    return samples_[static_cast<std::size_t>(k)];
}

Eigen::VectorXd TrajectoryDataset::value(Eigen::Index k, Eigen::Index t) const {
    const auto& traj = trajectory(k);
    if (t < 0 || t >= traj.cols())
        throw std::out_of_range("time index out of range");
    return traj.col(t);
}

bool TrajectoryDataset::operator==(const TrajectoryDataset& other) const {
    if (role_ != other.role_ || samples_.size() != other.samples_.size())
        return false;
    for (std::size_t k = 0; k < samples_.size(); ++k)
        if (samples_[k] != other.samples_[k]) return false;
    return true;
}

TrajectoryDataset generate_gaussian(Eigen::Index dim, Eigen::Index length,
                                    Eigen::Index count,
                                    const Eigen::MatrixXd& covariance,
                                    const Eigen::VectorXd& mean,
                                    std::uint64_t seed, Role role) {
    if (dim < 1 || length < 1 || count < 1)
        throw std::invalid_argument("generate_gaussian: dim, length, count must be >= 1");
    if (covariance.rows() != dim || covariance.cols() != dim || mean.size() != dim)
        throw std::invalid_argument("generate_gaussian: covariance/mean dimension mismatch");
    if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() > 1e-10)
        throw std::invalid_argument("generate_gaussian: covariance must be symmetric");

    // Cholesky when positive definite; eigendecomposition otherwise so that
    // semidefinite covariances (degenerate directions) remain usable.
    Eigen::MatrixXd factor;
    Eigen::LLT<Eigen::MatrixXd> llt(covariance);
    if (llt.info() == Eigen::Success) {
        factor = llt.matrixL();
    } else {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(covariance);
        Eigen::VectorXd lam = es.eigenvalues();
        if (lam.minCoeff() < -1e-10 * std::max(1.0, lam.cwiseAbs().maxCoeff()))
            throw std::invalid_argument(
                "generate_gaussian: covariance must be positive semidefinite");
        factor = es.eigenvectors() * lam.cwiseMax(0.0).cwiseSqrt().asDiagonal();
    }

    Rng rng(seed);
    std::vector<Eigen::MatrixXd> samples;
    samples.reserve(static_cast<std::size_t>(count));
    Eigen::VectorXd draw(dim);
    for (Eigen::Index k = 0; k < count; ++k) {
        Eigen::MatrixXd traj(dim, length);
        for (Eigen::Index t = 0; t < length; ++t) {
            for (Eigen::Index i = 0; i < dim; ++i) draw(i) = rng.gauss();
            traj.col(t) = mean + factor * draw;
        }
        samples.push_back(std::move(traj));
    }
    return TrajectoryDataset(role, std::move(samples), seed);
}

TrajectoryDataset generate_uniform(Eigen::Index dim, Eigen::Index length,
                                   Eigen::Index count,
                                   const Eigen::VectorXd& half_widths,
                                   std::uint64_t seed, Role role) {
    if (dim < 1 || length < 1 || count < 1)
        throw std::invalid_argument("generate_uniform: dim, length, count must be >= 1");
    if (half_widths.size() != dim)
        throw std::invalid_argument("generate_uniform: half_widths dimension mismatch");
    if (half_widths.minCoeff() < 0.0)
        throw std::invalid_argument("generate_uniform: half_widths must be >= 0");

    Rng rng(seed);
    std::vector<Eigen::MatrixXd> samples;
    samples.reserve(static_cast<std::size_t>(count));
    for (Eigen::Index k = 0; k < count; ++k) {
        Eigen::MatrixXd traj(dim, length);
        for (Eigen::Index t = 0; t < length; ++t)
            for (Eigen::Index i = 0; i < dim; ++i)
                traj(i, t) = rng.uniform(-half_widths(i), half_widths(i));
        samples.push_back(std::move(traj));
    }
    return TrajectoryDataset(role, std::move(samples), seed);
}

SplitResult split(const TrajectoryDataset& ds, const SplitSpec& spec) {
    if (spec.n_fit < 1 || spec.n_cal < 1)
        throw std::invalid_argument("split: n_fit and n_cal must be >= 1");
    if (spec.n_fit + spec.n_cal > ds.count()) {
        std::ostringstream msg;
        msg << "split: n_fit + n_cal = " << spec.n_fit + spec.n_cal
            << " exceeds dataset size M = " << ds.count();
        throw std::invalid_argument(msg.str());
    }
    const auto perm = permutation(ds.count(), spec.shuffle_seed);
    std::vector<Eigen::MatrixXd> fit, cal;
    fit.reserve(static_cast<std::size_t>(spec.n_fit));
    cal.reserve(static_cast<std::size_t>(spec.n_cal));
    for (Eigen::Index i = 0; i < spec.n_fit; ++i)
        fit.push_back(ds.trajectory(perm[static_cast<std::size_t>(i)]));
    for (Eigen::Index i = 0; i < spec.n_cal; ++i)
        cal.push_back(ds.trajectory(perm[static_cast<std::size_t>(spec.n_fit + i)]));

    SplitResult result{TrajectoryDataset(ds.role(), std::move(fit), ds.seed()),
                       TrajectoryDataset(ds.role(), std::move(cal), ds.seed()),
                       ""};
    if (spec.n_cal < 10)
        result.warning = "calibration split holds fewer than 10 trajectories; "
                         "the conformal quantile will be coarse";
    return result;
}

void save_dataset(const TrajectoryDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw DataError(DataError::Kind::io, "cannot open '" + path + "' for writing");

    if (std::filesystem::path(path).extension() == ".json") {
        nlohmann::json j;
        j["role"] = role_name(ds.role());
        j["M"] = ds.count();
        j["T"] = ds.length();
        j["n"] = ds.dim();
        if (ds.seed()) j["seed"] = *ds.seed();
        auto& trajectories = j["trajectories"] = nlohmann::json::array();
        for (Eigen::Index k = 0; k < ds.count(); ++k) {
            nlohmann::json traj = nlohmann::json::array();
            for (Eigen::Index t = 0; t < ds.length(); ++t) {
                nlohmann::json vec = nlohmann::json::array();
                for (Eigen::Index i = 0; i < ds.dim(); ++i)
                    vec.push_back(ds.trajectory(k)(i, t));
                traj.push_back(std::move(vec));
            }
            trajectories.push_back(std::move(traj));
        }
        out << j.dump(2) << '\n';
        return;
    }

    out << "# role=" << role_name(ds.role()) << " M=" << ds.count()
        << " T=" << ds.length() << " n=" << ds.dim() << '\n';
    for (Eigen::Index k = 0; k < ds.count(); ++k)
        for (Eigen::Index t = 0; t < ds.length(); ++t) {
            out << (k + 1) << ',' << t;
            for (Eigen::Index i = 0; i < ds.dim(); ++i)
                out << ',' << format_value(ds.trajectory(k)(i, t));
            out << '\n';
        }
}

namespace {

TrajectoryDataset load_json_dataset(const std::string& path) {
    std::ifstream in(path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(DataError::Kind::parse,
                        "JSON parse failure in '" + path + "': " + e.what());
    }
    try {
        const Eigen::Index M = j.at("M").get<Eigen::Index>();
        const Eigen::Index T = j.at("T").get<Eigen::Index>();
        const Eigen::Index n = j.at("n").get<Eigen::Index>();
        const Role role = role_from_name(j.at("role").get<std::string>());
        const auto& trajectories = j.at("trajectories");
        if (static_cast<Eigen::Index>(trajectories.size()) != M)
            throw DataError(DataError::Kind::dimension,
                            "trajectory count differs from declared M");
        std::vector<Eigen::MatrixXd> samples;
        samples.reserve(trajectories.size());
        for (const auto& traj : trajectories) {
            if (static_cast<Eigen::Index>(traj.size()) != T)
                throw DataError(DataError::Kind::ragged,
                                "trajectory length differs from declared T");
            Eigen::MatrixXd m(n, T);
            for (Eigen::Index t = 0; t < T; ++t) {
                const auto& vec = traj[static_cast<std::size_t>(t)];
                if (static_cast<Eigen::Index>(vec.size()) != n)
                    throw DataError(DataError::Kind::ragged,
                                    "vector dimension differs from declared n");
                for (Eigen::Index i = 0; i < n; ++i)
                    m(i, t) = vec[static_cast<std::size_t>(i)].get<double>();
            }
            samples.push_back(std::move(m));
        }
        std::optional<std::uint64_t> seed;
        if (j.contains("seed")) seed = j["seed"].get<std::uint64_t>();
        return TrajectoryDataset(role, std::move(samples), seed);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(DataError::Kind::parse,
                        "malformed dataset JSON in '" + path + "': " + e.what());
    }
}

}  // namespace

TrajectoryDataset load_dataset(const std::string& path, Eigen::Index expected_dim,
                               Eigen::Index expected_length) {
    if (!std::filesystem::exists(path))
        throw DataError(DataError::Kind::io, "dataset file '" + path + "' not found");

    TrajectoryDataset ds = [&] {
        if (std::filesystem::path(path).extension() == ".json")
            return load_json_dataset(path);

        std::ifstream in(path);
        std::string line;
        if (!std::getline(in, line))
            throw DataError(DataError::Kind::parse, "dataset file '" + path + "' is empty");

        Eigen::Index M = -1, T = -1, n = -1;
        std::string role_str;
        {
            std::istringstream header(line);
            std::string token;
            header >> token;  // '#'
            if (token != "#")
                throw DataError(DataError::Kind::parse,
                                "missing '# role=... M=... T=... n=...' header");
            while (header >> token) {
                const auto eq = token.find('=');
                if (eq == std::string::npos)
                    throw DataError(DataError::Kind::parse,
                                    "malformed header token '" + token + "'");
                const std::string key = token.substr(0, eq);
                const std::string val = token.substr(eq + 1);
                try {
                    if (key == "role") role_str = val;
                    else if (key == "M") M = std::stol(val);
                    else if (key == "T") T = std::stol(val);
                    else if (key == "n") n = std::stol(val);
                } catch (const std::exception&) {
                    throw DataError(DataError::Kind::parse,
                                    "non-numeric header value '" + token + "'");
                }
            }
        }
        if (M < 1 || T < 1 || n < 1 || role_str.empty())
            throw DataError(DataError::Kind::parse, "incomplete dataset header");

        std::vector<Eigen::MatrixXd> samples(
            static_cast<std::size_t>(M), Eigen::MatrixXd::Constant(n, T, 0.0));
        std::vector<std::vector<bool>> seen(
            static_cast<std::size_t>(M), std::vector<bool>(static_cast<std::size_t>(T), false));
        std::size_t rows = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::istringstream row(line);
            std::string cell;
            auto next_cell = [&]() {
                if (!std::getline(row, cell, ','))
                    throw DataError(DataError::Kind::parse,
                                    "short data row '" + line + "'");
                return cell;
            };
            Eigen::Index k = 0, t = 0;
            try {
                k = std::stol(next_cell());
                t = std::stol(next_cell());
            } catch (const std::exception&) {
                throw DataError(DataError::Kind::parse,
                                "non-numeric indices in row '" + line + "'");
            }
            if (k < 1 || k > M || t < 0 || t >= T)
                throw DataError(DataError::Kind::dimension,
                                "row indices out of declared range in '" + line + "'");
            for (Eigen::Index i = 0; i < n; ++i) {
                try {
                    samples[static_cast<std::size_t>(k - 1)](i, t) =
                        std::stod(next_cell());
                } catch (const DataError&) {
                    throw DataError(DataError::Kind::ragged,
                                    "row has fewer than n values: '" + line + "'");
                } catch (const std::exception&) {
                    throw DataError(DataError::Kind::parse,
                                    "non-numeric value in row '" + line + "'");
                }
            }
            if (std::getline(row, cell, ','))
                throw DataError(DataError::Kind::ragged,
                                "row has more than n values: '" + line + "'");
            seen[static_cast<std::size_t>(k - 1)][static_cast<std::size_t>(t)] = true;
            ++rows;
        }
        if (rows != static_cast<std::size_t>(M) * static_cast<std::size_t>(T))
            throw DataError(DataError::Kind::ragged,
                            "expected M*T data rows, found " + std::to_string(rows));
        for (const auto& traj_seen : seen)
            for (bool got : traj_seen)
                if (!got)
                    throw DataError(DataError::Kind::ragged,
                                    "duplicate rows leave some (k,t) entries unset");
        return TrajectoryDataset(role_from_name(role_str), std::move(samples));
    }();

    if (expected_dim >= 0 && ds.dim() != expected_dim)
        throw DataError(DataError::Kind::dimension,
                        "dataset dimension " + std::to_string(ds.dim()) +
                            " does not match expected " + std::to_string(expected_dim));
    if (expected_length >= 0 && ds.length() != expected_length)
        throw DataError(DataError::Kind::dimension,
                        "dataset length " + std::to_string(ds.length()) +
                            " does not match expected " + std::to_string(expected_length));
    return ds;
}

}  // namespace cpsmpc
