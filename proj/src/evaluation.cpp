#include "cpsmpc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "cpsmpc/error_propagation.hpp"
#include "cpsmpc/errors.hpp"
#include "cpsmpc/rng.hpp"

namespace cpsmpc {

namespace {

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string qp_status_name(QpStatus status) {
    switch (status) {
        case QpStatus::optimal: return "optimal";
        case QpStatus::infeasible: return "infeasible";
        case QpStatus::max_iterations: return "max_iterations";
    }
    return "unknown";
}

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// regularized lower incomplete gamma P(a, x): series for x < a+1,
// continued fraction for the complement otherwise
double gamma_p(double a, double x) {
    if (x <= 0.0) return 0.0;
    const double gln = std::lgamma(a);
    if (x < a + 1.0) {
        double ap = a;
        double sum = 1.0 / a;
        double del = sum;
        for (int n = 0; n < 1000; ++n) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::abs(del) < std::abs(sum) * 1e-16) break;
        }
        return sum * std::exp(-x + a * std::log(x) - gln);
    }
    double b = x + 1.0 - a;
    double c = 1e300;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 1000; ++i) {
        const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::abs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-16) break;
    }
    return 1.0 - std::exp(-x + a * std::log(x) - gln) * h;
}

std::ofstream open_for_write(const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw DataError(DataError::Kind::io,
                        "cannot open '" + path + "' for writing");
    return out;
}

}  // namespace

TrajectoryDataset DisturbanceModel::sample(Eigen::Index length,
                                           Eigen::Index count,
                                           std::uint64_t seed,
                                           Role role) const {
    if (kind == Kind::gaussian) {
        if (covariance.rows() < 1 || covariance.rows() != covariance.cols())
            throw std::invalid_argument(
                "disturbance model: covariance must be square and non-empty");
        return generate_gaussian(covariance.rows(), length, count, covariance,
                                 Eigen::VectorXd::Zero(covariance.rows()), seed,
                                 role);
    }
    if (half_widths.size() < 1 || (half_widths.array() < 0.0).any())
        throw std::invalid_argument(
            "disturbance model: half widths must be non-negative");
    return generate_uniform(half_widths.size(), length, count, half_widths,
                            seed, role);
}

MonteCarloResult run_monte_carlo(const Controller& controller,
                                 const Eigen::VectorXd& x0,
                                 const DisturbanceModel& disturbance_model,
                                 const std::optional<DisturbanceModel>& noise_model,
                                 long n_test, std::uint64_t seed,
                                 bool keep_records) {
    const SmpcConfig& cfg = controller.config();
    const LtiSystem& sys = cfg.system;
    const Eigen::Index nx = sys.nx();
    const Eigen::Index nu = sys.nu();
    const long N_bar = cfg.N_bar;
    const bool output = cfg.mode == FeedbackMode::output_feedback;

    if (n_test < 1)
        throw std::invalid_argument("run_monte_carlo: n_test must be >= 1");
    if (x0.size() != nx)
        throw std::invalid_argument("run_monte_carlo: x0 dimension mismatch");
    if (disturbance_model.dim() != nx)
        throw std::invalid_argument(
            "run_monte_carlo: disturbance model dimension mismatch");
    if (output) {
        if (!noise_model)
            throw std::invalid_argument(
                "run_monte_carlo: output feedback requires a noise model");
        if (noise_model->dim() != sys.ny())
            throw std::invalid_argument(
                "run_monte_carlo: noise model dimension mismatch");
    }

    MonteCarloResult result;
    EvaluationReport& rep = result.report;
    rep.n_test = n_test;
    rep.qhat = cfg.region.qhat;
    rep.level = cfg.region.level;
    rep.mode = mode_name(cfg.mode);
    rep.seed = seed;

    long covered = 0, state_good = 0, input_good = 0, joint_good = 0,
         implication_good = 0;
    std::vector<double> costs;
    costs.reserve(static_cast<std::size_t>(n_test));
    if (keep_records) result.records.reserve(static_cast<std::size_t>(n_test));

    const Eigen::VectorXd u_zero = Eigen::VectorXd::Zero(nu);
    for (long r = 0; r < n_test; ++r) {
        const TrajectoryDataset w_set = disturbance_model.sample(
            N_bar, 1, derive_seed(seed, 2 * static_cast<std::uint64_t>(r)),
            Role::disturbance);
        const Eigen::MatrixXd& w = w_set.trajectory(0);
        Eigen::MatrixXd eta;
        if (output) {
            const TrajectoryDataset eta_set = noise_model->sample(
                N_bar, 1,
                derive_seed(seed, 2 * static_cast<std::uint64_t>(r) + 1),
                Role::noise);
            eta = eta_set.trajectory(0);
        }

        ClosedLoopRecord rec;
        rec.x.resize(nx, N_bar + 1);
        rec.u.resize(nu, N_bar);
        rec.z.resize(nx, N_bar + 1);
        rec.w = w;
        if (output) {
            rec.eta = eta;
            rec.ehat.resize(nx, N_bar);
            rec.ebar.resize(nx, N_bar);
        }
        rec.steps.reserve(static_cast<std::size_t>(N_bar));

        ControllerState state = controller.initial_state(x0);
        Eigen::VectorXd x = x0;
        rec.x.col(0) = x;
        rec.z.col(0) = state.z;
        double cost = 0.0;
        for (long t = 0; t < N_bar; ++t) {
            Eigen::VectorXd measurement =
                output ? sys.measure(x, u_zero, eta.col(t)) : x;
            auto [u, diag] = controller.control_step(state, measurement);
            cost += cfg.cost.stage(x, u);
            x = sys.step_plant(x, u, w.col(t));
            rec.u.col(t) = u;
            rec.x.col(t + 1) = x;
            rec.z.col(t + 1) = state.z;
            if (output) {
                rec.ehat.col(t) = x - state.xhat;
                rec.ebar.col(t) = state.xhat - state.z;
            }
            if (diag.status == QpStatus::infeasible && diag.t > 0)
                ++rep.infeasible_after_t0;
            if (diag.fallback_used) ++rep.fallback_steps;
            if (diag.candidate_checked) {
                if (!diag.candidate_feasible) ++rep.candidate_failures;
                rep.worst_candidate_violation = std::max(
                    rep.worst_candidate_violation, diag.candidate_violation);
            }
            rec.steps.push_back(diag);
        }

        rec.e = rec.x.rightCols(N_bar) - rec.z.rightCols(N_bar);
        rec.scores = score_steps(cfg.region.score, rec.e, N_bar);
        rec.score_ok = rec.scores.maxCoeff() <= cfg.region.qhat;
        rec.state_ok = true;
        for (long t = 1; t <= N_bar && rec.state_ok; ++t)
            rec.state_ok = cfg.X.contains(rec.x.col(t));
        rec.input_ok = true;
        for (long t = 0; t < N_bar && rec.input_ok; ++t)
            rec.input_ok = cfg.U.contains(rec.u.col(t));
        rec.implication_ok = !rec.score_ok || (rec.state_ok && rec.input_ok);
        rec.total_cost = cost;

        covered += rec.score_ok;
        state_good += rec.state_ok;
        input_good += rec.input_ok;
        joint_good += rec.state_ok && rec.input_ok;
        implication_good += rec.implication_ok;
        costs.push_back(cost);
        if (keep_records) result.records.push_back(std::move(rec));
    }

    const double n = static_cast<double>(n_test);
    rep.coverage = static_cast<double>(covered) / n;
    rep.state_rate = static_cast<double>(state_good) / n;
    rep.input_rate = static_cast<double>(input_good) / n;
    rep.joint_rate = static_cast<double>(joint_good) / n;
    rep.implication_rate = static_cast<double>(implication_good) / n;
    double mean = 0.0;
    for (double c : costs) mean += c;
    mean /= n;
    double var = 0.0;
    for (double c : costs) var += (c - mean) * (c - mean);
    rep.mean_cost = mean;
    rep.std_cost = n_test > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    return result;
}

BaselineRegion conformal_marginals(const ConfidenceRegion& region,
                                   long horizon) {
    if (horizon < 1 || horizon > region.score.horizon)
        throw std::invalid_argument(
            "conformal_marginals: horizon outside the region's range");
    BaselineRegion out;
    out.kind = "conformal";
    out.per_step.reserve(static_cast<std::size_t>(horizon));
    for (long t = 1; t <= horizon; ++t)
        out.per_step.push_back(project(region, t));
    return out;
}

BaselineRegion chebyshev_region(const Moments& moments, double theta,
                                long horizon) {
    if (!(theta > 0.0 && theta < 1.0))
        throw std::invalid_argument(
            "chebyshev_region: theta must lie in (0, 1)");
    if (horizon < 1 || horizon > moments.horizon())
        throw std::invalid_argument(
            "chebyshev_region: horizon outside the fitted range");
    const double p_tilde = static_cast<double>(moments.dim()) *
                           static_cast<double>(horizon) / theta;
    BaselineRegion out;
    out.kind = "chebyshev";
    out.per_step.reserve(static_cast<std::size_t>(horizon));
    for (long t = 0; t < horizon; ++t)
        out.per_step.emplace_back(moments.mean[static_cast<std::size_t>(t)],
                                  moments.covariance[static_cast<std::size_t>(t)],
                                  std::sqrt(p_tilde));
    return out;
}

double chi2_quantile(int dof, double p) {
    if (dof < 1) throw std::invalid_argument("chi2_quantile: dof must be >= 1");
    if (!(p > 0.0 && p < 1.0))
        throw std::invalid_argument("chi2_quantile: p must lie in (0, 1)");
    if (dof == 2) return -2.0 * std::log1p(-p);
    const double a = 0.5 * static_cast<double>(dof);
    double hi = static_cast<double>(dof);
    int guard = 0;
    while (gamma_p(a, 0.5 * hi) < p && guard++ < 2000) hi *= 2.0;
    double lo = 0.0;
    for (int i = 0; i < 300 && (hi - lo) > 1e-12 * std::max(1.0, hi); ++i) {
        const double mid = 0.5 * (lo + hi);
        (gamma_p(a, 0.5 * mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

std::vector<Eigen::MatrixXd> lyapunov_covariances(const LtiSystem& sys,
                                                  const Eigen::MatrixXd& sigma_w,
                                                  long horizon) {
    if (horizon < 1)
        throw std::invalid_argument("lyapunov_covariances: horizon must be >= 1");
    if (sigma_w.rows() != sys.nx() || sigma_w.cols() != sys.nx())
        throw std::invalid_argument(
            "lyapunov_covariances: covariance dimension mismatch");
    std::vector<Eigen::MatrixXd> out;
    out.reserve(static_cast<std::size_t>(horizon));
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(sys.nx(), sys.nx());
    for (long t = 0; t < horizon; ++t) {
        sigma = sys.AK() * sigma * sys.AK().transpose() + sigma_w;
        sigma = 0.5 * (sigma + sigma.transpose());
        out.push_back(sigma);
    }
    return out;
}

BaselineRegion gaussian_truth_region(const Eigen::MatrixXd& sigma_w,
                                     const LtiSystem& sys, double level,
                                     long horizon) {
    const double r = std::sqrt(chi2_quantile(static_cast<int>(sys.nx()), level));
    const std::vector<Eigen::MatrixXd> sigmas =
        lyapunov_covariances(sys, sigma_w, horizon);
    BaselineRegion out;
    out.kind = "gaussian_truth";
    out.per_step.reserve(sigmas.size());
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(sys.nx());
    for (const Eigen::MatrixXd& sigma : sigmas)
        out.per_step.emplace_back(zero, sigma, r);
    return out;
}

RegionComparison compare_regions(const std::vector<BaselineRegion>& regions,
                                 std::uint64_t seed, long samples_per_step) {
    if (regions.empty())
        throw std::invalid_argument("compare_regions: no regions given");
    const long H = static_cast<long>(regions.front().per_step.size());
    if (H < 1)
        throw std::invalid_argument("compare_regions: empty reference region");
    const int n = static_cast<int>(regions.front().per_step.front().dim());
    for (const BaselineRegion& reg : regions) {
        if (static_cast<long>(reg.per_step.size()) != H)
            throw std::invalid_argument(
                "compare_regions: regions must share the horizon");
        for (const Ellipsoid& ell : reg.per_step)
            if (ell.dim() != n)
                throw std::invalid_argument(
                    "compare_regions: regions must share the dimension");
    }
    if (samples_per_step < 1)
        throw std::invalid_argument(
            "compare_regions: samples_per_step must be >= 1");

    RegionComparison cmp;
    cmp.horizon = H;
    cmp.dim = n;
    for (const BaselineRegion& reg : regions) {
        cmp.kinds.push_back(reg.kind);
        std::vector<double> proxy(static_cast<std::size_t>(H));
        std::vector<double> scale(static_cast<std::size_t>(H));
        for (long t = 0; t < H; ++t) {
            const Ellipsoid& ell = reg.per_step[static_cast<std::size_t>(t)];
            const double det = std::max(ell.shape.determinant(), 0.0);
            const double vp = std::pow(ell.radius, n) * std::sqrt(det);
            proxy[static_cast<std::size_t>(t)] = vp;
            scale[static_cast<std::size_t>(t)] =
                std::pow(vp, 1.0 / static_cast<double>(n));
        }
        cmp.volume_proxy[reg.kind] = std::move(proxy);
        cmp.radius_scale[reg.kind] = std::move(scale);
    }

    const std::vector<double>& ref_proxy = cmp.volume_proxy[regions[0].kind];
    const std::vector<double>& ref_scale = cmp.radius_scale[regions[0].kind];
    for (std::size_t k = 1; k < regions.size(); ++k) {
        const std::string& kind = regions[k].kind;
        std::vector<double> vr(static_cast<std::size_t>(H));
        std::vector<double> rr(static_cast<std::size_t>(H));
        for (long t = 0; t < H; ++t) {
            const std::size_t i = static_cast<std::size_t>(t);
            const double bp = cmp.volume_proxy[kind][i];
            const double bs = cmp.radius_scale[kind][i];
            vr[i] = bp > 0.0 ? ref_proxy[i] / bp
                             : std::numeric_limits<double>::infinity();
            rr[i] = bs > 0.0 ? ref_scale[i] / bs
                             : std::numeric_limits<double>::infinity();
        }
        cmp.volume_ratio[kind] = std::move(vr);
        cmp.radius_ratio[kind] = std::move(rr);
    }

    // boundary containment: sample points on the reference boundary and ask
    // each baseline for membership; steps whose shapes are not PD are excluded
    Rng rng(seed);
    std::vector<long> contained(regions.size(), 0);
    std::vector<long> asked(regions.size(), 0);
    for (long t = 0; t < H; ++t) {
        const Ellipsoid& ref = regions[0].per_step[static_cast<std::size_t>(t)];
        Eigen::LLT<Eigen::MatrixXd> llt(ref.shape);
        if (llt.info() != Eigen::Success) continue;
        const Eigen::MatrixXd L = llt.matrixL();
        std::vector<bool> usable(regions.size(), false);
        for (std::size_t k = 1; k < regions.size(); ++k) {
            const Ellipsoid& ell =
                regions[k].per_step[static_cast<std::size_t>(t)];
            usable[k] =
                Eigen::LLT<Eigen::MatrixXd>(ell.shape).info() == Eigen::Success;
        }
        for (long s = 0; s < samples_per_step; ++s) {
            Eigen::VectorXd u(n);
            for (int i = 0; i < n; ++i) u(i) = rng.gauss();
            const double norm = u.norm();
            if (norm < 1e-300) continue;
            const Eigen::VectorXd point = ref.center + ref.radius * (L * (u / norm));
            for (std::size_t k = 1; k < regions.size(); ++k) {
                if (!usable[k]) continue;
                ++asked[k];
                contained[k] +=
                    regions[k].per_step[static_cast<std::size_t>(t)].contains(point);
            }
        }
    }
    for (std::size_t k = 1; k < regions.size(); ++k)
        cmp.containment[regions[k].kind] =
            asked[k] > 0 ? static_cast<double>(contained[k]) /
                               static_cast<double>(asked[k])
                         : 0.0;
    return cmp;
}

PolicyComparison compare_policies(const SmpcConfig& cfg,
                                  const TrajectoryDataset& scenario_w,
                                  const Eigen::VectorXd& x0,
                                  const DisturbanceModel& disturbance_model,
                                  long n_test, std::uint64_t seed) {
    if (cfg.mode != FeedbackMode::state_feedback)
        throw std::invalid_argument(
            "compare_policies: defined for state feedback only");
    if (n_test < 1)
        throw std::invalid_argument("compare_policies: n_test must be >= 1");
    if (disturbance_model.dim() != cfg.system.nx())
        throw std::invalid_argument(
            "compare_policies: disturbance model dimension mismatch");

    const LtiSystem& sys = cfg.system;
    const long N_bar = cfg.N_bar;
    const Controller controller(cfg, scenario_w);
    const OpenLoopPlan plan = open_loop_tube_policy(cfg, x0, scenario_w);

    std::vector<double> rh(static_cast<std::size_t>(n_test));
    std::vector<double> ol(static_cast<std::size_t>(n_test));
    for (long r = 0; r < n_test; ++r) {
        const TrajectoryDataset w_set = disturbance_model.sample(
            N_bar, 1, derive_seed(seed, 2 * static_cast<std::uint64_t>(r)),
            Role::disturbance);
        const Eigen::MatrixXd& w = w_set.trajectory(0);

        ControllerState state = controller.initial_state(x0);
        Eigen::VectorXd x = x0;
        double cost_rh = 0.0;
        for (long t = 0; t < N_bar; ++t) {
            auto [u, diag] = controller.control_step(state, x);
            (void)diag;
            cost_rh += cfg.cost.stage(x, u);
            x = sys.step_plant(x, u, w.col(t));
        }

        Eigen::VectorXd x_ol = x0;
        double cost_ol = 0.0;
        for (long t = 0; t < N_bar; ++t) {
            const Eigen::VectorXd u =
                sys.K() * (x_ol - plan.z.col(t)) + plan.v.col(t);
            cost_ol += cfg.cost.stage(x_ol, u);
            x_ol = sys.step_plant(x_ol, u, w.col(t));
        }

        rh[static_cast<std::size_t>(r)] = cost_rh;
        ol[static_cast<std::size_t>(r)] = cost_ol;
    }

    PolicyComparison out;
    out.n_test = n_test;
    const double n = static_cast<double>(n_test);
    for (long r = 0; r < n_test; ++r) {
        out.rh_mean_cost += rh[static_cast<std::size_t>(r)];
        out.ol_mean_cost += ol[static_cast<std::size_t>(r)];
    }
    out.rh_mean_cost /= n;
    out.ol_mean_cost /= n;
    out.mean_difference = out.ol_mean_cost - out.rh_mean_cost;
    double var = 0.0;
    for (long r = 0; r < n_test; ++r) {
        const double d = ol[static_cast<std::size_t>(r)] -
                         rh[static_cast<std::size_t>(r)] - out.mean_difference;
        var += d * d;
    }
    out.paired_se = n_test > 1 ? std::sqrt(var / (n - 1.0)) / std::sqrt(n) : 0.0;
    out.reduction_percent =
        out.ol_mean_cost != 0.0 ? 100.0 * out.mean_difference / out.ol_mean_cost
                                : 0.0;
    return out;
}

CoverageTightness coverage_tightness_experiment(
    const LtiSystem& sys, const Eigen::MatrixXd& sigma_w, long m_fit,
    long m_cal, long n_fresh, long horizon, double level, bool zero_mean,
    long repetitions, std::uint64_t seed) {
    if (repetitions < 2)
        throw std::invalid_argument(
            "coverage tightness: need at least two repetitions");
    if (m_cal < 1 || n_fresh < 1 || horizon < 1)
        throw std::invalid_argument(
            "coverage tightness: m_cal, n_fresh, horizon must be positive");
    if (!(level > 0.0 && level < 1.0))
        throw std::invalid_argument(
            "coverage tightness: level must lie in (0, 1)");

    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(sys.nx());
    CoverageTightness out;
    out.repetitions = repetitions;
    out.m_cal = m_cal;
    out.n_fresh = n_fresh;
    out.level = level;
    out.per_repetition.reserve(static_cast<std::size_t>(repetitions));

    for (long r = 0; r < repetitions; ++r) {
        const std::uint64_t pool_seed =
            derive_seed(seed, 2 * static_cast<std::uint64_t>(r));
        const std::uint64_t fresh_seed =
            derive_seed(seed, 2 * static_cast<std::uint64_t>(r) + 1);
        const TrajectoryDataset pool =
            generate_gaussian(sys.nx(), horizon, m_fit + m_cal, sigma_w, zero,
                              pool_seed, Role::disturbance);
        const ErrorTrajectorySet errors = propagate_state_errors(sys, pool);
        const ConfidenceRegion region =
            calibrate(errors, SplitSpec{m_fit, m_cal, pool_seed},
                      ScoreKind::mahalanobis, level, std::nullopt, zero_mean);

        const TrajectoryDataset fresh = generate_gaussian(
            sys.nx(), horizon, n_fresh, sigma_w, zero, fresh_seed,
            Role::disturbance);
        const ErrorTrajectorySet fresh_errors =
            propagate_state_errors(sys, fresh);
        long covered = 0;
        for (Eigen::Index k = 0; k < n_fresh; ++k)
            covered += region.contains(fresh_errors.state_errors.trajectory(k));
        out.per_repetition.push_back(static_cast<double>(covered) /
                                     static_cast<double>(n_fresh));
    }

    double mean = 0.0;
    for (double c : out.per_repetition) mean += c;
    mean /= static_cast<double>(repetitions);
    double var = 0.0;
    for (double c : out.per_repetition) var += (c - mean) * (c - mean);
    var /= static_cast<double>(repetitions - 1);
    out.mean_coverage = mean;
    out.std_error = std::sqrt(var / static_cast<double>(repetitions));
    out.lower = level - 3.0 * out.std_error;
    out.upper = level + 1.0 / (static_cast<double>(m_cal) + 1.0) +
                3.0 * out.std_error;
    out.within = mean >= out.lower && mean <= out.upper;
    return out;
}

namespace {

nlohmann::json evaluation_json(const EvaluationReport& r) {
    nlohmann::json j;
    j["n_test"] = r.n_test;
    j["coverage"] = r.coverage;
    j["state_rate"] = r.state_rate;
    j["input_rate"] = r.input_rate;
    j["joint_rate"] = r.joint_rate;
    j["implication_rate"] = r.implication_rate;
    j["mean_cost"] = r.mean_cost;
    j["std_cost"] = r.std_cost;
    j["infeasible_after_t0"] = r.infeasible_after_t0;
    j["fallback_steps"] = r.fallback_steps;
    j["candidate_failures"] = r.candidate_failures;
    j["worst_candidate_violation"] = r.worst_candidate_violation;
    j["qhat"] = r.qhat;
    j["level"] = r.level;
    j["mode"] = r.mode;
    j["seed"] = r.seed;
    return j;
}

nlohmann::json regions_json(const RegionComparison& c) {
    nlohmann::json j;
    j["horizon"] = c.horizon;
    j["dim"] = c.dim;
    j["kinds"] = c.kinds;
    for (const auto& [kind, v] : c.volume_proxy)
        j["volume_proxy"][kind] = v;
    for (const auto& [kind, v] : c.radius_scale)
        j["radius_scale"][kind] = v;
    for (const auto& [kind, v] : c.volume_ratio)
        j["volume_ratio"][kind] = v;
    for (const auto& [kind, v] : c.radius_ratio)
        j["radius_ratio"][kind] = v;
    for (const auto& [kind, v] : c.containment)
        j["containment"][kind] = v;
    return j;
}

nlohmann::json policies_json(const PolicyComparison& p) {
    nlohmann::json j;
    j["n_test"] = p.n_test;
    j["rh_mean_cost"] = p.rh_mean_cost;
    j["ol_mean_cost"] = p.ol_mean_cost;
    j["mean_difference"] = p.mean_difference;
    j["paired_se"] = p.paired_se;
    j["reduction_percent"] = p.reduction_percent;
    return j;
}

nlohmann::json tightness_json(const CoverageTightness& t) {
    nlohmann::json j;
    j["repetitions"] = t.repetitions;
    j["m_cal"] = t.m_cal;
    j["n_fresh"] = t.n_fresh;
    j["level"] = t.level;
    j["mean_coverage"] = t.mean_coverage;
    j["std_error"] = t.std_error;
    j["lower"] = t.lower;
    j["upper"] = t.upper;
    j["within"] = t.within;
    j["per_repetition"] = t.per_repetition;
    return j;
}

void summarize(std::ostringstream& os, const char* label,
               const std::vector<double>& v) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (double x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "  %-24s min %.6f  median %.6f  max %.6f\n",
                  label, lo, median_of(v), hi);
    os << buf;
}

}  // namespace

std::string render_json(const ReportBundle& bundle) {
    nlohmann::json j;
    if (bundle.evaluation) j["evaluation"] = evaluation_json(*bundle.evaluation);
    if (bundle.regions) j["regions"] = regions_json(*bundle.regions);
    if (bundle.policies) j["policies"] = policies_json(*bundle.policies);
    if (bundle.tightness) j["tightness"] = tightness_json(*bundle.tightness);
    return j.dump(2) + "\n";
}

std::string render_text(const ReportBundle& bundle) {
    std::ostringstream os;
    char buf[640];
    if (bundle.evaluation) {
    const EvaluationReport& r = *bundle.evaluation;
    os << "closed-loop evaluation (" << r.mode << ", seed " << r.seed << ")\n";
    std::snprintf(buf, sizeof(buf),
                  "  rollouts                 %ld\n"
                  "  score coverage           %.6f   (qhat %.6f at level %.3f)\n"
                  "  state satisfaction       %.6f\n"
                  "  input satisfaction       %.6f\n"
                  "  joint satisfaction       %.6f\n"
                  "  implication rate         %.6f\n"
                  "  mean cost                %.6f   (std %.6f)\n",
                  r.n_test, r.coverage, r.qhat, r.level, r.state_rate,
                  r.input_rate, r.joint_rate, r.implication_rate, r.mean_cost,
                  r.std_cost);
    os << buf;
    std::snprintf(buf, sizeof(buf),
                  "  infeasible after t=0     %ld\n"
                  "  fallback steps           %ld\n"
                  "  candidate failures       %ld   (worst violation %.3e)\n",
                  r.infeasible_after_t0, r.fallback_steps, r.candidate_failures,
                  r.worst_candidate_violation);
    os << buf;
    }

    if (bundle.regions) {
        const RegionComparison& c = *bundle.regions;
        os << "\nregion comparison (reference: " << c.kinds.front()
           << ", horizon " << c.horizon << ")\n";
        for (const std::string& kind : c.kinds)
            summarize(os, (kind + " radius scale").c_str(),
                      c.radius_scale.at(kind));
        for (const auto& [kind, v] : c.radius_ratio)
            summarize(os, ("radius ratio vs " + kind).c_str(), v);
        for (const auto& [kind, v] : c.containment) {
            std::snprintf(buf, sizeof(buf), "  %-24s %.6f\n",
                          ("containment in " + kind).c_str(), v);
            os << buf;
        }
    }

    if (bundle.policies) {
        const PolicyComparison& p = *bundle.policies;
        os << "\npolicy comparison (paired, " << p.n_test << " rollouts)\n";
        std::snprintf(buf, sizeof(buf),
                      "  receding horizon cost    %.6f\n"
                      "  open-loop tube cost      %.6f\n"
                      "  mean difference          %.6f   (se %.6f)\n"
                      "  cost reduction           %.3f %%\n",
                      p.rh_mean_cost, p.ol_mean_cost, p.mean_difference,
                      p.paired_se, p.reduction_percent);
        os << buf;
    }

    if (bundle.tightness) {
        const CoverageTightness& t = *bundle.tightness;
        os << "\ncoverage tightness (" << t.repetitions << " repetitions, "
           << t.n_fresh << " fresh trajectories each)\n";
        std::snprintf(buf, sizeof(buf),
                      "  mean coverage            %.6f   (se %.6f)\n"
                      "  acceptance band          [%.6f, %.6f]\n"
                      "  within band              %s\n",
                      t.mean_coverage, t.std_error, t.lower, t.upper,
                      t.within ? "yes" : "no");
        os << buf;
    }
    return os.str();
}

void write_rollout_csv(const ClosedLoopRecord& record,
                       const std::string& path) {
    std::ofstream out = open_for_write(path);
    const Eigen::Index nx = record.x.rows();
    const Eigen::Index nu = record.u.rows();
    const long N_bar = static_cast<long>(record.u.cols());
    const bool output = record.ehat.size() > 0;

    out << "t";
    for (Eigen::Index i = 0; i < nx; ++i) out << ",x_" << (i + 1);
    for (Eigen::Index i = 0; i < nu; ++i) out << ",u_" << (i + 1);
    for (Eigen::Index i = 0; i < nx; ++i) out << ",z_" << (i + 1);
    for (Eigen::Index i = 0; i < nx; ++i) out << ",e_" << (i + 1);
    if (output) {
        for (Eigen::Index i = 0; i < nx; ++i) out << ",ehat_" << (i + 1);
        for (Eigen::Index i = 0; i < nx; ++i) out << ",ebar_" << (i + 1);
    }
    out << ",score\n";

    for (long t = 0; t <= N_bar; ++t) {
        out << t;
        for (Eigen::Index i = 0; i < nx; ++i)
            out << ',' << fmt17(record.x(i, t));
        for (Eigen::Index i = 0; i < nu; ++i) {
            out << ',';
            if (t < N_bar) out << fmt17(record.u(i, t));
        }
        for (Eigen::Index i = 0; i < nx; ++i)
            out << ',' << fmt17(record.z(i, t));
        for (Eigen::Index i = 0; i < nx; ++i) {
            out << ',';
            if (t >= 1) out << fmt17(record.e(i, t - 1));
        }
        if (output) {
            for (Eigen::Index i = 0; i < nx; ++i) {
                out << ',';
                if (t >= 1) out << fmt17(record.ehat(i, t - 1));
            }
            for (Eigen::Index i = 0; i < nx; ++i) {
                out << ',';
                if (t >= 1) out << fmt17(record.ebar(i, t - 1));
            }
        }
        out << ',';
        if (t >= 1 && t <= record.scores.size()) out << fmt17(record.scores(t - 1));
        out << '\n';
    }
    if (!out)
        throw DataError(DataError::Kind::io, "write failed for '" + path + "'");
}

void write_diagnostics_csv(const std::vector<StepDiagnostics>& steps,
                           const std::string& path) {
    std::ofstream out = open_for_write(path);
    out << "t,status,iterations,polished,objective,candidate_checked,"
           "candidate_feasible,candidate_violation,fallback_used,"
           "min_state_slack,min_input_slack,terminal_residual\n";
    for (const StepDiagnostics& d : steps) {
        out << d.t << ',' << qp_status_name(d.status) << ',' << d.iterations
            << ',' << (d.polished ? 1 : 0) << ',' << fmt17(d.objective) << ','
            << (d.candidate_checked ? 1 : 0) << ','
            << (d.candidate_feasible ? 1 : 0) << ','
            << fmt17(d.candidate_violation) << ',' << (d.fallback_used ? 1 : 0)
            << ',' << fmt17(d.min_state_slack) << ','
            << fmt17(d.min_input_slack) << ',' << fmt17(d.terminal_residual)
            << '\n';
    }
    if (!out)
        throw DataError(DataError::Kind::io, "write failed for '" + path + "'");
}

void write_ellipse_polylines(const BaselineRegion& region,
                             const std::string& path, int points) {
    if (points < 3)
        throw std::invalid_argument("ellipse polylines: need >= 3 points");
    std::ofstream out = open_for_write(path);
    out << "step,point,x_1,x_2\n";
    const double two_pi = 6.283185307179586476925286766559;
    for (std::size_t i = 0; i < region.per_step.size(); ++i) {
        const Ellipsoid& ell = region.per_step[i];
        if (ell.dim() != 2)
            throw std::invalid_argument(
                "ellipse polylines are defined for dimension 2 only");
        Eigen::LLT<Eigen::MatrixXd> llt(ell.shape);
        if (llt.info() != Eigen::Success)
            throw std::runtime_error(
                "ellipse polylines: shape is not positive definite");
        const Eigen::MatrixXd L = llt.matrixL();
        for (int j = 0; j <= points; ++j) {
            const double angle = two_pi * j / points;
            Eigen::Vector2d dir(std::cos(angle), std::sin(angle));
            const Eigen::VectorXd p = ell.center + ell.radius * (L * dir);
            out << (i + 1) << ',' << j << ',' << fmt17(p(0)) << ','
                << fmt17(p(1)) << '\n';
        }
    }
    if (!out)
        throw DataError(DataError::Kind::io, "write failed for '" + path + "'");
}

void write_score_series(const ClosedLoopRecord& record, double qhat,
                        const std::string& path) {
    std::ofstream out = open_for_write(path);
    out << "t,score,qhat,exceeds\n";
    for (Eigen::Index t = 0; t < record.scores.size(); ++t)
        out << (t + 1) << ',' << fmt17(record.scores(t)) << ',' << fmt17(qhat)
            << ',' << (record.scores(t) > qhat ? 1 : 0) << '\n';
    if (!out)
        throw DataError(DataError::Kind::io, "write failed for '" + path + "'");
}

}  // namespace cpsmpc
