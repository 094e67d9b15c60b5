#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cpsmpc/conformal.hpp"
#include "cpsmpc/geometry.hpp"
#include "cpsmpc/lti_system.hpp"
#include "cpsmpc/smpc.hpp"
#include "cpsmpc/trajectory_data.hpp"

namespace cpsmpc {

// Fresh-realization generator for Monte Carlo runs (evaluation owns the
// ground truth the controller never sees).
struct DisturbanceModel {
    enum class Kind { gaussian, uniform };
    Kind kind = Kind::gaussian;
    Eigen::MatrixXd covariance;   // gaussian
    Eigen::VectorXd half_widths;  // uniform

    Eigen::Index dim() const {
        return kind == Kind::gaussian ? covariance.rows() : half_widths.size();
    }
    TrajectoryDataset sample(Eigen::Index length, Eigen::Index count,
                             std::uint64_t seed, Role role) const;
};

// One closed-loop rollout. Column conventions: x and z have N_bar+1 columns
// (t = 0..N_bar); u has N_bar (t = 0..N_bar-1); error matrices have N_bar
// columns storing t = 1..N_bar (column i <-> time i+1, matching the
// calibration datasets).
struct ClosedLoopRecord {
    Eigen::MatrixXd x;
    Eigen::MatrixXd u;
    Eigen::MatrixXd z;
    Eigen::MatrixXd e;               // x - z
    Eigen::MatrixXd ehat;            // x - xhat (output feedback)
    Eigen::MatrixXd ebar;            // xhat - z (output feedback)
    Eigen::MatrixXd w;               // realized disturbances, columns t = 0..N_bar-1
    Eigen::MatrixXd eta;             // realized measurement noise (output feedback)
    Eigen::VectorXd scores;          // per-step score of e(t), size N_bar
    bool score_ok = false;           // max_t score(t) <= qhat
    bool state_ok = false;           // x(t) in X for t = 1..N_bar
    bool input_ok = false;           // u(t) in U for t = 0..N_bar-1
    bool implication_ok = false;     // score_ok => (state_ok && input_ok)
    double total_cost = 0.0;         // sum of stage costs over the task
    std::vector<StepDiagnostics> steps;
};

struct EvaluationReport {
    long n_test = 0;
    double coverage = 0.0;          // fraction with score_ok
    double state_rate = 0.0;
    double input_rate = 0.0;
    double joint_rate = 0.0;        // both state_ok and input_ok
    double implication_rate = 0.0;  // should be 1.0
    double mean_cost = 0.0;
    double std_cost = 0.0;
    long infeasible_after_t0 = 0;   // must stay 0 (recursive feasibility)
    long fallback_steps = 0;
    long candidate_failures = 0;    // steps whose shifted candidate violated
    double worst_candidate_violation = 0.0;
    double qhat = 0.0;
    double level = 0.0;
    std::string mode;
    std::uint64_t seed = 0;
};

struct MonteCarloResult {
    EvaluationReport report;
    std::vector<ClosedLoopRecord> records;
};

// n_test independent rollouts with fresh realizations drawn from the models
// (noise_model required for output feedback). Deterministic given seed.
MonteCarloResult run_monte_carlo(const Controller& controller,
                                 const Eigen::VectorXd& x0,
                                 const DisturbanceModel& disturbance_model,
                                 const std::optional<DisturbanceModel>& noise_model,
                                 long n_test, std::uint64_t seed,
                                 bool keep_records = true);

// --- baseline regions -------------------------------------------------------

// Per-timestep ellipsoidal region family; index i corresponds to time i+1.
struct BaselineRegion {
    std::string kind;
    std::vector<Ellipsoid> per_step;
};

// conformal projections restricted to the first `horizon` steps
BaselineRegion conformal_marginals(const ConfidenceRegion& region, long horizon);

// mean-variance region: per-t shape Sigma_hat(t), squared radius
// p_tilde = n_x * horizon_total / theta (Chebyshev + union bound)
BaselineRegion chebyshev_region(const Moments& moments, double theta,
                                long horizon);

// chi-squared quantile: least x with P(chi2_k <= x) = p
double chi2_quantile(int dof, double p);

// Sigma(t+1) = A_K Sigma(t) A_K' + Sigma_w from Sigma(0) = 0; index i of the
// result holds Sigma(i+1)
std::vector<Eigen::MatrixXd> lyapunov_covariances(const LtiSystem& sys,
                                                  const Eigen::MatrixXd& sigma_w,
                                                  long horizon);

// ground-truth Gaussian region: shapes from the Lyapunov recursion, squared
// radius chi2_quantile(n_x, level)
BaselineRegion gaussian_truth_region(const Eigen::MatrixXd& sigma_w,
                                     const LtiSystem& sys, double level,
                                     long horizon);

struct RegionComparison {
    long horizon = 0;
    int dim = 0;
    std::vector<std::string> kinds;  // row order; kinds[0] is the reference
    // per-kind, per-t: volume proxy radius^n * sqrt(det shape), and its
    // n-th root (a radius scale)
    std::map<std::string, std::vector<double>> volume_proxy;
    std::map<std::string, std::vector<double>> radius_scale;
    // reference / baseline per-t ratios, keyed by baseline kind
    std::map<std::string, std::vector<double>> volume_ratio;
    std::map<std::string, std::vector<double>> radius_ratio;
    // fraction of sampled reference-boundary points inside each baseline
    std::map<std::string, double> containment;
};

// regions[0] is the reference (conformal); all must share the horizon
RegionComparison compare_regions(const std::vector<BaselineRegion>& regions,
                                 std::uint64_t seed,
                                 long samples_per_step = 64);

// --- policy comparison ------------------------------------------------------

struct PolicyComparison {
    long n_test = 0;
    double rh_mean_cost = 0.0;        // receding horizon
    double ol_mean_cost = 0.0;        // open-loop tube policy
    double mean_difference = 0.0;     // ol - rh, paired
    double paired_se = 0.0;           // standard error of the mean difference
    double reduction_percent = 0.0;   // 100 (ol - rh) / ol
};

// same fresh realizations fed to both policies (state feedback only)
PolicyComparison compare_policies(const SmpcConfig& cfg,
                                  const TrajectoryDataset& scenario_w,
                                  const Eigen::VectorXd& x0,
                                  const DisturbanceModel& disturbance_model,
                                  long n_test, std::uint64_t seed);

// --- coverage tightness (the order-statistic sandwich) -----------------------

struct CoverageTightness {
    long repetitions = 0;
    long m_cal = 0;
    long n_fresh = 0;
    double level = 0.0;
    double mean_coverage = 0.0;
    double std_error = 0.0;          // sigma-bar of the repetition mean
    double lower = 0.0;              // p - 3 sigma-bar
    double upper = 0.0;              // p + 1/(M+1) + 3 sigma-bar
    bool within = false;
    std::vector<double> per_repetition;
};

// re-draw calibration and test sets `repetitions` times; each repetition
// propagates fresh disturbances, calibrates at `level`, and measures joint
// score coverage on n_fresh fresh trajectories
CoverageTightness coverage_tightness_experiment(
    const LtiSystem& sys, const Eigen::MatrixXd& sigma_w, long m_fit,
    long m_cal, long n_fresh, long horizon, double level, bool zero_mean,
    long repetitions, std::uint64_t seed);

// --- report rendering ---------------------------------------------------------

struct ReportBundle {
    std::optional<EvaluationReport> evaluation;
    std::optional<RegionComparison> regions;
    std::optional<PolicyComparison> policies;
    std::optional<CoverageTightness> tightness;
};

std::string render_json(const ReportBundle& bundle);
std::string render_text(const ReportBundle& bundle);

// CSV / plot-data writers (deterministic, 17 significant digits)
void write_rollout_csv(const ClosedLoopRecord& record, const std::string& path);
void write_diagnostics_csv(const std::vector<StepDiagnostics>& steps,
                           const std::string& path);
// 64-point boundary polylines per time step; dim-2 regions only
void write_ellipse_polylines(const BaselineRegion& region,
                             const std::string& path, int points = 64);
void write_score_series(const ClosedLoopRecord& record, double qhat,
                        const std::string& path);

}  // namespace cpsmpc
