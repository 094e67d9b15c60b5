#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>

#include "cpsmpc/conformal.hpp"
#include "cpsmpc/error_propagation.hpp"
#include "cpsmpc/evaluation.hpp"
#include "cpsmpc/geometry.hpp"
#include "cpsmpc/lti_system.hpp"
#include "cpsmpc/smpc.hpp"
#include "cpsmpc/trajectory_data.hpp"

namespace cpsmpc {

struct TightnessSpec {
    long repetitions = 50;
    long n_fresh = 1000;
};

// One experiment, fully described by a JSON file. Every load-time validation
// failure raises ConfigError naming the offending field.
struct RunConfig {
    // plant, feedback gains, observer
    Eigen::MatrixXd A, B, C, D, K, L;
    // stage cost x'Qx + u'Ru, terminal cost x'P_f x
    Eigen::MatrixXd Q, R, P_f;
    // constraint sets (engaged after a successful load)
    std::optional<HalfspacePolytope> X, U;
    std::string terminal_kind = "origin";
    std::optional<HalfspacePolytope> terminal_set;
    Eigen::MatrixXd K_f;  // terminal law for the polytope kind
    // horizons and probability budget
    long N = 0;
    long N_bar = 0;
    long S = 1;
    double theta = 0.1;
    // data generation / loading
    DisturbanceModel w_model;
    std::optional<DisturbanceModel> eta_model;
    std::optional<std::string> calibration_w_path, calibration_eta_path;
    std::optional<std::string> scenario_w_path, scenario_eta_path;
    long m_fit = 0;
    long m_cal = 0;
    std::uint64_t seed = 0;
    // calibration choices
    ScoreKind score = ScoreKind::mahalanobis;
    bool zero_mean = false;
    std::optional<double> pac_epsilon;
    Eigen::VectorXd weights;
    // evaluation sizes
    long n_test = 1000;
    long policy_rollouts = 200;
    long region_samples = 64;
    TightnessSpec tightness;
    // run setup
    Eigen::VectorXd x0;
    FeedbackMode mode = FeedbackMode::state_feedback;
    std::string output_dir = "out";

    double level() const { return 1.0 - theta; }
    long region_horizon() const { return N_bar + N; }
};

RunConfig load_run_config(const std::string& path);

// Deterministic, non-overlapping child seeds for every random stream a run
// touches; fixed stream ids keep reports byte-reproducible.
struct SeedPlan {
    std::uint64_t calibration_w = 0;
    std::uint64_t calibration_eta = 0;
    std::uint64_t scenario_w = 0;
    std::uint64_t scenario_eta = 0;
    std::uint64_t split_shuffle = 0;
    std::uint64_t evaluation = 0;
    std::uint64_t regions = 0;
    std::uint64_t policies = 0;
    std::uint64_t tightness = 0;
};

SeedPlan seed_plan(std::uint64_t master);

LtiSystem build_system(const RunConfig& rc);
CostSpec build_cost(const RunConfig& rc);
TerminalSpec build_terminal(const RunConfig& rc);

// calibration pool (generated from the model, or loaded from the override
// path) propagated through the error dynamics
ErrorTrajectorySet calibration_errors(const RunConfig& rc, const LtiSystem& sys);
ConfidenceRegion calibrate_region(const RunConfig& rc,
                                  const ErrorTrajectorySet& errors);

// fit-half moments for the mean-variance baseline; nullopt when the fit
// split is too small to estimate a covariance
std::optional<Moments> baseline_moments(const RunConfig& rc,
                                        const ErrorTrajectorySet& errors);

TrajectoryDataset scenario_disturbances(const RunConfig& rc);
std::optional<TrajectoryDataset> scenario_noise(const RunConfig& rc);

// full pipeline: tightening, horizon intersections, terminal validation
SmpcConfig assemble_smpc(const RunConfig& rc, ConfidenceRegion region);

}  // namespace cpsmpc
