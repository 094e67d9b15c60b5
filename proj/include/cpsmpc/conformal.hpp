#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "cpsmpc/error_propagation.hpp"
#include "cpsmpc/geometry.hpp"
#include "cpsmpc/trajectory_data.hpp"

namespace cpsmpc {

// Per-timestep first and second moments of an error trajectory set.
// Index i of each vector corresponds to time step i+1 (the stored-column
// convention of TrajectoryDataset).
struct Moments {
    std::vector<Eigen::VectorXd> mean;
    std::vector<Eigen::MatrixXd> covariance;  // symmetrized + regularized, SPD
    std::vector<Eigen::LLT<Eigen::MatrixXd>> factor;  // Cholesky of covariance

    Eigen::Index horizon() const {
        return static_cast<Eigen::Index>(mean.size());
    }
    Eigen::Index dim() const { return mean.empty() ? 0 : mean.front().size(); }
};

// Sample mean / unbiased sample covariance per time step, with covariance
// regularization delta*I, delta = max(1e-8 trace/n, 1e-12). zero_mean pins
// the centers at the origin (covariance still about those centers).
Moments fit_moments(const TrajectoryDataset& fit, bool zero_mean = false);

enum class ScoreKind { max_norm, weighted_max_norm, mahalanobis };

std::string score_kind_name(ScoreKind kind);
ScoreKind score_kind_from_name(const std::string& name);

// Nonconformity score s(E) = max_t (per-step value). All kinds are convex
// in the stacked trajectory (max of norms of affine maps).
struct ScoreFunction {
    ScoreKind kind = ScoreKind::max_norm;
    Eigen::Index horizon = 0;
    Eigen::Index dim = 0;
    Eigen::VectorXd weights;         // weighted_max_norm: alpha_t > 0, size T
    std::optional<Moments> moments;  // mahalanobis

    static ScoreFunction max_norm(Eigen::Index dim, Eigen::Index horizon);
    static ScoreFunction weighted_max_norm(Eigen::Index dim,
                                           Eigen::VectorXd weights);
    static ScoreFunction mahalanobis(Moments moments);
};

// per-step score values for the first `steps` stored columns of E; entry i
// corresponds to time step i+1. steps = -1 means sf.horizon; closed-loop
// evaluation scores task-length prefixes of longer-horizon score functions.
Eigen::VectorXd score_steps(const ScoreFunction& sf, const Eigen::MatrixXd& E,
                            Eigen::Index steps = -1);

// max over the per-step values
double score_trajectory(const ScoreFunction& sf, const Eigen::MatrixXd& E);

// k-th smallest with k = ceil((M+1) p); k > M means the finite-sample region
// would be unbounded -> CalibrationError carrying the minimal M.
double conformal_quantile(std::vector<double> scores, double level);

// theta_tilde = theta - sqrt(-ln(eps) / (2 M)); CalibrationError with the
// minimal M = ceil(-ln(eps) / (2 theta^2)) when the result is nonpositive.
double pac_tighten(double theta, double epsilon, long M);

// per-step miscoverage (1 - p) / horizon for union-bound baseline regions
double union_bound_levels(double level, long horizon);

struct PacSpec {
    double epsilon = 0.0;
    double tightened_theta = 0.0;  // quantile evaluated at 1 - this
};

// Joint-in-time confidence region {E : s(E) <= qhat} with per-timestep
// ellipsoidal projections. Immutable after calibration.
struct ConfidenceRegion {
    ScoreFunction score;
    double qhat = 0.0;
    double level = 0.0;  // nominal p
    long M_fit = 0;
    long M_cal = 0;
    std::optional<PacSpec> pac;

    bool contains(const Eigen::MatrixXd& E, double tol = 0.0) const {
        return score_trajectory(score, E) <= qhat + tol;
    }
};

// Split, fit moments on the fit half, score the held-out half, take the
// conformal quantile (at 1 - theta_tilde when pac_epsilon is given). Kinds
// without fitted moments may use n_fit = 0; the full set then calibrates.
ConfidenceRegion calibrate(const TrajectoryDataset& errors,
                           const SplitSpec& split, ScoreKind kind,
                           double level,
                           std::optional<double> pac_epsilon = std::nullopt,
                           bool zero_mean = false,
                           const Eigen::VectorXd& weights = Eigen::VectorXd());

ConfidenceRegion calibrate(const ErrorTrajectorySet& errors,
                           const SplitSpec& split, ScoreKind kind,
                           double level,
                           std::optional<double> pac_epsilon = std::nullopt,
                           bool zero_mean = false,
                           const Eigen::VectorXd& weights = Eigen::VectorXd());

// Marginal region at time step t (1-based): mahalanobis -> (mu_t, Sigma_t,
// qhat); max_norm -> ball; weighted -> ball of radius qhat / alpha_t.
Ellipsoid project(const ConfidenceRegion& region, Eigen::Index t);

// structured text round-trip (17 significant digits)
void save_region(const ConfidenceRegion& region, const std::string& path);
ConfidenceRegion load_region(const std::string& path);

}  // namespace cpsmpc
