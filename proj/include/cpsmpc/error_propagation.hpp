#pragma once

#include <optional>

#include "cpsmpc/lti_system.hpp"
#include "cpsmpc/trajectory_data.hpp"

namespace cpsmpc {

// Error trajectories obtained by propagating disturbance (and noise) samples
// through the autonomous error dynamics. Storage convention: column i of a
// trajectory holds the error at time t = i + 1 (propagation starts from
// e(0) = 0, so e(1..T) are the meaningful values).
//
// State feedback:   e(t+1) = A_K e(t) + w(t)
// Output feedback:  ehat(t+1) = A_L ehat(t) + w(t) - L eta(t)
//                   ebar(t+1) = A_K ebar(t) + L (C ehat(t) + eta(t))
// For output feedback, state_errors holds the combined error ehat + ebar —
// the quantity the confidence region is calibrated on (x - z = ehat + ebar) —
// stored explicitly rather than recomputed.
struct ErrorTrajectorySet {
    TrajectoryDataset state_errors;
    std::optional<TrajectoryDataset> estimation_errors;  // ehat, output feedback
    std::optional<TrajectoryDataset> nominal_errors;     // ebar, output feedback
    Eigen::MatrixXd gain_K;
    Eigen::MatrixXd gain_L;  // zero rows/cols when unused
    Eigen::Index horizon = 0;

    Eigen::Index count() const { return state_errors.count(); }
    bool output_feedback() const { return estimation_errors.has_value(); }
};

// e^(k)(1..T) from disturbance samples w^(k)(0..T-1); requires Schur A_K.
ErrorTrajectorySet propagate_state_errors(const LtiSystem& sys,
                                          const TrajectoryDataset& disturbances);

// coupled (ehat, ebar) recursions from aligned disturbance and measurement
// noise samples; requires Schur A_K and A_L
ErrorTrajectorySet propagate_output_errors(const LtiSystem& sys,
                                           const TrajectoryDataset& disturbances,
                                           const TrajectoryDataset& noises);

}  // namespace cpsmpc
