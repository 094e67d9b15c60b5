#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cpsmpc/conformal.hpp"
#include "cpsmpc/geometry.hpp"
#include "cpsmpc/lti_system.hpp"
#include "cpsmpc/qp.hpp"
#include "cpsmpc/trajectory_data.hpp"

namespace cpsmpc {

enum class FeedbackMode { state_feedback, output_feedback };

std::string mode_name(FeedbackMode mode);
FeedbackMode mode_from_name(const std::string& name);

// Everything the receding-horizon controller needs, immutable once built.
// Construction tightens X and U against the per-step projections of the
// confidence region for t = 1..N_bar+N (index t-1 in Z/V; Z_0 = X and
// V_0 = U since the error at the current step is known exactly), forms the
// horizon intersections Z_inf / V_inf, and validates the terminal
// ingredients (Z_f inside Z_inf, positive invariance, law admissible).
struct SmpcConfig {
    LtiSystem system;
    CostSpec cost;
    ConfidenceRegion region;
    HalfspacePolytope X;
    HalfspacePolytope U;
    std::vector<HalfspacePolytope> Z;  // tightened state sets, index t-1
    std::vector<HalfspacePolytope> V;  // tightened input sets, index t-1
    HalfspacePolytope Z_inf;
    HalfspacePolytope V_inf;
    TerminalSpec terminal;
    FeedbackMode mode = FeedbackMode::state_feedback;
    long N = 0;      // MPC horizon
    long N_bar = 0;  // closed-loop task horizon
    long S = 1;      // scenario count for the cost average
    double theta = 0.0;  // joint miscoverage budget 1 - p

    SmpcConfig(LtiSystem system, CostSpec cost, ConfidenceRegion region,
               HalfspacePolytope X, HalfspacePolytope U, TerminalSpec terminal,
               FeedbackMode mode, long N, long N_bar, long S, double theta);

    // Z_{t} with the t = 0 convention, valid for 0 <= t <= N_bar + N
    const HalfspacePolytope& state_set(long t) const {
        return t == 0 ? X : Z[static_cast<std::size_t>(t - 1)];
    }
    const HalfspacePolytope& input_set(long t) const {
        return t == 0 ? U : V[static_cast<std::size_t>(t - 1)];
    }
};

// Mutable per-rollout controller state. Scenario error states evolve by the
// same recursions as the true error, each driven by its own sample
// trajectory; they persist across closed-loop time.
struct ControllerState {
    long t = 0;
    Eigen::VectorXd z;            // nominal state z(t)
    Eigen::VectorXd xhat;         // observer estimate (output feedback)
    Eigen::MatrixXd plan_z;       // previous optimal z*_0..z*_N (nx x N+1)
    Eigen::MatrixXd plan_v;       // previous optimal v*_0..v*_{N-1} (nu x N)
    bool has_plan = false;
    std::vector<Eigen::VectorXd> scenario_e;     // state feedback e^j(t)
    std::vector<Eigen::VectorXd> scenario_ehat;  // output feedback ehat^j(t)
    std::vector<Eigen::VectorXd> scenario_ebar;  // output feedback ebar^j(t)
};

struct StepDiagnostics {
    long t = 0;
    QpStatus status = QpStatus::optimal;
    int iterations = 0;
    bool polished = false;
    double objective = 0.0;  // scenario-averaged cost, constant term included
    // shifted-candidate feasibility witness (t >= 1); negative means slack
    double candidate_violation = 0.0;
    bool candidate_checked = false;
    bool candidate_feasible = false;
    bool fallback_used = false;  // infeasible report at t > 0, candidate applied
    double min_state_slack = 0.0;     // over all z_i membership rows
    double min_input_slack = 0.0;     // over all v_i membership rows
    double terminal_residual = 0.0;   // terminal equality/membership residual
};

// One receding-horizon solve + state advance. The QP structure (H and both
// constraint matrices) is fixed across time; only g, b_eq, b_in move, so one
// factorization serves the whole rollout (and sequential rollouts).
class Controller {
public:
    // scenario_noise is required for output feedback, ignored otherwise;
    // scenario datasets need >= S trajectories of length >= N_bar + N
    Controller(const SmpcConfig& cfg, TrajectoryDataset scenario_disturbances,
               std::optional<TrajectoryDataset> scenario_noise = std::nullopt);

    // z(0) = x(0) (resp. = xhat(0) = x(0)); scenario errors start at zero
    ControllerState initial_state(const Eigen::VectorXd& x0) const;

    // measurement is x(t) for state feedback, y(t) for output feedback
    std::pair<Eigen::VectorXd, StepDiagnostics> control_step(
        ControllerState& state, const Eigen::VectorXd& measurement) const;

    const SmpcConfig& config() const { return cfg_; }
    const QpSolver& solver() const { return solver_; }

private:
    struct StepProblem {
        Eigen::VectorXd g;
        Eigen::VectorXd b_eq;
        Eigen::VectorXd b_in;
        double constant = 0.0;  // scenario cost term independent of xi
    };

    StepProblem assemble(const ControllerState& state,
                         const Eigen::VectorXd& anchor) const;
    Eigen::VectorXd stack_plan(const Eigen::MatrixXd& plan_z,
                               const Eigen::MatrixXd& plan_v) const;
    void shifted_candidate(const ControllerState& state, Eigen::MatrixXd& cz,
                           Eigen::MatrixXd& cv) const;

    const SmpcConfig& cfg_;
    TrajectoryDataset scenario_w_;
    std::optional<TrajectoryDataset> scenario_eta_;
    Eigen::MatrixXd H_, A_eq_, A_in_;
    QpSolver solver_;
};

// Full-horizon plan solved once at t = 0 (evaluation baseline); replayed
// open-loop with u(t) = K (x(t) - z*_t) + v*_t.
struct OpenLoopPlan {
    Eigen::MatrixXd z;  // nx x (N_bar + 1)
    Eigen::MatrixXd v;  // nu x N_bar
    double objective = 0.0;
    int iterations = 0;
};

OpenLoopPlan open_loop_tube_policy(const SmpcConfig& cfg,
                                   const Eigen::VectorXd& x0,
                                   const TrajectoryDataset& scenario_disturbances);

// Standalone one-step QP assembly (the controller's internals, exposed for
// verification): decision vector xi = (z_0..z_N, v_0..v_{N-1}).
QuadraticProgram build_qp_state_feedback(const SmpcConfig& cfg,
                                         const ControllerState& state,
                                         const Eigen::VectorXd& x_t,
                                         const TrajectoryDataset& scenario_w,
                                         double* cost_constant = nullptr);

QuadraticProgram build_qp_output_feedback(const SmpcConfig& cfg,
                                          const ControllerState& state,
                                          const Eigen::VectorXd& xhat_t,
                                          const TrajectoryDataset& scenario_w,
                                          const TrajectoryDataset& scenario_eta,
                                          double* cost_constant = nullptr);

}  // namespace cpsmpc
