#include "cpsmpc/smpc.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

#include "cpsmpc/errors.hpp"

namespace cpsmpc {

namespace {

// Fixed QP structure for a given horizon: xi = (z_0..z_h, v_0..v_{h-1}).
// Equalities: dynamics, z_0 pin, terminal pin (origin kind). Inequalities:
// state memberships (all i), input memberships (all i), terminal polytope
// rows (polytope kind). Offsets move with closed-loop time; matrices do not.
struct Structure {
    Eigen::MatrixXd H, A_eq, A_in;
    long horizon = 0;
    Eigen::Index nx = 0, nu = 0, n = 0, nz = 0;
    Eigen::Index me = 0, mi = 0;
    Eigen::Index fx = 0, fu = 0;            // facets per state/input set
    Eigen::Index state_rows = 0, input_rows = 0, terminal_rows = 0;

    Eigen::Index idx_z(long i) const { return static_cast<Eigen::Index>(i) * nx; }
    Eigen::Index idx_v(long i) const {
        return nz + static_cast<Eigen::Index>(i) * nu;
    }
};

Structure build_structure(const SmpcConfig& cfg, long horizon) {
    Structure s;
    s.horizon = horizon;
    s.nx = cfg.system.nx();
    s.nu = cfg.system.nu();
    s.nz = (horizon + 1) * s.nx;
    s.n = s.nz + horizon * s.nu;
    s.fx = cfg.X.facets();
    s.fu = cfg.U.facets();
    const bool origin = cfg.terminal.kind == TerminalSpec::Kind::origin;

    s.me = (horizon + 1) * s.nx + (origin ? s.nx : 0);
    s.state_rows = horizon * s.fx;
    s.input_rows = horizon * s.fu;
    s.terminal_rows = origin ? 0 : cfg.terminal.set->facets();
    s.mi = s.state_rows + s.input_rows + s.terminal_rows;

    s.H = Eigen::MatrixXd::Zero(s.n, s.n);
    for (long i = 0; i < horizon; ++i) {
        s.H.block(s.idx_z(i), s.idx_z(i), s.nx, s.nx) = 2.0 * cfg.cost.Q;
        s.H.block(s.idx_v(i), s.idx_v(i), s.nu, s.nu) = 2.0 * cfg.cost.R;
    }
    s.H.block(s.idx_z(horizon), s.idx_z(horizon), s.nx, s.nx) =
        2.0 * cfg.cost.P_f;

    s.A_eq = Eigen::MatrixXd::Zero(s.me, s.n);
    for (long i = 0; i < horizon; ++i) {
        const Eigen::Index r = static_cast<Eigen::Index>(i) * s.nx;
        s.A_eq.block(r, s.idx_z(i), s.nx, s.nx) = cfg.system.A();
        s.A_eq.block(r, s.idx_v(i), s.nx, s.nu) = cfg.system.B();
        s.A_eq.block(r, s.idx_z(i + 1), s.nx, s.nx) =
            -Eigen::MatrixXd::Identity(s.nx, s.nx);
    }
    const Eigen::Index init_row = horizon * s.nx;
    s.A_eq.block(init_row, s.idx_z(0), s.nx, s.nx) =
        Eigen::MatrixXd::Identity(s.nx, s.nx);
    if (origin)
        s.A_eq.block(init_row + s.nx, s.idx_z(horizon), s.nx, s.nx) =
            Eigen::MatrixXd::Identity(s.nx, s.nx);

    s.A_in = Eigen::MatrixXd::Zero(s.mi, s.n);
    for (long i = 0; i < horizon; ++i) {
        s.A_in.block(static_cast<Eigen::Index>(i) * s.fx, s.idx_z(i), s.fx,
                     s.nx) = cfg.X.normals();
        s.A_in.block(s.state_rows + static_cast<Eigen::Index>(i) * s.fu,
                     s.idx_v(i), s.fu, s.nu) = cfg.U.normals();
    }
    if (!origin)
        s.A_in.block(s.state_rows + s.input_rows, s.idx_z(horizon),
                     s.terminal_rows, s.nx) = cfg.terminal.set->normals();
    return s;
}

// per-step offsets: memberships z_i in Z_{t+i}, v_i in V_{t+i}
Eigen::VectorXd inequality_offsets(const SmpcConfig& cfg, const Structure& s,
                                   long t) {
    Eigen::VectorXd b(s.mi);
    for (long i = 0; i < s.horizon; ++i) {
        b.segment(static_cast<Eigen::Index>(i) * s.fx, s.fx) =
            cfg.state_set(t + i).offsets();
        b.segment(s.state_rows + static_cast<Eigen::Index>(i) * s.fu, s.fu) =
            cfg.input_set(t + i).offsets();
    }
    if (s.terminal_rows > 0)
        b.tail(s.terminal_rows) = cfg.terminal.set->offsets();
    return b;
}

Eigen::VectorXd equality_offsets(const Structure& s,
                                 const Eigen::VectorXd& z_now) {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(s.me);
    b.segment(s.horizon * s.nx, s.nx) = z_now;
    return b;
}

// Scenario cost data: per-step means of the Q-error (x - z) and the R-error
// (the error the tube law reacts to), plus the xi-independent constant.
struct ScenarioTerms {
    std::vector<Eigen::VectorXd> mean_q;  // size horizon+1
    std::vector<Eigen::VectorXd> mean_r;  // size horizon
    double constant = 0.0;
};

ScenarioTerms scenario_terms_state(const SmpcConfig& cfg,
                                   const TrajectoryDataset& w, long t,
                                   const Eigen::VectorXd& anchor,
                                   long horizon) {
    const Eigen::Index nx = cfg.system.nx();
    ScenarioTerms out;
    out.mean_q.assign(static_cast<std::size_t>(horizon + 1),
                      Eigen::VectorXd::Zero(nx));
    out.mean_r.assign(static_cast<std::size_t>(horizon),
                      Eigen::VectorXd::Zero(nx));
    const Eigen::MatrixXd KRK =
        cfg.system.K().transpose() * cfg.cost.R * cfg.system.K();
    for (long j = 0; j < cfg.S; ++j) {
        Eigen::VectorXd e = anchor;
        for (long i = 0; i < horizon; ++i) {
            out.mean_q[static_cast<std::size_t>(i)] += e;
            out.mean_r[static_cast<std::size_t>(i)] += e;
            out.constant += e.dot(cfg.cost.Q * e) + e.dot(KRK * e);
            e = cfg.system.AK() * e + w.trajectory(j).col(t + i);
        }
        out.mean_q[static_cast<std::size_t>(horizon)] += e;
        out.constant += e.dot(cfg.cost.P_f * e);
    }
    const double inv_s = 1.0 / static_cast<double>(cfg.S);
    for (auto& v : out.mean_q) v *= inv_s;
    for (auto& v : out.mean_r) v *= inv_s;
    out.constant *= inv_s;
    return out;
}

ScenarioTerms scenario_terms_output(const SmpcConfig& cfg,
                                    const TrajectoryDataset& w,
                                    const TrajectoryDataset& eta, long t,
                                    const std::vector<Eigen::VectorXd>& ehat0,
                                    const Eigen::VectorXd& ebar_anchor,
                                    long horizon) {
    const Eigen::Index nx = cfg.system.nx();
    ScenarioTerms out;
    out.mean_q.assign(static_cast<std::size_t>(horizon + 1),
                      Eigen::VectorXd::Zero(nx));
    out.mean_r.assign(static_cast<std::size_t>(horizon),
                      Eigen::VectorXd::Zero(nx));
    const Eigen::MatrixXd KRK =
        cfg.system.K().transpose() * cfg.cost.R * cfg.system.K();
    const Eigen::MatrixXd& L = cfg.system.L();
    const Eigen::MatrixXd& C = cfg.system.C();
    for (long j = 0; j < cfg.S; ++j) {
        Eigen::VectorXd ehat = ehat0[static_cast<std::size_t>(j)];
        Eigen::VectorXd ebar = ebar_anchor;
        for (long i = 0; i < horizon; ++i) {
            const Eigen::VectorXd sum = ehat + ebar;
            out.mean_q[static_cast<std::size_t>(i)] += sum;
            out.mean_r[static_cast<std::size_t>(i)] += ebar;
            out.constant += sum.dot(cfg.cost.Q * sum) + ebar.dot(KRK * ebar);
            const Eigen::VectorXd wj = w.trajectory(j).col(t + i);
            const Eigen::VectorXd ej = eta.trajectory(j).col(t + i);
            const Eigen::VectorXd ehat_next =
                cfg.system.AL() * ehat + wj - L * ej;
            ebar = cfg.system.AK() * ebar + L * (C * ehat + ej);
            ehat = ehat_next;
        }
        const Eigen::VectorXd sum = ehat + ebar;
        out.mean_q[static_cast<std::size_t>(horizon)] += sum;
        out.constant += sum.dot(cfg.cost.P_f * sum);
    }
    const double inv_s = 1.0 / static_cast<double>(cfg.S);
    for (auto& v : out.mean_q) v *= inv_s;
    for (auto& v : out.mean_r) v *= inv_s;
    out.constant *= inv_s;
    return out;
}

Eigen::VectorXd linear_cost(const SmpcConfig& cfg, const Structure& s,
                            const ScenarioTerms& terms) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(s.n);
    const Eigen::MatrixXd RK = cfg.cost.R * cfg.system.K();
    for (long i = 0; i < s.horizon; ++i) {
        g.segment(s.idx_z(i), s.nx) =
            2.0 * cfg.cost.Q * terms.mean_q[static_cast<std::size_t>(i)];
        g.segment(s.idx_v(i), s.nu) =
            2.0 * RK * terms.mean_r[static_cast<std::size_t>(i)];
    }
    g.segment(s.idx_z(s.horizon), s.nx) =
        2.0 * cfg.cost.P_f * terms.mean_q[static_cast<std::size_t>(s.horizon)];
    return g;
}

std::vector<std::string> violated_set_names(const SmpcConfig& cfg,
                                            const Structure& s, long t,
                                            const Eigen::VectorXd& point,
                                            const Eigen::VectorXd& b_in) {
    std::vector<std::string> names;
    const Eigen::VectorXd slack = b_in - Eigen::VectorXd(s.A_in * point);
    const double tol = 1e-7;
    auto set_label = [](const HalfspacePolytope& set, const std::string& fb) {
        return set.name().empty() ? fb : set.name();
    };
    for (long i = 0; i < s.horizon; ++i) {
        if (slack.segment(static_cast<Eigen::Index>(i) * s.fx, s.fx)
                .minCoeff() < -tol)
            names.push_back(set_label(cfg.state_set(t + i),
                                      "Z_" + std::to_string(t + i)));
        if (slack.segment(s.state_rows + static_cast<Eigen::Index>(i) * s.fu,
                          s.fu)
                .minCoeff() < -tol)
            names.push_back(set_label(cfg.input_set(t + i),
                                      "V_" + std::to_string(t + i)));
    }
    if (s.terminal_rows > 0 &&
        slack.tail(s.terminal_rows).minCoeff() < -tol)
        names.push_back("Z_f");
    if (names.empty()) names.push_back("Z_f");  // equality-driven infeasibility
    return names;
}

}  // namespace

std::string mode_name(FeedbackMode mode) {
    return mode == FeedbackMode::state_feedback ? "state_feedback"
                                                : "output_feedback";
}

FeedbackMode mode_from_name(const std::string& name) {
    if (name == "state_feedback") return FeedbackMode::state_feedback;
    if (name == "output_feedback") return FeedbackMode::output_feedback;
    throw std::invalid_argument("unknown feedback mode '" + name + "'");
}

SmpcConfig::SmpcConfig(LtiSystem system_, CostSpec cost_,
                       ConfidenceRegion region_, HalfspacePolytope X_,
                       HalfspacePolytope U_, TerminalSpec terminal_,
                       FeedbackMode mode_, long N_, long N_bar_, long S_,
                       double theta_)
    : system(std::move(system_)),
      cost(std::move(cost_)),
      region(std::move(region_)),
      X(std::move(X_)),
      U(std::move(U_)),
      Z_inf(X),
      V_inf(U),
      terminal(std::move(terminal_)),
      mode(mode_),
      N(N_),
      N_bar(N_bar_),
      S(S_),
      theta(theta_) {
    if (N < 1) throw ConfigError("smpc: horizon N must be >= 1");
    if (N > N_bar)
        throw ConfigError("smpc: MPC horizon N must not exceed task horizon");
    if (S < 1) throw ConfigError("smpc: scenario count S must be >= 1");
    if (!(theta > 0.0 && theta < 1.0))
        throw ConfigError("smpc: level theta must be in (0,1)");
    if (X.dim() != system.nx())
        throw ConfigError("smpc: X dimension does not match the state");
    if (U.dim() != system.nu())
        throw ConfigError("smpc: U dimension does not match the input");
    if (cost.Q.rows() != system.nx() || cost.R.rows() != system.nu())
        throw ConfigError("smpc: cost dimensions do not match the system");
    if (!X.origin_interior())
        throw ConfigError("smpc: X must contain the origin in its interior");
    if (!U.origin_interior())
        throw ConfigError("smpc: U must contain the origin in its interior");
    if (region.score.dim != system.nx())
        throw ConfigError("smpc: region dimension does not match the state");
    if (region.score.horizon < N_bar + N)
        throw ConfigError(
            "smpc: confidence region covers " +
            std::to_string(region.score.horizon) + " steps, need N_bar + N = " +
            std::to_string(N_bar + N));
    if (mode == FeedbackMode::output_feedback) {
        if (!system.observer_validated())
            throw ConfigError(
                "smpc: output feedback requires a validated observer gain L");
        if (system.D().cwiseAbs().maxCoeff() > 0.0)
            throw ConfigError(
                "smpc: output feedback assumes no direct feedthrough (D = 0)");
    }

    Z.reserve(static_cast<std::size_t>(N_bar + N));
    V.reserve(static_cast<std::size_t>(N_bar + N));
    for (long t = 1; t <= N_bar + N; ++t) {
        const Ellipsoid E_t = project(region, t);
        TightenResult tz = tighten(X, E_t);
        if (tz.empty)
            throw ConfigError("smpc: tightened state set Z_" +
                              std::to_string(t) +
                              " is empty (Chebyshev radius " +
                              std::to_string(tz.chebyshev_radius) +
                              "); the region is too large for X");
        TightenResult tv = tighten_inputs(U, system.K(), E_t);
        if (tv.empty)
            throw ConfigError("smpc: tightened input set V_" +
                              std::to_string(t) +
                              " is empty (Chebyshev radius " +
                              std::to_string(tv.chebyshev_radius) +
                              "); the region is too large for U");
        Z.push_back(tz.set.renamed("Z_" + std::to_string(t)));
        V.push_back(tv.set.renamed("V_" + std::to_string(t)));
    }
    Z_inf = horizon_intersection(Z).renamed("Z_inf");
    V_inf = horizon_intersection(V).renamed("V_inf");

    const Eigen::VectorXd origin = Eigen::VectorXd::Zero(system.nx());
    if (terminal.kind == TerminalSpec::Kind::origin) {
        if (terminal.K_f.size() == 0)
            terminal.K_f = Eigen::MatrixXd::Zero(system.nu(), system.nx());
        if (!Z_inf.contains(origin))
            throw ConfigError(
                "smpc: terminal set {0} is not inside Z_inf; tightening leaves "
                "no room at the origin");
    } else {
        if (!terminal.set)
            throw ConfigError("smpc: polytopic terminal spec without a set");
        if (terminal.set->dim() != system.nx() ||
            terminal.K_f.rows() != system.nu() ||
            terminal.K_f.cols() != system.nx())
            throw ConfigError("smpc: terminal ingredient dimensions mismatch");
        if (!contains_polytope(Z_inf, *terminal.set))
            throw ConfigError("smpc: terminal set is not contained in Z_inf");
    }
    const InvarianceReport inv =
        check_terminal_invariance(terminal, system.A(), system.B(), V_inf);
    if (!inv.invariant)
        throw ConfigError(
            "smpc: terminal ingredients violate invariance (state margin " +
            std::to_string(inv.worst_state_margin) + ", input margin " +
            std::to_string(inv.worst_input_margin) + ")");
}

Controller::Controller(const SmpcConfig& cfg,
                       TrajectoryDataset scenario_disturbances,
                       std::optional<TrajectoryDataset> scenario_noise)
    : cfg_(cfg),
      scenario_w_(std::move(scenario_disturbances)),
      scenario_eta_(std::move(scenario_noise)),
      H_(),
      A_eq_(),
      A_in_(),
      solver_([&] {
          Structure s = build_structure(cfg, cfg.N);
          H_ = std::move(s.H);
          A_eq_ = std::move(s.A_eq);
          A_in_ = std::move(s.A_in);
          return QpSolver(H_, A_eq_, A_in_);
      }()) {
    if (scenario_w_.count() < cfg_.S)
        throw DataError(DataError::Kind::dimension,
                        "controller: " + std::to_string(scenario_w_.count()) +
                            " scenario disturbance trajectories, need S = " +
                            std::to_string(cfg_.S));
    if (scenario_w_.dim() != cfg_.system.nx())
        throw DataError(DataError::Kind::dimension,
                        "controller: scenario disturbance dimension mismatch");
    if (scenario_w_.length() < cfg_.N_bar + cfg_.N)
        throw DataError(
            DataError::Kind::dimension,
            "controller: scenario trajectories of length " +
                std::to_string(scenario_w_.length()) +
                " are too short; need N_bar + N = " +
                std::to_string(cfg_.N_bar + cfg_.N));
    if (cfg_.mode == FeedbackMode::output_feedback) {
        if (!scenario_eta_)
            throw DataError(DataError::Kind::dimension,
                            "controller: output feedback needs scenario "
                            "measurement noise");
        if (scenario_eta_->count() < cfg_.S ||
            scenario_eta_->dim() != cfg_.system.ny() ||
            scenario_eta_->length() < cfg_.N_bar + cfg_.N)
            throw DataError(DataError::Kind::dimension,
                            "controller: scenario noise shape mismatch");
    }
}

ControllerState Controller::initial_state(const Eigen::VectorXd& x0) const {
    if (x0.size() != cfg_.system.nx())
        throw std::invalid_argument("initial_state: x0 dimension mismatch");
    ControllerState st;
    st.t = 0;
    st.z = x0;
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(cfg_.system.nx());
    if (cfg_.mode == FeedbackMode::state_feedback) {
        st.scenario_e.assign(static_cast<std::size_t>(cfg_.S), zero);
    } else {
        st.xhat = x0;
        st.scenario_ehat.assign(static_cast<std::size_t>(cfg_.S), zero);
        st.scenario_ebar.assign(static_cast<std::size_t>(cfg_.S), zero);
    }
    return st;
}

Controller::StepProblem Controller::assemble(const ControllerState& state,
                                             const Eigen::VectorXd& anchor) const {
    // rebuilt structure indices only (matrices cached in the members)
    Structure s;
    s.horizon = cfg_.N;
    s.nx = cfg_.system.nx();
    s.nu = cfg_.system.nu();
    s.nz = (cfg_.N + 1) * s.nx;
    s.n = s.nz + cfg_.N * s.nu;
    s.fx = cfg_.X.facets();
    s.fu = cfg_.U.facets();
    const bool origin = cfg_.terminal.kind == TerminalSpec::Kind::origin;
    s.me = (cfg_.N + 1) * s.nx + (origin ? s.nx : 0);
    s.state_rows = cfg_.N * s.fx;
    s.input_rows = cfg_.N * s.fu;
    s.terminal_rows = origin ? 0 : cfg_.terminal.set->facets();
    s.mi = s.state_rows + s.input_rows + s.terminal_rows;

    ScenarioTerms terms =
        cfg_.mode == FeedbackMode::state_feedback
            ? scenario_terms_state(cfg_, scenario_w_, state.t, anchor, cfg_.N)
            : scenario_terms_output(cfg_, scenario_w_, *scenario_eta_, state.t,
                                    state.scenario_ehat, anchor, cfg_.N);
    StepProblem sp;
    sp.g = linear_cost(cfg_, s, terms);
    sp.b_eq = equality_offsets(s, state.z);
    sp.b_in = inequality_offsets(cfg_, s, state.t);
    sp.constant = terms.constant;
    return sp;
}

Eigen::VectorXd Controller::stack_plan(const Eigen::MatrixXd& plan_z,
                                       const Eigen::MatrixXd& plan_v) const {
    const Eigen::Index nx = cfg_.system.nx();
    const Eigen::Index nu = cfg_.system.nu();
    Eigen::VectorXd xi((cfg_.N + 1) * nx + cfg_.N * nu);
    for (long i = 0; i <= cfg_.N; ++i) xi.segment(i * nx, nx) = plan_z.col(i);
    for (long i = 0; i < cfg_.N; ++i)
        xi.segment((cfg_.N + 1) * nx + i * nu, nu) = plan_v.col(i);
    return xi;
}

void Controller::shifted_candidate(const ControllerState& state,
                                   Eigen::MatrixXd& cz,
                                   Eigen::MatrixXd& cv) const {
    const Eigen::Index nx = cfg_.system.nx();
    const Eigen::Index nu = cfg_.system.nu();
    cz.resize(nx, cfg_.N + 1);
    cv.resize(nu, cfg_.N);
    for (long i = 0; i < cfg_.N; ++i) cz.col(i) = state.plan_z.col(i + 1);
    for (long i = 0; i + 1 < cfg_.N; ++i) cv.col(i) = state.plan_v.col(i + 1);
    if (cfg_.terminal.kind == TerminalSpec::Kind::origin) {
        // z*_N = 0, pi_f(0) = 0: the appended pair is exactly zero
        cz.col(cfg_.N).setZero();
        cv.col(cfg_.N - 1).setZero();
    } else {
        const Eigen::VectorXd zN = state.plan_z.col(cfg_.N);
        cv.col(cfg_.N - 1) = cfg_.terminal.K_f * zN;
        cz.col(cfg_.N) =
            cfg_.system.A() * zN + cfg_.system.B() * cv.col(cfg_.N - 1);
    }
}

std::pair<Eigen::VectorXd, StepDiagnostics> Controller::control_step(
    ControllerState& state, const Eigen::VectorXd& measurement) const {
    const long t = state.t;
    if (t < 0 || t >= cfg_.N_bar)
        throw std::invalid_argument("control_step: task horizon exhausted");

    Eigen::VectorXd anchor;
    if (cfg_.mode == FeedbackMode::state_feedback) {
        if (measurement.size() != cfg_.system.nx())
            throw std::invalid_argument("control_step: expected x(t)");
        anchor = measurement - state.z;
    } else {
        if (measurement.size() != cfg_.system.ny())
            throw std::invalid_argument("control_step: expected y(t)");
        anchor = state.xhat - state.z;
    }

    const StepProblem sp = assemble(state, anchor);

    StepDiagnostics diag;
    diag.t = t;

    Eigen::VectorXd warm;
    Eigen::MatrixXd cand_z, cand_v;
    if (state.has_plan) {
        shifted_candidate(state, cand_z, cand_v);
        warm = stack_plan(cand_z, cand_v);
        const double eq_v =
            (A_eq_ * warm - sp.b_eq).cwiseAbs().maxCoeff();
        const double in_v = (A_in_ * warm - sp.b_in).maxCoeff();
        diag.candidate_checked = true;
        diag.candidate_violation = std::max(eq_v, in_v);
        diag.candidate_feasible = diag.candidate_violation <= 1e-8;
    }

    const QpSolution sol = solver_.solve(
        sp.g, sp.b_eq, sp.b_in, state.has_plan ? &warm : nullptr);
    diag.status = sol.status;
    diag.iterations = sol.iterations;
    diag.polished = sol.polished;

    Eigen::VectorXd xi;
    double qp_objective = sol.objective;
    if (sol.status == QpStatus::infeasible) {
        if (t == 0) {
            Eigen::VectorXd point;
            min_constraint_violation(A_eq_, sp.b_eq, A_in_, sp.b_in, &point);
            Structure s;  // index-only shell for naming
            s.horizon = cfg_.N;
            s.fx = cfg_.X.facets();
            s.fu = cfg_.U.facets();
            s.state_rows = cfg_.N * s.fx;
            s.input_rows = cfg_.N * s.fu;
            s.terminal_rows = A_in_.rows() - s.state_rows - s.input_rows;
            s.A_in = A_in_;
            const auto names = violated_set_names(cfg_, s, t, point, sp.b_in);
            std::string msg = "initial problem infeasible at x(0); violated:";
            for (const auto& n : names) msg += " " + n;
            throw InitialInfeasibleError(msg, names);
        }
        if (!diag.candidate_feasible)
            throw ContractViolation(
                "control_step: QP infeasible at t = " + std::to_string(t) +
                " and the shifted candidate violates constraints by " +
                std::to_string(diag.candidate_violation) +
                "; recursive feasibility is broken");
        // certified fallback: the shifted previous optimum is feasible
        std::cerr << "[cpsmpc] WARNING t=" << t
                  << ": QP reported infeasible despite a feasible shifted "
                     "candidate; applying the candidate plan\n";
        diag.fallback_used = true;
        xi = warm;
        qp_objective = 0.5 * xi.dot(H_ * xi) + sp.g.dot(xi);
    } else {
        xi = sol.x;
    }

    const Eigen::Index nx = cfg_.system.nx();
    const Eigen::Index nu = cfg_.system.nu();
    Eigen::MatrixXd plan_z(nx, cfg_.N + 1), plan_v(nu, cfg_.N);
    for (long i = 0; i <= cfg_.N; ++i) plan_z.col(i) = xi.segment(i * nx, nx);
    for (long i = 0; i < cfg_.N; ++i)
        plan_v.col(i) = xi.segment((cfg_.N + 1) * nx + i * nu, nu);

    diag.objective = qp_objective + sp.constant;

    // constraint-family slacks at the applied plan
    const Eigen::VectorXd slack = sp.b_in - A_in_ * xi;
    const Eigen::Index state_rows = cfg_.N * cfg_.X.facets();
    const Eigen::Index input_rows = cfg_.N * cfg_.U.facets();
    diag.min_state_slack = slack.head(state_rows).minCoeff();
    diag.min_input_slack = slack.segment(state_rows, input_rows).minCoeff();
    if (cfg_.terminal.kind == TerminalSpec::Kind::origin)
        diag.terminal_residual = plan_z.col(cfg_.N).cwiseAbs().maxCoeff();
    else
        diag.terminal_residual =
            -(slack.tail(A_in_.rows() - state_rows - input_rows).minCoeff());

    // control law and state advance
    const Eigen::VectorXd u = cfg_.system.K() * anchor + plan_v.col(0);
    state.z = plan_z.col(1);
    if (cfg_.mode == FeedbackMode::state_feedback) {
        for (long j = 0; j < cfg_.S; ++j) {
            auto& e = state.scenario_e[static_cast<std::size_t>(j)];
            e = cfg_.system.AK() * e + scenario_w_.trajectory(j).col(t);
        }
    } else {
        for (long j = 0; j < cfg_.S; ++j) {
            auto& ehat = state.scenario_ehat[static_cast<std::size_t>(j)];
            auto& ebar = state.scenario_ebar[static_cast<std::size_t>(j)];
            const Eigen::VectorXd wj = scenario_w_.trajectory(j).col(t);
            const Eigen::VectorXd ej = scenario_eta_->trajectory(j).col(t);
            const Eigen::VectorXd ehat_next =
                cfg_.system.AL() * ehat + wj - cfg_.system.L() * ej;
            ebar = cfg_.system.AK() * ebar +
                   cfg_.system.L() * (cfg_.system.C() * ehat + ej);
            ehat = ehat_next;
        }
        state.xhat = cfg_.system.step_observer(state.xhat, u, measurement);
    }
    state.plan_z = std::move(plan_z);
    state.plan_v = std::move(plan_v);
    state.has_plan = true;
    state.t = t + 1;
    return {u, diag};
}

OpenLoopPlan open_loop_tube_policy(const SmpcConfig& cfg,
                                   const Eigen::VectorXd& x0,
                                   const TrajectoryDataset& scenario_w) {
    if (cfg.mode != FeedbackMode::state_feedback)
        throw std::invalid_argument(
            "open_loop_tube_policy: defined for state feedback");
    if (x0.size() != cfg.system.nx())
        throw std::invalid_argument("open_loop_tube_policy: x0 size mismatch");
    if (scenario_w.count() < cfg.S || scenario_w.length() < cfg.N_bar ||
        scenario_w.dim() != cfg.system.nx())
        throw DataError(DataError::Kind::dimension,
                        "open_loop_tube_policy: scenario data too small");

    const Structure s = build_structure(cfg, cfg.N_bar);
    // z(0) = x(0), so the anchor error is exactly zero
    const ScenarioTerms terms = scenario_terms_state(
        cfg, scenario_w, 0, Eigen::VectorXd::Zero(cfg.system.nx()), cfg.N_bar);
    const Eigen::VectorXd g = linear_cost(cfg, s, terms);
    const Eigen::VectorXd b_eq = equality_offsets(s, x0);
    const Eigen::VectorXd b_in = inequality_offsets(cfg, s, 0);

    const QpSolver solver(s.H, s.A_eq, s.A_in);
    const QpSolution sol = solver.solve(g, b_eq, b_in);
    if (sol.status == QpStatus::infeasible) {
        Eigen::VectorXd point;
        min_constraint_violation(s.A_eq, b_eq, s.A_in, b_in, &point);
        const auto names = violated_set_names(cfg, s, 0, point, b_in);
        std::string msg = "open-loop problem infeasible at x(0); violated:";
        for (const auto& n : names) msg += " " + n;
        throw InitialInfeasibleError(msg, names);
    }

    OpenLoopPlan plan;
    plan.z.resize(cfg.system.nx(), cfg.N_bar + 1);
    plan.v.resize(cfg.system.nu(), cfg.N_bar);
    for (long i = 0; i <= cfg.N_bar; ++i)
        plan.z.col(i) = sol.x.segment(s.idx_z(i), s.nx);
    for (long i = 0; i < cfg.N_bar; ++i)
        plan.v.col(i) = sol.x.segment(s.idx_v(i), s.nu);
    plan.objective = sol.objective + terms.constant;
    plan.iterations = sol.iterations;
    return plan;
}

QuadraticProgram build_qp_state_feedback(const SmpcConfig& cfg,
                                         const ControllerState& state,
                                         const Eigen::VectorXd& x_t,
                                         const TrajectoryDataset& scenario_w,
                                         double* cost_constant) {
    if (cfg.mode != FeedbackMode::state_feedback)
        throw std::invalid_argument("build_qp_state_feedback: wrong mode");
    if (x_t.size() != cfg.system.nx())
        throw std::invalid_argument("build_qp_state_feedback: x size");
    const Structure s = build_structure(cfg, cfg.N);
    const ScenarioTerms terms = scenario_terms_state(
        cfg, scenario_w, state.t, x_t - state.z, cfg.N);
    QuadraticProgram qp;
    qp.H = s.H;
    qp.g = linear_cost(cfg, s, terms);
    qp.A_eq = s.A_eq;
    qp.b_eq = equality_offsets(s, state.z);
    qp.A_in = s.A_in;
    qp.b_in = inequality_offsets(cfg, s, state.t);
    if (cost_constant) *cost_constant = terms.constant;
    return qp;
}

QuadraticProgram build_qp_output_feedback(const SmpcConfig& cfg,
                                          const ControllerState& state,
                                          const Eigen::VectorXd& xhat_t,
                                          const TrajectoryDataset& scenario_w,
                                          const TrajectoryDataset& scenario_eta,
                                          double* cost_constant) {
    if (cfg.mode != FeedbackMode::output_feedback)
        throw std::invalid_argument("build_qp_output_feedback: wrong mode");
    if (xhat_t.size() != cfg.system.nx())
        throw std::invalid_argument("build_qp_output_feedback: xhat size");
    if (scenario_eta.length() != scenario_w.length() ||
        scenario_eta.count() != scenario_w.count())
        throw DataError(DataError::Kind::dimension,
                        "build_qp_output_feedback: scenario misalignment");
    const Structure s = build_structure(cfg, cfg.N);
    const ScenarioTerms terms =
        scenario_terms_output(cfg, scenario_w, scenario_eta, state.t,
                              state.scenario_ehat, xhat_t - state.z, cfg.N);
    QuadraticProgram qp;
    qp.H = s.H;
    qp.g = linear_cost(cfg, s, terms);
    qp.A_eq = s.A_eq;
    qp.b_eq = equality_offsets(s, state.z);
    qp.A_in = s.A_in;
    qp.b_in = inequality_offsets(cfg, s, state.t);
    if (cost_constant) *cost_constant = terms.constant;
    return qp;
}

}  // namespace cpsmpc
