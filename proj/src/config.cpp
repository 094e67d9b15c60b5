#include "cpsmpc/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cpsmpc/errors.hpp"
#include "cpsmpc/rng.hpp"

namespace cpsmpc {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& field, const std::string& why) {
    throw ConfigError("config field '" + field + "': " + why);
}

const json& require(const json& obj, const char* key,
                    const std::string& parent) {
    const auto it = obj.find(key);
    if (it == obj.end())
        throw ConfigError("missing config field '" +
                          (parent.empty() ? std::string(key)
                                          : parent + "." + key) +
                          "'");
    return *it;
}

std::string joined(const std::string& parent, const char* key) {
    return parent.empty() ? std::string(key) : parent + "." + key;
}

double as_number(const json& j, const std::string& field) {
    if (!j.is_number()) fail(field, "must be a number");
    return j.get<double>();
}

long as_integer(const json& j, const std::string& field) {
    if (!j.is_number_integer()) fail(field, "must be an integer");
    return j.get<long>();
}

std::uint64_t as_seed(const json& j, const std::string& field) {
    if (j.is_number_unsigned()) return j.get<std::uint64_t>();
    if (j.is_number_integer() && j.get<long long>() >= 0)
        return static_cast<std::uint64_t>(j.get<long long>());
    fail(field, "must be a non-negative integer");
}

bool as_bool(const json& j, const std::string& field) {
    if (!j.is_boolean()) fail(field, "must be a boolean");
    return j.get<bool>();
}

std::string as_string(const json& j, const std::string& field) {
    if (!j.is_string()) fail(field, "must be a string");
    return j.get<std::string>();
}

Eigen::VectorXd as_vector(const json& j, const std::string& field) {
    if (!j.is_array() || j.empty()) fail(field, "must be a non-empty array");
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) fail(field, "must hold numbers only");
        v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    }
    return v;
}

Eigen::MatrixXd as_matrix(const json& j, const std::string& field) {
    if (!j.is_array() || j.empty())
        fail(field, "must be a non-empty array of rows");
    const std::size_t rows = j.size();
    if (!j[0].is_array() || j[0].empty())
        fail(field, "rows must be non-empty arrays");
    const std::size_t cols = j[0].size();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r) {
        if (!j[r].is_array() || j[r].size() != cols)
            fail(field, "must be rectangular");
        for (std::size_t c = 0; c < cols; ++c) {
            if (!j[r][c].is_number()) fail(field, "must hold numbers only");
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                j[r][c].get<double>();
        }
    }
    return m;
}

HalfspacePolytope as_polytope(const json& j, const std::string& field,
                              std::string name) {
    if (!j.is_object()) fail(field, "must be an object");
    if (j.contains("box")) {
        const json& box = j["box"];
        if (!box.is_array() || box.empty())
            fail(field + ".box", "must be an array of [lo, hi] pairs");
        const Eigen::Index n = static_cast<Eigen::Index>(box.size());
        Eigen::VectorXd lower(n), upper(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const json& pair = box[static_cast<std::size_t>(i)];
            if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number() ||
                !pair[1].is_number())
                fail(field + ".box", "entries must be [lo, hi] number pairs");
            lower(i) = pair[0].get<double>();
            upper(i) = pair[1].get<double>();
            if (!(lower(i) < upper(i)))
                fail(field + ".box", "requires lo < hi in every coordinate");
        }
        return HalfspacePolytope::box(lower, upper, std::move(name));
    }
    if (j.contains("normals") && j.contains("offsets")) {
        const Eigen::MatrixXd normals = as_matrix(j["normals"], field + ".normals");
        const Eigen::VectorXd offsets = as_vector(j["offsets"], field + ".offsets");
        if (offsets.size() != normals.rows())
            fail(field, "needs one offset per normal row");
        try {
            return HalfspacePolytope(normals, offsets, std::move(name));
        } catch (const std::invalid_argument& e) {
            fail(field, e.what());
        }
    }
    fail(field, "must give either 'box' or 'normals' + 'offsets'");
}

DisturbanceModel as_model(const json& j, const std::string& field,
                          Eigen::Index dim) {
    if (!j.is_object()) fail(field, "must be an object");
    const std::string kind = as_string(require(j, "kind", field),
                                       field + ".kind");
    DisturbanceModel model;
    if (kind == "gaussian") {
        model.kind = DisturbanceModel::Kind::gaussian;
        model.covariance =
            as_matrix(require(j, "covariance", field), field + ".covariance");
        if (model.covariance.rows() != model.covariance.cols())
            fail(field + ".covariance", "must be square");
        if (model.covariance.rows() != dim)
            fail(field + ".covariance", "dimension mismatch with the system");
    } else if (kind == "uniform") {
        model.kind = DisturbanceModel::Kind::uniform;
        model.half_widths =
            as_vector(require(j, "half_widths", field), field + ".half_widths");
        if ((model.half_widths.array() < 0.0).any())
            fail(field + ".half_widths", "must be non-negative");
        if (model.half_widths.size() != dim)
            fail(field + ".half_widths", "dimension mismatch with the system");
    } else {
        fail(field + ".kind", "must be 'gaussian' or 'uniform'");
    }
    return model;
}

std::optional<std::string> maybe_path(const json& obj, const char* key,
                                      const std::string& parent) {
    const auto it = obj.find(key);
    if (it == obj.end()) return std::nullopt;
    return as_string(*it, joined(parent, key));
}

TrajectoryDataset slice(const TrajectoryDataset& ds, Eigen::Index count,
                        Eigen::Index length) {
    std::vector<Eigen::MatrixXd> kept;
    kept.reserve(static_cast<std::size_t>(count));
    for (Eigen::Index k = 0; k < count; ++k)
        kept.push_back(ds.trajectory(k).leftCols(length));
    return TrajectoryDataset(ds.role(), std::move(kept), ds.seed());
}

TrajectoryDataset load_pool(const std::string& path, Eigen::Index dim,
                            Eigen::Index count, Eigen::Index length,
                            const char* what) {
    const TrajectoryDataset ds = load_dataset(path);
    std::ostringstream msg;
    if (ds.dim() != dim) {
        msg << what << " dataset '" << path << "' has dimension " << ds.dim()
            << ", expected " << dim;
        throw DataError(DataError::Kind::dimension, msg.str());
    }
    if (ds.length() < length) {
        msg << what << " dataset '" << path << "' has length " << ds.length()
            << ", need at least " << length;
        throw DataError(DataError::Kind::dimension, msg.str());
    }
    if (ds.count() < count) {
        msg << what << " dataset '" << path << "' holds " << ds.count()
            << " trajectories, need at least " << count;
        throw DataError(DataError::Kind::dimension, msg.str());
    }
    return slice(ds, count, length);
}

}  // namespace

SeedPlan seed_plan(std::uint64_t master) {
    SeedPlan plan;
    plan.calibration_w = derive_seed(master, 11);
    plan.calibration_eta = derive_seed(master, 12);
    plan.scenario_w = derive_seed(master, 13);
    plan.scenario_eta = derive_seed(master, 14);
    plan.split_shuffle = derive_seed(master, 15);
    plan.evaluation = derive_seed(master, 16);
    plan.regions = derive_seed(master, 17);
    plan.policies = derive_seed(master, 18);
    plan.tightness = derive_seed(master, 19);
    return plan;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    json root;
    try {
        root = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " +
                          e.what());
    }
    if (!root.is_object()) throw ConfigError("config root must be an object");

    RunConfig rc;

    if (root.contains("mode")) {
        const std::string name = as_string(root["mode"], "mode");
        try {
            rc.mode = mode_from_name(name);
        } catch (const std::invalid_argument& e) {
            fail("mode", e.what());
        }
    }
    rc.seed = as_seed(require(root, "seed", ""), "seed");
    if (root.contains("output_dir"))
        rc.output_dir = as_string(root["output_dir"], "output_dir");

    // system
    const json& sys = require(root, "system", "");
    rc.A = as_matrix(require(sys, "A", "system"), "system.A");
    if (rc.A.rows() != rc.A.cols()) fail("system.A", "must be square");
    const Eigen::Index nx = rc.A.rows();
    rc.B = as_matrix(require(sys, "B", "system"), "system.B");
    if (rc.B.rows() != nx) fail("system.B", "row count must match A");
    const Eigen::Index nu = rc.B.cols();
    rc.K = as_matrix(require(sys, "K", "system"), "system.K");
    if (rc.K.rows() != nu || rc.K.cols() != nx)
        fail("system.K", "must be n_u x n_x");
    rc.C = sys.contains("C") ? as_matrix(sys["C"], "system.C")
                             : Eigen::MatrixXd::Identity(nx, nx).eval();
    if (rc.C.cols() != nx) fail("system.C", "column count must match A");
    const Eigen::Index ny = rc.C.rows();
    rc.D = sys.contains("D") ? as_matrix(sys["D"], "system.D")
                             : Eigen::MatrixXd::Zero(ny, nu).eval();
    if (rc.D.rows() != ny || rc.D.cols() != nu)
        fail("system.D", "must be n_y x n_u");
    rc.L = sys.contains("L") ? as_matrix(sys["L"], "system.L")
                             : Eigen::MatrixXd::Zero(nx, ny).eval();
    if (rc.L.rows() != nx || rc.L.cols() != ny)
        fail("system.L", "must be n_x x n_y");

    // cost
    const json& cost = require(root, "cost", "");
    rc.Q = as_matrix(require(cost, "Q", "cost"), "cost.Q");
    if (rc.Q.rows() != nx || rc.Q.cols() != nx) fail("cost.Q", "must be n_x x n_x");
    rc.R = as_matrix(require(cost, "R", "cost"), "cost.R");
    if (rc.R.rows() != nu || rc.R.cols() != nu) fail("cost.R", "must be n_u x n_u");
    rc.P_f = cost.contains("P_f") ? as_matrix(cost["P_f"], "cost.P_f")
                                  : Eigen::MatrixXd::Zero(nx, nx).eval();
    if (rc.P_f.rows() != nx || rc.P_f.cols() != nx)
        fail("cost.P_f", "must be n_x x n_x");

    // constraints
    const json& cons = require(root, "constraints", "");
    rc.X = as_polytope(require(cons, "state", "constraints"),
                       "constraints.state", "X");
    if (rc.X->dim() != nx) fail("constraints.state", "dimension must be n_x");
    rc.U = as_polytope(require(cons, "input", "constraints"),
                       "constraints.input", "U");
    if (rc.U->dim() != nu) fail("constraints.input", "dimension must be n_u");
    if (cons.contains("terminal")) {
        const json& term = cons["terminal"];
        if (!term.is_object()) fail("constraints.terminal", "must be an object");
        rc.terminal_kind = as_string(require(term, "kind", "constraints.terminal"),
                                     "constraints.terminal.kind");
        if (rc.terminal_kind == "polytope") {
            rc.terminal_set =
                as_polytope(term, "constraints.terminal", "Z_f");
            rc.K_f = as_matrix(require(term, "K_f", "constraints.terminal"),
                               "constraints.terminal.K_f");
            if (rc.K_f.rows() != nu || rc.K_f.cols() != nx)
                fail("constraints.terminal.K_f", "must be n_u x n_x");
        } else if (rc.terminal_kind != "origin") {
            fail("constraints.terminal.kind", "must be 'origin' or 'polytope'");
        }
    }

    // horizon
    const json& hor = require(root, "horizon", "");
    rc.N = as_integer(require(hor, "N", "horizon"), "horizon.N");
    rc.N_bar = as_integer(require(hor, "N_bar", "horizon"), "horizon.N_bar");
    if (rc.N < 1) fail("horizon.N", "must be >= 1");
    if (rc.N_bar < rc.N) fail("horizon.N_bar", "must be >= N");
    rc.theta = as_number(require(hor, "theta", "horizon"), "horizon.theta");
    if (!(rc.theta > 0.0 && rc.theta < 1.0))
        fail("horizon.theta", "must lie in (0, 1)");
    if (hor.contains("scenarios")) {
        rc.S = as_integer(hor["scenarios"], "horizon.scenarios");
        if (rc.S < 1) fail("horizon.scenarios", "must be >= 1");
    }

    // data
    const json& data = require(root, "data", "");
    rc.w_model = as_model(require(data, "disturbance", "data"),
                          "data.disturbance", nx);
    if (data.contains("noise"))
        rc.eta_model = as_model(data["noise"], "data.noise", ny);
    if (rc.mode == FeedbackMode::output_feedback && !rc.eta_model)
        fail("data.noise", "required in output feedback mode");
    if (data.contains("m_fit")) {
        rc.m_fit = as_integer(data["m_fit"], "data.m_fit");
        if (rc.m_fit < 0) fail("data.m_fit", "must be >= 0");
    }
    rc.m_cal = as_integer(require(data, "m_cal", "data"), "data.m_cal");
    if (rc.m_cal < 1) fail("data.m_cal", "must be >= 1");
    rc.calibration_w_path = maybe_path(data, "calibration_disturbances", "data");
    rc.calibration_eta_path = maybe_path(data, "calibration_noise", "data");
    rc.scenario_w_path = maybe_path(data, "scenario_disturbances", "data");
    rc.scenario_eta_path = maybe_path(data, "scenario_noise", "data");

    // calibration
    if (root.contains("calibration")) {
        const json& cal = root["calibration"];
        if (!cal.is_object()) fail("calibration", "must be an object");
        if (cal.contains("score")) {
            const std::string name = as_string(cal["score"], "calibration.score");
            try {
                rc.score = score_kind_from_name(name);
            } catch (const std::exception& e) {
                fail("calibration.score", e.what());
            }
        }
        if (cal.contains("zero_mean"))
            rc.zero_mean = as_bool(cal["zero_mean"], "calibration.zero_mean");
        if (cal.contains("pac_epsilon")) {
            const double eps =
                as_number(cal["pac_epsilon"], "calibration.pac_epsilon");
            if (!(eps > 0.0 && eps < 1.0))
                fail("calibration.pac_epsilon", "must lie in (0, 1)");
            rc.pac_epsilon = eps;
        }
        if (cal.contains("weights"))
            rc.weights = as_vector(cal["weights"], "calibration.weights");
    }
    if (rc.score == ScoreKind::weighted_max_norm &&
        rc.weights.size() != rc.region_horizon())
        fail("calibration.weights",
             "weighted score needs one weight per step over N_bar + N");

    // evaluation
    if (root.contains("evaluation")) {
        const json& ev = root["evaluation"];
        if (!ev.is_object()) fail("evaluation", "must be an object");
        if (ev.contains("n_test")) {
            rc.n_test = as_integer(ev["n_test"], "evaluation.n_test");
            if (rc.n_test < 1) fail("evaluation.n_test", "must be >= 1");
        }
        if (ev.contains("policy_rollouts")) {
            rc.policy_rollouts =
                as_integer(ev["policy_rollouts"], "evaluation.policy_rollouts");
            if (rc.policy_rollouts < 0)
                fail("evaluation.policy_rollouts", "must be >= 0");
        }
        if (ev.contains("region_samples")) {
            rc.region_samples =
                as_integer(ev["region_samples"], "evaluation.region_samples");
            if (rc.region_samples < 1)
                fail("evaluation.region_samples", "must be >= 1");
        }
        if (ev.contains("tightness")) {
            const json& ti = ev["tightness"];
            if (!ti.is_object()) fail("evaluation.tightness", "must be an object");
            if (ti.contains("repetitions")) {
                rc.tightness.repetitions = as_integer(
                    ti["repetitions"], "evaluation.tightness.repetitions");
                if (rc.tightness.repetitions < 2)
                    fail("evaluation.tightness.repetitions", "must be >= 2");
            }
            if (ti.contains("n_fresh")) {
                rc.tightness.n_fresh =
                    as_integer(ti["n_fresh"], "evaluation.tightness.n_fresh");
                if (rc.tightness.n_fresh < 1)
                    fail("evaluation.tightness.n_fresh", "must be >= 1");
            }
        }
    }

    rc.x0 = as_vector(require(root, "initial_state", ""), "initial_state");
    if (rc.x0.size() != nx)
        fail("initial_state", "dimension must match the system");

    return rc;
}

LtiSystem build_system(const RunConfig& rc) {
    try {
        return LtiSystem(rc.A, rc.B, rc.C, rc.D, rc.K, rc.L);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("system: ") + e.what());
    }
}

CostSpec build_cost(const RunConfig& rc) {
    try {
        return CostSpec(rc.Q, rc.R, rc.P_f);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("cost: ") + e.what());
    }
}

TerminalSpec build_terminal(const RunConfig& rc) {
    if (rc.terminal_kind == "origin")
        return TerminalSpec::origin_spec(rc.A.rows(), rc.B.cols());
    return TerminalSpec::polytope_spec(*rc.terminal_set, rc.K_f);
}

ErrorTrajectorySet calibration_errors(const RunConfig& rc,
                                      const LtiSystem& sys) {
    const SeedPlan plan = seed_plan(rc.seed);
    const Eigen::Index length = rc.region_horizon();
    const Eigen::Index M = rc.m_fit + rc.m_cal;
    const TrajectoryDataset w =
        rc.calibration_w_path
            ? load_pool(*rc.calibration_w_path, sys.nx(), M, length,
                        "calibration disturbance")
            : rc.w_model.sample(length, M, plan.calibration_w,
                                Role::disturbance);
    if (rc.mode == FeedbackMode::state_feedback)
        return propagate_state_errors(sys, w);
    const TrajectoryDataset eta =
        rc.calibration_eta_path
            ? load_pool(*rc.calibration_eta_path, sys.ny(), M, length,
                        "calibration noise")
            : rc.eta_model->sample(length, M, plan.calibration_eta, Role::noise);
    return propagate_output_errors(sys, w, eta);
}

ConfidenceRegion calibrate_region(const RunConfig& rc,
                                  const ErrorTrajectorySet& errors) {
    const SeedPlan plan = seed_plan(rc.seed);
    return calibrate(errors, SplitSpec{rc.m_fit, rc.m_cal, plan.split_shuffle},
                     rc.score, rc.level(), rc.pac_epsilon, rc.zero_mean,
                     rc.weights);
}

std::optional<Moments> baseline_moments(const RunConfig& rc,
                                        const ErrorTrajectorySet& errors) {
    if (rc.m_fit < errors.state_errors.dim() + 1) return std::nullopt;
    const SeedPlan plan = seed_plan(rc.seed);
    const SplitResult halves = split(
        errors.state_errors, SplitSpec{rc.m_fit, rc.m_cal, plan.split_shuffle});
    return fit_moments(halves.fit, rc.zero_mean);
}

TrajectoryDataset scenario_disturbances(const RunConfig& rc) {
    const SeedPlan plan = seed_plan(rc.seed);
    const Eigen::Index length = rc.region_horizon();
    if (rc.scenario_w_path)
        return load_pool(*rc.scenario_w_path, rc.A.rows(), rc.S, length,
                         "scenario disturbance");
    return rc.w_model.sample(length, rc.S, plan.scenario_w, Role::disturbance);
}

std::optional<TrajectoryDataset> scenario_noise(const RunConfig& rc) {
    if (rc.mode != FeedbackMode::output_feedback) return std::nullopt;
    const SeedPlan plan = seed_plan(rc.seed);
    const Eigen::Index length = rc.region_horizon();
    if (rc.scenario_eta_path)
        return load_pool(*rc.scenario_eta_path, rc.C.rows(), rc.S, length,
                         "scenario noise");
    return rc.eta_model->sample(length, rc.S, plan.scenario_eta, Role::noise);
}

SmpcConfig assemble_smpc(const RunConfig& rc, ConfidenceRegion region) {
    return SmpcConfig(build_system(rc), build_cost(rc), std::move(region),
                      *rc.X, *rc.U, build_terminal(rc), rc.mode, rc.N, rc.N_bar,
                      rc.S, rc.theta);
}

}  // namespace cpsmpc
