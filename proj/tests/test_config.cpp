#include "doctest.h"

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cpsmpc/config.hpp"
#include "cpsmpc/errors.hpp"
#include "cpsmpc/error_propagation.hpp"

using namespace cpsmpc;
using nlohmann::json;

namespace {

// small but complete experiment description; individual cases mutate copies
json base_config() {
    json j;
    j["seed"] = 7;
    j["output_dir"] = "cfg_out";
    j["system"] = {{"A", {{0.9, 0.1}, {0.0, 0.8}}},
                   {"B", {{0.0}, {0.1}}},
                   {"K", {{-0.4, -0.6}}},
                   {"C", {{1.0, 0.0}}},
                   {"D", {{0.0}}},
                   {"L", {{0.4}, {0.1}}}};
    j["cost"] = {{"Q", {{1.0, 0.0}, {0.0, 1.0}}},
                 {"R", {{0.5}}},
                 {"P_f", {{0.1, 0.0}, {0.0, 0.1}}}};
    j["constraints"] = {{"state", {{"box", {{-1.0, 1.0}, {-1.0, 1.0}}}}},
                        {"input", {{"box", {{-2.0, 2.0}}}}}};
    j["horizon"] = {{"N", 4}, {"N_bar", 8}, {"theta", 0.1}, {"scenarios", 2}};
    j["data"] = {{"disturbance",
                  {{"kind", "gaussian"},
                   {"covariance", {{1e-4, 0.0}, {0.0, 1e-4}}}}},
                 {"noise", {{"kind", "gaussian"}, {"covariance", {{1e-5}}}}},
                 {"m_fit", 30},
                 {"m_cal", 59}};
    j["calibration"] = {{"score", "mahalanobis"}, {"zero_mean", true}};
    j["evaluation"] = {{"n_test", 5},
                       {"policy_rollouts", 3},
                       {"region_samples", 8},
                       {"tightness", {{"repetitions", 3}, {"n_fresh", 40}}}};
    j["initial_state"] = {0.2, -0.2};
    return j;
}

std::string write_config(const json& j, const std::string& name) {
    const std::string dir = "/tmp/cpsmpc_cfg_tests";
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/" + name;
    std::ofstream out(path);
    out << j.dump(2);
    return path;
}

// the load must fail and the message must point at the offending field
void expect_field_error(const json& j, const std::string& field) {
    const std::string path = write_config(j, "bad.json");
    try {
        load_run_config(path);
        FAIL("expected ConfigError for field ", field);
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find(field) != std::string::npos);
    }
}

}  // namespace

TEST_CASE("a full config round-trips into RunConfig") {
    const std::string path = write_config(base_config(), "full.json");
    const RunConfig rc = load_run_config(path);

    CHECK(rc.seed == 7);
    CHECK(rc.output_dir == "cfg_out");
    CHECK(rc.A.rows() == 2);
    CHECK(rc.A(0, 1) == doctest::Approx(0.1));
    CHECK(rc.B(1, 0) == doctest::Approx(0.1));
    CHECK(rc.K(0, 1) == doctest::Approx(-0.6));
    CHECK(rc.C.rows() == 1);
    CHECK(rc.L(0, 0) == doctest::Approx(0.4));
    CHECK(rc.Q.isApprox(Eigen::MatrixXd::Identity(2, 2)));
    CHECK(rc.R(0, 0) == doctest::Approx(0.5));
    CHECK(rc.P_f(1, 1) == doctest::Approx(0.1));
    REQUIRE(rc.X.has_value());
    REQUIRE(rc.U.has_value());
    CHECK(rc.X->dim() == 2);
    CHECK(rc.U->dim() == 1);
    CHECK(rc.X->contains(Eigen::Vector2d(0.99, -0.99)));
    CHECK(!rc.X->contains(Eigen::Vector2d(1.01, 0.0)));
    CHECK(rc.terminal_kind == "origin");
    CHECK(rc.N == 4);
    CHECK(rc.N_bar == 8);
    CHECK(rc.S == 2);
    CHECK(rc.theta == doctest::Approx(0.1));
    CHECK(rc.level() == doctest::Approx(0.9));
    CHECK(rc.region_horizon() == 12);
    CHECK(rc.m_fit == 30);
    CHECK(rc.m_cal == 59);
    CHECK(rc.eta_model.has_value());
    CHECK(rc.score == ScoreKind::mahalanobis);
    CHECK(rc.zero_mean);
    CHECK(!rc.pac_epsilon.has_value());
    CHECK(rc.n_test == 5);
    CHECK(rc.policy_rollouts == 3);
    CHECK(rc.region_samples == 8);
    CHECK(rc.tightness.repetitions == 3);
    CHECK(rc.tightness.n_fresh == 40);
    CHECK(rc.x0.isApprox(Eigen::Vector2d(0.2, -0.2)));
    CHECK(rc.mode == FeedbackMode::state_feedback);
}

TEST_CASE("omitted optional fields take their documented defaults") {
    json j = base_config();
    j["system"].erase("C");
    j["system"].erase("D");
    j["system"].erase("L");
    j["cost"].erase("P_f");
    j["horizon"].erase("scenarios");
    j["data"].erase("m_fit");
    j["data"].erase("noise");
    j.erase("calibration");
    j.erase("evaluation");
    j.erase("output_dir");
    const RunConfig rc = load_run_config(write_config(j, "defaults.json"));

    CHECK(rc.C.isApprox(Eigen::MatrixXd::Identity(2, 2)));
    CHECK(rc.D.isApprox(Eigen::MatrixXd::Zero(2, 1)));
    CHECK(rc.L.isApprox(Eigen::MatrixXd::Zero(2, 2)));
    CHECK(rc.P_f.isApprox(Eigen::MatrixXd::Zero(2, 2)));
    CHECK(rc.S == 1);
    CHECK(rc.m_fit == 0);
    CHECK(!rc.eta_model.has_value());
    CHECK(rc.score == ScoreKind::mahalanobis);
    CHECK(!rc.zero_mean);
    CHECK(rc.n_test == 1000);
    CHECK(rc.policy_rollouts == 200);
    CHECK(rc.region_samples == 64);
    CHECK(rc.tightness.repetitions == 50);
    CHECK(rc.tightness.n_fresh == 1000);
    CHECK(rc.output_dir == "out");
    CHECK(rc.mode == FeedbackMode::state_feedback);
}

TEST_CASE("missing required fields raise ConfigError naming the field") {
    for (const char* key : {"seed", "system", "cost", "constraints", "horizon",
                            "data", "initial_state"}) {
        json j = base_config();
        j.erase(key);
        expect_field_error(j, key);
    }
    const std::vector<std::pair<std::string, std::string>> nested = {
        {"system", "A"},       {"system", "B"},     {"system", "K"},
        {"cost", "Q"},         {"cost", "R"},       {"constraints", "state"},
        {"constraints", "input"}, {"horizon", "N"}, {"horizon", "N_bar"},
        {"horizon", "theta"},  {"data", "disturbance"}, {"data", "m_cal"}};
    for (const auto& [parent, key] : nested) {
        json j = base_config();
        j[parent].erase(key);
        expect_field_error(j, parent + "." + key);
    }
}

TEST_CASE("dimension and range violations name the offending field") {
    {
        json j = base_config();
        j["system"]["A"] = {{0.9, 0.1, 0.0}, {0.0, 0.8, 0.0}};
        expect_field_error(j, "system.A");
    }
    {
        json j = base_config();
        j["system"]["B"] = {{0.0}};
        expect_field_error(j, "system.B");
    }
    {
        json j = base_config();
        j["system"]["K"] = {{-0.4}};
        expect_field_error(j, "system.K");
    }
    {
        json j = base_config();
        j["cost"]["Q"] = {{1.0}};
        expect_field_error(j, "cost.Q");
    }
    {
        json j = base_config();
        j["initial_state"] = {0.2, -0.2, 0.0};
        expect_field_error(j, "initial_state");
    }
    {
        json j = base_config();
        j["data"]["noise"]["covariance"] = {{1e-5, 0.0}, {0.0, 1e-5}};
        expect_field_error(j, "data.noise.covariance");
    }
    {
        json j = base_config();
        j["horizon"]["theta"] = 0.0;
        expect_field_error(j, "horizon.theta");
        j["horizon"]["theta"] = 1.0;
        expect_field_error(j, "horizon.theta");
    }
    {
        json j = base_config();
        j["horizon"]["N"] = 0;
        expect_field_error(j, "horizon.N");
    }
    {
        json j = base_config();
        j["horizon"]["N_bar"] = 3;  // below N = 4
        expect_field_error(j, "horizon.N_bar");
    }
    {
        json j = base_config();
        j["horizon"]["scenarios"] = 0;
        expect_field_error(j, "horizon.scenarios");
    }
    {
        json j = base_config();
        j["data"]["m_cal"] = 0;
        expect_field_error(j, "data.m_cal");
    }
    {
        json j = base_config();
        j["evaluation"]["tightness"]["repetitions"] = 1;
        expect_field_error(j, "evaluation.tightness.repetitions");
    }
    {
        json j = base_config();
        j["calibration"]["pac_epsilon"] = 1.0;
        expect_field_error(j, "calibration.pac_epsilon");
    }
    {
        json j = base_config();
        j["constraints"]["state"]["box"] = {{1.0, -1.0}, {-1.0, 1.0}};
        expect_field_error(j, "constraints.state.box");
    }
    {
        json j = base_config();
        j["constraints"]["terminal"] = {{"kind", "ball"}};
        expect_field_error(j, "constraints.terminal.kind");
    }
    {
        json j = base_config();
        j["constraints"]["terminal"] = {
            {"kind", "polytope"},
            {"box", {{-0.1, 0.1}, {-0.1, 0.1}}}};
        expect_field_error(j, "constraints.terminal.K_f");
    }
    {
        json j = base_config();
        j["mode"] = "diagonal";
        expect_field_error(j, "mode");
    }
}

TEST_CASE("unreadable or malformed files raise ConfigError") {
    CHECK_THROWS_AS(load_run_config("/tmp/cpsmpc_cfg_tests/absent.json"),
                    ConfigError);
    const std::string path = "/tmp/cpsmpc_cfg_tests/broken.json";
    std::filesystem::create_directories("/tmp/cpsmpc_cfg_tests");
    std::ofstream(path) << "{ not json";
    CHECK_THROWS_AS(load_run_config(path), ConfigError);
}

TEST_CASE("output feedback requires a noise model") {
    json j = base_config();
    j["mode"] = "output_feedback";
    j["data"].erase("noise");
    expect_field_error(j, "data.noise");

    j = base_config();
    j["mode"] = "output_feedback";
    const RunConfig rc = load_run_config(write_config(j, "output.json"));
    CHECK(rc.mode == FeedbackMode::output_feedback);
    const auto eta = scenario_noise(rc);
    REQUIRE(eta.has_value());
    CHECK(eta->count() == rc.S);
    CHECK(eta->dim() == 1);
    CHECK(eta->length() == rc.region_horizon());

    const RunConfig state_rc =
        load_run_config(write_config(base_config(), "state.json"));
    CHECK(!scenario_noise(state_rc).has_value());
}

TEST_CASE("weighted score demands one weight per step") {
    json j = base_config();
    j["calibration"]["score"] = "weighted_max_norm";
    j["calibration"]["weights"] = {1.0, 1.0, 1.0, 1.0, 1.0};
    expect_field_error(j, "calibration.weights");

    j["calibration"]["weights"] = std::vector<double>(12, 1.0);
    const RunConfig rc = load_run_config(write_config(j, "weighted.json"));
    CHECK(rc.score == ScoreKind::weighted_max_norm);
    CHECK(rc.weights.size() == 12);

    const LtiSystem sys = build_system(rc);
    const ConfidenceRegion region =
        calibrate_region(rc, calibration_errors(rc, sys));
    CHECK(region.score.kind == ScoreKind::weighted_max_norm);
    CHECK(region.qhat > 0.0);
    CHECK(std::isfinite(region.qhat));
}

TEST_CASE("dataset path overrides replace the generative model") {
    const RunConfig rc =
        load_run_config(write_config(base_config(), "full.json"));
    const LtiSystem sys = build_system(rc);

    const std::string pool_path = "/tmp/cpsmpc_cfg_tests/pool.csv";
    const TrajectoryDataset pool = generate_gaussian(
        2, 12, 89, 1e-4 * Eigen::Matrix2d::Identity(), Eigen::Vector2d::Zero(),
        99, Role::disturbance);
    save_dataset(pool, pool_path);

    json j = base_config();
    j["data"]["calibration_disturbances"] = pool_path;
    const RunConfig over =
        load_run_config(write_config(j, "override.json"));
    const ErrorTrajectorySet errors = calibration_errors(over, sys);
    const ErrorTrajectorySet expected = propagate_state_errors(sys, pool);
    REQUIRE(errors.state_errors.count() == 89);
    CHECK((errors.state_errors.trajectory(5) -
           expected.state_errors.trajectory(5))
              .cwiseAbs()
              .maxCoeff() == 0.0);

    SUBCASE("missing file") {
        j["data"]["calibration_disturbances"] = "/tmp/cpsmpc_cfg_tests/no.csv";
        const RunConfig bad = load_run_config(write_config(j, "miss.json"));
        CHECK_THROWS_AS(calibration_errors(bad, sys), DataError);
    }
    SUBCASE("wrong dimension") {
        const TrajectoryDataset flat = generate_gaussian(
            1, 12, 89, Eigen::MatrixXd::Identity(1, 1),
            Eigen::VectorXd::Zero(1), 99, Role::disturbance);
        save_dataset(flat, "/tmp/cpsmpc_cfg_tests/flat.csv");
        j["data"]["calibration_disturbances"] = "/tmp/cpsmpc_cfg_tests/flat.csv";
        const RunConfig bad = load_run_config(write_config(j, "flat.json"));
        CHECK_THROWS_AS(calibration_errors(bad, sys), DataError);
    }
    SUBCASE("too few trajectories") {
        const TrajectoryDataset small = generate_gaussian(
            2, 12, 10, 1e-4 * Eigen::Matrix2d::Identity(),
            Eigen::Vector2d::Zero(), 99, Role::disturbance);
        save_dataset(small, "/tmp/cpsmpc_cfg_tests/small.csv");
        j["data"]["calibration_disturbances"] = "/tmp/cpsmpc_cfg_tests/small.csv";
        const RunConfig bad = load_run_config(write_config(j, "small.json"));
        CHECK_THROWS_AS(calibration_errors(bad, sys), DataError);
    }
}

TEST_CASE("seed plan is deterministic with pairwise distinct streams") {
    const SeedPlan a = seed_plan(7);
    const SeedPlan b = seed_plan(7);
    CHECK(a.calibration_w == b.calibration_w);
    CHECK(a.split_shuffle == b.split_shuffle);
    CHECK(a.tightness == b.tightness);

    const std::vector<std::uint64_t> streams = {
        a.calibration_w, a.calibration_eta, a.scenario_w, a.scenario_eta,
        a.split_shuffle, a.evaluation,      a.regions,    a.policies,
        a.tightness};
    for (std::size_t i = 0; i < streams.size(); ++i)
        for (std::size_t k = i + 1; k < streams.size(); ++k)
            CHECK(streams[i] != streams[k]);

    CHECK(seed_plan(8).evaluation != a.evaluation);

    const RunConfig rc =
        load_run_config(write_config(base_config(), "full.json"));
    const TrajectoryDataset s1 = scenario_disturbances(rc);
    const TrajectoryDataset s2 = scenario_disturbances(rc);
    CHECK(s1.count() == rc.S);
    CHECK(s1.length() == rc.region_horizon());
    CHECK((s1.trajectory(0) - s2.trajectory(0)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("builders surface invalid systems and costs as ConfigError") {
    json j = base_config();
    j["system"]["K"] = {{4.0, 0.0}};  // destabilizes A + BK
    const RunConfig unstable = load_run_config(write_config(j, "unstable.json"));
    try {
        build_system(unstable);
        FAIL("expected ConfigError for an unstable closed loop");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("Schur") != std::string::npos);
    }

    j = base_config();
    j["cost"]["R"] = {{0.0}};
    const RunConfig flat = load_run_config(write_config(j, "flatcost.json"));
    CHECK_THROWS_AS(build_cost(flat), ConfigError);
}

TEST_CASE("assembled controller configuration is tightened and consistent") {
    const RunConfig rc =
        load_run_config(write_config(base_config(), "full.json"));
    const LtiSystem sys = build_system(rc);
    const ErrorTrajectorySet errors = calibration_errors(rc, sys);

    const ConfidenceRegion region = calibrate_region(rc, errors);
    CHECK(region.level == doctest::Approx(0.9));
    CHECK(region.M_cal == 59);
    CHECK(region.qhat > 0.0);

    const SmpcConfig cfg = assemble_smpc(rc, region);
    CHECK(cfg.N == rc.N);
    CHECK(cfg.N_bar == rc.N_bar);
    CHECK(cfg.Z.size() == static_cast<std::size_t>(rc.region_horizon()));
    CHECK(cfg.V.size() == static_cast<std::size_t>(rc.region_horizon()));
    // t = 0 keeps the raw sets; later sets lose exactly the support margin
    CHECK(cfg.state_set(0).offsets().isApprox(rc.X->offsets()));
    CHECK(cfg.input_set(0).offsets().isApprox(rc.U->offsets()));
    const Eigen::VectorXd z1 = cfg.state_set(1).offsets();
    const Eigen::VectorXd z2 = cfg.state_set(2).offsets();
    CHECK((z1.array() < rc.X->offsets().array()).all());
    CHECK((z2.array() <= z1.array() + 1e-12).all());
    CHECK((cfg.input_set(1).offsets().array() < rc.U->offsets().array()).all());
    // horizon intersection is the tightest of the per-step sets
    const Eigen::VectorXd zinf = cfg.Z_inf.offsets();
    for (long t = 1; t <= rc.region_horizon(); ++t)
        CHECK((zinf.array() <= cfg.state_set(t).offsets().array() + 1e-12)
                  .all());

    SUBCASE("PAC tightening raises the effective level") {
        json j = base_config();
        j["calibration"]["pac_epsilon"] = 0.5;
        const RunConfig pac_rc = load_run_config(write_config(j, "pac.json"));
        const ConfidenceRegion pac_region =
            calibrate_region(pac_rc, calibration_errors(pac_rc, sys));
        REQUIRE(pac_region.pac.has_value());
        CHECK(pac_region.pac->epsilon == doctest::Approx(0.5));
        CHECK(pac_region.pac->tightened_theta < rc.theta);
        // the nominal target is kept; tightening only moves the quantile
        CHECK(pac_region.level == doctest::Approx(region.level));
        CHECK(pac_region.qhat >= region.qhat);
    }

    SUBCASE("fit half too small for baseline moments") {
        CHECK(baseline_moments(rc, errors).has_value());
        json j = base_config();
        j["data"]["m_fit"] = 0;
        j["data"]["m_cal"] = 89;
        const RunConfig no_fit = load_run_config(write_config(j, "nofit.json"));
        const ErrorTrajectorySet e2 = calibration_errors(no_fit, sys);
        CHECK(!baseline_moments(no_fit, e2).has_value());
    }
}
