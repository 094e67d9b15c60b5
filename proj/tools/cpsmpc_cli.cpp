// Command line front end: calibrate confidence regions, roll out the
// controller, and produce evaluation / comparison reports from a JSON
// experiment description. Exit codes: 0 ok, 1 internal, 2 config, 3 data,
// 4 calibration, 5 initial infeasibility.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cpsmpc/config.hpp"
#include "cpsmpc/conformal.hpp"
#include "cpsmpc/errors.hpp"
#include "cpsmpc/evaluation.hpp"
#include "cpsmpc/smpc.hpp"

namespace fs = std::filesystem;

namespace {

struct CliOptions {
    std::string config_path;
    std::string mode;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string out;
    bool zero_noise = false;
    bool no_baselines = false;
};

cpsmpc::RunConfig load_with_overrides(const CliOptions& opt) {
    cpsmpc::RunConfig rc = cpsmpc::load_run_config(opt.config_path);
    if (!opt.mode.empty()) {
        try {
            rc.mode = cpsmpc::mode_from_name(opt.mode);
        } catch (const std::invalid_argument& e) {
            throw cpsmpc::ConfigError(std::string("--mode: ") + e.what());
        }
        if (rc.mode == cpsmpc::FeedbackMode::output_feedback && !rc.eta_model)
            throw cpsmpc::ConfigError(
                "--mode output_feedback requires a data.noise model in the config");
    }
    if (opt.seed_given) rc.seed = opt.seed;
    if (!opt.out.empty()) rc.output_dir = opt.out;
    return rc;
}

void write_text_atomic(const fs::path& path, const std::string& content) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out)
            throw cpsmpc::DataError(cpsmpc::DataError::Kind::io,
                                    "cannot open '" + tmp.string() + "' for writing");
        out << content;
        if (!out)
            throw cpsmpc::DataError(cpsmpc::DataError::Kind::io,
                                    "write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

// the CSV writers open their own streams; route them through a tmp file so
// a failure never leaves a truncated artifact behind
template <typename Writer>
void write_file_atomic(const fs::path& path, Writer&& writer) {
    fs::path tmp = path;
    tmp += ".tmp";
    writer(tmp.string());
    fs::rename(tmp, path);
}

// run.log is the one place a timestamp may appear; all report artifacts
// stay byte-reproducible
void sidecar_log(const fs::path& dir, const std::string& line) {
    std::ofstream log(dir / "run.log", std::ios::app);
    if (!log) return;
    std::time_t now = std::time(nullptr);
    char stamp[32];
    if (std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ",
                      std::gmtime(&now)) == 0)
        stamp[0] = '\0';
    log << stamp << ' ' << line << '\n';
}

cpsmpc::DisturbanceModel zero_gaussian(Eigen::Index dim) {
    cpsmpc::DisturbanceModel m;
    m.kind = cpsmpc::DisturbanceModel::Kind::gaussian;
    m.covariance = Eigen::MatrixXd::Zero(dim, dim);
    return m;
}

long order_statistic_index(const cpsmpc::ConfidenceRegion& region) {
    double effective =
        region.pac ? 1.0 - region.pac->tightened_theta : region.level;
    long k = static_cast<long>(
        std::ceil((static_cast<double>(region.M_cal) + 1.0) * effective - 1e-9));
    return std::max<long>(k, 1);
}

// baselines shown next to the conformal region: mean-variance (Chebyshev +
// union bound) whenever second moments are available, and the exact Gaussian
// law at the matching per-step level when the disturbance model admits one
std::optional<cpsmpc::RegionComparison> build_region_section(
    const cpsmpc::RunConfig& rc, const cpsmpc::LtiSystem& sys,
    const cpsmpc::ErrorTrajectorySet& errors,
    const cpsmpc::ConfidenceRegion& region, std::uint64_t seed) {
    std::vector<cpsmpc::BaselineRegion> list;
    list.push_back(cpsmpc::conformal_marginals(region, rc.region_horizon()));
    std::optional<cpsmpc::Moments> moments = region.score.moments;
    if (!moments) moments = cpsmpc::baseline_moments(rc, errors);
    if (moments)
        list.push_back(
            cpsmpc::chebyshev_region(*moments, rc.theta, rc.region_horizon()));
    if (rc.mode == cpsmpc::FeedbackMode::state_feedback &&
        rc.w_model.kind == cpsmpc::DisturbanceModel::Kind::gaussian) {
        double per_step_level =
            1.0 - rc.theta / static_cast<double>(rc.region_horizon());
        list.push_back(cpsmpc::gaussian_truth_region(
            rc.w_model.covariance, sys, per_step_level, rc.region_horizon()));
    }
    return cpsmpc::compare_regions(list, seed, rc.region_samples);
}

int cmd_calibrate(const cpsmpc::RunConfig& rc) {
    cpsmpc::LtiSystem sys = cpsmpc::build_system(rc);
    cpsmpc::ErrorTrajectorySet errors = cpsmpc::calibration_errors(rc, sys);
    cpsmpc::ConfidenceRegion region = cpsmpc::calibrate_region(rc, errors);

    fs::path out_dir(rc.output_dir);
    fs::create_directories(out_dir);
    fs::path region_path = out_dir / "region.txt";
    write_file_atomic(region_path, [&](const std::string& p) {
        cpsmpc::save_region(region, p);
    });

    char buf[256];
    std::printf("calibrated confidence region\n");
    std::printf("  score              %s\n",
                cpsmpc::score_kind_name(region.score.kind).c_str());
    std::printf("  split              m_fit=%ld  m_cal=%ld\n", region.M_fit,
                region.M_cal);
    std::snprintf(buf, sizeof buf, "  level              %.6g  (joint over %ld steps)",
                  region.level, rc.region_horizon());
    std::printf("%s\n", buf);
    if (region.pac) {
        std::snprintf(buf, sizeof buf,
                      "  pac                epsilon=%.6g  tightened_theta=%.6g",
                      region.pac->epsilon, region.pac->tightened_theta);
        std::printf("%s\n", buf);
    }
    std::printf("  order statistic    k=%ld of %ld\n", order_statistic_index(region),
                region.M_cal);
    std::snprintf(buf, sizeof buf, "  qhat               %.17g", region.qhat);
    std::printf("%s\n", buf);
    std::printf("  region file        %s\n", region_path.string().c_str());

    sidecar_log(out_dir, "calibrate ok");
    return 0;
}

int cmd_run(const cpsmpc::RunConfig& rc, bool zero_noise) {
    cpsmpc::SeedPlan plan = cpsmpc::seed_plan(rc.seed);
    cpsmpc::LtiSystem sys = cpsmpc::build_system(rc);
    cpsmpc::ErrorTrajectorySet errors = cpsmpc::calibration_errors(rc, sys);
    cpsmpc::ConfidenceRegion region = cpsmpc::calibrate_region(rc, errors);
    cpsmpc::SmpcConfig cfg = cpsmpc::assemble_smpc(rc, region);
    cpsmpc::TrajectoryDataset scen_w = cpsmpc::scenario_disturbances(rc);
    std::optional<cpsmpc::TrajectoryDataset> scen_eta = cpsmpc::scenario_noise(rc);
    cpsmpc::Controller controller(cfg, scen_w, scen_eta);

    // --zero-noise silences only the realized disturbances; calibration and
    // scenario data stay untouched so the plan itself is unchanged
    cpsmpc::DisturbanceModel w_run =
        zero_noise ? zero_gaussian(sys.nx()) : rc.w_model;
    std::optional<cpsmpc::DisturbanceModel> eta_run = rc.eta_model;
    if (zero_noise && rc.mode == cpsmpc::FeedbackMode::output_feedback)
        eta_run = zero_gaussian(sys.ny());

    cpsmpc::MonteCarloResult mc = cpsmpc::run_monte_carlo(
        controller, rc.x0, w_run, eta_run, 1, plan.evaluation, true);
    const cpsmpc::ClosedLoopRecord& rec = mc.records.front();

    fs::path out_dir(rc.output_dir);
    fs::create_directories(out_dir);
    write_file_atomic(out_dir / "trajectory.csv", [&](const std::string& p) {
        cpsmpc::write_rollout_csv(rec, p);
    });
    write_file_atomic(out_dir / "diagnostics.csv", [&](const std::string& p) {
        cpsmpc::write_diagnostics_csv(rec.steps, p);
    });
    write_file_atomic(out_dir / "scores.csv", [&](const std::string& p) {
        cpsmpc::write_score_series(rec, region.qhat, p);
    });
    if (sys.nx() == 2) {
        cpsmpc::BaselineRegion marginals =
            cpsmpc::conformal_marginals(region, rc.region_horizon());
        write_file_atomic(out_dir / "regions.csv", [&](const std::string& p) {
            cpsmpc::write_ellipse_polylines(marginals, p);
        });
    }

    char buf[256];
    std::printf("closed-loop rollout (%s)\n", cpsmpc::mode_name(rc.mode).c_str());
    std::printf("  steps              %ld\n", static_cast<long>(rec.steps.size()));
    std::snprintf(buf, sizeof buf, "  max score          %.6g  (qhat %.6g)",
                  rec.scores.size() > 0 ? rec.scores.maxCoeff() : 0.0, region.qhat);
    std::printf("%s\n", buf);
    std::printf("  score within qhat  %s\n", rec.score_ok ? "yes" : "no");
    std::printf("  state constraints  %s\n", rec.state_ok ? "satisfied" : "violated");
    std::printf("  input constraints  %s\n", rec.input_ok ? "satisfied" : "violated");
    std::snprintf(buf, sizeof buf, "  total cost         %.6g", rec.total_cost);
    std::printf("%s\n", buf);
    std::printf("  fallback steps     %ld\n", mc.report.fallback_steps);
    std::printf("  outputs            %s\n", out_dir.string().c_str());

    sidecar_log(out_dir, "run ok");
    return 0;
}

int cmd_evaluate(const cpsmpc::RunConfig& rc, bool no_baselines) {
    cpsmpc::SeedPlan plan = cpsmpc::seed_plan(rc.seed);
    cpsmpc::LtiSystem sys = cpsmpc::build_system(rc);
    cpsmpc::ErrorTrajectorySet errors = cpsmpc::calibration_errors(rc, sys);
    cpsmpc::ConfidenceRegion region = cpsmpc::calibrate_region(rc, errors);
    cpsmpc::SmpcConfig cfg = cpsmpc::assemble_smpc(rc, region);
    cpsmpc::TrajectoryDataset scen_w = cpsmpc::scenario_disturbances(rc);
    std::optional<cpsmpc::TrajectoryDataset> scen_eta = cpsmpc::scenario_noise(rc);
    cpsmpc::Controller controller(cfg, scen_w, scen_eta);

    cpsmpc::MonteCarloResult mc =
        cpsmpc::run_monte_carlo(controller, rc.x0, rc.w_model, rc.eta_model,
                                rc.n_test, plan.evaluation, false);

    cpsmpc::ReportBundle bundle;
    bundle.evaluation = mc.report;
    if (!no_baselines)
        bundle.regions = build_region_section(rc, sys, errors, region, plan.regions);

    std::string text = cpsmpc::render_text(bundle);
    fs::path out_dir(rc.output_dir);
    fs::create_directories(out_dir);
    write_text_atomic(out_dir / "evaluation.json", cpsmpc::render_json(bundle));
    write_text_atomic(out_dir / "evaluation.txt", text);

    std::fputs(text.c_str(), stdout);
    std::printf("reports written to %s\n", out_dir.string().c_str());

    sidecar_log(out_dir, "evaluate ok");
    return 0;
}

int cmd_compare(const cpsmpc::RunConfig& rc, bool no_baselines) {
    cpsmpc::SeedPlan plan = cpsmpc::seed_plan(rc.seed);
    cpsmpc::LtiSystem sys = cpsmpc::build_system(rc);
    cpsmpc::ErrorTrajectorySet errors = cpsmpc::calibration_errors(rc, sys);
    cpsmpc::ConfidenceRegion region = cpsmpc::calibrate_region(rc, errors);

    cpsmpc::ReportBundle bundle;
    if (!no_baselines)
        bundle.regions = build_region_section(rc, sys, errors, region, plan.regions);

    // receding horizon vs open-loop tube policy: defined for state feedback,
    // where the rollout error equals the planning error exactly
    if (rc.mode == cpsmpc::FeedbackMode::state_feedback && rc.policy_rollouts >= 1) {
        cpsmpc::SmpcConfig cfg = cpsmpc::assemble_smpc(rc, region);
        cpsmpc::TrajectoryDataset scen_w = cpsmpc::scenario_disturbances(rc);
        bundle.policies = cpsmpc::compare_policies(
            cfg, scen_w, rc.x0, rc.w_model, rc.policy_rollouts, plan.policies);
    }

    // coverage tightness redraws calibration pools from the disturbance law,
    // so it needs the generative Gaussian model and a usable fit split
    if (rc.w_model.kind == cpsmpc::DisturbanceModel::Kind::gaussian &&
        rc.m_fit >= sys.nx() + 1) {
        bundle.tightness = cpsmpc::coverage_tightness_experiment(
            sys, rc.w_model.covariance, rc.m_fit, rc.m_cal, rc.tightness.n_fresh,
            rc.region_horizon(), rc.level(), rc.zero_mean,
            rc.tightness.repetitions, plan.tightness);
    }

    std::string text = cpsmpc::render_text(bundle);
    fs::path out_dir(rc.output_dir);
    fs::create_directories(out_dir);
    write_text_atomic(out_dir / "comparison.json", cpsmpc::render_json(bundle));
    write_text_atomic(out_dir / "comparison.txt", text);

    std::fputs(text.c_str(), stdout);
    std::printf("reports written to %s\n", out_dir.string().c_str());

    sidecar_log(out_dir, "compare ok");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"distribution-free stochastic MPC: conformal calibration, "
                 "constraint tightening, closed-loop evaluation"};
    app.require_subcommand(1);

    CliOptions opt;
    app.add_option("--config", opt.config_path,
                   "experiment description (JSON)")
        ->required();
    app.add_option("--mode", opt.mode,
                   "override feedback mode: state_feedback | output_feedback");
    app.add_option("--seed", opt.seed, "override the master seed");
    app.add_option("--out", opt.out, "override the output directory");

    CLI::App* c_cal = app.add_subcommand(
        "calibrate", "calibrate the confidence region and save it");
    c_cal->fallthrough();
    CLI::App* c_run = app.add_subcommand(
        "run", "single closed-loop rollout with CSV trajectory outputs");
    c_run->fallthrough();
    c_run->add_flag("--zero-noise", opt.zero_noise,
                    "silence realized disturbances and measurement noise");
    CLI::App* c_eval = app.add_subcommand(
        "evaluate", "Monte Carlo evaluation of the closed loop");
    c_eval->fallthrough();
    c_eval->add_flag("--no-baselines", opt.no_baselines,
                     "skip the baseline region comparison");
    CLI::App* c_cmp = app.add_subcommand(
        "compare", "baseline regions, policy costs, coverage tightness");
    c_cmp->fallthrough();
    c_cmp->add_flag("--no-baselines", opt.no_baselines,
                    "skip the baseline region comparison");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    opt.seed_given = app.count("--seed") > 0;

    try {
        cpsmpc::RunConfig rc = load_with_overrides(opt);
        if (app.got_subcommand(c_cal)) return cmd_calibrate(rc);
        if (app.got_subcommand(c_run)) return cmd_run(rc, opt.zero_noise);
        if (app.got_subcommand(c_eval)) return cmd_evaluate(rc, opt.no_baselines);
        return cmd_compare(rc, opt.no_baselines);
    } catch (const cpsmpc::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const cpsmpc::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const cpsmpc::CalibrationError& e) {
        std::cerr << "calibration error: " << e.what() << '\n';
        if (e.minimal_samples() > 0)
            std::cerr << "need at least M = " << e.minimal_samples()
                      << " calibration trajectories\n";
        return 4;
    } catch (const cpsmpc::InitialInfeasibleError& e) {
        std::cerr << "infeasible at t = 0: " << e.what() << '\n';
        if (!e.violated_sets().empty()) {
            std::cerr << "violated sets:";
            for (const std::string& name : e.violated_sets())
                std::cerr << ' ' << name;
            std::cerr << '\n';
        }
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
