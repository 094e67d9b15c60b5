// Python bindings for the main operations: data generation, error
// propagation, conformal calibration, set tightening, and the config-driven
// evaluation pipeline.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpsmpc/config.hpp"
#include "cpsmpc/conformal.hpp"
#include "cpsmpc/errors.hpp"
#include "cpsmpc/error_propagation.hpp"
#include "cpsmpc/evaluation.hpp"
#include "cpsmpc/geometry.hpp"
#include "cpsmpc/lti_system.hpp"
#include "cpsmpc/smpc.hpp"
#include "cpsmpc/trajectory_data.hpp"

namespace py = pybind11;

namespace {

cpsmpc::RunConfig load_overridden(const std::string& path,
                                  const std::optional<std::string>& mode,
                                  const std::optional<std::uint64_t>& seed) {
    cpsmpc::RunConfig rc = cpsmpc::load_run_config(path);
    if (mode) {
        rc.mode = cpsmpc::mode_from_name(*mode);
        if (rc.mode == cpsmpc::FeedbackMode::output_feedback && !rc.eta_model)
            throw cpsmpc::ConfigError(
                "output_feedback requires a data.noise model in the config");
    }
    if (seed) rc.seed = *seed;
    return rc;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "distribution-free stochastic MPC: conformal calibration, "
              "exact constraint tightening, closed-loop evaluation";

    py::register_exception<cpsmpc::ConfigError>(m, "ConfigError");
    py::register_exception<cpsmpc::DataError>(m, "DataError");
    py::register_exception<cpsmpc::CalibrationError>(m, "CalibrationError");
    py::register_exception<cpsmpc::InitialInfeasibleError>(m, "InitialInfeasibleError");

    // --- trajectory data -----------------------------------------------------

    py::class_<cpsmpc::TrajectoryDataset>(m, "TrajectoryDataset")
        .def_property_readonly("count", &cpsmpc::TrajectoryDataset::count)
        .def_property_readonly("length", &cpsmpc::TrajectoryDataset::length)
        .def_property_readonly("dim", &cpsmpc::TrajectoryDataset::dim)
        .def("trajectory",
             [](const cpsmpc::TrajectoryDataset& ds, Eigen::Index k) {
                 return ds.trajectory(k);
             },
             py::arg("k"), "n x T matrix of trajectory k (0-based)")
        .def("value", &cpsmpc::TrajectoryDataset::value, py::arg("k"),
             py::arg("t"));

    m.def(
        "generate_gaussian",
        [](Eigen::Index dim, Eigen::Index length, Eigen::Index count,
           const Eigen::MatrixXd& covariance, std::uint64_t seed,
           const std::optional<Eigen::VectorXd>& mean) {
            Eigen::VectorXd mu = mean ? *mean : Eigen::VectorXd::Zero(dim);
            return cpsmpc::generate_gaussian(dim, length, count, covariance, mu,
                                             seed);
        },
        py::arg("dim"), py::arg("length"), py::arg("count"),
        py::arg("covariance"), py::arg("seed"), py::arg("mean") = std::nullopt,
        "count trajectories of length i.i.d. N(mean, covariance) samples");
    m.def(
        "generate_uniform",
        [](Eigen::Index dim, Eigen::Index length, Eigen::Index count,
           const Eigen::VectorXd& half_widths, std::uint64_t seed) {
            return cpsmpc::generate_uniform(dim, length, count, half_widths,
                                            seed);
        },
        py::arg("dim"), py::arg("length"), py::arg("count"),
        py::arg("half_widths"), py::arg("seed"));
    m.def("save_dataset", &cpsmpc::save_dataset, py::arg("dataset"),
          py::arg("path"));
    m.def("load_dataset", &cpsmpc::load_dataset, py::arg("path"),
          py::arg("expected_dim") = -1, py::arg("expected_length") = -1);

    // --- system and error propagation ---------------------------------------

    py::class_<cpsmpc::LtiSystem>(m, "LtiSystem")
        .def(py::init<Eigen::MatrixXd, Eigen::MatrixXd, Eigen::MatrixXd,
                      Eigen::MatrixXd, Eigen::MatrixXd, Eigen::MatrixXd,
                      double>(),
             py::arg("A"), py::arg("B"), py::arg("C"), py::arg("D"),
             py::arg("K"), py::arg("L"), py::arg("stability_margin") = 1e-9)
        .def_static("state_feedback", &cpsmpc::LtiSystem::state_feedback,
                    py::arg("A"), py::arg("B"), py::arg("K"),
                    py::arg("stability_margin") = 1e-9)
        .def_property_readonly("nx", &cpsmpc::LtiSystem::nx)
        .def_property_readonly("nu", &cpsmpc::LtiSystem::nu)
        .def_property_readonly("ny", &cpsmpc::LtiSystem::ny)
        .def_property_readonly("A", &cpsmpc::LtiSystem::A)
        .def_property_readonly("B", &cpsmpc::LtiSystem::B)
        .def_property_readonly("K", &cpsmpc::LtiSystem::K)
        .def_property_readonly("AK", &cpsmpc::LtiSystem::AK)
        .def_property_readonly("AL", &cpsmpc::LtiSystem::AL)
        .def("step_plant", &cpsmpc::LtiSystem::step_plant, py::arg("x"),
             py::arg("u"), py::arg("w"))
        .def("step_nominal", &cpsmpc::LtiSystem::step_nominal, py::arg("z"),
             py::arg("v"));

    py::class_<cpsmpc::ErrorTrajectorySet>(m, "ErrorTrajectorySet")
        .def_readonly("state_errors", &cpsmpc::ErrorTrajectorySet::state_errors)
        .def_readonly("estimation_errors",
                      &cpsmpc::ErrorTrajectorySet::estimation_errors)
        .def_readonly("nominal_errors",
                      &cpsmpc::ErrorTrajectorySet::nominal_errors)
        .def_readonly("horizon", &cpsmpc::ErrorTrajectorySet::horizon)
        .def_property_readonly("count", &cpsmpc::ErrorTrajectorySet::count)
        .def_property_readonly("output_feedback",
                               &cpsmpc::ErrorTrajectorySet::output_feedback);

    m.def("propagate_state_errors", &cpsmpc::propagate_state_errors,
          py::arg("system"), py::arg("disturbances"));
    m.def("propagate_output_errors", &cpsmpc::propagate_output_errors,
          py::arg("system"), py::arg("disturbances"), py::arg("noises"));

    // --- geometry -------------------------------------------------------------

    py::class_<cpsmpc::Ellipsoid>(m, "Ellipsoid")
        .def(py::init<Eigen::VectorXd, Eigen::MatrixXd, double>(),
             py::arg("center"), py::arg("shape"), py::arg("radius"))
        .def_readonly("center", &cpsmpc::Ellipsoid::center)
        .def_readonly("shape", &cpsmpc::Ellipsoid::shape)
        .def_readonly("radius", &cpsmpc::Ellipsoid::radius)
        .def("contains", &cpsmpc::Ellipsoid::contains, py::arg("x"),
             py::arg("tol") = 1e-9)
        .def("support_point", &cpsmpc::Ellipsoid::support_point, py::arg("a"));

    py::class_<cpsmpc::HalfspacePolytope>(m, "HalfspacePolytope")
        .def(py::init<Eigen::MatrixXd, Eigen::VectorXd, std::string>(),
             py::arg("normals"), py::arg("offsets"), py::arg("name") = "")
        .def_static("box", &cpsmpc::HalfspacePolytope::box, py::arg("lower"),
                    py::arg("upper"), py::arg("name") = "")
        .def_property_readonly("normals", &cpsmpc::HalfspacePolytope::normals)
        .def_property_readonly("offsets", &cpsmpc::HalfspacePolytope::offsets)
        .def_property_readonly("name", &cpsmpc::HalfspacePolytope::name)
        .def("violation", &cpsmpc::HalfspacePolytope::violation, py::arg("x"))
        .def("contains", &cpsmpc::HalfspacePolytope::contains, py::arg("x"),
             py::arg("tol") = 1e-9);

    py::class_<cpsmpc::TightenResult>(m, "TightenResult")
        .def_readonly("set", &cpsmpc::TightenResult::set)
        .def_readonly("empty", &cpsmpc::TightenResult::empty)
        .def_readonly("chebyshev_radius",
                      &cpsmpc::TightenResult::chebyshev_radius);

    m.def("support", &cpsmpc::support, py::arg("ellipsoid"), py::arg("a"),
          "support function h_E(a) = a'mu + r sqrt(a'Sigma a)");
    m.def("tighten", &cpsmpc::tighten, py::arg("polytope"),
          py::arg("ellipsoid"), "exact Pontryagin difference P (-) E");
    m.def("tighten_inputs", &cpsmpc::tighten_inputs, py::arg("polytope"),
          py::arg("K"), py::arg("ellipsoid"), "U (-) K E");

    // --- conformal calibration -------------------------------------------------

    py::class_<cpsmpc::ConfidenceRegion>(m, "ConfidenceRegion")
        .def_readonly("qhat", &cpsmpc::ConfidenceRegion::qhat)
        .def_readonly("level", &cpsmpc::ConfidenceRegion::level)
        .def_readonly("M_fit", &cpsmpc::ConfidenceRegion::M_fit)
        .def_readonly("M_cal", &cpsmpc::ConfidenceRegion::M_cal)
        .def_property_readonly(
            "score_kind",
            [](const cpsmpc::ConfidenceRegion& r) {
                return cpsmpc::score_kind_name(r.score.kind);
            })
        .def_property_readonly(
            "horizon",
            [](const cpsmpc::ConfidenceRegion& r) { return r.score.horizon; })
        .def("score",
             [](const cpsmpc::ConfidenceRegion& r, const Eigen::MatrixXd& E) {
                 return cpsmpc::score_trajectory(r.score, E);
             },
             py::arg("E"), "nonconformity score of an n x T error trajectory")
        .def("contains", &cpsmpc::ConfidenceRegion::contains, py::arg("E"),
             py::arg("tol") = 0.0)
        .def("project",
             [](const cpsmpc::ConfidenceRegion& r, Eigen::Index t) {
                 return cpsmpc::project(r, t);
             },
             py::arg("t"), "marginal ellipsoid at time step t (1-based)");

    m.def(
        "calibrate",
        [](const cpsmpc::TrajectoryDataset& errors, Eigen::Index n_fit,
           Eigen::Index n_cal, std::uint64_t shuffle_seed,
           const std::string& score, double level,
           const std::optional<double>& pac_epsilon, bool zero_mean,
           const std::optional<Eigen::VectorXd>& weights) {
            cpsmpc::SplitSpec spec{n_fit, n_cal, shuffle_seed};
            return cpsmpc::calibrate(errors, spec,
                                     cpsmpc::score_kind_from_name(score), level,
                                     pac_epsilon, zero_mean,
                                     weights ? *weights : Eigen::VectorXd());
        },
        py::arg("errors"), py::arg("n_fit"), py::arg("n_cal"),
        py::arg("shuffle_seed"), py::arg("score") = "mahalanobis",
        py::arg("level") = 0.9, py::arg("pac_epsilon") = std::nullopt,
        py::arg("zero_mean") = false, py::arg("weights") = std::nullopt,
        "split / fit / conformal quantile on a set of error trajectories");

    m.def("conformal_quantile", &cpsmpc::conformal_quantile, py::arg("scores"),
          py::arg("level"),
          "k-th smallest score with k = ceil((M+1) level)");
    m.def("pac_tighten", &cpsmpc::pac_tighten, py::arg("theta"),
          py::arg("epsilon"), py::arg("M"));
    m.def("union_bound_levels", &cpsmpc::union_bound_levels, py::arg("level"),
          py::arg("horizon"));
    m.def("chi2_quantile", &cpsmpc::chi2_quantile, py::arg("dof"),
          py::arg("p"));
    m.def("save_region", &cpsmpc::save_region, py::arg("region"),
          py::arg("path"));
    m.def("load_region", &cpsmpc::load_region, py::arg("path"));

    // --- config-driven pipeline --------------------------------------------------

    m.def(
        "calibrate_config",
        [](const std::string& path, const std::optional<std::string>& mode,
           const std::optional<std::uint64_t>& seed) {
            cpsmpc::RunConfig rc = load_overridden(path, mode, seed);
            cpsmpc::LtiSystem sys = cpsmpc::build_system(rc);
            cpsmpc::ErrorTrajectorySet errors = cpsmpc::calibration_errors(rc, sys);
            return cpsmpc::calibrate_region(rc, errors);
        },
        py::arg("path"), py::arg("mode") = std::nullopt,
        py::arg("seed") = std::nullopt,
        py::call_guard<py::gil_scoped_release>(),
        "calibrate the confidence region described by a config file");

    m.def(
        "evaluate_config",
        [](const std::string& path, const std::optional<std::string>& mode,
           const std::optional<std::uint64_t>& seed,
           const std::optional<long>& n_test, bool baselines) {
            cpsmpc::RunConfig rc = load_overridden(path, mode, seed);
            if (n_test) rc.n_test = *n_test;
            cpsmpc::SeedPlan plan = cpsmpc::seed_plan(rc.seed);
            cpsmpc::LtiSystem sys = cpsmpc::build_system(rc);
            cpsmpc::ErrorTrajectorySet errors = cpsmpc::calibration_errors(rc, sys);
            cpsmpc::ConfidenceRegion region = cpsmpc::calibrate_region(rc, errors);
            cpsmpc::SmpcConfig cfg = cpsmpc::assemble_smpc(rc, region);
            cpsmpc::TrajectoryDataset scen_w = cpsmpc::scenario_disturbances(rc);
            std::optional<cpsmpc::TrajectoryDataset> scen_eta =
                cpsmpc::scenario_noise(rc);
            cpsmpc::Controller controller(cfg, scen_w, scen_eta);
            cpsmpc::MonteCarloResult mc = cpsmpc::run_monte_carlo(
                controller, rc.x0, rc.w_model, rc.eta_model, rc.n_test,
                plan.evaluation, false);
            cpsmpc::ReportBundle bundle;
            bundle.evaluation = mc.report;
            if (baselines) {
                std::vector<cpsmpc::BaselineRegion> list;
                list.push_back(
                    cpsmpc::conformal_marginals(region, rc.region_horizon()));
                std::optional<cpsmpc::Moments> moments = region.score.moments;
                if (!moments) moments = cpsmpc::baseline_moments(rc, errors);
                if (moments)
                    list.push_back(cpsmpc::chebyshev_region(*moments, rc.theta,
                                                            rc.region_horizon()));
                if (rc.mode == cpsmpc::FeedbackMode::state_feedback &&
                    rc.w_model.kind == cpsmpc::DisturbanceModel::Kind::gaussian)
                    list.push_back(cpsmpc::gaussian_truth_region(
                        rc.w_model.covariance, sys,
                        1.0 - rc.theta / static_cast<double>(rc.region_horizon()),
                        rc.region_horizon()));
                bundle.regions =
                    cpsmpc::compare_regions(list, plan.regions, rc.region_samples);
            }
            return cpsmpc::render_json(bundle);
        },
        py::arg("path"), py::arg("mode") = std::nullopt,
        py::arg("seed") = std::nullopt, py::arg("n_test") = std::nullopt,
        py::arg("baselines") = true,
        py::call_guard<py::gil_scoped_release>(),
        "run the Monte Carlo evaluation pipeline; returns the JSON report");
}
