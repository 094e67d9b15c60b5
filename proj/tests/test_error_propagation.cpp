#include "doctest.h"

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

#include "cpsmpc/error_propagation.hpp"
#include "cpsmpc/lti_system.hpp"
#include "cpsmpc/rng.hpp"
#include "cpsmpc/trajectory_data.hpp"

using namespace cpsmpc;

namespace {

TrajectoryDataset single_trajectory(Role role, const Eigen::MatrixXd& traj) {
    return TrajectoryDataset(role, std::vector<Eigen::MatrixXd>{traj});
}

LtiSystem scalar_system(double a, double l) {
    Eigen::MatrixXd A(1, 1), B(1, 1), C(1, 1), D(1, 1), K(1, 1), L(1, 1);
    A << a;
    B << 0.0;
    C << 1.0;
    D << 0.0;
    K << 0.0;
    L << l;
    return LtiSystem(A, B, C, D, K, L);
}

}  // namespace

TEST_CASE("state error recursion on the hand-iterated scalar example") {
    // A_K = 0.5, w = (1,1,1): e(1)=1, e(2)=1.5, e(3)=1.75
    LtiSystem sys = scalar_system(0.5, 0.0);
    Eigen::MatrixXd w(1, 3);
    w << 1.0, 1.0, 1.0;
    ErrorTrajectorySet errors =
        propagate_state_errors(sys, single_trajectory(Role::disturbance, w));
    CHECK(errors.horizon == 3);
    CHECK(errors.count() == 1);
    CHECK_FALSE(errors.output_feedback());
    const Eigen::MatrixXd& e = errors.state_errors.trajectory(0);
    CHECK(e(0, 0) == doctest::Approx(1.0));
    CHECK(e(0, 1) == doctest::Approx(1.5));
    CHECK(e(0, 2) == doctest::Approx(1.75));
}

TEST_CASE("zero forcing gives zero errors") {
    LtiSystem sys = scalar_system(0.5, 0.0);
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(1, 4);
    ErrorTrajectorySet errors =
        propagate_state_errors(sys, single_trajectory(Role::disturbance, w));
    CHECK(errors.state_errors.trajectory(0).isZero(0.0));
}

TEST_CASE("recursion equals the explicit matrix-power sum") {
    // e(t) = sum_{s<t} A_K^{t-1-s} w(s), brute-forced for random 2x2 systems
    Rng rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::MatrixXd AK(2, 2);
        for (int i = 0; i < 4; ++i) AK(i / 2, i % 2) = 0.4 * rng.uniform(-1, 1);
        // realize A_K via A = AK, B = 0, K = 0
        Eigen::MatrixXd B = Eigen::MatrixXd::Zero(2, 1);
        LtiSystem sys = LtiSystem::state_feedback(AK, B,
                                                  Eigen::MatrixXd::Zero(1, 2));
        const Eigen::Index T = 10;
        Eigen::MatrixXd w(2, T);
        for (Eigen::Index t = 0; t < T; ++t)
            for (int i = 0; i < 2; ++i) w(i, t) = rng.gauss();
        ErrorTrajectorySet errors = propagate_state_errors(
            sys, single_trajectory(Role::disturbance, w));
        const Eigen::MatrixXd& e = errors.state_errors.trajectory(0);
        for (Eigen::Index t = 1; t <= T; ++t) {
            Eigen::VectorXd expect = Eigen::VectorXd::Zero(2);
            Eigen::MatrixXd power = Eigen::MatrixXd::Identity(2, 2);
            for (Eigen::Index s = t - 1; s >= 0; --s) {
                expect += power * w.col(s);
                power = sys.AK() * power;
            }
            CHECK((e.col(t - 1) - expect).lpNorm<Eigen::Infinity>() <= 1e-12);
        }
    }
}

TEST_CASE("propagation requires a Schur closed loop") {
    // constructing an unstable A_K through the factory already throws, so
    // build the raw system with a stable K and check the propagator's own
    // guard via the observer loop instead
    Eigen::MatrixXd A(1, 1), B(1, 1), C(1, 1), D(1, 1), K(1, 1), L(1, 1);
    A << 0.5;
    B << 0.0;
    C << 1.0;
    D << 0.0;
    K << 0.0;
    L << 2.0;  // A_L = 0.5 - 2.0 = -1.5, unstable
    LtiSystem sys(A, B, C, D, K, L);
    CHECK_FALSE(sys.observer_validated());
    Eigen::MatrixXd w = Eigen::MatrixXd::Ones(1, 3);
    Eigen::MatrixXd eta = Eigen::MatrixXd::Zero(1, 3);
    CHECK_THROWS_AS(
        propagate_output_errors(sys, single_trajectory(Role::disturbance, w),
                                single_trajectory(Role::noise, eta)),
        std::invalid_argument);
}

TEST_CASE("coupled output-feedback recursion on the worked example") {
    // A=0.5, B=0 -> A_K=0.5; C=1, L=0.2 -> A_L=0.3
    // w=(1,0), eta=(1,0): ehat=(0.8, 0.24), ebar=(0.2, 0.26)
    LtiSystem sys = scalar_system(0.5, 0.2);
    Eigen::MatrixXd w(1, 2), eta(1, 2);
    w << 1.0, 0.0;
    eta << 1.0, 0.0;
    ErrorTrajectorySet errors = propagate_output_errors(
        sys, single_trajectory(Role::disturbance, w),
        single_trajectory(Role::noise, eta));
    CHECK(errors.output_feedback());
    const Eigen::MatrixXd& ehat = errors.estimation_errors->trajectory(0);
    const Eigen::MatrixXd& ebar = errors.nominal_errors->trajectory(0);
    const Eigen::MatrixXd& combined = errors.state_errors.trajectory(0);
    CHECK(ehat(0, 0) == doctest::Approx(0.8));
    CHECK(ehat(0, 1) == doctest::Approx(0.24));
    CHECK(ebar(0, 0) == doctest::Approx(0.2));
    CHECK(ebar(0, 1) == doctest::Approx(0.26));
    CHECK(combined(0, 0) == doctest::Approx(1.0));
    CHECK(combined(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("L = 0 decouples the observer") {
    // ehat follows the state-feedback recursion driven by w alone; ebar = 0
    LtiSystem sys = scalar_system(0.5, 0.0);
    Eigen::MatrixXd w(1, 3), eta(1, 3);
    w << 1.0, 1.0, 1.0;
    eta << 0.3, -0.2, 0.9;
    ErrorTrajectorySet out = propagate_output_errors(
        sys, single_trajectory(Role::disturbance, w),
        single_trajectory(Role::noise, eta));
    ErrorTrajectorySet state = propagate_state_errors(
        sys, single_trajectory(Role::disturbance, w));
    CHECK((out.estimation_errors->trajectory(0) -
           state.state_errors.trajectory(0))
              .norm() == doctest::Approx(0.0));
    CHECK(out.nominal_errors->trajectory(0).isZero(0.0));
}

TEST_CASE("combined error equals the three-system simulation identity") {
    // simulate plant / observer / nominal directly and compare x - z with
    // the stored combined error, for a 2x2 output-feedback system
    Eigen::MatrixXd A(2, 2), B(2, 1), C(1, 2), D(1, 1), K(1, 2), L(2, 1);
    A << 0.9, 0.2, -0.1, 0.7;
    B << 0.0, 0.1;
    C << 1.0, 0.0;
    D << 0.0;
    K << -0.5, -0.8;
    L << 0.4, 0.1;
    LtiSystem sys(A, B, C, D, K, L);
    REQUIRE(sys.observer_validated());

    const Eigen::Index T = 12;
    Rng rng(77);
    Eigen::MatrixXd w(2, T), eta(1, T);
    for (Eigen::Index t = 0; t < T; ++t) {
        w(0, t) = 0.05 * rng.gauss();
        w(1, t) = 0.05 * rng.gauss();
        eta(0, t) = 0.02 * rng.gauss();
    }
    ErrorTrajectorySet errors = propagate_output_errors(
        sys, single_trajectory(Role::disturbance, w),
        single_trajectory(Role::noise, eta));

    // closed loop u = K (xhat - z) + v with arbitrary v; z the nominal chain
    Eigen::VectorXd x = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd xhat = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(2);
    Rng vr(5);
    for (Eigen::Index t = 0; t < T; ++t) {
        Eigen::VectorXd v(1);
        v << 0.3 * vr.gauss();
        Eigen::VectorXd u = K * (xhat - z) + v;
        Eigen::VectorXd y = sys.measure(x, u, eta.col(t));
        Eigen::VectorXd x_next = sys.step_plant(x, u, w.col(t));
        xhat = sys.step_observer(xhat, u, y);
        z = sys.step_nominal(z, v);
        x = x_next;
        CHECK((x - z - errors.state_errors.trajectory(0).col(t))
                  .lpNorm<Eigen::Infinity>() <= 1e-10);
        CHECK((x - xhat - errors.estimation_errors->trajectory(0).col(t))
                  .lpNorm<Eigen::Infinity>() <= 1e-10);
    }
}
