#include "doctest.h"

#include <Eigen/Dense>
#include <stdexcept>

#include "cpsmpc/lti_system.hpp"

using namespace cpsmpc;

namespace {

Eigen::MatrixXd pendulum_A() {
    Eigen::MatrixXd A(2, 2);
    A << 1.0, 0.1, 0.75, 0.95;
    return A;
}

Eigen::MatrixXd pendulum_B() {
    Eigen::MatrixXd B(2, 1);
    B << 0.0, 0.1;
    return B;
}

Eigen::MatrixXd pendulum_K() {
    Eigen::MatrixXd K(1, 2);
    K << -10.0, -3.0;
    return K;
}

}  // namespace

TEST_CASE("check_schur on hand-computable matrices") {
    SUBCASE("zero matrix") {
        StabilityReport r = check_schur(Eigen::MatrixXd::Zero(3, 3));
        CHECK(r.stable);
        CHECK(r.spectral_radius == doctest::Approx(0.0));
    }
    SUBCASE("plant A has eigenvalues {1.25, 0.70}") {
        StabilityReport r = check_schur(pendulum_A());
        CHECK_FALSE(r.stable);
        CHECK(r.spectral_radius == doctest::Approx(1.25).epsilon(1e-12));
    }
    SUBCASE("identity sits on the boundary, not strictly stable") {
        StabilityReport r = check_schur(Eigen::MatrixXd::Identity(2, 2));
        CHECK_FALSE(r.stable);
        CHECK(r.spectral_radius == doctest::Approx(1.0));
    }
}

TEST_CASE("state feedback factory wires C = I, D = 0, L = 0") {
    LtiSystem sys = LtiSystem::state_feedback(pendulum_A(), pendulum_B(),
                                              pendulum_K());
    CHECK(sys.nx() == 2);
    CHECK(sys.nu() == 1);
    CHECK(sys.ny() == 2);
    CHECK(sys.C().isIdentity(0.0));
    CHECK(sys.D().isZero(0.0));
    CHECK(sys.L().isZero(0.0));
    CHECK((sys.AK() - (pendulum_A() + pendulum_B() * pendulum_K())).norm() ==
          doctest::Approx(0.0));
    CHECK(check_schur(sys.AK()).stable);
    // K places the closed-loop poles at {0.9, 0.75}
    CHECK(check_schur(sys.AK()).spectral_radius ==
          doctest::Approx(0.9).epsilon(1e-9));
    // the plant itself is unstable, so A_L = A is not a valid observer loop
    CHECK_FALSE(sys.observer_validated());
    CHECK_THROWS_AS(sys.require_observer(), std::invalid_argument);
}

TEST_CASE("construction rejects a non-Schur closed loop") {
    // K = 0 leaves A_K = A with spectral radius 1.25
    CHECK_THROWS_AS(LtiSystem::state_feedback(pendulum_A(), pendulum_B(),
                                              Eigen::MatrixXd::Zero(1, 2)),
                    std::invalid_argument);
}

TEST_CASE("pendulum observer gain places A_L strictly inside the circle") {
    Eigen::MatrixXd C(1, 2);
    C << 1.0, 0.0;
    Eigen::MatrixXd L(2, 1);
    L << 0.85, 2.325;
    LtiSystem sys(pendulum_A(), pendulum_B(), C, Eigen::MatrixXd::Zero(1, 1),
                  pendulum_K(), L);
    CHECK(sys.observer_validated());
    CHECK_NOTHROW(sys.require_observer());
    // poles were placed at {0.5, 0.6}
    CHECK(check_schur(sys.AL()).spectral_radius ==
          doctest::Approx(0.6).epsilon(1e-9));
}

TEST_CASE("simulation primitives match hand evaluation") {
    LtiSystem sys = LtiSystem::state_feedback(pendulum_A(), pendulum_B(),
                                              pendulum_K());
    Eigen::VectorXd x0 = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd u(1);
    u << 1.0;
    Eigen::VectorXd w = Eigen::VectorXd::Zero(2);

    SUBCASE("x = 0, u = 1, w = 0 -> B") {
        Eigen::VectorXd next = sys.step_plant(x0, u, w);
        CHECK(next(0) == doctest::Approx(0.0));
        CHECK(next(1) == doctest::Approx(0.1));
    }
    SUBCASE("pure noise when A and input vanish") {
        Eigen::VectorXd x(2), wv(2);
        x << 0.4, -0.2;
        wv << 0.3, 0.7;
        Eigen::VectorXd next = sys.step_plant(Eigen::VectorXd::Zero(2),
                                              Eigen::VectorXd::Zero(1), wv);
        CHECK((next - wv).norm() == doctest::Approx(0.0));
        (void)x;
    }
    SUBCASE("nominal step is the same map without noise") {
        Eigen::VectorXd z(2), v(1);
        z << 0.5, -0.25;
        v << 2.0;
        Eigen::VectorXd expect =
            pendulum_A() * z + pendulum_B() * v;
        CHECK((sys.step_nominal(z, v) - expect).norm() ==
              doctest::Approx(0.0));
    }
}

TEST_CASE("observer update on the scalar worked example") {
    // A=0.5, B=0, C=1, D=0, L=0.1: xhat=1, y=2 -> 0.5 + 0.1 (2 - 1) = 0.6
    Eigen::MatrixXd A(1, 1), B(1, 1), C(1, 1), D(1, 1), K(1, 1), L(1, 1);
    A << 0.5;
    B << 0.0;
    C << 1.0;
    D << 0.0;
    K << 0.0;
    L << 0.1;
    LtiSystem sys(A, B, C, D, K, L);
    Eigen::VectorXd xhat(1), u(1), y(1);
    xhat << 1.0;
    u << 0.0;
    y << 2.0;
    CHECK(sys.step_observer(xhat, u, y)(0) == doctest::Approx(0.6));

    SUBCASE("zero innovation reduces to the nominal prediction") {
        Eigen::VectorXd y0 = sys.measure(xhat, u, Eigen::VectorXd::Zero(1));
        CHECK(sys.step_observer(xhat, u, y0)(0) == doctest::Approx(0.5));
    }
}

TEST_CASE("quadratic cost evaluates exactly") {
    Eigen::MatrixXd Q = 100.0 * Eigen::MatrixXd::Identity(2, 2);
    Eigen::MatrixXd R = 10.0 * Eigen::MatrixXd::Identity(1, 1);
    Eigen::MatrixXd Pf = Eigen::MatrixXd::Zero(2, 2);
    CostSpec cost(Q, R, Pf);
    Eigen::VectorXd x(2), u(1);
    x << 0.75, -0.7;
    u << 2.0;
    CHECK(cost.stage(x, u) ==
          doctest::Approx(100.0 * (0.75 * 0.75 + 0.7 * 0.7) + 10.0 * 4.0));
    CHECK(cost.terminal(x) == doctest::Approx(0.0));
}
