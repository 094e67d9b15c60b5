#pragma once

#include <Eigen/Dense>

namespace cpsmpc {

struct StabilityReport {
    double spectral_radius = 0.0;
    bool stable = false;
};

// spectral radius of a square matrix; stable iff radius < 1 - margin
StabilityReport check_schur(const Eigen::MatrixXd& M, double margin = 1e-9);

// Discrete-time stochastic LTI plant
//   x(t+1) = A x(t) + B u(t) + w(t),  y(t) = C x(t) + D u(t) + eta(t),
// with tube feedback gain K (A_K = A + BK Schur) and, for output feedback,
// Luenberger observer gain L (A_L = A - LC Schur).
class LtiSystem {
public:
    LtiSystem(Eigen::MatrixXd A, Eigen::MatrixXd B, Eigen::MatrixXd C,
              Eigen::MatrixXd D, Eigen::MatrixXd K, Eigen::MatrixXd L,
              double stability_margin = 1e-9);

    // state-feedback-only convenience: C = I, D = 0, L = 0 (observer unused)
    static LtiSystem state_feedback(Eigen::MatrixXd A, Eigen::MatrixXd B,
                                    Eigen::MatrixXd K,
                                    double stability_margin = 1e-9);

    Eigen::Index nx() const { return A_.rows(); }
    Eigen::Index nu() const { return B_.cols(); }
    Eigen::Index ny() const { return C_.rows(); }

    const Eigen::MatrixXd& A() const { return A_; }
    const Eigen::MatrixXd& B() const { return B_; }
    const Eigen::MatrixXd& C() const { return C_; }
    const Eigen::MatrixXd& D() const { return D_; }
    const Eigen::MatrixXd& K() const { return K_; }
    const Eigen::MatrixXd& L() const { return L_; }
    const Eigen::MatrixXd& AK() const { return AK_; }
    const Eigen::MatrixXd& AL() const { return AL_; }

    // A_L was validated Schur at construction (needed for output feedback)
    bool observer_validated() const { return observer_validated_; }
    void require_observer() const;

    Eigen::VectorXd step_plant(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                               const Eigen::VectorXd& w) const;
    Eigen::VectorXd step_nominal(const Eigen::VectorXd& z,
                                 const Eigen::VectorXd& v) const;
    Eigen::VectorXd measure(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                            const Eigen::VectorXd& eta) const;
    Eigen::VectorXd step_observer(const Eigen::VectorXd& xhat,
                                  const Eigen::VectorXd& u,
                                  const Eigen::VectorXd& y) const;

private:
    Eigen::MatrixXd A_, B_, C_, D_, K_, L_, AK_, AL_;
    bool observer_validated_ = false;
};

// Quadratic stage cost l(x,u) = x'Qx + u'Ru and terminal cost V_f = x'P_f x.
struct CostSpec {
    Eigen::MatrixXd Q;
    Eigen::MatrixXd R;
    Eigen::MatrixXd P_f;

    CostSpec(Eigen::MatrixXd Q_in, Eigen::MatrixXd R_in, Eigen::MatrixXd Pf_in);

    double stage(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const;
    double terminal(const Eigen::VectorXd& x) const;
};

}  // namespace cpsmpc
