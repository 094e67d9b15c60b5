#include "cpsmpc/lti_system.hpp"

#include <Eigen/Eigenvalues>
#include <sstream>
#include <stdexcept>

namespace cpsmpc {

namespace {

void require_dims(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("dimension mismatch: ") + what);
}

void require_symmetric(const Eigen::MatrixXd& M, const char* name) {
    if (M.rows() != M.cols() || (M - M.transpose()).cwiseAbs().maxCoeff() > 1e-10)
        throw std::invalid_argument(std::string(name) + " must be symmetric");
}

}  // namespace

StabilityReport check_schur(const Eigen::MatrixXd& M, double margin) {
    if (M.rows() != M.cols())
        throw std::invalid_argument("check_schur: matrix must be square");
    StabilityReport report;
    if (M.size() == 0) {
        report.spectral_radius = 0.0;
        report.stable = true;
        return report;
    }
    Eigen::EigenSolver<Eigen::MatrixXd> es(M, /*computeEigenvectors=*/false);
    report.spectral_radius = es.eigenvalues().cwiseAbs().maxCoeff();
    report.stable = report.spectral_radius < 1.0 - margin;
    return report;
}

LtiSystem::LtiSystem(Eigen::MatrixXd A, Eigen::MatrixXd B, Eigen::MatrixXd C,
                     Eigen::MatrixXd D, Eigen::MatrixXd K, Eigen::MatrixXd L,
                     double stability_margin)
    : A_(std::move(A)), B_(std::move(B)), C_(std::move(C)), D_(std::move(D)),
      K_(std::move(K)), L_(std::move(L)) {
    const auto nx = A_.rows();
    require_dims(A_.cols() == nx, "A must be square");
    require_dims(B_.rows() == nx, "B row count must equal n_x");
    require_dims(C_.cols() == nx, "C column count must equal n_x");
    require_dims(D_.rows() == C_.rows() && D_.cols() == B_.cols(),
                 "D must be n_y x n_u");
    require_dims(K_.rows() == B_.cols() && K_.cols() == nx, "K must be n_u x n_x");
    require_dims(L_.rows() == nx && L_.cols() == C_.rows(), "L must be n_x x n_y");

    AK_ = A_ + B_ * K_;
    AL_ = A_ - L_ * C_;

    const auto ak = check_schur(AK_, stability_margin);
    if (!ak.stable) {
        std::ostringstream msg;
        msg << "A + BK is not Schur (spectral radius " << ak.spectral_radius << ")";
        throw std::invalid_argument(msg.str());
    }
    // The observer gain is optional for state feedback; L = 0 leaves A_L = A,
    // which may be unstable. Validate lazily: record the result and gate
    // output-feedback use on it.
    observer_validated_ = check_schur(AL_, stability_margin).stable;
}

LtiSystem LtiSystem::state_feedback(Eigen::MatrixXd A, Eigen::MatrixXd B,
                                    Eigen::MatrixXd K, double stability_margin) {
    const auto nx = A.rows();
    const auto nu = B.cols();
    return LtiSystem(std::move(A), std::move(B),
                     Eigen::MatrixXd::Identity(nx, nx),
                     Eigen::MatrixXd::Zero(nx, nu), std::move(K),
                     Eigen::MatrixXd::Zero(nx, nx), stability_margin);
}

void LtiSystem::require_observer() const {
    if (!observer_validated_) {
        const auto report = check_schur(AL_);
        std::ostringstream msg;
        msg << "A - LC is not Schur (spectral radius " << report.spectral_radius
            << "); output feedback requires a stable observer";
        throw std::invalid_argument(msg.str());
    }
}

Eigen::VectorXd LtiSystem::step_plant(const Eigen::VectorXd& x,
                                      const Eigen::VectorXd& u,
                                      const Eigen::VectorXd& w) const {
    require_dims(x.size() == nx() && u.size() == nu() && w.size() == nx(),
                 "step_plant arguments");
    return A_ * x + B_ * u + w;
}

Eigen::VectorXd LtiSystem::step_nominal(const Eigen::VectorXd& z,
                                        const Eigen::VectorXd& v) const {
    require_dims(z.size() == nx() && v.size() == nu(), "step_nominal arguments");
    return A_ * z + B_ * v;
}

Eigen::VectorXd LtiSystem::measure(const Eigen::VectorXd& x,
                                   const Eigen::VectorXd& u,
                                   const Eigen::VectorXd& eta) const {
    require_dims(x.size() == nx() && u.size() == nu() && eta.size() == ny(),
                 "measure arguments");
    return C_ * x + D_ * u + eta;
}

Eigen::VectorXd LtiSystem::step_observer(const Eigen::VectorXd& xhat,
                                         const Eigen::VectorXd& u,
                                         const Eigen::VectorXd& y) const {
    require_dims(xhat.size() == nx() && u.size() == nu() && y.size() == ny(),
                 "step_observer arguments");
    return A_ * xhat + B_ * u + L_ * (y - C_ * xhat - D_ * u);
}

CostSpec::CostSpec(Eigen::MatrixXd Q_in, Eigen::MatrixXd R_in, Eigen::MatrixXd Pf_in)
    : Q(std::move(Q_in)), R(std::move(R_in)), P_f(std::move(Pf_in)) {
    require_symmetric(Q, "Q");
    require_symmetric(R, "R");
    require_symmetric(P_f, "P_f");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> rq(Q);
    if (rq.eigenvalues().minCoeff() < -1e-10)
        throw std::invalid_argument("Q must be positive semidefinite");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> rr(R);
    if (rr.eigenvalues().minCoeff() <= 0.0)
        throw std::invalid_argument("R must be positive definite");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> rp(P_f);
    if (rp.eigenvalues().minCoeff() < -1e-10)
        throw std::invalid_argument("P_f must be positive semidefinite");
}

double CostSpec::stage(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
    return x.dot(Q * x) + u.dot(R * u);
}

double CostSpec::terminal(const Eigen::VectorXd& x) const {
    return x.dot(P_f * x);
}

}  // namespace cpsmpc
