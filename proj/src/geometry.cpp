#include "cpsmpc/geometry.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

#include "cpsmpc/qp.hpp"

namespace cpsmpc {

namespace {

// max of c'x over P through the ADMM solver (H = 0). A large box cap keeps
// the LP bounded even for degenerate inputs; it never binds for the compact
// sets used here.
double support_lp(const HalfspacePolytope& P, const Eigen::VectorXd& c) {
    const Eigen::Index n = P.dim();
    const Eigen::Index m = P.facets();
    Eigen::MatrixXd A(m + 2 * n, n);
    Eigen::VectorXd b(m + 2 * n);
    A.topRows(m) = P.normals();
    b.head(m) = P.offsets();
    A.middleRows(m, n) = Eigen::MatrixXd::Identity(n, n);
    A.bottomRows(n) = -Eigen::MatrixXd::Identity(n, n);
    b.tail(2 * n).setConstant(1e6);

    QuadraticProgram lp;
    lp.H = Eigen::MatrixXd::Zero(n, n);
    lp.g = -c;
    lp.A_eq = Eigen::MatrixXd(0, n);
    lp.b_eq = Eigen::VectorXd(0);
    lp.A_in = A;
    lp.b_in = b;
    const QpSolution sol = solve(lp);
    if (sol.status == QpStatus::infeasible)
        throw std::runtime_error("support_lp: constraint set is empty");
    return c.dot(sol.x);
}

}  // namespace

HalfspacePolytope::HalfspacePolytope(Eigen::MatrixXd normals,
                                     Eigen::VectorXd offsets, std::string name)
    : normals_(std::move(normals)),
      offsets_(std::move(offsets)),
      name_(std::move(name)) {
    if (normals_.rows() == 0)
        throw std::invalid_argument("polytope: at least one facet required");
    if (normals_.rows() != offsets_.size())
        throw std::invalid_argument("polytope: facet count mismatch");
    for (Eigen::Index i = 0; i < normals_.rows(); ++i) {
        const double norm = normals_.row(i).norm();
        if (norm < 1e-14)
            throw std::invalid_argument("polytope: zero normal in row " +
                                        std::to_string(i));
        normals_.row(i) /= norm;
        offsets_(i) /= norm;
    }
}

HalfspacePolytope HalfspacePolytope::box(const Eigen::VectorXd& lower,
                                         const Eigen::VectorXd& upper,
                                         std::string name) {
    const Eigen::Index n = lower.size();
    if (upper.size() != n)
        throw std::invalid_argument("box: bound length mismatch");
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(2 * n, n);
    Eigen::VectorXd b(2 * n);
    for (Eigen::Index j = 0; j < n; ++j) {
        if (!(lower(j) < upper(j)))
            throw std::invalid_argument("box: lower bound must be below upper");
        A(2 * j, j) = 1.0;
        b(2 * j) = upper(j);
        A(2 * j + 1, j) = -1.0;
        b(2 * j + 1) = -lower(j);
    }
    return HalfspacePolytope(std::move(A), std::move(b), std::move(name));
}

double HalfspacePolytope::violation(const Eigen::VectorXd& x) const {
    if (x.size() != dim())
        throw std::invalid_argument("polytope: point dimension mismatch");
    return (normals_ * x - offsets_).maxCoeff();
}

double polytope_support(const HalfspacePolytope& P,
                        const Eigen::VectorXd& direction) {
    if (direction.size() != P.dim())
        throw std::invalid_argument("polytope_support: dimension mismatch");
    return support_lp(P, direction);
}

bool contains_polytope(const HalfspacePolytope& outer,
                       const HalfspacePolytope& inner, double tol) {
    if (outer.dim() != inner.dim())
        throw std::invalid_argument("contains_polytope: dimension mismatch");
    for (Eigen::Index i = 0; i < outer.facets(); ++i) {
        const Eigen::VectorXd a = outer.normals().row(i).transpose();
        if (support_lp(inner, a) > outer.offsets()(i) + tol) return false;
    }
    return true;
}

HalfspacePolytope HalfspacePolytope::with_offsets(
    Eigen::VectorXd offsets) const {
    return HalfspacePolytope(normals_, std::move(offsets), name_);
}

HalfspacePolytope HalfspacePolytope::renamed(std::string name) const {
    HalfspacePolytope out = *this;
    out.name_ = std::move(name);
    return out;
}

Ellipsoid::Ellipsoid(Eigen::VectorXd center_, Eigen::MatrixXd shape_,
                     double radius_)
    : center(std::move(center_)), shape(std::move(shape_)), radius(radius_) {
    if (shape.rows() != shape.cols() || shape.rows() != center.size())
        throw std::invalid_argument("ellipsoid: dimension mismatch");
    if ((shape - shape.transpose()).cwiseAbs().maxCoeff() >
        1e-10 * std::max(1.0, shape.cwiseAbs().maxCoeff()))
        throw std::invalid_argument("ellipsoid: shape must be symmetric");
    if (!(radius >= 0.0))
        throw std::invalid_argument("ellipsoid: radius must be nonnegative");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(shape);
    if (es.eigenvalues().minCoeff() <
        -1e-10 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff()))
        throw std::invalid_argument("ellipsoid: shape must be PSD");
}

bool Ellipsoid::contains(const Eigen::VectorXd& x, double tol) const {
    if (x.size() != dim())
        throw std::invalid_argument("ellipsoid: point dimension mismatch");
    Eigen::LLT<Eigen::MatrixXd> llt(shape);
    if (llt.info() != Eigen::Success)
        throw std::invalid_argument(
            "ellipsoid: membership requires a positive definite shape");
    const Eigen::VectorXd d = x - center;
    const double q = d.dot(llt.solve(d));
    return q <= radius * radius + tol;
}

Eigen::VectorXd Ellipsoid::support_point(const Eigen::VectorXd& a) const {
    const Eigen::VectorXd sa = shape * a;
    const double quad = a.dot(sa);
    if (quad <= 0.0) return center;  // flat direction
    return center + (radius / std::sqrt(quad)) * sa;
}

double support(const Ellipsoid& ell, const Eigen::VectorXd& a) {
    if (a.size() != ell.dim())
        throw std::invalid_argument("support: direction dimension mismatch");
    const double quad = a.dot(ell.shape * a);
    return a.dot(ell.center) +
           ell.radius * std::sqrt(std::max(quad, 0.0));
}

ChebyshevResult chebyshev_center(const HalfspacePolytope& P) {
    // max rho s.t. a_i'c + rho <= b_i (unit normals), rho <= cap
    const Eigen::Index n = P.dim();
    const Eigen::Index m = P.facets();
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m + 1, n + 1);
    Eigen::VectorXd b(m + 1);
    A.topLeftCorner(m, n) = P.normals();
    A.col(n).head(m).setOnes();
    b.head(m) = P.offsets();
    A(m, n) = 1.0;
    b(m) = 1e6;

    QuadraticProgram lp;
    lp.H = Eigen::MatrixXd::Zero(n + 1, n + 1);
    lp.g = Eigen::VectorXd::Zero(n + 1);
    lp.g(n) = -1.0;
    lp.A_eq = Eigen::MatrixXd(0, n + 1);
    lp.b_eq = Eigen::VectorXd(0);
    lp.A_in = A;
    lp.b_in = b;
    const QpSolution sol = solve(lp);
    ChebyshevResult result;
    result.center = sol.x.head(n);
    result.radius = sol.x(n);
    return result;
}

TightenResult tighten(const HalfspacePolytope& P, const Ellipsoid& ell) {
    if (P.dim() != ell.dim())
        throw std::invalid_argument("tighten: dimension mismatch");
    Eigen::VectorXd offsets(P.facets());
    for (Eigen::Index i = 0; i < P.facets(); ++i)
        offsets(i) = P.offsets()(i) - support(ell, P.normals().row(i).transpose());
    TightenResult result{P.with_offsets(std::move(offsets)), false, 0.0};
    const ChebyshevResult ball = chebyshev_center(result.set);
    result.chebyshev_radius = ball.radius;
    result.empty = ball.radius < 0.0;
    return result;
}

TightenResult tighten_inputs(const HalfspacePolytope& U,
                             const Eigen::MatrixXd& K, const Ellipsoid& ell) {
    if (K.cols() != ell.dim())
        throw std::invalid_argument("tighten_inputs: gain column mismatch");
    if (K.rows() != U.dim())
        throw std::invalid_argument("tighten_inputs: gain row mismatch");
    const Ellipsoid image(K * ell.center, K * ell.shape * K.transpose(),
                          ell.radius);
    return tighten(U, image);
}

HalfspacePolytope horizon_intersection(
    const std::vector<HalfspacePolytope>& sets) {
    if (sets.empty())
        throw std::invalid_argument("horizon_intersection: no sets given");
    const HalfspacePolytope& first = sets.front();
    Eigen::VectorXd offsets = first.offsets();
    for (std::size_t k = 1; k < sets.size(); ++k) {
        const HalfspacePolytope& s = sets[k];
        if (s.facets() != first.facets() || s.dim() != first.dim() ||
            (s.normals() - first.normals()).cwiseAbs().maxCoeff() > 1e-12)
            throw std::invalid_argument(
                "horizon_intersection: sets must share facet normals");
        offsets = offsets.cwiseMin(s.offsets());
    }
    return first.with_offsets(std::move(offsets));
}

TerminalSpec TerminalSpec::origin_spec(Eigen::Index n_x, Eigen::Index n_u) {
    TerminalSpec spec;
    spec.kind = Kind::origin;
    spec.K_f = Eigen::MatrixXd::Zero(n_u, n_x);
    return spec;
}

TerminalSpec TerminalSpec::polytope_spec(HalfspacePolytope set,
                                         Eigen::MatrixXd K_f) {
    if (K_f.cols() != set.dim())
        throw std::invalid_argument("terminal: gain column mismatch");
    TerminalSpec spec;
    spec.kind = Kind::polytope;
    spec.set = std::move(set);
    spec.K_f = std::move(K_f);
    return spec;
}

InvarianceReport check_terminal_invariance(const TerminalSpec& terminal,
                                           const Eigen::MatrixXd& A,
                                           const Eigen::MatrixXd& B,
                                           const HalfspacePolytope& V_inf) {
    InvarianceReport report;
    if (terminal.kind == TerminalSpec::Kind::origin) {
        // z+ = 0 stays in {0}; the law pi_f(0) = 0 must lie in V_inf
        report.state_invariant = true;
        report.worst_state_margin = 0.0;
        report.inputs_admissible = V_inf.offsets().minCoeff() >= 0.0;
        report.worst_input_margin = V_inf.offsets().minCoeff();
        report.invariant = report.state_invariant && report.inputs_admissible;
        return report;
    }

    const HalfspacePolytope& Zf = *terminal.set;
    const Eigen::MatrixXd AK = A + B * terminal.K_f;
    double state_margin = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < Zf.facets(); ++i) {
        const Eigen::VectorXd c = AK.transpose() * Zf.normals().row(i).transpose();
        state_margin = std::min(state_margin, Zf.offsets()(i) - support_lp(Zf, c));
    }
    double input_margin = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < V_inf.facets(); ++i) {
        const Eigen::VectorXd c =
            terminal.K_f.transpose() * V_inf.normals().row(i).transpose();
        input_margin =
            std::min(input_margin, V_inf.offsets()(i) - support_lp(Zf, c));
    }
    const double tol = 1e-8;
    report.worst_state_margin = state_margin;
    report.worst_input_margin = input_margin;
    report.state_invariant = state_margin >= -tol;
    report.inputs_admissible = input_margin >= -tol;
    report.invariant = report.state_invariant && report.inputs_admissible;
    return report;
}

}  // namespace cpsmpc
