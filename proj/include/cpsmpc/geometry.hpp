#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

namespace cpsmpc {

// Convex polytope {x : A x <= b} in halfspace representation. Rows are
// unit-normalized at construction so offsets are signed distances; no vertex
// enumeration anywhere.
class HalfspacePolytope {
public:
    HalfspacePolytope(Eigen::MatrixXd normals, Eigen::VectorXd offsets,
                      std::string name = "");

    // axis-aligned box lower <= x <= upper; facets ordered (+e0,-e0,+e1,...)
    static HalfspacePolytope box(const Eigen::VectorXd& lower,
                                 const Eigen::VectorXd& upper,
                                 std::string name = "");

    Eigen::Index dim() const { return normals_.cols(); }
    Eigen::Index facets() const { return normals_.rows(); }
    const Eigen::MatrixXd& normals() const { return normals_; }
    const Eigen::VectorXd& offsets() const { return offsets_; }
    const std::string& name() const { return name_; }

    // max_i (a_i'x - b_i); <= 0 inside
    double violation(const Eigen::VectorXd& x) const;
    bool contains(const Eigen::VectorXd& x, double tol = 1e-9) const {
        return violation(x) <= tol;
    }
    // all offsets strictly positive <=> origin in the interior
    bool origin_interior() const { return offsets_.minCoeff() > 0.0; }

    // same facet normals, new offsets (tightening keeps the structure)
    HalfspacePolytope with_offsets(Eigen::VectorXd offsets) const;
    HalfspacePolytope renamed(std::string name) const;

private:
    Eigen::MatrixXd normals_;
    Eigen::VectorXd offsets_;
    std::string name_;
};

// {e : (e-mu)' Sigma^{-1} (e-mu) <= r^2} for PD Sigma; a PSD (degenerate)
// shape is legal and handled through the support function without inversion.
struct Ellipsoid {
    Eigen::VectorXd center;
    Eigen::MatrixXd shape;  // Sigma
    double radius = 0.0;    // r

    Ellipsoid(Eigen::VectorXd center_, Eigen::MatrixXd shape_, double radius_);

    Eigen::Index dim() const { return center.size(); }
    // membership; requires PD shape
    bool contains(const Eigen::VectorXd& x, double tol = 1e-9) const;
    // argmax of a'e over the set: mu + r Sigma a / sqrt(a'Sigma a)
    Eigen::VectorXd support_point(const Eigen::VectorXd& a) const;
};

// h_E(a) = a'mu + r sqrt(a'Sigma a)
double support(const Ellipsoid& ell, const Eigen::VectorXd& a);

// max of direction'x over P (support LP)
double polytope_support(const HalfspacePolytope& P,
                        const Eigen::VectorXd& direction);

// inner subset of outer up to tol, decided facet-wise by support LPs
bool contains_polytope(const HalfspacePolytope& outer,
                       const HalfspacePolytope& inner, double tol = 1e-8);

struct ChebyshevResult {
    Eigen::VectorXd center;
    double radius = 0.0;  // largest inscribed ball; negative => empty
};

// largest inscribed ball via an LP over (center, radius)
ChebyshevResult chebyshev_center(const HalfspacePolytope& P);

struct TightenResult {
    HalfspacePolytope set;
    bool empty = false;             // flagged, never thrown
    double chebyshev_radius = 0.0;  // of the tightened set
};

// exact Pontryagin difference P (-) ell for H-rep: b_i' = b_i - h_E(a_i)
TightenResult tighten(const HalfspacePolytope& P, const Ellipsoid& ell);

// U (-) K ell via the image ellipsoid (K mu, K Sigma K', r)
TightenResult tighten_inputs(const HalfspacePolytope& U,
                             const Eigen::MatrixXd& K, const Ellipsoid& ell);

// exact intersection of sets sharing normals: per-facet minimum offset
HalfspacePolytope horizon_intersection(
    const std::vector<HalfspacePolytope>& sets);

// Terminal ingredients: either the origin with pi_f(0) = 0, or a polytopic
// set with the linear law pi_f(z) = K_f z.
struct TerminalSpec {
    enum class Kind { origin, polytope };
    Kind kind = Kind::origin;
    std::optional<HalfspacePolytope> set;  // engaged for Kind::polytope
    Eigen::MatrixXd K_f;                   // n_u x n_x terminal gain

    static TerminalSpec origin_spec(Eigen::Index n_x, Eigen::Index n_u);
    static TerminalSpec polytope_spec(HalfspacePolytope set,
                                      Eigen::MatrixXd K_f);
};

struct InvarianceReport {
    bool invariant = false;         // both checks below
    bool state_invariant = false;   // (A+BK_f) Z_f inside Z_f
    bool inputs_admissible = false; // pi_f(Z_f) inside V_inf
    double worst_state_margin = 0.0;  // min_i (b_i - max_z a_i'(A+BK_f)z)
    double worst_input_margin = 0.0;
};

// positive invariance of the terminal set under z+ = (A + B K_f) z, plus
// admissibility of the terminal law in V_inf; facet-wise support LPs
InvarianceReport check_terminal_invariance(const TerminalSpec& terminal,
                                           const Eigen::MatrixXd& A,
                                           const Eigen::MatrixXd& B,
                                           const HalfspacePolytope& V_inf);

}  // namespace cpsmpc
