#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <optional>

namespace cpsmpc {

// minimize 1/2 x'Hx + g'x  subject to  A_eq x = b_eq,  A_in x <= b_in
struct QuadraticProgram {
    Eigen::MatrixXd H;
    Eigen::VectorXd g;
    Eigen::MatrixXd A_eq;
    Eigen::VectorXd b_eq;
    Eigen::MatrixXd A_in;
    Eigen::VectorXd b_in;

    Eigen::Index n() const { return H.rows(); }
    void validate() const;  // symmetry/PSD of H, row dimensions
};

enum class QpStatus { optimal, infeasible, max_iterations };

struct QpTolerances {
    double eq = 1e-8;    // ||A_eq x - b_eq||_inf
    double in = 1e-8;    // max(A_in x - b_in)
    double stat = 1e-6;  // ||Hx + g + A_eq'y_eq + A_in'y_in||_inf
};

struct QpSolution {
    Eigen::VectorXd x;
    Eigen::VectorXd y_eq;  // equality multipliers, free sign
    Eigen::VectorXd y_in;  // inequality multipliers, >= 0
    double objective = 0.0;
    QpStatus status = QpStatus::max_iterations;
    double primal_residual = 0.0;  // worst constraint violation
    double dual_residual = 0.0;    // stationarity residual
    int iterations = 0;
    bool polished = false;
};

// Independent KKT verification; deliberately shares no code with the solver
// loop so it can certify solutions on its own.
struct KktReport {
    double stationarity = 0.0;     // ||Hx + g + A'y||_inf
    double eq_violation = 0.0;     // ||A_eq x - b_eq||_inf
    double in_violation = 0.0;     // max(0, max(A_in x - b_in))
    double complementarity = 0.0;  // max |y_i * slack_i|
    double dual_negativity = 0.0;  // max(0, -min(y_in))

    bool ok(const QpTolerances& tol) const {
        return stationarity <= tol.stat && eq_violation <= tol.eq &&
               in_violation <= tol.in && complementarity <= 1e2 * tol.stat &&
               dual_negativity <= tol.stat;
    }
};

KktReport check_kkt(const QuadraticProgram& qp, const Eigen::VectorXd& x,
                    const Eigen::VectorXd& y_eq, const Eigen::VectorXd& y_in);

struct AdmmOptions {
    double sigma = 1e-6;       // proximal regularization
    double rho = 0.1;          // base penalty (inequality rows)
    double rho_eq_scale = 1e3; // equality rows use rho * this
    double alpha = 1.6;        // over-relaxation
    double eps_abs = 1e-9;
    double eps_rel = 1e-9;
    int max_iterations = 50000;
    int check_interval = 25;
    bool polish = true;
    bool adaptive_rho = true;
    // confirm suspected infeasibility with an exact feasibility LP; disabled
    // inside that LP itself to avoid recursion
    bool feasibility_fallback = true;
    QpTolerances tolerances{};
};

// Operator-splitting solver with the constraint structure fixed up front:
// the factorization of (H + sigma I + C' diag(rho) C) is reused across calls
// where only g, b_eq, b_in change (receding-horizon problems).
class QpSolver {
public:
    QpSolver(Eigen::MatrixXd H, Eigen::MatrixXd A_eq, Eigen::MatrixXd A_in,
             AdmmOptions options = {});

    QpSolution solve(const Eigen::VectorXd& g, const Eigen::VectorXd& b_eq,
                     const Eigen::VectorXd& b_in,
                     const Eigen::VectorXd* warm_x = nullptr,
                     const Eigen::VectorXd* warm_y = nullptr) const;

    Eigen::Index n() const { return H_.rows(); }
    Eigen::Index n_eq() const { return me_; }
    Eigen::Index n_in() const { return mi_; }
    const AdmmOptions& options() const { return options_; }

private:
    struct Factor {
        Eigen::LLT<Eigen::MatrixXd> llt;
        Eigen::VectorXd rho;      // per-row penalties
        Eigen::VectorXd rho_inv;
    };

    Factor make_factor(double rho_base) const;
    void polish(const Eigen::VectorXd& g, const Eigen::VectorXd& b_eq,
                const Eigen::VectorXd& b_in, QpSolution& sol) const;

    Eigen::MatrixXd H_;
    Eigen::MatrixXd C_;  // stacked [A_eq; A_in]
    Eigen::Index me_ = 0, mi_ = 0;
    AdmmOptions options_;
    Factor base_factor_;
};

// one-shot convenience
QpSolution solve(const QuadraticProgram& qp, AdmmOptions options = {},
                 const Eigen::VectorXd* warm_x = nullptr);

// Minimum achievable worst-case violation over x of the combined system
// (an LP in (x, s): min s subject to A_eq x - b_eq <= s, b_eq - A_eq x <= s,
// A_in x - b_in <= s). Positive optimum certifies infeasibility; the
// minimizing x is returned through `point` when given.
double min_constraint_violation(const Eigen::MatrixXd& A_eq,
                                const Eigen::VectorXd& b_eq,
                                const Eigen::MatrixXd& A_in,
                                const Eigen::VectorXd& b_in,
                                Eigen::VectorXd* point = nullptr);

}  // namespace cpsmpc
