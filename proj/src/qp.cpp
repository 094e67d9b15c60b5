#include "cpsmpc/qp.hpp"

#include <Eigen/LU>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace cpsmpc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double linf(const Eigen::VectorXd& v) {
    return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

}  // namespace

void QuadraticProgram::validate() const {
    if (H.rows() != H.cols())
        throw std::invalid_argument("QP: H must be square");
    if (g.size() != H.rows())
        throw std::invalid_argument("QP: g length must match H");
    if ((H - H.transpose()).cwiseAbs().maxCoeff() >
        1e-10 * std::max(1.0, H.cwiseAbs().maxCoeff()))
        throw std::invalid_argument("QP: H must be symmetric");
    if (H.rows() > 0) {
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
            H, Eigen::EigenvaluesOnly);
        if (es.eigenvalues().minCoeff() <
            -1e-10 * std::max(1.0, H.cwiseAbs().maxCoeff()))
            throw std::invalid_argument("QP: H must be positive semidefinite");
    }
    if (A_eq.rows() != b_eq.size() || (A_eq.rows() > 0 && A_eq.cols() != H.rows()))
        throw std::invalid_argument("QP: equality system dimensions inconsistent");
    if (A_in.rows() != b_in.size() || (A_in.rows() > 0 && A_in.cols() != H.rows()))
        throw std::invalid_argument("QP: inequality system dimensions inconsistent");
}

KktReport check_kkt(const QuadraticProgram& qp, const Eigen::VectorXd& x,
                    const Eigen::VectorXd& y_eq, const Eigen::VectorXd& y_in) {
    KktReport report;
    Eigen::VectorXd grad = qp.H * x + qp.g;
    if (qp.A_eq.rows() > 0) grad += qp.A_eq.transpose() * y_eq;
    if (qp.A_in.rows() > 0) grad += qp.A_in.transpose() * y_in;
    report.stationarity = linf(grad);
    if (qp.A_eq.rows() > 0)
        report.eq_violation = linf(qp.A_eq * x - qp.b_eq);
    if (qp.A_in.rows() > 0) {
        const Eigen::VectorXd slack = qp.b_in - qp.A_in * x;
        report.in_violation = std::max(0.0, -slack.minCoeff());
        report.complementarity = (y_in.array() * slack.array()).abs().maxCoeff();
        report.dual_negativity = std::max(0.0, -y_in.minCoeff());
    }
    return report;
}

QpSolver::QpSolver(Eigen::MatrixXd H, Eigen::MatrixXd A_eq, Eigen::MatrixXd A_in,
                   AdmmOptions options)
    : H_(std::move(H)), options_(options) {
    me_ = A_eq.rows();
    mi_ = A_in.rows();
    if (H_.rows() != H_.cols())
        throw std::invalid_argument("QpSolver: H must be square");
    if ((me_ > 0 && A_eq.cols() != H_.rows()) ||
        (mi_ > 0 && A_in.cols() != H_.rows()))
        throw std::invalid_argument("QpSolver: constraint column count mismatch");
    C_.resize(me_ + mi_, H_.cols());
    if (me_ > 0) C_.topRows(me_) = A_eq;
    if (mi_ > 0) C_.bottomRows(mi_) = A_in;
    // probe H alone: the constraint term in the ADMM matrix could mask an
    // indefinite objective
    const double shift =
        1e-9 * std::max(1.0, H_.size() > 0 ? H_.cwiseAbs().maxCoeff() : 1.0);
    Eigen::MatrixXd probe = H_;
    probe.diagonal().array() += shift;
    if (Eigen::LLT<Eigen::MatrixXd>(probe).info() != Eigen::Success)
        throw std::invalid_argument("QpSolver: H is not positive semidefinite");
    base_factor_ = make_factor(options_.rho);
    if (base_factor_.llt.info() != Eigen::Success)
        throw std::invalid_argument(
            "QpSolver: ADMM system factorization failed");
}

QpSolver::Factor QpSolver::make_factor(double rho_base) const {
    Factor f;
    f.rho.resize(me_ + mi_);
    f.rho.head(me_).setConstant(rho_base * options_.rho_eq_scale);
    f.rho.tail(mi_).setConstant(rho_base);
    f.rho_inv = f.rho.cwiseInverse();
    Eigen::MatrixXd M = H_;
    M.diagonal().array() += options_.sigma;
    if (C_.rows() > 0) M.noalias() += C_.transpose() * f.rho.asDiagonal() * C_;
    f.llt.compute(M);
    return f;
}

QpSolution QpSolver::solve(const Eigen::VectorXd& g, const Eigen::VectorXd& b_eq,
                           const Eigen::VectorXd& b_in,
                           const Eigen::VectorXd* warm_x,
                           const Eigen::VectorXd* warm_y) const {
    const Eigen::Index n = H_.rows();
    const Eigen::Index m = me_ + mi_;
    if (g.size() != n || b_eq.size() != me_ || b_in.size() != mi_)
        throw std::invalid_argument("QpSolver::solve: right-hand-side size mismatch");

    Eigen::VectorXd lower(m), upper(m);
    lower.head(me_) = b_eq;
    upper.head(me_) = b_eq;
    lower.tail(mi_).setConstant(kNegInf);
    upper.tail(mi_) = b_in;

    const Factor* factor = &base_factor_;
    Factor local;  // holds a refactorization when rho adapts
    double rho_base = options_.rho;

    Eigen::VectorXd x = (warm_x && warm_x->size() == n)
                            ? *warm_x
                            : Eigen::VectorXd::Zero(n);
    Eigen::VectorXd y = (warm_y && warm_y->size() == m)
                            ? *warm_y
                            : Eigen::VectorXd::Zero(m);
    Eigen::VectorXd z = (m > 0) ? (C_ * x).cwiseMax(lower).cwiseMin(upper)
                                : Eigen::VectorXd{};

    QpSolution sol;
    sol.iterations = 0;

    auto contract_residuals = [&](const Eigen::VectorXd& xi,
                                  const Eigen::VectorXd& yi, double& prim,
                                  double& dual) {
        double eq_v = 0.0, in_v = 0.0;
        if (m > 0) {
            const Eigen::VectorXd cx = C_ * xi;
            if (me_ > 0) eq_v = linf(cx.head(me_) - b_eq);
            if (mi_ > 0) in_v = std::max(0.0, (cx.tail(mi_) - b_in).maxCoeff());
        }
        prim = std::max(eq_v, in_v);
        Eigen::VectorXd grad = H_ * xi + g;
        if (m > 0) grad.noalias() += C_.transpose() * yi;
        dual = linf(grad);
    };

    auto finish = [&](QpStatus status, const Eigen::VectorXd& xi,
                      const Eigen::VectorXd& yi) {
        sol.x = xi;
        sol.y_eq = yi.head(me_);
        sol.y_in = yi.tail(mi_).cwiseMax(0.0);
        sol.objective = 0.5 * xi.dot(H_ * xi) + g.dot(xi);
        sol.status = status;
        contract_residuals(xi, yi, sol.primal_residual, sol.dual_residual);
        return sol;
    };

    if (m == 0) {
        // unconstrained: single proximal solve is exact up to sigma
        Eigen::VectorXd xs = factor->llt.solve(-g);
        for (int r = 0; r < 3; ++r)  // refine away the sigma shift
            xs += factor->llt.solve(-g - H_ * xs);
        return finish(QpStatus::optimal, xs, Eigen::VectorXd::Zero(0));
    }

    const double infeas_tol = 1e-5;
    Eigen::VectorXd xt(n), zt(m), w(m), z_prev(m), dy(m), rhs(n);

    auto point_violation = [&](const Eigen::VectorXd& p) {
        double v = 0.0;
        if (me_ > 0) v = linf(C_.topRows(me_) * p - b_eq);
        if (mi_ > 0)
            v = std::max(v, std::max(0.0, (C_.bottomRows(mi_) * p - b_in).maxCoeff()));
        return v;
    };
    // the confirmation LP is itself iterative, so genuine infeasibility is
    // judged against a scale well above its accuracy floor
    const double confirm_tol =
        1e-5 * (1.0 + std::max(me_ > 0 ? linf(b_eq) : 0.0,
                               mi_ > 0 ? linf(b_in) : 0.0));
    int infeas_hits = 0;
    Eigen::VectorXd y_mark = y;

    for (int iter = 1; iter <= options_.max_iterations; ++iter) {
        sol.iterations = iter;
        rhs = options_.sigma * x - g;
        rhs.noalias() += C_.transpose() * (factor->rho.cwiseProduct(z) - y);
        xt = factor->llt.solve(rhs);
        zt.noalias() = C_ * xt;
        x = options_.alpha * xt + (1.0 - options_.alpha) * x;
        z_prev = z;
        w = options_.alpha * zt + (1.0 - options_.alpha) * z_prev +
            factor->rho_inv.cwiseProduct(y);
        z = w.cwiseMax(lower).cwiseMin(upper);
        dy = factor->rho.cwiseProduct(options_.alpha * zt +
                                      (1.0 - options_.alpha) * z_prev - z);
        y += dy;

        if (iter % options_.check_interval != 0 && iter != options_.max_iterations)
            continue;

        // scaled termination test
        const Eigen::VectorXd cx = C_ * x;
        const double r_prim = linf(cx - z);
        Eigen::VectorXd grad = H_ * x + g;
        grad.noalias() += C_.transpose() * y;
        const double r_dual = linf(grad);
        const double eps_p = options_.eps_abs +
                             options_.eps_rel * std::max(linf(cx), linf(z));
        const double eps_d =
            options_.eps_abs +
            options_.eps_rel * std::max({linf(H_ * x), linf(g), r_dual});
        if (r_prim <= eps_p && r_dual <= eps_d) {
            QpSolution candidate = finish(QpStatus::optimal, x, y);
            if (options_.polish) polish(g, b_eq, b_in, candidate);
            if (candidate.primal_residual <= options_.tolerances.eq &&
                candidate.dual_residual <= options_.tolerances.stat)
                return candidate;
            // keep iterating with a tighter target if the contract is unmet
        }

        // primal infeasibility certificate from the dual change since the
        // previous check; a single iteration's step can transiently mimic a
        // ray on a feasible problem, so the test must persist across checks
        const Eigen::VectorXd dyc = y - y_mark;
        y_mark = y;
        bool ray = false;
        const double dy_norm = linf(dyc);
        if (dy_norm > 1e-14) {
            const double ct_dy = linf(C_.transpose() * dyc);
            if (ct_dy <= infeas_tol * dy_norm) {
                double gap = 0.0;
                bool valid = true;
                for (Eigen::Index i = 0; i < m; ++i) {
                    const double d = dyc(i);
                    if (d > 0) {
                        gap += upper(i) * d;
                    } else if (d < -1e-12 * dy_norm) {
                        if (lower(i) == kNegInf) { valid = false; break; }
                        gap += lower(i) * d;
                    }
                }
                ray = valid && gap < -infeas_tol * dy_norm;
            }
        }
        infeas_hits = ray ? infeas_hits + 1 : 0;
        if (infeas_hits >= 3) {
            if (!options_.feasibility_fallback)
                return finish(QpStatus::infeasible, x, y);
            // confirm with a feasibility LP before reporting, judging by the
            // better of its bound and the violation at the point it returns
            Eigen::VectorXd feas_point;
            double viol = min_constraint_violation(C_.topRows(me_), b_eq,
                                                   C_.bottomRows(mi_), b_in,
                                                   &feas_point);
            viol = std::min(viol, point_violation(feas_point));
            if (viol > confirm_tol)
                return finish(QpStatus::infeasible, x, y);
            // false alarm: restart the dual from the feasible point
            infeas_hits = 0;
            x = feas_point;
            z = (C_ * x).cwiseMax(lower).cwiseMin(upper);
            y.setZero();
            y_mark = y;
        }

        // residual-balancing rho adaptation (factor change is deterministic)
        if (options_.adaptive_rho && iter % 100 == 0) {
            const double prim_scale = std::max({linf(cx), linf(z), 1e-12});
            const double dual_scale =
                std::max({linf(H_ * x), linf(g), linf(C_.transpose() * y), 1e-12});
            const double ratio = std::sqrt((r_prim / prim_scale) /
                                           std::max(r_dual / dual_scale, 1e-16));
            if (ratio > 5.0 || ratio < 0.2) {
                rho_base = std::clamp(rho_base * ratio, 1e-6, 1e6);
                local = make_factor(rho_base);
                factor = &local;
            }
        }
    }

    // iteration cap: distinguish genuine infeasibility from slow convergence
    if (options_.feasibility_fallback) {
        Eigen::VectorXd feas_point;
        double viol = min_constraint_violation(C_.topRows(me_), b_eq,
                                               C_.bottomRows(mi_), b_in,
                                               &feas_point);
        viol = std::min(viol, point_violation(feas_point));
        if (viol > confirm_tol)
            return finish(QpStatus::infeasible, x, y);
    }
    QpSolution capped = finish(QpStatus::max_iterations, x, y);
    if (options_.polish) {
        polish(g, b_eq, b_in, capped);
        if (capped.primal_residual <= options_.tolerances.eq &&
            capped.dual_residual <= options_.tolerances.stat)
            capped.status = QpStatus::optimal;
    }
    return capped;
}

void QpSolver::polish(const Eigen::VectorXd& g, const Eigen::VectorXd& b_eq,
                      const Eigen::VectorXd& b_in, QpSolution& sol) const {
    const Eigen::Index n = H_.rows();

    auto attempt = [&](const std::vector<Eigen::Index>& active) -> bool {
        const Eigen::Index ma = me_ + static_cast<Eigen::Index>(active.size());
        Eigen::MatrixXd G(ma, n);
        Eigen::VectorXd h(ma);
        if (me_ > 0) {
            G.topRows(me_) = C_.topRows(me_);
            h.head(me_) = b_eq;
        }
        for (std::size_t i = 0; i < active.size(); ++i) {
            G.row(me_ + static_cast<Eigen::Index>(i)) = C_.row(me_ + active[i]);
            h(me_ + static_cast<Eigen::Index>(i)) = b_in(active[i]);
        }

        // regularized KKT system with iterative refinement on the true one
        const double delta = 1e-9 * std::max(1.0, H_.cwiseAbs().maxCoeff());
        Eigen::MatrixXd kkt(n + ma, n + ma);
        kkt.setZero();
        kkt.topLeftCorner(n, n) = H_;
        kkt.topLeftCorner(n, n).diagonal().array() += delta;
        kkt.topRightCorner(n, ma) = G.transpose();
        kkt.bottomLeftCorner(ma, n) = G;
        kkt.bottomRightCorner(ma, ma).diagonal().setConstant(-delta);
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(kkt);

        Eigen::VectorXd rhs(n + ma);
        rhs.head(n) = -g;
        rhs.tail(ma) = h;
        Eigen::VectorXd sol_vec = lu.solve(rhs);
        for (int r = 0; r < 3; ++r) {
            Eigen::VectorXd resid(n + ma);
            resid.head(n) = -g - H_ * sol_vec.head(n) - G.transpose() * sol_vec.tail(ma);
            resid.tail(ma) = h - G * sol_vec.head(n);
            sol_vec += lu.solve(resid);
        }

        const Eigen::VectorXd x_pol = sol_vec.head(n);
        Eigen::VectorXd y_pol = Eigen::VectorXd::Zero(me_ + mi_);
        y_pol.head(me_) = sol_vec.segment(n, me_);
        bool dual_ok = true;
        for (std::size_t i = 0; i < active.size(); ++i) {
            const double nu = sol_vec(n + me_ + static_cast<Eigen::Index>(i));
            if (nu < -1e-9) dual_ok = false;
            y_pol(me_ + active[i]) = nu;
        }

        QuadraticProgram probe{H_, g, C_.topRows(me_), b_eq, C_.bottomRows(mi_), b_in};
        const KktReport report =
            check_kkt(probe, x_pol, y_pol.head(me_), y_pol.tail(mi_).cwiseMax(0.0));
        QpTolerances strict{1e-9, 1e-9, 1e-7};
        if (dual_ok && report.ok(strict)) {
            sol.x = x_pol;
            sol.y_eq = y_pol.head(me_);
            sol.y_in = y_pol.tail(mi_).cwiseMax(0.0);
            sol.objective = 0.5 * x_pol.dot(H_ * x_pol) + g.dot(x_pol);
            sol.primal_residual = std::max(report.eq_violation, report.in_violation);
            sol.dual_residual = report.stationarity;
            sol.polished = true;
            return true;
        }
        return false;
    };

    // guess the active inequality set from slacks and multipliers
    std::vector<Eigen::Index> active;
    if (mi_ > 0) {
        const Eigen::VectorXd slack = b_in - (C_.bottomRows(mi_) * sol.x);
        for (Eigen::Index i = 0; i < mi_; ++i)
            if (slack(i) < 1e-6 * (1.0 + std::abs(b_in(i))) || sol.y_in(i) > 1e-7)
                active.push_back(i);
    }
    if (attempt(active)) return;
    if (!active.empty()) {
        // second try without the low-multiplier rows (likely misclassified)
        std::vector<Eigen::Index> strict_active;
        for (const auto i : active)
            if (sol.y_in(i) > 1e-7) strict_active.push_back(i);
        if (strict_active.size() != active.size()) attempt(strict_active);
    }
}

QpSolution solve(const QuadraticProgram& qp, AdmmOptions options,
                 const Eigen::VectorXd* warm_x) {
    qp.validate();
    QpSolver solver(qp.H, qp.A_eq, qp.A_in, options);
    return solver.solve(qp.g, qp.b_eq, qp.b_in, warm_x);
}

double min_constraint_violation(const Eigen::MatrixXd& A_eq,
                                const Eigen::VectorXd& b_eq,
                                const Eigen::MatrixXd& A_in,
                                const Eigen::VectorXd& b_in,
                                Eigen::VectorXd* point) {
    const Eigen::Index n = std::max(A_eq.cols(), A_in.cols());
    const Eigen::Index me = A_eq.rows();
    const Eigen::Index mi = A_in.rows();
    // variables (x, s); rows bound every signed violation by s, plus s >= -1
    Eigen::MatrixXd A(2 * me + mi + 1, n + 1);
    Eigen::VectorXd b(2 * me + mi + 1);
    A.setZero();
    if (me > 0) {
        A.topLeftCorner(me, n) = A_eq;
        A.block(me, 0, me, n) = -A_eq;
        b.head(me) = b_eq;
        b.segment(me, me) = -b_eq;
    }
    if (mi > 0) {
        A.block(2 * me, 0, mi, n) = A_in;
        b.segment(2 * me, mi) = b_in;
    }
    A.col(n).head(2 * me + mi).setConstant(-1.0);
    A(2 * me + mi, n) = -1.0;
    b(2 * me + mi) = 1.0;

    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n + 1, n + 1);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(n + 1);
    g(n) = 1.0;

    AdmmOptions options;
    options.polish = true;
    options.max_iterations = 200000;
    options.adaptive_rho = true;
    options.feasibility_fallback = false;
    QpSolver lp(H, Eigen::MatrixXd(0, n + 1), A, options);
    const QpSolution sol =
        lp.solve(g, Eigen::VectorXd(0), b, nullptr, nullptr);
    if (point) *point = sol.x.head(n);
    return sol.x(n);
}

}  // namespace cpsmpc
