#include "cpsmpc/error_propagation.hpp"

#include <sstream>
#include <stdexcept>

#include "cpsmpc/errors.hpp"

namespace cpsmpc {

ErrorTrajectorySet propagate_state_errors(const LtiSystem& sys,
                                          const TrajectoryDataset& disturbances) {
    if (disturbances.dim() != sys.nx())
        throw std::invalid_argument(
            "propagate_state_errors: disturbance dimension must equal n_x");
    const auto report = check_schur(sys.AK());
    if (!report.stable) {
        std::ostringstream msg;
        msg << "propagate_state_errors: A_K spectral radius " << report.spectral_radius
            << " is not Schur";
        throw std::invalid_argument(msg.str());
    }

    const Eigen::Index T = disturbances.length();
    const Eigen::Index nx = sys.nx();
    std::vector<Eigen::MatrixXd> errors;
    errors.reserve(static_cast<std::size_t>(disturbances.count()));
    for (Eigen::Index k = 0; k < disturbances.count(); ++k) {
        const Eigen::MatrixXd& w = disturbances.trajectory(k);
        Eigen::MatrixXd e(nx, T);
        Eigen::VectorXd cur = Eigen::VectorXd::Zero(nx);  // e(0) = 0
        for (Eigen::Index t = 0; t < T; ++t) {
            cur = sys.AK() * cur + w.col(t);
            e.col(t) = cur;  // column t stores e(t+1)
        }
        errors.push_back(std::move(e));
    }

    ErrorTrajectorySet out{
        TrajectoryDataset(Role::error, std::move(errors), disturbances.seed()),
        std::nullopt,
        std::nullopt,
        sys.K(),
        Eigen::MatrixXd::Zero(sys.nx(), sys.ny()),
        T};
    return out;
}

ErrorTrajectorySet propagate_output_errors(const LtiSystem& sys,
                                           const TrajectoryDataset& disturbances,
                                           const TrajectoryDataset& noises) {
    if (disturbances.count() != noises.count() ||
        disturbances.length() != noises.length()) {
        std::ostringstream msg;
        msg << "propagate_output_errors: disturbance set (M=" << disturbances.count()
            << ", T=" << disturbances.length() << ") and noise set (M="
            << noises.count() << ", T=" << noises.length() << ") are misaligned";
        throw DataError(DataError::Kind::dimension, msg.str());
    }
    if (disturbances.dim() != sys.nx())
        throw std::invalid_argument(
            "propagate_output_errors: disturbance dimension must equal n_x");
    if (noises.dim() != sys.ny())
        throw std::invalid_argument(
            "propagate_output_errors: noise dimension must equal n_y");
    {
        const auto report = check_schur(sys.AK());
        if (!report.stable)
            throw std::invalid_argument("propagate_output_errors: A_K is not Schur");
    }
    sys.require_observer();

    const Eigen::Index T = disturbances.length();
    const Eigen::Index nx = sys.nx();
    std::vector<Eigen::MatrixXd> combined, est, nom;
    combined.reserve(static_cast<std::size_t>(disturbances.count()));
    est.reserve(combined.capacity());
    nom.reserve(combined.capacity());
    for (Eigen::Index k = 0; k < disturbances.count(); ++k) {
        const Eigen::MatrixXd& w = disturbances.trajectory(k);
        const Eigen::MatrixXd& eta = noises.trajectory(k);
        Eigen::MatrixXd ehat(nx, T), ebar(nx, T), sum(nx, T);
        Eigen::VectorXd cur_hat = Eigen::VectorXd::Zero(nx);  // ehat(0) = 0
        Eigen::VectorXd cur_bar = Eigen::VectorXd::Zero(nx);  // ebar(0) = 0
        for (Eigen::Index t = 0; t < T; ++t) {
            const Eigen::VectorXd innovation = sys.C() * cur_hat + eta.col(t);
            const Eigen::VectorXd next_hat =
                sys.AL() * cur_hat + w.col(t) - sys.L() * eta.col(t);
            const Eigen::VectorXd next_bar = sys.AK() * cur_bar + sys.L() * innovation;
            cur_hat = next_hat;
            cur_bar = next_bar;
            ehat.col(t) = cur_hat;
            ebar.col(t) = cur_bar;
            sum.col(t) = cur_hat + cur_bar;
        }
        est.push_back(std::move(ehat));
        nom.push_back(std::move(ebar));
        combined.push_back(std::move(sum));
    }

    ErrorTrajectorySet out{
        TrajectoryDataset(Role::error, std::move(combined), disturbances.seed()),
        TrajectoryDataset(Role::estimation_error, std::move(est), disturbances.seed()),
        TrajectoryDataset(Role::nominal_error, std::move(nom), noises.seed()),
        sys.K(),
        sys.L(),
        T};
    return out;
}

}  // namespace cpsmpc
