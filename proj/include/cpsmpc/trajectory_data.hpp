#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cpsmpc {

enum class Role { disturbance, noise, error, estimation_error, nominal_error };

std::string role_name(Role role);
Role role_from_name(const std::string& name);

// Ordered collection of M equal-length trajectories of n-dimensional vectors.
// Each trajectory is stored as an n x T matrix whose column t is the sample
// at time index t. Index k runs 1..M in file formats (paper superscript (k));
// in-memory access is 0-based.
class TrajectoryDataset {
public:
    TrajectoryDataset(Role role, std::vector<Eigen::MatrixXd> samples,
                      std::optional<std::uint64_t> seed = std::nullopt);

    Role role() const { return role_; }
    std::optional<std::uint64_t> seed() const { return seed_; }
    Eigen::Index count() const { return static_cast<Eigen::Index>(samples_.size()); }
    Eigen::Index length() const { return samples_.front().cols(); }
    Eigen::Index dim() const { return samples_.front().rows(); }

    const Eigen::MatrixXd& trajectory(Eigen::Index k) const;
    Eigen::VectorXd value(Eigen::Index k, Eigen::Index t) const;
    const std::vector<Eigen::MatrixXd>& samples() const { return samples_; }

    bool operator==(const TrajectoryDataset& other) const;

private:
    Role role_;
    std::vector<Eigen::MatrixXd> samples_;
    std::optional<std::uint64_t> seed_;
};

struct SplitSpec {
    Eigen::Index n_fit = 0;
    Eigen::Index n_cal = 0;
    std::uint64_t shuffle_seed = 0;
};

struct SplitResult {
    TrajectoryDataset fit;
    TrajectoryDataset cal;
    std::string warning;  // empty unless the split is legal but suspicious
};

// M trajectories of T i.i.d. draws from N(mean, covariance); deterministic
// given seed. Covariance factored by Cholesky, falling back to an
// eigendecomposition for semidefinite matrices.
TrajectoryDataset generate_gaussian(Eigen::Index dim, Eigen::Index length,
                                    Eigen::Index count,
                                    const Eigen::MatrixXd& covariance,
                                    const Eigen::VectorXd& mean,
                                    std::uint64_t seed,
                                    Role role = Role::disturbance);

// entries uniform on the per-coordinate box [-h_i, h_i]
TrajectoryDataset generate_uniform(Eigen::Index dim, Eigen::Index length,
                                   Eigen::Index count,
                                   const Eigen::VectorXd& half_widths,
                                   std::uint64_t seed,
                                   Role role = Role::disturbance);

// Disjoint fit/calibration split; the permutation is a deterministic
// Fisher-Yates shuffle driven by shuffle_seed. Trajectories keep their
// content; only membership changes.
SplitResult split(const TrajectoryDataset& ds, const SplitSpec& spec);

// Dataset files: CSV (header "# role=<role> M=<M> T=<T> n=<n>", rows
// "k,t,v_1,...,v_n") or JSON, chosen by file extension. Round trips are
// bit-exact (17 significant digits).
void save_dataset(const TrajectoryDataset& ds, const std::string& path);
TrajectoryDataset load_dataset(const std::string& path,
                               Eigen::Index expected_dim = -1,
                               Eigen::Index expected_length = -1);

}  // namespace cpsmpc
