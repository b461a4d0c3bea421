#pragma once

// Exact discrete optimal transport between two weighted point sets.

#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace w2bench {

class DiscreteOtError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DiscreteOtResult {
  Eigen::MatrixXd plan;
  /// Duals with f_i + g_j <= c_ij, equality on the support of the plan,
  /// shifted so that sum_i a_i f_i = 0.
  Eigen::VectorXd f;
  Eigen::VectorXd g;
  double cost = 0.0;
};

/// Optimal plan for cost matrix c (n x m) and marginals a, b. The uniform
/// square case goes through the assignment solver, everything else through
/// the transportation simplex.
DiscreteOtResult solve_exact(const Eigen::MatrixXd& cost, const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// Minimum-cost perfect matching by shortest augmenting paths.
/// Returns row_to_col; u, v are optimal assignment duals (u_i + v_j <= c_ij).
std::vector<int> solve_assignment(const Eigen::MatrixXd& cost, Eigen::VectorXd* u = nullptr,
                                  Eigen::VectorXd* v = nullptr);

struct BruteForceResult {
  /// (1/n) * sum_i c(i, perm[i]), the transport cost under uniform marginals.
  double cost = 0.0;
  std::vector<int> permutation;
};

/// Exhaustive search over all n! permutations; n <= 8.
BruteForceResult brute_force(const Eigen::MatrixXd& cost);

}  // namespace w2bench
