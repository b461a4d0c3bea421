#pragma once

// Dense input-convex potential.
//
// With widths w_0..w_{L-1} and input x in R^D:
//
//   Q_l(x)  = sum_r (A_{l,r} x + c_{l,r})^2 + B_l x + b_l      (elementwise square)
//   z_0     = celu(Q_0(x))
//   z_l     = celu(W_l z_{l-1} + Q_l(x)),   l = 1..L-1
//   psi(x)  = w_out . z_{L-1} + beta/2 |x|^2
//
// W_l and w_out are the constrained weights: with them nonnegative psi is
// convex (celu is convex and nondecreasing, the skips are convex in x) and
// beta-strongly convex. In unconstrained mode nothing is clamped.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "w2bench/adcore.hpp"

namespace w2bench {

using ad::Index;
using ad::Matrix;
using Vector = Eigen::VectorXd;

/// Hidden widths for dimension D: {max(2D,64), max(2D,64), max(D,32)}.
std::vector<Index> dense_icnn_widths(Index dim);

struct IcnnSpec {
  Index dim = 1;
  std::vector<Index> widths;
  Index rank = 1;
  double beta = 1e-4;
  bool constrained = true;
};

class IcnnPotential {
 public:
  IcnnPotential() = default;
  /// All parameters zero, so psi(x) = beta/2 |x|^2.
  IcnnPotential(IcnnSpec spec, std::string prefix);

  const IcnnSpec& spec() const { return spec_; }
  const std::string& prefix() const { return prefix_; }
  Index dim() const { return spec_.dim; }
  ad::ParameterSet& params() { return params_; }
  const ad::ParameterSet& params() const { return params_; }
  Index parameter_count() const;

  std::string quad_weight(Index layer, Index r) const;
  std::string quad_bias(Index layer, Index r) const;
  std::string linear_weight(Index layer) const;
  std::string linear_bias(Index layer) const;
  std::string hidden_weight(Index layer) const;  // layer >= 1
  std::string out_weight() const;
  std::vector<std::string> constrained_names() const;

  /// Adds psi to `graph` as an n x 1 node; parameters are leaves named as above.
  ad::NodeRef build(ad::Graph& graph, ad::NodeRef x) const;

  Vector value(const Matrix& x) const;
  Matrix gradient(const Matrix& x) const;
  void value_and_gradient(const Matrix& x, Vector* value, Matrix* gradient) const;

  /// Clamps constrained weights at zero; no-op in unconstrained mode.
  void project_convex();
  bool satisfies_constraints() const;

  /// Same spec and parameters under a different name prefix.
  IcnnPotential renamed(const std::string& prefix) const;

 private:
  IcnnSpec spec_;
  std::string prefix_;
  ad::ParameterSet params_;
};

/// Random initialization: unconstrained weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// constrained weights U(0, 2/fan_in).
IcnnPotential make_dense_icnn(Index dim, std::uint64_t seed, bool constrained = true,
                              const std::string& prefix = "psi.");

using BatchSampler = std::function<Matrix(Index)>;

struct PretrainOptions {
  Index iterations = 3000;
  double lr = 1e-3;
  Index batch = 256;
  /// Stop once the batch relative error drops below this (0 disables).
  double stop_below = 0.0;
};

struct PretrainResult {
  Index iterations = 0;
  /// E|grad psi(x) - x|^2 / E|x|^2 on the last batch.
  double relative_error = 0.0;
};

/// Fits grad psi ~ id with Adam on fresh batches. Throws ad::DivergenceError
/// on a non-finite loss.
PretrainResult pretrain_identity(IcnnPotential& psi, const BatchSampler& sampler,
                                 const PretrainOptions& options);

class InversionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct InvertOptions {
  double tol = 1e-6;
  Index max_iterations = 5000;
  Index reestimate_every = 100;
  Index power_iterations = 20;
  /// When false, rows that miss tol are returned with converged[i] = false.
  bool require_convergence = true;
};

struct InvertResult {
  Matrix x;
  /// psi(x) - <x, y> + |y|^2 / 2 per row.
  Vector value;
  std::vector<bool> converged;
  Index iterations = 0;
};

/// Solves grad psi(x) = y row by row by gradient descent on psi(x) - <x, y>.
InvertResult invert_map(const IcnnPotential& psi, const Matrix& y, const InvertOptions& options = {});

}  // namespace w2bench
