#pragma once

// Reverse-mode differentiation over dense 2-D tensors.
//
// Every value is a row-major-by-convention matrix: rows index samples in a
// batch, columns index features. Scalars are 1x1. A Graph is built once and
// then evaluated many times with different bindings; input_grad() emits the
// gradient of a per-row scalar output as new graph nodes, so a loss that
// contains a gradient can itself be differentiated with param_grad().

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

namespace w2bench::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Named parameter arrays. Ordered so iteration (and hence every
/// reduction over parameters) is deterministic.
using ParameterSet = std::map<std::string, Matrix>;
using Gradients = std::map<std::string, Matrix>;

inline constexpr Index kDynamicRows = -1;

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by param_grad when the loss is NaN or infinite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NodeRef {
  std::uint32_t index = UINT32_MAX;

  bool valid() const { return index != UINT32_MAX; }
  friend bool operator==(NodeRef, NodeRef) = default;
};

enum class OpKind : std::uint8_t {
  kParameter,
  kInput,
  kConstant,
  kAffine,         // x * W^T (+ b broadcast over rows)
  kMatMul,         // op(a) * op(b), op = optional transpose
  kAdd,
  kSub,
  kMul,            // elementwise
  kScale,          // c * a
  kCelu,           // max(0,x) + min(0, exp(x) - 1)
  kCeluGrad,       // d celu / dx
  kCeluCurv,       // d^2 celu / dx^2 (x <= 0 ? exp(x) : 0)
  kSquare,
  kRelu,
  kStep,           // 1[x > 0], treated as constant
  kSumAll,         // -> 1x1
  kMean,           // -> 1x1
  kSumRows,        // n x c -> n x 1
  kSumCols,        // n x c -> 1 x c
  kBroadcastRows,  // 1 x c -> rows of `like`
  kBroadcastCols,  // n x 1 -> cols of `like`
  kBroadcastAll,   // 1 x 1 -> shape of `like`, optionally divided by its size
  kRowDot,         // n x c, n x c -> n x 1
  kConcat,         // column concatenation
  kSlice,          // column block
  kPadCols,        // inverse of slice: zero-pads columns
  kMinRows,        // n x c -> 1 x c
  kMaxRows,        // n x c -> 1 x c
  kExtremeMask,    // one-hot rows of the arg-min/arg-max per column, constant
};

enum class Role : std::uint8_t { kParameter, kInput, kIntermediate };

struct Node {
  OpKind op = OpKind::kConstant;
  std::vector<NodeRef> args;
  Index rows = kDynamicRows;
  Index cols = 0;
  double scalar = 0.0;
  Index offset = 0;
  Index width = 0;
  bool flag_a = false;
  bool flag_b = false;
  std::string name;
  Matrix constant;

  Role role() const {
    if (op == OpKind::kParameter) return Role::kParameter;
    if (op == OpKind::kInput) return Role::kInput;
    return Role::kIntermediate;
  }
};

/// Acyclic by construction: a node can only reference nodes created before it.
class Graph {
 public:
  NodeRef parameter(const std::string& name, Index rows, Index cols);
  NodeRef input(const std::string& name, Index cols);
  NodeRef constant(Matrix value);

  NodeRef affine(NodeRef x, NodeRef weight, std::optional<NodeRef> bias = std::nullopt);
  NodeRef matmul(NodeRef a, NodeRef b, bool transpose_a = false, bool transpose_b = false);
  NodeRef add(NodeRef a, NodeRef b);
  NodeRef sub(NodeRef a, NodeRef b);
  NodeRef mul(NodeRef a, NodeRef b);
  NodeRef scale(NodeRef a, double factor);
  NodeRef celu(NodeRef a);
  NodeRef celu_grad(NodeRef a);
  NodeRef celu_curv(NodeRef a);
  NodeRef square(NodeRef a);
  NodeRef relu(NodeRef a);
  NodeRef step(NodeRef a);
  NodeRef sum(NodeRef a);
  NodeRef mean(NodeRef a);
  NodeRef sum_rows(NodeRef a);
  NodeRef sum_cols(NodeRef a);
  NodeRef broadcast_rows(NodeRef row, NodeRef like);
  NodeRef broadcast_cols(NodeRef column, NodeRef like);
  NodeRef broadcast_all(NodeRef scalar, NodeRef like, bool normalize = false);
  NodeRef row_dot(NodeRef a, NodeRef b);
  NodeRef concat(std::span<const NodeRef> parts);
  NodeRef slice_cols(NodeRef a, Index offset, Index width);
  NodeRef pad_cols(NodeRef a, Index offset, Index total_cols);
  NodeRef min_rows(NodeRef a);
  NodeRef max_rows(NodeRef a);
  NodeRef extreme_mask(NodeRef a, bool is_max);

  const Node& node(NodeRef ref) const;
  std::size_t size() const { return nodes_.size(); }
  std::optional<NodeRef> find_parameter(std::string_view name) const;
  std::optional<NodeRef> find_input(std::string_view name) const;
  std::vector<NodeRef> parameters() const;

 private:
  NodeRef push(Node node);
  void check(NodeRef ref) const;

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeRef> parameters_;
  std::unordered_map<std::string, NodeRef> inputs_;
};

/// Gradient of sum_i out_i with respect to `wrt`, where `out` has one column
/// (one scalar per row). Because rows never interact inside the networks
/// this is used with, row i of the result is the gradient of out_i at row i
/// of `wrt`. The result is made of ordinary graph nodes.
NodeRef input_grad(Graph& graph, NodeRef out, NodeRef wrt);

/// Leaf values by name. Pointers must outlive the evaluate() call.
class Bindings {
 public:
  Bindings& bind(const std::string& name, const Matrix& value);
  Bindings& bind_all(const ParameterSet& params);
  const Matrix* find(const std::string& name) const;

 private:
  std::unordered_map<std::string, const Matrix*> values_;
};

class Evaluation {
 public:
  const Matrix& value(NodeRef ref) const;
  bool has(NodeRef ref) const;

 private:
  friend Evaluation evaluate(const Graph&, const Bindings&, std::span<const NodeRef>);
  friend Gradients param_grad(const Graph&, const Evaluation&, NodeRef, std::string_view);
  std::vector<Matrix> values_;
  std::vector<bool> computed_;
};

/// Evaluates every ancestor of `outputs`. Throws GraphError on an unbound
/// leaf or inconsistent shapes.
Evaluation evaluate(const Graph& graph, const Bindings& bindings,
                    std::span<const NodeRef> outputs);

Matrix eval(const Graph& graph, const Bindings& bindings, NodeRef root);

/// Exact reverse-mode gradients of a scalar loss with respect to every
/// parameter leaf it depends on, restricted to names starting with `prefix`.
/// Throws DivergenceError on a non-finite loss.
Gradients param_grad(const Graph& graph, const Evaluation& evaluation, NodeRef loss,
                     std::string_view prefix = {});

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, Matrix> first_moment;
  std::map<std::string, Matrix> second_moment;
};

/// One Adam descent step on every parameter that has a gradient. Ascent is
/// done by passing negated gradients.
void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state, double lr,
               const AdamOptions& options = {});

}  // namespace w2bench::ad
