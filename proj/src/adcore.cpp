#include "w2bench/adcore.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace w2bench::ad {
namespace {

std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << '[' << (rows < 0 ? std::string("?") : std::to_string(rows)) << 'x'
     << (cols < 0 ? std::string("?") : std::to_string(cols)) << ']';
  return os.str();
}

// Merges two possibly-dynamic extents, throwing if both are known and differ.
Index merge_extent(Index a, Index b, const char* what) {
  if (a < 0) return b;
  if (b < 0 || a == b) return a;
  std::ostringstream os;
  os << "shape mismatch in " << what << ": " << a << " vs " << b;
  throw GraphError(os.str());
}

void require_shape(const Matrix& m, Index rows, Index cols, const char* what) {
  if ((rows >= 0 && m.rows() != rows) || (cols >= 0 && m.cols() != cols)) {
    std::ostringstream os;
    os << "shape mismatch in " << what << ": got " << shape_str(m.rows(), m.cols())
       << ", expected " << shape_str(rows, cols);
    throw GraphError(os.str());
  }
}

void require_same(const Matrix& a, const Matrix& b, const char* what) {
  require_shape(b, a.rows(), a.cols(), what);
}

double celu(double x) { return x > 0.0 ? x : std::expm1(x); }
double celu_grad(double x) { return x > 0.0 ? 1.0 : std::exp(x); }
double celu_curv(double x) { return x > 0.0 ? 0.0 : std::exp(x); }

// Row index of the extreme entry of column j, lowest index on ties.
Index extreme_row(const Matrix& a, Index j, bool is_max) {
  Index best = 0;
  for (Index i = 1; i < a.rows(); ++i) {
    const double v = a(i, j);
    if (is_max ? v > a(best, j) : v < a(best, j)) best = i;
  }
  return best;
}

bool differentiable_slot(OpKind op, std::size_t slot) {
  switch (op) {
    case OpKind::kBroadcastRows:
    case OpKind::kBroadcastCols:
    case OpKind::kBroadcastAll:
      return slot == 0;
    case OpKind::kStep:
    case OpKind::kExtremeMask:
      return false;
    default:
      return true;
  }
}

Matrix compute(const Node& n, const std::vector<Matrix>& v) {
  auto arg = [&](std::size_t i) -> const Matrix& { return v[n.args[i].index]; };
  switch (n.op) {
    case OpKind::kParameter:
    case OpKind::kInput:
    case OpKind::kConstant:
      break;  // leaves are filled by evaluate()
    case OpKind::kAffine: {
      const Matrix& x = arg(0);
      const Matrix& w = arg(1);
      if (x.cols() != w.cols()) throw GraphError("shape mismatch in affine: input " + shape_str(x.rows(), x.cols()) + " vs weight " + shape_str(w.rows(), w.cols()));
      Matrix y(x.rows(), w.rows());
      y.noalias() = x * w.transpose();
      if (n.args.size() > 2) {
        const Matrix& b = arg(2);
        require_shape(b, 1, w.rows(), "affine bias");
        y.rowwise() += b.row(0);
      }
      return y;
    }
    case OpKind::kMatMul: {
      const Matrix& a = arg(0);
      const Matrix& b = arg(1);
      const Index inner_a = n.flag_a ? a.rows() : a.cols();
      const Index inner_b = n.flag_b ? b.cols() : b.rows();
      if (inner_a != inner_b) throw GraphError("shape mismatch in matmul inner dimension");
      Matrix y(n.flag_a ? a.cols() : a.rows(), n.flag_b ? b.rows() : b.cols());
      if (!n.flag_a && !n.flag_b) y.noalias() = a * b;
      else if (n.flag_a && !n.flag_b) y.noalias() = a.transpose() * b;
      else if (!n.flag_a && n.flag_b) y.noalias() = a * b.transpose();
      else y.noalias() = a.transpose() * b.transpose();
      return y;
    }
    case OpKind::kAdd:
      require_same(arg(0), arg(1), "add");
      return arg(0) + arg(1);
    case OpKind::kSub:
      require_same(arg(0), arg(1), "sub");
      return arg(0) - arg(1);
    case OpKind::kMul:
      require_same(arg(0), arg(1), "mul");
      return arg(0).cwiseProduct(arg(1));
    case OpKind::kScale:
      return n.scalar * arg(0);
    case OpKind::kCelu:
      return arg(0).unaryExpr([](double x) { return celu(x); });
    case OpKind::kCeluGrad:
      return arg(0).unaryExpr([](double x) { return celu_grad(x); });
    case OpKind::kCeluCurv:
      return arg(0).unaryExpr([](double x) { return celu_curv(x); });
    case OpKind::kSquare:
      return arg(0).array().square().matrix();
    case OpKind::kRelu:
      return arg(0).cwiseMax(0.0);
    case OpKind::kStep:
      return arg(0).unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
    case OpKind::kSumAll:
      return Matrix::Constant(1, 1, arg(0).sum());
    case OpKind::kMean: {
      const Matrix& a = arg(0);
      if (a.size() == 0) throw GraphError("mean of empty array");
      return Matrix::Constant(1, 1, a.mean());
    }
    case OpKind::kSumRows:
      return arg(0).rowwise().sum();
    case OpKind::kSumCols:
      return arg(0).colwise().sum();
    case OpKind::kBroadcastRows: {
      const Matrix& r = arg(0);
      require_shape(r, 1, -1, "broadcast_rows");
      return r.replicate(arg(1).rows(), 1);
    }
    case OpKind::kBroadcastCols: {
      const Matrix& c = arg(0);
      require_shape(c, -1, 1, "broadcast_cols");
      return c.replicate(1, arg(1).cols());
    }
    case OpKind::kBroadcastAll: {
      const Matrix& s = arg(0);
      const Matrix& like = arg(1);
      require_shape(s, 1, 1, "broadcast_all");
      double value = s(0, 0);
      if (n.flag_a) value /= static_cast<double>(like.size());
      return Matrix::Constant(like.rows(), like.cols(), value);
    }
    case OpKind::kRowDot:
      require_same(arg(0), arg(1), "row_dot");
      return arg(0).cwiseProduct(arg(1)).rowwise().sum();
    case OpKind::kConcat: {
      Index rows = arg(0).rows();
      Index cols = 0;
      for (std::size_t i = 0; i < n.args.size(); ++i) {
        require_shape(arg(i), rows, -1, "concat");
        cols += arg(i).cols();
      }
      Matrix y(rows, cols);
      Index at = 0;
      for (std::size_t i = 0; i < n.args.size(); ++i) {
        y.middleCols(at, arg(i).cols()) = arg(i);
        at += arg(i).cols();
      }
      return y;
    }
    case OpKind::kSlice: {
      const Matrix& a = arg(0);
      if (n.offset + n.width > a.cols()) throw GraphError("slice out of range");
      return a.middleCols(n.offset, n.width);
    }
    case OpKind::kPadCols: {
      const Matrix& a = arg(0);
      if (n.offset + a.cols() > n.width) throw GraphError("pad out of range");
      Matrix y = Matrix::Zero(a.rows(), n.width);
      y.middleCols(n.offset, a.cols()) = a;
      return y;
    }
    case OpKind::kMinRows:
      if (arg(0).rows() == 0) throw GraphError("min over zero rows");
      return arg(0).colwise().minCoeff();
    case OpKind::kMaxRows:
      if (arg(0).rows() == 0) throw GraphError("max over zero rows");
      return arg(0).colwise().maxCoeff();
    case OpKind::kExtremeMask: {
      const Matrix& a = arg(0);
      Matrix y = Matrix::Zero(a.rows(), a.cols());
      if (a.rows() == 0) return y;
      for (Index j = 0; j < a.cols(); ++j) y(extreme_row(a, j, n.flag_a), j) = 1.0;
      return y;
    }
  }
  return {};
}

void accumulate(Matrix& target, const Matrix& contribution) {
  if (target.size() == 0) target = contribution;
  else target += contribution;
}

// Adds d loss / d arg to `adj[arg]` for every argument that needs it.
void numeric_vjp(const Node& n, const std::vector<Matrix>& v, const Matrix& g,
                 std::vector<Matrix>& adj, const std::vector<bool>& slot_wants) {
  auto arg = [&](std::size_t i) -> const Matrix& { return v[n.args[i].index]; };
  auto want = [&](std::size_t i) { return static_cast<bool>(slot_wants[i]); };
  auto add_to = [&](std::size_t i, const Matrix& c) { accumulate(adj[n.args[i].index], c); };

  switch (n.op) {
    case OpKind::kParameter:
    case OpKind::kInput:
    case OpKind::kConstant:
    case OpKind::kStep:
    case OpKind::kExtremeMask:
      return;
    case OpKind::kAffine: {
      if (want(0)) add_to(0, g * arg(1));
      if (want(1)) add_to(1, g.transpose() * arg(0));
      if (n.args.size() > 2 && want(2)) add_to(2, g.colwise().sum());
      return;
    }
    case OpKind::kMatMul: {
      const Matrix& a = arg(0);
      const Matrix& b = arg(1);
      if (want(0)) {
        if (!n.flag_a) add_to(0, n.flag_b ? Matrix(g * b) : Matrix(g * b.transpose()));
        else add_to(0, n.flag_b ? Matrix(b.transpose() * g.transpose()) : Matrix(b * g.transpose()));
      }
      if (want(1)) {
        if (!n.flag_b) add_to(1, n.flag_a ? Matrix(a * g) : Matrix(a.transpose() * g));
        else add_to(1, n.flag_a ? Matrix(g.transpose() * a.transpose()) : Matrix(g.transpose() * a));
      }
      return;
    }
    case OpKind::kAdd:
      if (want(0)) add_to(0, g);
      if (want(1)) add_to(1, g);
      return;
    case OpKind::kSub:
      if (want(0)) add_to(0, g);
      if (want(1)) add_to(1, -g);
      return;
    case OpKind::kMul:
      if (want(0)) add_to(0, g.cwiseProduct(arg(1)));
      if (want(1)) add_to(1, g.cwiseProduct(arg(0)));
      return;
    case OpKind::kScale:
      if (want(0)) add_to(0, n.scalar * g);
      return;
    case OpKind::kCelu:
      if (want(0)) add_to(0, g.cwiseProduct(arg(0).unaryExpr([](double x) { return celu_grad(x); })));
      return;
    case OpKind::kCeluGrad:
    case OpKind::kCeluCurv:
      if (want(0)) add_to(0, g.cwiseProduct(arg(0).unaryExpr([](double x) { return celu_curv(x); })));
      return;
    case OpKind::kSquare:
      if (want(0)) add_to(0, 2.0 * g.cwiseProduct(arg(0)));
      return;
    case OpKind::kRelu:
      if (want(0)) add_to(0, g.cwiseProduct(arg(0).unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; })));
      return;
    case OpKind::kSumAll:
      if (want(0)) add_to(0, Matrix::Constant(arg(0).rows(), arg(0).cols(), g(0, 0)));
      return;
    case OpKind::kMean:
      if (want(0)) {
        const Matrix& a = arg(0);
        add_to(0, Matrix::Constant(a.rows(), a.cols(), g(0, 0) / static_cast<double>(a.size())));
      }
      return;
    case OpKind::kSumRows:
      if (want(0)) add_to(0, g.replicate(1, arg(0).cols()));
      return;
    case OpKind::kSumCols:
      if (want(0)) add_to(0, g.replicate(arg(0).rows(), 1));
      return;
    case OpKind::kBroadcastRows:
      if (want(0)) add_to(0, g.colwise().sum());
      return;
    case OpKind::kBroadcastCols:
      if (want(0)) add_to(0, g.rowwise().sum());
      return;
    case OpKind::kBroadcastAll:
      if (want(0)) {
        double s = g.sum();
        if (n.flag_a) s /= static_cast<double>(g.size());
        add_to(0, Matrix::Constant(1, 1, s));
      }
      return;
    case OpKind::kRowDot:
      if (want(0)) add_to(0, (arg(1).array().colwise() * g.col(0).array()).matrix());
      if (want(1)) add_to(1, (arg(0).array().colwise() * g.col(0).array()).matrix());
      return;
    case OpKind::kConcat: {
      Index at = 0;
      for (std::size_t i = 0; i < n.args.size(); ++i) {
        const Index w = arg(i).cols();
        if (want(i)) add_to(i, g.middleCols(at, w));
        at += w;
      }
      return;
    }
    case OpKind::kSlice:
      if (want(0)) {
        Matrix c = Matrix::Zero(arg(0).rows(), arg(0).cols());
        c.middleCols(n.offset, n.width) = g;
        add_to(0, c);
      }
      return;
    case OpKind::kPadCols:
      if (want(0)) add_to(0, g.middleCols(n.offset, arg(0).cols()));
      return;
    case OpKind::kMinRows:
    case OpKind::kMaxRows:
      if (want(0)) {
        const Matrix& a = arg(0);
        Matrix c = Matrix::Zero(a.rows(), a.cols());
        const bool is_max = n.op == OpKind::kMaxRows;
        for (Index j = 0; j < a.cols(); ++j) c(extreme_row(a, j, is_max), j) = g(0, j);
        add_to(0, c);
      }
      return;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph construction

const Node& Graph::node(NodeRef ref) const {
  check(ref);
  return nodes_[ref.index];
}

void Graph::check(NodeRef ref) const {
  if (!ref.valid() || ref.index >= nodes_.size()) throw GraphError("invalid node reference");
}

NodeRef Graph::push(Node node) {
  for (NodeRef a : node.args) check(a);
  nodes_.push_back(std::move(node));
  return NodeRef{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeRef Graph::parameter(const std::string& name, Index rows, Index cols) {
  if (auto it = parameters_.find(name); it != parameters_.end()) {
    const Node& n = nodes_[it->second.index];
    if (n.rows != rows || n.cols != cols) throw GraphError("parameter '" + name + "' redeclared with a different shape");
    return it->second;
  }
  Node n;
  n.op = OpKind::kParameter;
  n.rows = rows;
  n.cols = cols;
  n.name = name;
  NodeRef ref = push(std::move(n));
  parameters_.emplace(name, ref);
  return ref;
}

NodeRef Graph::input(const std::string& name, Index cols) {
  if (auto it = inputs_.find(name); it != inputs_.end()) {
    if (nodes_[it->second.index].cols != cols) throw GraphError("input '" + name + "' redeclared with a different shape");
    return it->second;
  }
  Node n;
  n.op = OpKind::kInput;
  n.cols = cols;
  n.name = name;
  NodeRef ref = push(std::move(n));
  inputs_.emplace(name, ref);
  return ref;
}

NodeRef Graph::constant(Matrix value) {
  Node n;
  n.op = OpKind::kConstant;
  n.rows = value.rows();
  n.cols = value.cols();
  n.constant = std::move(value);
  return push(std::move(n));
}

namespace {
Node make(OpKind op, std::vector<NodeRef> args, Index rows, Index cols) {
  Node n;
  n.op = op;
  n.args = std::move(args);
  n.rows = rows;
  n.cols = cols;
  return n;
}
}  // namespace

NodeRef Graph::affine(NodeRef x, NodeRef weight, std::optional<NodeRef> bias) {
  const Node& xn = node(x);
  const Node& wn = node(weight);
  merge_extent(xn.cols, wn.cols, "affine");
  std::vector<NodeRef> args{x, weight};
  if (bias) {
    const Node& bn = node(*bias);
    merge_extent(bn.rows, 1, "affine bias");
    merge_extent(bn.cols, wn.rows, "affine bias");
    args.push_back(*bias);
  }
  return push(make(OpKind::kAffine, std::move(args), xn.rows, wn.rows));
}

NodeRef Graph::matmul(NodeRef a, NodeRef b, bool transpose_a, bool transpose_b) {
  const Node& an = node(a);
  const Node& bn = node(b);
  const Index ar = transpose_a ? an.cols : an.rows;
  const Index ac = transpose_a ? an.rows : an.cols;
  const Index br = transpose_b ? bn.cols : bn.rows;
  const Index bc = transpose_b ? bn.rows : bn.cols;
  merge_extent(ac, br, "matmul");
  Node n = make(OpKind::kMatMul, {a, b}, ar, bc);
  n.flag_a = transpose_a;
  n.flag_b = transpose_b;
  return push(std::move(n));
}

namespace {
std::pair<Index, Index> same_shape(const Node& a, const Node& b, const char* what) {
  return {merge_extent(a.rows, b.rows, what), merge_extent(a.cols, b.cols, what)};
}
}  // namespace

NodeRef Graph::add(NodeRef a, NodeRef b) {
  auto [r, c] = same_shape(node(a), node(b), "add");
  return push(make(OpKind::kAdd, {a, b}, r, c));
}

NodeRef Graph::sub(NodeRef a, NodeRef b) {
  auto [r, c] = same_shape(node(a), node(b), "sub");
  return push(make(OpKind::kSub, {a, b}, r, c));
}

NodeRef Graph::mul(NodeRef a, NodeRef b) {
  auto [r, c] = same_shape(node(a), node(b), "mul");
  return push(make(OpKind::kMul, {a, b}, r, c));
}

NodeRef Graph::scale(NodeRef a, double factor) {
  const Node& an = node(a);
  Node n = make(OpKind::kScale, {a}, an.rows, an.cols);
  n.scalar = factor;
  return push(std::move(n));
}

#define W2_UNARY(fn, kind)                                   \
  NodeRef Graph::fn(NodeRef a) {                             \
    const Node& an = node(a);                                \
    return push(make(OpKind::kind, {a}, an.rows, an.cols));  \
  }
W2_UNARY(celu, kCelu)
W2_UNARY(celu_grad, kCeluGrad)
W2_UNARY(celu_curv, kCeluCurv)
W2_UNARY(square, kSquare)
W2_UNARY(relu, kRelu)
W2_UNARY(step, kStep)
#undef W2_UNARY

NodeRef Graph::sum(NodeRef a) {
  node(a);
  return push(make(OpKind::kSumAll, {a}, 1, 1));
}

NodeRef Graph::mean(NodeRef a) {
  node(a);
  return push(make(OpKind::kMean, {a}, 1, 1));
}

NodeRef Graph::sum_rows(NodeRef a) { return push(make(OpKind::kSumRows, {a}, node(a).rows, 1)); }

NodeRef Graph::sum_cols(NodeRef a) { return push(make(OpKind::kSumCols, {a}, 1, node(a).cols)); }

NodeRef Graph::broadcast_rows(NodeRef row, NodeRef like) {
  const Node& rn = node(row);
  merge_extent(rn.rows, 1, "broadcast_rows");
  return push(make(OpKind::kBroadcastRows, {row, like}, node(like).rows, rn.cols));
}

NodeRef Graph::broadcast_cols(NodeRef column, NodeRef like) {
  const Node& cn = node(column);
  merge_extent(cn.cols, 1, "broadcast_cols");
  return push(make(OpKind::kBroadcastCols, {column, like}, cn.rows, node(like).cols));
}

NodeRef Graph::broadcast_all(NodeRef scalar, NodeRef like, bool normalize) {
  const Node& sn = node(scalar);
  merge_extent(sn.rows, 1, "broadcast_all");
  merge_extent(sn.cols, 1, "broadcast_all");
  const Node& ln = node(like);
  Node n = make(OpKind::kBroadcastAll, {scalar, like}, ln.rows, ln.cols);
  n.flag_a = normalize;
  return push(std::move(n));
}

NodeRef Graph::row_dot(NodeRef a, NodeRef b) {
  auto [r, c] = same_shape(node(a), node(b), "row_dot");
  (void)c;
  return push(make(OpKind::kRowDot, {a, b}, r, 1));
}

NodeRef Graph::concat(std::span<const NodeRef> parts) {
  if (parts.empty()) throw GraphError("concat of nothing");
  Index rows = kDynamicRows;
  Index cols = 0;
  for (NodeRef p : parts) {
    const Node& pn = node(p);
    rows = merge_extent(rows, pn.rows, "concat");
    if (pn.cols < 0) throw GraphError("concat needs static column counts");
    cols += pn.cols;
  }
  return push(make(OpKind::kConcat, {parts.begin(), parts.end()}, rows, cols));
}

NodeRef Graph::slice_cols(NodeRef a, Index offset, Index width) {
  const Node& an = node(a);
  if (offset < 0 || width < 0 || (an.cols >= 0 && offset + width > an.cols)) throw GraphError("slice out of range");
  Node n = make(OpKind::kSlice, {a}, an.rows, width);
  n.offset = offset;
  n.width = width;
  return push(std::move(n));
}

NodeRef Graph::pad_cols(NodeRef a, Index offset, Index total_cols) {
  const Node& an = node(a);
  if (an.cols < 0 || offset < 0 || offset + an.cols > total_cols) throw GraphError("pad out of range");
  Node n = make(OpKind::kPadCols, {a}, an.rows, total_cols);
  n.offset = offset;
  n.width = total_cols;
  return push(std::move(n));
}

NodeRef Graph::min_rows(NodeRef a) { return push(make(OpKind::kMinRows, {a}, 1, node(a).cols)); }

NodeRef Graph::max_rows(NodeRef a) { return push(make(OpKind::kMaxRows, {a}, 1, node(a).cols)); }

NodeRef Graph::extreme_mask(NodeRef a, bool is_max) {
  const Node& an = node(a);
  Node n = make(OpKind::kExtremeMask, {a}, an.rows, an.cols);
  n.flag_a = is_max;
  return push(std::move(n));
}

std::optional<NodeRef> Graph::find_parameter(std::string_view name) const {
  if (auto it = parameters_.find(std::string(name)); it != parameters_.end()) return it->second;
  return std::nullopt;
}

std::optional<NodeRef> Graph::find_input(std::string_view name) const {
  if (auto it = inputs_.find(std::string(name)); it != inputs_.end()) return it->second;
  return std::nullopt;
}

std::vector<NodeRef> Graph::parameters() const {
  std::vector<NodeRef> out;
  for (std::uint32_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].op == OpKind::kParameter) out.push_back(NodeRef{i});
  return out;
}

// ---------------------------------------------------------------------------
// Symbolic gradients

namespace {

NodeRef symbolic_vjp(Graph& g, NodeRef at, std::size_t slot, NodeRef adj) {
  // Copy what we need: building nodes may reallocate the node array.
  const Node& ref = g.node(at);
  const OpKind op = ref.op;
  const std::vector<NodeRef> args = ref.args;
  const bool ta = ref.flag_a;
  const bool tb = ref.flag_b;
  const double scalar = ref.scalar;
  const Index offset = ref.offset;

  switch (op) {
    case OpKind::kAffine:
      if (slot == 0) return g.matmul(adj, args[1]);
      if (slot == 1) return g.matmul(adj, args[0], true, false);
      return g.sum_cols(adj);
    case OpKind::kMatMul:
      if (slot == 0) return ta ? g.matmul(args[1], adj, tb, true) : g.matmul(adj, args[1], false, !tb);
      return tb ? g.matmul(adj, args[0], true, ta) : g.matmul(args[0], adj, !ta, false);
    case OpKind::kAdd:
      return adj;
    case OpKind::kSub:
      return slot == 0 ? adj : g.scale(adj, -1.0);
    case OpKind::kMul:
      return g.mul(adj, args[1 - slot]);
    case OpKind::kScale:
      return g.scale(adj, scalar);
    case OpKind::kCelu:
      return g.mul(adj, g.celu_grad(args[0]));
    case OpKind::kCeluGrad:
    case OpKind::kCeluCurv:
      return g.mul(adj, g.celu_curv(args[0]));
    case OpKind::kSquare:
      return g.mul(adj, g.scale(args[0], 2.0));
    case OpKind::kRelu:
      return g.mul(adj, g.step(args[0]));
    case OpKind::kSumAll:
      return g.broadcast_all(adj, args[0], false);
    case OpKind::kMean:
      return g.broadcast_all(adj, args[0], true);
    case OpKind::kSumRows:
      return g.broadcast_cols(adj, args[0]);
    case OpKind::kSumCols:
      return g.broadcast_rows(adj, args[0]);
    case OpKind::kBroadcastRows:
      return g.sum_cols(adj);
    case OpKind::kBroadcastCols:
      return g.sum_rows(adj);
    case OpKind::kBroadcastAll:
      return ta ? g.mean(adj) : g.sum(adj);
    case OpKind::kRowDot:
      return g.mul(g.broadcast_cols(adj, args[1 - slot]), args[1 - slot]);
    case OpKind::kConcat: {
      Index at_col = 0;
      for (std::size_t i = 0; i < slot; ++i) at_col += g.node(args[i]).cols;
      return g.slice_cols(adj, at_col, g.node(args[slot]).cols);
    }
    case OpKind::kSlice: {
      const Index total = g.node(args[0]).cols;
      if (total < 0) throw GraphError("cannot differentiate slice of a dynamic-width array");
      return g.pad_cols(adj, offset, total);
    }
    case OpKind::kPadCols:
      return g.slice_cols(adj, offset, g.node(args[0]).cols);
    case OpKind::kMinRows:
    case OpKind::kMaxRows:
      return g.mul(g.broadcast_rows(adj, args[0]), g.extreme_mask(args[0], op == OpKind::kMaxRows));
    default:
      break;
  }
  throw GraphError("no gradient rule for this operation");
}

}  // namespace

NodeRef input_grad(Graph& graph, NodeRef out, NodeRef wrt) {
  const Node& out_node = graph.node(out);
  graph.node(wrt);
  if (out_node.cols >= 0 && out_node.cols != 1) throw GraphError("input_grad needs a per-row scalar output");
  const std::size_t count = graph.size();

  std::vector<bool> from_wrt(count, false);
  from_wrt[wrt.index] = true;
  for (std::uint32_t i = wrt.index + 1; i <= out.index; ++i) {
    const Node& n = graph.node(NodeRef{i});
    for (std::size_t s = 0; s < n.args.size(); ++s)
      if (differentiable_slot(n.op, s) && from_wrt[n.args[s].index]) {
        from_wrt[i] = true;
        break;
      }
  }
  std::vector<bool> to_out(count, false);
  to_out[out.index] = true;
  for (std::uint32_t i = out.index + 1; i-- > 0;) {
    if (!to_out[i]) continue;
    for (NodeRef a : graph.node(NodeRef{i}).args) to_out[a.index] = true;
  }

  std::vector<NodeRef> adjoint(count);
  auto zeros_like = [&](NodeRef like) { return graph.broadcast_all(graph.constant(Matrix::Zero(1, 1)), like); };
  if (!from_wrt[out.index]) return zeros_like(wrt);

  adjoint[out.index] = graph.broadcast_all(graph.constant(Matrix::Ones(1, 1)), out);
  for (std::uint32_t i = out.index + 1; i-- > wrt.index + 1;) {
    if (!from_wrt[i] || !to_out[i] || !adjoint[i].valid()) continue;
    const std::vector<NodeRef> args = graph.node(NodeRef{i}).args;
    const OpKind op = graph.node(NodeRef{i}).op;
    for (std::size_t s = 0; s < args.size(); ++s) {
      const NodeRef a = args[s];
      if (!differentiable_slot(op, s) || !from_wrt[a.index]) continue;
      NodeRef c = symbolic_vjp(graph, NodeRef{i}, s, adjoint[i]);
      adjoint[a.index] = adjoint[a.index].valid() ? graph.add(adjoint[a.index], c) : c;
    }
  }
  return adjoint[wrt.index].valid() ? adjoint[wrt.index] : zeros_like(wrt);
}

// ---------------------------------------------------------------------------
// Evaluation

Bindings& Bindings::bind(const std::string& name, const Matrix& value) {
  values_[name] = &value;
  return *this;
}

Bindings& Bindings::bind_all(const ParameterSet& params) {
  for (const auto& [name, value] : params) values_[name] = &value;
  return *this;
}

const Matrix* Bindings::find(const std::string& name) const {
  auto it = values_.find(name);
  return it == values_.end() ? nullptr : it->second;
}

const Matrix& Evaluation::value(NodeRef ref) const {
  if (!has(ref)) throw GraphError("node was not evaluated");
  return values_[ref.index];
}

bool Evaluation::has(NodeRef ref) const { return ref.valid() && ref.index < computed_.size() && computed_[ref.index]; }

Evaluation evaluate(const Graph& graph, const Bindings& bindings, std::span<const NodeRef> outputs) {
  const std::size_t count = graph.size();
  std::vector<bool> needed(count, false);
  std::uint32_t top = 0;
  for (NodeRef o : outputs) {
    graph.node(o);
    needed[o.index] = true;
    top = std::max(top, o.index + 1);
  }
  for (std::uint32_t i = top; i-- > 0;) {
    if (!needed[i]) continue;
    for (NodeRef a : graph.node(NodeRef{i}).args) needed[a.index] = true;
  }

  Evaluation ev;
  ev.values_.resize(count);
  ev.computed_.assign(count, false);
  for (std::uint32_t i = 0; i < top; ++i) {
    if (!needed[i]) continue;
    const Node& n = graph.node(NodeRef{i});
    switch (n.op) {
      case OpKind::kParameter:
      case OpKind::kInput: {
        const Matrix* bound = bindings.find(n.name);
        if (bound == nullptr) throw GraphError("unbound leaf '" + n.name + "'");
        require_shape(*bound, n.rows, n.cols, n.name.c_str());
        ev.values_[i] = *bound;
        break;
      }
      case OpKind::kConstant:
        ev.values_[i] = n.constant;
        break;
      default:
        ev.values_[i] = compute(n, ev.values_);
    }
    ev.computed_[i] = true;
  }
  return ev;
}

Matrix eval(const Graph& graph, const Bindings& bindings, NodeRef root) {
  const NodeRef outs[] = {root};
  Evaluation ev = evaluate(graph, bindings, outs);
  return ev.value(root);
}

Gradients param_grad(const Graph& graph, const Evaluation& evaluation, NodeRef loss,
                     std::string_view prefix) {
  const Matrix& lv = evaluation.value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) throw GraphError("param_grad needs a scalar loss");
  if (!std::isfinite(lv(0, 0))) throw DivergenceError("loss is not finite");

  // GradTape: nodes that lie between some parameter and the loss, visited in
  // reverse creation order; adjoints accumulate additively.
  const std::size_t count = loss.index + 1;
  std::vector<bool> requires_grad(count, false);
  bool any_parameter = false;
  for (std::uint32_t i = 0; i < count; ++i) {
    if (!evaluation.has(NodeRef{i})) continue;
    const Node& n = graph.node(NodeRef{i});
    if (n.op == OpKind::kParameter) {
      if (!n.name.starts_with(prefix)) continue;
      requires_grad[i] = true;
      any_parameter = true;
      continue;
    }
    for (std::size_t s = 0; s < n.args.size(); ++s)
      if (differentiable_slot(n.op, s) && requires_grad[n.args[s].index]) {
        requires_grad[i] = true;
        break;
      }
  }
  if (!any_parameter) throw GraphError("loss does not depend on any parameter leaf");

  std::vector<Matrix> adjoint(count);
  adjoint[loss.index] = Matrix::Ones(1, 1);
  for (std::uint32_t i = count; i-- > 0;) {
    if (!requires_grad[i] || adjoint[i].size() == 0) continue;
    const Node& n = graph.node(NodeRef{i});
    if (n.op == OpKind::kParameter) continue;
    std::vector<bool> wants(n.args.size(), false);
    for (std::size_t s = 0; s < n.args.size(); ++s)
      wants[s] = differentiable_slot(n.op, s) && requires_grad[n.args[s].index];
    numeric_vjp(n, evaluation.values_, adjoint[i], adjoint, wants);
    adjoint[i] = Matrix();  // release early
  }

  Gradients grads;
  for (std::uint32_t i = 0; i < count; ++i) {
    const Node& n = graph.node(NodeRef{i});
    if (n.op != OpKind::kParameter || !evaluation.has(NodeRef{i}) || !requires_grad[i]) continue;
    const Matrix& value = evaluation.value(NodeRef{i});
    grads[n.name] = adjoint[i].size() ? adjoint[i] : Matrix::Zero(value.rows(), value.cols());
  }
  return grads;
}

void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state, double lr,
               const AdamOptions& options) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(options.beta1, t);
  const double correction2 = 1.0 - std::pow(options.beta2, t);
  for (auto& [name, value] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) continue;
    if (g->second.rows() != value.rows() || g->second.cols() != value.cols())
      throw GraphError("gradient shape mismatch for '" + name + "'");
    Matrix& m = state.first_moment[name];
    Matrix& v = state.second_moment[name];
    if (m.size() == 0) m = Matrix::Zero(value.rows(), value.cols());
    if (v.size() == 0) v = Matrix::Zero(value.rows(), value.cols());
    m = options.beta1 * m + (1.0 - options.beta1) * g->second;
    v = options.beta2 * v + (1.0 - options.beta2) * g->second.cwiseAbs2();
    value.array() -= lr * (m.array() / correction1) /
                     ((v.array() / correction2).sqrt() + options.epsilon);
  }
}

}  // namespace w2bench::ad
