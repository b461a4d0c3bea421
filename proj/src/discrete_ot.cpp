#include "w2bench/discrete_ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace w2bench {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::vector<int> solve_assignment(const MatrixXd& cost, VectorXd* u_out, VectorXd* v_out) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw DiscreteOtError("assignment: cost matrix must be square");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is a virtual start column.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n);
  for (int j = 1; j <= n; ++j) row_to_col[match[j] - 1] = j - 1;
  if (u_out) *u_out = Eigen::Map<const VectorXd>(u.data() + 1, n);
  if (v_out) *v_out = Eigen::Map<const VectorXd>(v.data() + 1, n);
  return row_to_col;
}

namespace {

struct BasicCell {
  int row;
  int col;
  double flow;
};

// Transportation simplex on a spanning-tree basis of n + m - 1 cells.
// Nodes 0..n-1 are rows, n..n+m-1 columns.
class TransportationSimplex {
 public:
  TransportationSimplex(const MatrixXd& cost, const VectorXd& a, const VectorXd& b)
      : c_(cost), n_(static_cast<int>(cost.rows())), m_(static_cast<int>(cost.cols())) {
    northwest_corner(a, b);
  }

  void run() {
    const double scale = std::max(1.0, c_.cwiseAbs().maxCoeff());
    const long cap = 50L * n_ * m_ + 1000;
    for (long pivot = 0;; ++pivot) {
      potentials();
      int enter_i = -1, enter_j = -1;
      double best = -1e-12 * scale;
      for (int j = 0; j < m_; ++j) {
        for (int i = 0; i < n_; ++i) {
          const double reduced = c_(i, j) - u_(i) - v_(j);
          if (reduced < best) {
            best = reduced;
            enter_i = i;
            enter_j = j;
          }
        }
      }
      if (enter_i < 0) return;
      if (pivot >= cap) throw DiscreteOtError("transportation simplex: pivot limit reached");
      pivot_in(enter_i, enter_j);
    }
  }

  DiscreteOtResult result() const {
    DiscreteOtResult r;
    r.plan = MatrixXd::Zero(n_, m_);
    for (const BasicCell& cell : basis_) r.plan(cell.row, cell.col) += cell.flow;
    r.f = u_;
    r.g = v_;
    return r;
  }

 private:
  void northwest_corner(const VectorXd& a, const VectorXd& b) {
    VectorXd ra = a, rb = b;
    int i = 0, j = 0;
    while (i < n_ && j < m_) {
      const double flow = std::min(ra(i), rb(j));
      basis_.push_back({i, j, flow});
      ra(i) -= flow;
      rb(j) -= flow;
      if (i == n_ - 1) {
        ++j;
      } else if (j == m_ - 1) {
        ++i;
      } else if (ra(i) <= rb(j)) {
        ++i;
      } else {
        ++j;
      }
    }
  }

  void adjacency(std::vector<std::vector<int>>& adj) const {
    adj.assign(static_cast<std::size_t>(n_ + m_), {});
    for (int k = 0; k < static_cast<int>(basis_.size()); ++k) {
      adj[static_cast<std::size_t>(basis_[k].row)].push_back(k);
      adj[static_cast<std::size_t>(n_ + basis_[k].col)].push_back(k);
    }
  }

  void potentials() {
    std::vector<std::vector<int>> adj;
    adjacency(adj);
    u_ = VectorXd::Zero(n_);
    v_ = VectorXd::Zero(m_);
    std::vector<char> seen(static_cast<std::size_t>(n_ + m_), 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    while (!stack.empty()) {
      const int node = stack.back();
      stack.pop_back();
      for (int k : adj[static_cast<std::size_t>(node)]) {
        const BasicCell& cell = basis_[static_cast<std::size_t>(k)];
        const int other = node < n_ ? n_ + cell.col : cell.row;
        if (seen[static_cast<std::size_t>(other)]) continue;
        seen[static_cast<std::size_t>(other)] = 1;
        if (node < n_) {
          v_(cell.col) = c_(cell.row, cell.col) - u_(cell.row);
        } else {
          u_(cell.row) = c_(cell.row, cell.col) - v_(cell.col);
        }
        stack.push_back(other);
      }
    }
  }

  // Adds cell (i, j), pushes flow around the unique cycle it closes and
  // drops the first blocking cell.
  void pivot_in(int i, int j) {
    std::vector<std::vector<int>> adj;
    adjacency(adj);
    const int source = n_ + j;
    const int target = i;
    std::vector<int> via(static_cast<std::size_t>(n_ + m_), -1);
    std::vector<int> parent(static_cast<std::size_t>(n_ + m_), -1);
    std::vector<int> queue{source};
    parent[static_cast<std::size_t>(source)] = source;
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const int node = queue[head];
      if (node == target) break;
      for (int k : adj[static_cast<std::size_t>(node)]) {
        const BasicCell& cell = basis_[static_cast<std::size_t>(k)];
        const int other = node < n_ ? n_ + cell.col : cell.row;
        if (parent[static_cast<std::size_t>(other)] >= 0) continue;
        parent[static_cast<std::size_t>(other)] = node;
        via[static_cast<std::size_t>(other)] = k;
        queue.push_back(other);
      }
    }
    // Path column j -> ... -> row i. Entering cell gets +theta; cells on the
    // path alternate -theta (starting next to column j), +theta, ...
    std::vector<int> path;
    for (int node = target; node != source; node = parent[static_cast<std::size_t>(node)])
      path.push_back(via[static_cast<std::size_t>(node)]);
    std::reverse(path.begin(), path.end());
    double theta = std::numeric_limits<double>::infinity();
    int leaving = -1;
    for (std::size_t k = 0; k < path.size(); k += 2) {
      const double flow = basis_[static_cast<std::size_t>(path[k])].flow;
      if (flow < theta) {
        theta = flow;
        leaving = path[k];
      }
    }
    for (std::size_t k = 0; k < path.size(); ++k) {
      BasicCell& cell = basis_[static_cast<std::size_t>(path[k])];
      cell.flow += (k % 2 == 0) ? -theta : theta;
    }
    basis_[static_cast<std::size_t>(leaving)] = {i, j, theta};
  }

  const MatrixXd& c_;
  int n_;
  int m_;
  std::vector<BasicCell> basis_;
  VectorXd u_;
  VectorXd v_;
};

bool is_uniform(const VectorXd& w) {
  const double target = 1.0 / static_cast<double>(w.size());
  return ((w.array() - target).abs() <= 1e-15).all();
}

}  // namespace

DiscreteOtResult solve_exact(const MatrixXd& cost, const VectorXd& a, const VectorXd& b) {
  const Eigen::Index n = cost.rows();
  const Eigen::Index m = cost.cols();
  if (a.size() != n || b.size() != m || n == 0 || m == 0)
    throw DiscreteOtError("solve_exact: marginal sizes do not match the cost matrix");
  if (a.minCoeff() < 0.0 || b.minCoeff() < 0.0) throw DiscreteOtError("solve_exact: negative marginal weight");
  if (std::abs(a.sum() - b.sum()) > 1e-9) throw DiscreteOtError("solve_exact: marginal sums differ");
  if (!cost.allFinite()) throw DiscreteOtError("solve_exact: non-finite cost");

  DiscreteOtResult r;
  if (n == m && is_uniform(a) && is_uniform(b)) {
    VectorXd u, v;
    const std::vector<int> match = solve_assignment(cost, &u, &v);
    r.plan = MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) r.plan(i, match[static_cast<std::size_t>(i)]) = a(i);
    r.f = u;
    r.g = v;
  } else {
    TransportationSimplex simplex(cost, a, b);
    simplex.run();
    r = simplex.result();
  }
  const double shift = a.dot(r.f) / a.sum();
  r.f.array() -= shift;
  r.g.array() += shift;
  r.cost = r.plan.cwiseProduct(cost).sum();
  return r;
}

BruteForceResult brute_force(const MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw DiscreteOtError("brute_force: cost matrix must be square");
  if (n > 8) throw DiscreteOtError("brute_force: n > 8");
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  BruteForceResult best;
  best.cost = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += cost(i, perm[static_cast<std::size_t>(i)]);
    if (total < best.cost) {
      best.cost = total;
      best.permutation = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  best.cost /= static_cast<double>(n);
  return best;
}

}  // namespace w2bench
