#include "w2bench/icnn.hpp"

#include <algorithm>
#include <cmath>

#include "w2bench/rng.hpp"

namespace w2bench {

namespace {

double celu(double x) { return x > 0.0 ? x : std::expm1(x); }
double celu_grad(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

Matrix uniform_matrix(Rng& rng, Index rows, Index cols, double lo, double hi) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = lo + (hi - lo) * rng.uniform();
  return m;
}

}  // namespace

std::vector<Index> dense_icnn_widths(Index dim) {
  return {std::max<Index>(2 * dim, 64), std::max<Index>(2 * dim, 64), std::max<Index>(dim, 32)};
}

IcnnPotential::IcnnPotential(IcnnSpec spec, std::string prefix)
    : spec_(std::move(spec)), prefix_(std::move(prefix)) {
  if (spec_.dim < 1) throw std::invalid_argument("icnn: dim must be >= 1");
  if (spec_.widths.empty()) throw std::invalid_argument("icnn: no layers");
  const Index d = spec_.dim;
  for (Index l = 0; l < static_cast<Index>(spec_.widths.size()); ++l) {
    const Index w = spec_.widths[l];
    for (Index r = 0; r < spec_.rank; ++r) {
      params_[quad_weight(l, r)] = Matrix::Zero(w, d);
      params_[quad_bias(l, r)] = Matrix::Zero(1, w);
    }
    params_[linear_weight(l)] = Matrix::Zero(w, d);
    params_[linear_bias(l)] = Matrix::Zero(1, w);
    if (l > 0) params_[hidden_weight(l)] = Matrix::Zero(w, spec_.widths[l - 1]);
  }
  params_[out_weight()] = Matrix::Zero(1, spec_.widths.back());
}

Index IcnnPotential::parameter_count() const {
  Index total = 0;
  for (const auto& [name, value] : params_) total += value.size();
  return total;
}

std::string IcnnPotential::quad_weight(Index layer, Index r) const {
  return prefix_ + "in" + std::to_string(layer) + ".quad" + std::to_string(r) + ".weight";
}
std::string IcnnPotential::quad_bias(Index layer, Index r) const {
  return prefix_ + "in" + std::to_string(layer) + ".quad" + std::to_string(r) + ".bias";
}
std::string IcnnPotential::linear_weight(Index layer) const {
  return prefix_ + "in" + std::to_string(layer) + ".linear.weight";
}
std::string IcnnPotential::linear_bias(Index layer) const {
  return prefix_ + "in" + std::to_string(layer) + ".linear.bias";
}
std::string IcnnPotential::hidden_weight(Index layer) const {
  return prefix_ + "hidden" + std::to_string(layer) + ".weight";
}
std::string IcnnPotential::out_weight() const { return prefix_ + "out.weight"; }

std::vector<std::string> IcnnPotential::constrained_names() const {
  std::vector<std::string> names;
  for (Index l = 1; l < static_cast<Index>(spec_.widths.size()); ++l) names.push_back(hidden_weight(l));
  names.push_back(out_weight());
  return names;
}

ad::NodeRef IcnnPotential::build(ad::Graph& g, ad::NodeRef x) const {
  const Index d = spec_.dim;
  ad::NodeRef z;
  for (Index l = 0; l < static_cast<Index>(spec_.widths.size()); ++l) {
    const Index w = spec_.widths[l];
    ad::NodeRef pre = g.affine(x, g.parameter(linear_weight(l), w, d), g.parameter(linear_bias(l), 1, w));
    for (Index r = 0; r < spec_.rank; ++r) {
      ad::NodeRef u = g.affine(x, g.parameter(quad_weight(l, r), w, d), g.parameter(quad_bias(l, r), 1, w));
      pre = g.add(pre, g.square(u));
    }
    if (l > 0) pre = g.add(pre, g.affine(z, g.parameter(hidden_weight(l), w, spec_.widths[l - 1])));
    z = g.celu(pre);
  }
  ad::NodeRef out = g.affine(z, g.parameter(out_weight(), 1, spec_.widths.back()));
  if (spec_.beta == 0.0) return out;
  return g.add(out, g.scale(g.sum_rows(g.square(x)), 0.5 * spec_.beta));
}

void IcnnPotential::value_and_gradient(const Matrix& x, Vector* value, Matrix* gradient) const {
  if (x.cols() != spec_.dim) throw std::invalid_argument("icnn: input has wrong dimension");
  const Index layers = static_cast<Index>(spec_.widths.size());
  std::vector<Matrix> pre(layers);
  std::vector<std::vector<Matrix>> u(layers);
  Matrix z;
  for (Index l = 0; l < layers; ++l) {
    Matrix p = x * params_.at(linear_weight(l)).transpose();
    p.rowwise() += params_.at(linear_bias(l)).row(0);
    for (Index r = 0; r < spec_.rank; ++r) {
      Matrix ur = x * params_.at(quad_weight(l, r)).transpose();
      ur.rowwise() += params_.at(quad_bias(l, r)).row(0);
      p += ur.cwiseAbs2();
      if (gradient) u[l].push_back(std::move(ur));
    }
    if (l > 0) p.noalias() += z * params_.at(hidden_weight(l)).transpose();
    z = p.unaryExpr([](double v) { return celu(v); });
    pre[l] = std::move(p);
  }
  const Matrix& w_out = params_.at(out_weight());
  if (value) {
    *value = z * w_out.transpose();
    *value += 0.5 * spec_.beta * x.rowwise().squaredNorm();
  }
  if (!gradient) return;
  Matrix grad = spec_.beta * x;
  Matrix delta = pre[layers - 1].unaryExpr([](double v) { return celu_grad(v); });
  delta.array().rowwise() *= w_out.row(0).array();
  for (Index l = layers - 1; l >= 0; --l) {
    grad.noalias() += delta * params_.at(linear_weight(l));
    for (Index r = 0; r < spec_.rank; ++r) {
      const Matrix scaled = 2.0 * u[l][r].cwiseProduct(delta);
      grad.noalias() += scaled * params_.at(quad_weight(l, r));
    }
    if (l > 0) {
      Matrix next = delta * params_.at(hidden_weight(l));
      delta = next.cwiseProduct(pre[l - 1].unaryExpr([](double v) { return celu_grad(v); }));
    }
  }
  *gradient = std::move(grad);
}

Vector IcnnPotential::value(const Matrix& x) const {
  Vector v;
  value_and_gradient(x, &v, nullptr);
  return v;
}

Matrix IcnnPotential::gradient(const Matrix& x) const {
  Matrix g;
  value_and_gradient(x, nullptr, &g);
  return g;
}

void IcnnPotential::project_convex() {
  if (!spec_.constrained) return;
  for (const std::string& name : constrained_names()) {
    Matrix& w = params_.at(name);
    w = w.cwiseMax(0.0);
  }
}

bool IcnnPotential::satisfies_constraints() const {
  if (!spec_.constrained) return true;
  for (const std::string& name : constrained_names())
    if (params_.at(name).minCoeff() < 0.0) return false;
  return true;
}

IcnnPotential IcnnPotential::renamed(const std::string& prefix) const {
  IcnnPotential out(spec_, prefix);
  for (const auto& [name, value] : params_) out.params_.at(prefix + name.substr(prefix_.size())) = value;
  return out;
}

IcnnPotential make_dense_icnn(Index dim, std::uint64_t seed, bool constrained, const std::string& prefix) {
  IcnnSpec spec;
  spec.dim = dim;
  spec.widths = dense_icnn_widths(dim);
  spec.constrained = constrained;
  IcnnPotential psi(spec, prefix);
  Rng rng = Rng(seed).fork(streams::kInit);
  const double in_bound = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Index l = 0; l < static_cast<Index>(spec.widths.size()); ++l) {
    const Index w = spec.widths[l];
    for (Index r = 0; r < spec.rank; ++r) {
      psi.params()[psi.quad_weight(l, r)] = uniform_matrix(rng, w, dim, -in_bound, in_bound);
      psi.params()[psi.quad_bias(l, r)] = uniform_matrix(rng, 1, w, -in_bound, in_bound);
    }
    psi.params()[psi.linear_weight(l)] = uniform_matrix(rng, w, dim, -in_bound, in_bound);
    psi.params()[psi.linear_bias(l)] = uniform_matrix(rng, 1, w, -in_bound, in_bound);
  }
  auto hidden = [&](Index rows, Index fan_in) {
    const double f = static_cast<double>(fan_in);
    return constrained ? uniform_matrix(rng, rows, fan_in, 0.0, 2.0 / f)
                       : uniform_matrix(rng, rows, fan_in, -1.0 / std::sqrt(f), 1.0 / std::sqrt(f));
  };
  for (Index l = 1; l < static_cast<Index>(spec.widths.size()); ++l)
    psi.params()[psi.hidden_weight(l)] = hidden(spec.widths[l], spec.widths[l - 1]);
  psi.params()[psi.out_weight()] = hidden(1, spec.widths.back());
  return psi;
}

PretrainResult pretrain_identity(IcnnPotential& psi, const BatchSampler& sampler,
                                 const PretrainOptions& options) {
  PretrainResult result;
  if (options.iterations <= 0) return result;
  ad::Graph g;
  ad::NodeRef x = g.input("x", psi.dim());
  ad::NodeRef grad = ad::input_grad(g, psi.build(g, x), x);
  ad::NodeRef residual = g.mean(g.sum_rows(g.square(g.sub(grad, x))));
  const ad::NodeRef outputs[] = {residual};
  ad::AdamState state;
  for (Index it = 0; it < options.iterations; ++it) {
    const Matrix batch = sampler(options.batch);
    ad::Bindings b;
    b.bind_all(psi.params()).bind("x", batch);
    const ad::Evaluation ev = ad::evaluate(g, b, outputs);
    const double loss = ev.value(residual)(0, 0);
    result.iterations = it + 1;
    result.relative_error = loss / batch.rowwise().squaredNorm().mean();
    if (options.stop_below > 0.0 && result.relative_error < options.stop_below) break;
    ad::adam_step(psi.params(), ad::param_grad(g, ev, residual), state, options.lr);
    psi.project_convex();
  }
  return result;
}

namespace {

// Largest Hessian eigenvalue per row by power iteration on central
// differences of the gradient.
Vector curvature_estimate(const IcnnPotential& psi, const Matrix& x, Index iterations, Rng& rng) {
  const Index n = x.rows();
  const Index d = x.cols();
  Matrix v(n, d);
  for (Index j = 0; j < d; ++j)
    for (Index i = 0; i < n; ++i) v(i, j) = rng.normal();
  v.rowwise().normalize();
  Vector lambda = Vector::Constant(n, psi.spec().beta);
  const double h = 1e-5;
  for (Index k = 0; k < iterations; ++k) {
    const Matrix hv = (psi.gradient(x + h * v) - psi.gradient(x - h * v)) / (2.0 * h);
    for (Index i = 0; i < n; ++i) {
      const double norm = hv.row(i).norm();
      lambda(i) = std::max(hv.row(i).dot(v.row(i)), psi.spec().beta);
      if (norm > 0.0) v.row(i) = hv.row(i) / norm;
    }
  }
  return lambda;
}

}  // namespace

InvertResult invert_map(const IcnnPotential& psi, const Matrix& y, const InvertOptions& options) {
  if (!(options.tol > 0.0)) throw std::invalid_argument("invert_map: tol must be positive");
  if (y.cols() != psi.dim()) throw std::invalid_argument("invert_map: wrong dimension");
  const Index n = y.rows();
  InvertResult result;
  result.x = y;
  result.converged.assign(static_cast<std::size_t>(n), false);
  Rng rng(0x1b873593ULL);

  std::vector<Index> active(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) active[static_cast<std::size_t>(i)] = i;
  Vector step(n);
  Index since_estimate = options.reestimate_every;

  for (Index it = 0; it <= options.max_iterations && !active.empty(); ++it) {
    const Matrix xa = result.x(active, Eigen::all);
    const Matrix ya = y(active, Eigen::all);
    Vector va;
    Matrix ga;
    psi.value_and_gradient(xa, &va, &ga);
    ga -= ya;
    va -= xa.cwiseProduct(ya).rowwise().sum();

    std::vector<Index> still;
    for (Index k = 0; k < static_cast<Index>(active.size()); ++k)
      if (ga.row(k).norm() <= options.tol) result.converged[static_cast<std::size_t>(active[k])] = true;
    result.iterations = it;
    if (it == options.max_iterations) break;

    if (since_estimate >= options.reestimate_every) {
      const Vector lambda = curvature_estimate(psi, xa, options.power_iterations, rng);
      for (Index k = 0; k < static_cast<Index>(active.size()); ++k) step(active[k]) = 1.0 / lambda(k);
      since_estimate = 0;
    }
    ++since_estimate;

    // Gradient step with a backtracking guard: halve the step of any row
    // whose objective went up.
    Matrix xn = xa;
    for (Index k = 0; k < static_cast<Index>(active.size()); ++k)
      xn.row(k) -= step(active[k]) * ga.row(k);
    Vector vn = psi.value(xn) - xn.cwiseProduct(ya).rowwise().sum();
    for (Index k = 0; k < static_cast<Index>(active.size()); ++k) {
      const Index i = active[k];
      if (result.converged[static_cast<std::size_t>(i)]) continue;
      if (vn(k) > va(k) + 1e-12 * (1.0 + std::abs(va(k)))) {
        step(i) *= 0.5;
      } else {
        result.x.row(i) = xn.row(k);
      }
      still.push_back(i);
    }
    active = std::move(still);
  }

  if (options.require_convergence &&
      std::find(result.converged.begin(), result.converged.end(), false) != result.converged.end())
    throw InversionError("invert_map: iteration cap reached before tolerance");
  result.value = psi.value(result.x) - result.x.cwiseProduct(y).rowwise().sum() +
                 0.5 * y.rowwise().squaredNorm();
  return result;
}

}  // namespace w2bench
