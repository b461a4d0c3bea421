#include "w2bench/solvers.hpp"

#include <malloc.h>

#include <chrono>
#include <cmath>
#include <mutex>
#include <ostream>
#include <string>

#include <json.hpp>

#include "w2bench/discrete_ot.hpp"

namespace w2bench {

namespace {

struct KindName {
  SolverKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {SolverKind::kLS, "LS"},     {SolverKind::kMMB, "MM-B"},     {SolverKind::kQC, "QC"},
    {SolverKind::kMM, "MM"},     {SolverKind::kMMv1, "MMv1"},    {SolverKind::kMMv2, "MMv2"},
    {SolverKind::kW2, "W2"},     {SolverKind::kMMR, "MM:R"},     {SolverKind::kMMv2R, "MMv2:R"},
    {SolverKind::kW2R, "W2:R"},
};

}  // namespace

std::string to_string(SolverKind kind) {
  for (const KindName& k : kKindNames)
    if (k.kind == kind) return k.name;
  return "?";
}

SolverKind parse_solver_kind(const std::string& text) {
  for (const KindName& k : kKindNames)
    if (text == k.name) return k.kind;
  throw std::invalid_argument("unknown solver: " + text);
}

const std::vector<SolverKind>& all_solver_kinds() {
  static const std::vector<SolverKind> kinds = [] {
    std::vector<SolverKind> v;
    for (const KindName& k : kKindNames) v.push_back(k.kind);
    return v;
  }();
  return kinds;
}

bool is_reversed(SolverKind kind) {
  return kind == SolverKind::kMMR || kind == SolverKind::kMMv2R || kind == SolverKind::kW2R;
}

SolverKind forward_kind(SolverKind kind) {
  switch (kind) {
    case SolverKind::kMMR: return SolverKind::kMM;
    case SolverKind::kMMv2R: return SolverKind::kMMv2;
    case SolverKind::kW2R: return SolverKind::kW2;
    default: return kind;
  }
}

Index paper_iterations(SolverKind kind) {
  switch (forward_kind(kind)) {
    case SolverKind::kLS:
    case SolverKind::kMMB:
    case SolverKind::kQC: return 100000;
    case SolverKind::kMMv1: return 20000;
    case SolverKind::kMM:
    case SolverKind::kMMv2: return 50000;
    case SolverKind::kW2: return 250000;
    default: return 0;
  }
}

std::string config_json(const SolverConfig& cfg) {
  const nlohmann::json j = {{"kind", to_string(cfg.kind)},
                            {"batch", cfg.batch},
                            {"iterations", cfg.iterations},
                            {"lr", cfg.lr},
                            {"seed", cfg.seed},
                            {"epsilon", cfg.epsilon},
                            {"inner_steps", cfg.inner_steps},
                            {"inner_max_iters", cfg.inner_max_iters},
                            {"inner_lr", cfg.inner_lr},
                            {"inner_stop", cfg.inner_stop},
                            {"lambda", cfg.lambda},
                            {"qc_steps", cfg.qc_steps},
                            {"qc_gamma", cfg.qc_gamma},
                            {"pretrain_iters", cfg.pretrain_iters},
                            {"pretrain_batch", cfg.pretrain_batch},
                            {"pretrain_stop", cfg.pretrain_stop},
                            {"log_every", cfg.log_every},
                            {"blowup", cfg.blowup},
                            {"train_potential", cfg.train_potential}};
  return j.dump();
}

SolverConfig default_config(SolverKind kind, double iters_scale) {
  SolverConfig cfg;
  cfg.kind = kind;
  cfg.batch = forward_kind(kind) == SolverKind::kQC ? 64 : 1024;
  cfg.iterations = std::max<Index>(
      1, static_cast<Index>(std::llround(static_cast<double>(paper_iterations(kind)) * iters_scale)));
  return cfg;
}

namespace {

using Clock = std::chrono::steady_clock;

bool unconstrained_kind(SolverKind kind) {
  switch (kind) {
    case SolverKind::kLS:
    case SolverKind::kMMB:
    case SolverKind::kQC:
    case SolverKind::kMM: return true;
    default: return false;
  }
}

bool uses_phi(SolverKind kind) {
  switch (kind) {
    case SolverKind::kLS:
    case SolverKind::kMM:
    case SolverKind::kMMv2:
    case SolverKind::kW2: return true;
    default: return false;
  }
}

ad::NodeRef scalar_mean(ad::Graph& g, ad::NodeRef column) { return g.mean(column); }

ad::NodeRef half_sq_norm(ad::Graph& g, ad::NodeRef x) { return g.scale(g.sum_rows(g.square(x)), 0.5); }

struct W2Graph {
  ad::Graph g;
  ad::NodeRef loss;
  ad::NodeRef cycle;
  // Same value as `loss`, but the dual part reads H from the input "h", so
  // phi is only driven by the cycle term.
  ad::NodeRef update;
};

// L = E_P psi(x) + E_Q[<H, y> - psi(H)] + lambda E_Q |grad psi(H) - y|^2, H = grad phi(y).
void build_w2(W2Graph& w, const IcnnPotential& psi, const IcnnPotential& phi, double lambda) {
  ad::Graph& g = w.g;
  const ad::NodeRef x = g.input("x", psi.dim());
  const ad::NodeRef y = g.input("y", psi.dim());
  const ad::NodeRef h = ad::input_grad(g, phi.build(g, y), y);
  const ad::NodeRef psi_h = psi.build(g, h);
  const ad::NodeRef grad_psi_h = ad::input_grad(g, psi_h, h);
  w.cycle = g.mean(g.sum_rows(g.square(g.sub(grad_psi_h, y))));
  const ad::NodeRef dual = g.add(scalar_mean(g, psi.build(g, x)), g.mean(g.sub(g.row_dot(h, y), psi_h)));
  w.loss = g.add(dual, g.scale(w.cycle, lambda));

  const ad::NodeRef h_fixed = g.input("h", psi.dim());
  const ad::NodeRef dual_fixed =
      g.add(scalar_mean(g, psi.build(g, x)), g.mean(g.sub(g.row_dot(h_fixed, y), psi.build(g, h_fixed))));
  w.update = g.add(dual_fixed, g.scale(w.cycle, lambda));
}

class Run {
 public:
  Run(const SamplerPair& problem, const SolverConfig& cfg, std::ostream* log)
      : cfg_(cfg), log_(log), start_(Clock::now()) {
    if (cfg.batch < 1 || cfg.iterations < 0 || !(cfg.lr > 0.0))
      throw std::invalid_argument("solver config: batch, iterations and lr must be positive");
    Rng root = Rng(cfg.seed).fork(streams::kTraining);
    source_ = problem.source(root.fork(1));
    target_ = problem.target(root.fork(2));
    out_.kind = cfg.kind;
    out_.dim = problem.dim;
    const SolverKind k = forward_kind(cfg.kind);
    const bool constrained = !unconstrained_kind(k);
    out_.psi = make_dense_icnn(problem.dim, splitmix64(cfg.seed ^ 0x70736931ULL), constrained, "psi.");
    if (uses_phi(k))
      out_.phi = make_dense_icnn(problem.dim, splitmix64(cfg.seed ^ 0x70686931ULL), constrained, "phi.");
    PretrainOptions pre{cfg.pretrain_iters, 1e-3, cfg.pretrain_batch, cfg.pretrain_stop};
    pretrain_identity(out_.psi, [&](Index n) { return source_->sample(n); }, pre);
    if (out_.phi) pretrain_identity(*out_.phi, [&](Index n) { return target_->sample(n); }, pre);
    checkpoint();
  }

  SolverOutput& out() { return out_; }
  IcnnPotential& psi() { return out_.psi; }
  IcnnPotential& phi() { return *out_.phi; }
  Matrix sample_p() { return source_->sample(cfg_.batch); }
  Matrix sample_q() { return target_->sample(cfg_.batch); }
  Sampler& target() { return *target_; }

  /// Throws ad::DivergenceError if the loss is unusable.
  void check(double loss) const {
    if (!std::isfinite(loss) || std::abs(loss) > cfg_.blowup)
      throw ad::DivergenceError("loss diverged: " + std::to_string(loss));
  }

  void checkpoint() {
    good_psi_ = out_.psi.params();
    if (out_.phi) good_phi_ = out_.phi->params();
  }

  void restore() {
    out_.psi.params() = good_psi_;
    if (out_.phi) out_.phi->params() = good_phi_;
    out_.diverged = true;
  }

  void step_psi(const ad::Gradients& grads) {
    if (!cfg_.train_potential) return;
    ad::adam_step(out_.psi.params(), grads, psi_state_, cfg_.lr);
    out_.psi.project_convex();
  }

  void step_phi(const ad::Gradients& grads) {
    ad::adam_step(out_.phi->params(), grads, phi_state_, cfg_.lr);
    out_.phi->project_convex();
  }

  void record(Index it, double loss, double aux) {
    out_.iterations_done = it + 1;
    if (cfg_.log_every <= 0) return;
    if (it % cfg_.log_every != 0 && it + 1 != cfg_.iterations) return;
    TraceRow row{it, loss, aux, std::chrono::duration<double>(Clock::now() - start_).count()};
    out_.trace.push_back(row);
    if (log_) *log_ << row.iteration << ',' << row.loss << ',' << row.seconds << '\n';
  }

  void bind_params(ad::Bindings& b) const {
    b.bind_all(out_.psi.params());
    if (out_.phi) b.bind_all(out_.phi->params());
  }

 private:
  const SolverConfig& cfg_;
  std::ostream* log_;
  Clock::time_point start_;
  std::unique_ptr<Sampler> source_;
  std::unique_ptr<Sampler> target_;
  SolverOutput out_;
  ad::ParameterSet good_psi_;
  ad::ParameterSet good_phi_;
  ad::AdamState psi_state_;
  ad::AdamState phi_state_;
};

// Evaluates `loss` (plus extras) and returns its parameter gradients.
ad::Gradients loss_and_grads(const ad::Graph& g, const ad::Bindings& b, ad::NodeRef loss, double* value,
                             std::initializer_list<std::pair<ad::NodeRef, double*>> extras = {},
                             std::string_view prefix = {}) {
  std::vector<ad::NodeRef> outs{loss};
  for (const auto& e : extras) outs.push_back(e.first);
  const ad::Evaluation ev = ad::evaluate(g, b, outs);
  *value = ev.value(loss)(0, 0);
  for (const auto& e : extras) *e.second = ev.value(e.first)(0, 0);
  return ad::param_grad(g, ev, loss, prefix);
}

template <typename Body>
void loop(Run& run, const SolverConfig& cfg, Body body) {
  for (Index it = 0; it < cfg.iterations; ++it) {
    try {
      body(it);
    } catch (const ad::DivergenceError&) {
      run.restore();
      return;
    }
  }
}

void train_w2(Run& run, const SolverConfig& cfg) {
  const double lambda = cfg.lambda > 0.0 ? cfg.lambda : static_cast<double>(run.out().dim);
  W2Graph w;
  build_w2(w, run.psi(), run.phi(), lambda);
  loop(run, cfg, [&](Index it) {
    const Matrix x = run.sample_p();
    const Matrix y = run.sample_q();
    ad::Bindings b;
    run.bind_params(b);
    const Matrix h = run.phi().gradient(y);
    b.bind("x", x).bind("y", y).bind("h", h);
    double loss = 0.0, cycle = 0.0;
    const ad::Gradients grads = loss_and_grads(w.g, b, w.update, &loss, {{w.cycle, &cycle}});
    run.check(loss);
    run.checkpoint();
    run.step_psi(grads);
    run.step_phi(grads);
    run.record(it, loss, cycle);
  });
}

// Shared by MM (unconstrained nets) and MMv2 (convex nets).
void train_maximin(Run& run, const SolverConfig& cfg) {
  const Index d = run.out().dim;
  ad::Graph outer;
  const ad::NodeRef ox = outer.input("x", d);
  const ad::NodeRef oh = outer.input("h", d);
  const ad::NodeRef outer_loss = outer.sub(outer.mean(run.psi().build(outer, ox)),
                                           outer.mean(run.psi().build(outer, oh)));
  ad::AdamState inner_state;

  loop(run, cfg, [&](Index it) {
    run.checkpoint();
    maximin_inner_steps(run.psi(), run.phi(), run.target(), cfg.inner_steps, cfg, inner_state);
    const Matrix x = run.sample_p();
    const Matrix y = run.sample_q();
    const Matrix h = run.phi().gradient(y);
    ad::Bindings b;
    run.bind_params(b);
    b.bind("x", x).bind("h", h);
    double value = 0.0;
    const ad::Gradients grads = loss_and_grads(outer, b, outer_loss, &value);
    const double loss = value + h.cwiseProduct(y).rowwise().sum().mean();
    run.check(loss);
    run.step_psi(grads);
    run.record(it, loss, 0.0);
  });
}

void train_mmb(Run& run, const SolverConfig& cfg) {
  ad::Graph g;
  const ad::NodeRef x = g.input("x", run.out().dim);
  const ad::NodeRef y = g.input("y", run.out().dim);
  const ad::NodeRef psi_x = run.psi().build(g, x);
  const ad::NodeRef cross = g.matmul(x, y, false, true);
  const ad::NodeRef inner = g.min_rows(g.sub(g.broadcast_cols(psi_x, cross), cross));
  const ad::NodeRef loss = g.sub(g.mean(psi_x), g.mean(inner));
  loop(run, cfg, [&](Index it) {
    const Matrix xv = run.sample_p();
    const Matrix yv = run.sample_q();
    ad::Bindings b;
    run.bind_params(b);
    b.bind("x", xv).bind("y", yv);
    double value = 0.0;
    const ad::Gradients grads = loss_and_grads(g, b, loss, &value);
    run.check(value);
    run.checkpoint();
    run.step_psi(grads);
    run.record(it, value, 0.0);
  });
}

// -E f(x) - E g(y) + 1/(4 eps) E_{x,y} (f(x) + g(y) - |x - y|^2/2)_+^2 over the
// full cross batch, with f = |.|^2/2 - psi, g = |.|^2/2 - phi.
void train_ls(Run& run, const SolverConfig& cfg) {
  ad::Graph g;
  const Index d = run.out().dim;
  const ad::NodeRef x = g.input("x", d);
  const ad::NodeRef y = g.input("y", d);
  const ad::NodeRef psi_x = run.psi().build(g, x);
  const ad::NodeRef phi_y = run.phi().build(g, y);
  const ad::NodeRef f = g.sub(half_sq_norm(g, x), psi_x);
  const ad::NodeRef gy = g.sub(half_sq_norm(g, y), phi_y);
  const ad::NodeRef cross = g.matmul(x, y, false, true);
  const ad::NodeRef phi_row = g.matmul(g.constant(Matrix::Ones(1, 1)), phi_y, false, true);
  const ad::NodeRef slack =
      g.sub(g.sub(cross, g.broadcast_cols(psi_x, cross)), g.broadcast_rows(phi_row, cross));
  const ad::NodeRef penalty = g.scale(g.mean(g.square(g.relu(slack))), 1.0 / (4.0 * cfg.epsilon));
  const ad::NodeRef loss = g.add(g.scale(g.add(g.mean(f), g.mean(gy)), -1.0), penalty);
  loop(run, cfg, [&](Index it) {
    const Matrix xv = run.sample_p();
    const Matrix yv = run.sample_q();
    ad::Bindings b;
    run.bind_params(b);
    b.bind("x", xv).bind("y", yv);
    double value = 0.0, pen = 0.0;
    const ad::Gradients grads = loss_and_grads(g, b, loss, &value, {{penalty, &pen}});
    run.check(value);
    run.checkpoint();
    run.step_psi(grads);
    run.step_phi(grads);
    run.record(it, value, pen);
  });
}

// Regresses f(x_n) onto (1 - gamma) f*_n + gamma f(x_n), with f* the optimal
// discrete duals of the batch pair under cost |x - y|^2/2.
void train_qc(Run& run, const SolverConfig& cfg, std::ostream* log) {
  if (cfg.batch != 64 && log) *log << "# warning: QC batch " << cfg.batch << " differs from 64\n";
  const Index d = run.out().dim;
  ad::Graph g;
  const ad::NodeRef x = g.input("x", d);
  const ad::NodeRef target = g.input("target", 1);
  const ad::NodeRef f = g.sub(half_sq_norm(g, x), run.psi().build(g, x));
  const ad::NodeRef loss = g.mean(g.square(g.sub(f, target)));
  const Index n = cfg.batch;
  const Vector uniform = Vector::Constant(n, 1.0 / static_cast<double>(n));
  loop(run, cfg, [&](Index it) {
    const Matrix xv = run.sample_p();
    const Matrix yv = run.sample_q();
    const Matrix cost = 0.5 * ((xv.rowwise().squaredNorm() * Matrix::Ones(1, n)) +
                               (Matrix::Ones(n, 1) * yv.rowwise().squaredNorm().transpose()) -
                               2.0 * xv * yv.transpose());
    DiscreteOtResult ot;
    double gap = 0.0;
    try {
      ot = solve_exact(cost, uniform, uniform);
      gap = std::abs(uniform.dot(ot.f) + uniform.dot(ot.g) - ot.cost);
      if (gap > 1e-9 * (1.0 + std::abs(ot.cost))) throw DiscreteOtError("strong duality violated");
    } catch (const DiscreteOtError& e) {
      ++run.out().failed_solves;
      if (log) *log << "# discrete solve failed at " << it << ": " << e.what() << '\n';
      return;
    }
    double value = 0.0;
    for (Index k = 0; k < cfg.qc_steps; ++k) {
      const Vector f_now = 0.5 * xv.rowwise().squaredNorm() - run.psi().value(xv);
      const Matrix t = (1.0 - cfg.qc_gamma) * ot.f + cfg.qc_gamma * f_now;
      ad::Bindings b;
      run.bind_params(b);
      b.bind("x", xv).bind("target", t);
      const ad::Gradients grads = loss_and_grads(g, b, loss, &value);
      run.check(value);
      run.checkpoint();
      run.step_psi(grads);
    }
    run.record(it, value, gap);
  });
}

void train_mmv1(Run& run, const SolverConfig& cfg) {
  const Index d = run.out().dim;
  ad::Graph g;
  const ad::NodeRef x = g.input("x", d);
  const ad::NodeRef xs = g.input("xs", d);
  const ad::NodeRef loss = g.sub(g.mean(run.psi().build(g, x)), g.mean(run.psi().build(g, xs)));
  loop(run, cfg, [&](Index it) {
    const Matrix xv = run.sample_p();
    const Matrix yv = run.sample_q();
    const InnerSolve inner = mmv1_argmin(run.psi(), yv, cfg);
    std::vector<Index> keep;
    for (Index i = 0; i < yv.rows(); ++i) {
      if (inner.converged[static_cast<std::size_t>(i)]) {
        keep.push_back(i);
      } else {
        ++run.out().skipped_samples;
      }
    }
    if (keep.empty()) return;
    const Matrix xs_v = inner.x(keep, Eigen::all);
    const Matrix ys_v = yv(keep, Eigen::all);
    ad::Bindings b;
    run.bind_params(b);
    b.bind("x", xv).bind("xs", xs_v);
    double value = 0.0;
    const ad::Gradients grads = loss_and_grads(g, b, loss, &value);
    const double full = value + xs_v.cwiseProduct(ys_v).rowwise().sum().mean();
    run.check(full);
    run.checkpoint();
    run.step_psi(grads);
    run.record(it, full, static_cast<double>(yv.rows() - static_cast<Index>(keep.size())));
  });
}

}  // namespace

std::vector<double> maximin_inner_steps(const IcnnPotential& psi, IcnnPotential& phi, Sampler& target,
                                        Index steps, const SolverConfig& cfg, ad::AdamState& state) {
  const Index d = psi.dim();
  ad::Graph g;
  const ad::NodeRef y = g.input("y", d);
  const ad::NodeRef h = ad::input_grad(g, phi.build(g, y), y);
  const ad::NodeRef loss = g.mean(g.sub(psi.build(g, h), g.row_dot(h, y)));
  std::vector<double> values;
  for (Index k = 0; k < steps; ++k) {
    const Matrix yv = target.sample(cfg.batch);
    ad::Bindings b;
    b.bind_all(psi.params()).bind_all(phi.params()).bind("y", yv);
    double value = 0.0;
    const ad::Gradients grads = loss_and_grads(g, b, loss, &value, {}, phi.prefix());
    if (!std::isfinite(value) || std::abs(value) > cfg.blowup)
      throw ad::DivergenceError("inner loss diverged: " + std::to_string(value));
    ad::adam_step(phi.params(), grads, state, cfg.lr);
    phi.project_convex();
    values.push_back(value);
  }
  return values;
}

W2Loss w2_loss(const IcnnPotential& psi, const IcnnPotential& phi, const Matrix& x, const Matrix& y,
               double lambda) {
  W2Graph w;
  build_w2(w, psi, phi, lambda);
  const Matrix h = phi.gradient(y);
  ad::Bindings b;
  b.bind_all(psi.params()).bind_all(phi.params()).bind("x", x).bind("y", y).bind("h", h);
  const ad::NodeRef outs[] = {w.loss, w.cycle};
  const ad::Evaluation ev = ad::evaluate(w.g, b, outs);
  return {ev.value(w.loss)(0, 0), ev.value(w.cycle)(0, 0)};
}

ad::Gradients w2_update_grads(const IcnnPotential& psi, const IcnnPotential& phi, const Matrix& x,
                              const Matrix& y, double lambda) {
  W2Graph w;
  build_w2(w, psi, phi, lambda);
  const Matrix h = phi.gradient(y);
  ad::Bindings b;
  b.bind_all(psi.params()).bind_all(phi.params()).bind("x", x).bind("y", y).bind("h", h);
  double value = 0.0;
  return loss_and_grads(w.g, b, w.update, &value);
}

Vector batch_inner_values(const IcnnPotential& psi, const Matrix& x_batch, const Matrix& y) {
  const Vector psi_x = psi.value(x_batch);
  const Matrix cross = x_batch * y.transpose();
  Vector out(y.rows());
  for (Index j = 0; j < y.rows(); ++j) out(j) = (psi_x - cross.col(j)).minCoeff();
  return out + 0.5 * y.rowwise().squaredNorm();
}

InnerSolve mmv1_argmin(const IcnnPotential& psi, const Matrix& y, const SolverConfig& cfg) {
  InnerSolve s;
  s.x = y;
  s.converged.assign(static_cast<std::size_t>(y.rows()), false);
  std::vector<Index> active(static_cast<std::size_t>(y.rows()));
  for (Index i = 0; i < y.rows(); ++i) active[static_cast<std::size_t>(i)] = i;
  for (Index it = 0; it <= cfg.inner_max_iters && !active.empty(); ++it) {
    const Matrix grad = psi.gradient(s.x(active, Eigen::all)) - y(active, Eigen::all);
    std::vector<Index> still;
    for (Index k = 0; k < static_cast<Index>(active.size()); ++k) {
      const Index i = active[static_cast<std::size_t>(k)];
      if (grad.row(k).norm() < cfg.inner_stop) {
        s.converged[static_cast<std::size_t>(i)] = true;
      } else if (it < cfg.inner_max_iters) {
        s.x.row(i) -= cfg.inner_lr * grad.row(k);
        still.push_back(i);
      }
    }
    active = std::move(still);
  }
  return s;
}

SolverOutput train(const SamplerPair& problem, const SolverConfig& cfg, std::ostream* log) {
  // Training allocates and frees the same large batch buffers every step;
  // keeping them on the heap instead of fresh mmap pages roughly halves the
  // time per step.
  static std::once_flag allocator_once;
  std::call_once(allocator_once, [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  });
  const SolverKind k = forward_kind(cfg.kind);
  const SamplerPair oriented = is_reversed(cfg.kind) ? problem.swapped() : problem;
  Run run(oriented, cfg, log);
  switch (k) {
    case SolverKind::kW2: train_w2(run, cfg); break;
    case SolverKind::kMM:
    case SolverKind::kMMv2: train_maximin(run, cfg); break;
    case SolverKind::kMMB: train_mmb(run, cfg); break;
    case SolverKind::kLS: train_ls(run, cfg); break;
    case SolverKind::kQC: train_qc(run, cfg, log); break;
    case SolverKind::kMMv1: train_mmv1(run, cfg); break;
    default: throw std::invalid_argument("unsupported solver kind");
  }
  return std::move(run.out());
}

std::shared_ptr<TransportMap> extract_map(const SolverOutput& out) {
  if (is_reversed(out.kind)) {
    if (!out.phi) throw std::invalid_argument("reversed solver output has no map network");
    return std::make_shared<IcnnGradientMap>(*out.phi);
  }
  return std::make_shared<IcnnGradientMap>(out.psi);
}

}  // namespace w2bench
