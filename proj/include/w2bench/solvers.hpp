#pragma once

// Dual-form W2 solvers. Every potential is f = 1/2|.|^2 - psi with psi a
// DenseICNN, so the fitted forward map is grad psi; maps H are grad phi.
// Losses are written in minimization form.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "w2bench/icnn.hpp"
#include "w2bench/maps.hpp"
#include "w2bench/measures.hpp"

namespace w2bench {

enum class SolverKind { kLS, kMMB, kQC, kMM, kMMv1, kMMv2, kW2, kMMR, kMMv2R, kW2R };

std::string to_string(SolverKind kind);
/// Accepts "LS", "MM-B", "QC", "MM", "MMv1", "MMv2", "W2", "MM:R", "MMv2:R", "W2:R".
SolverKind parse_solver_kind(const std::string& text);
const std::vector<SolverKind>& all_solver_kinds();
bool is_reversed(SolverKind kind);
SolverKind forward_kind(SolverKind kind);

struct SolverConfig {
  SolverKind kind = SolverKind::kW2;
  Index batch = 1024;
  Index iterations = 1000;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  double epsilon = 3e-2;          // LS
  Index inner_steps = 15;         // MM, MMv2
  Index inner_max_iters = 1000;   // MMv1
  double inner_lr = 0.3;          // MMv1
  double inner_stop = 1e-3;       // MMv1
  double lambda = 0.0;            // W2; 0 means D
  Index qc_steps = 1;             // QC
  double qc_gamma = 0.1;          // QC

  Index pretrain_iters = 1000;
  Index pretrain_batch = 256;
  double pretrain_stop = 1e-4;
  Index log_every = 100;
  /// |loss| above this counts as divergence.
  double blowup = 1e12;
  /// When false the potential psi is held fixed (only phi trains).
  bool train_potential = true;
};

/// Full iteration counts per kind: LS, MM-B, QC 100000; MMv1 20000;
/// MM, MMv2 50000; W2 250000.
Index paper_iterations(SolverKind kind);
/// Defaults for `kind`; iterations = round(paper_iterations * iters_scale).
SolverConfig default_config(SolverKind kind, double iters_scale = 0.1);

/// Every field as compact JSON with sorted keys; stable across runs.
std::string config_json(const SolverConfig& cfg);

/// Source and target samplers of a training problem, each created from an RNG.
struct SamplerPair {
  Index dim = 0;
  std::function<std::unique_ptr<Sampler>(Rng)> source;
  std::function<std::unique_ptr<Sampler>(Rng)> target;

  SamplerPair swapped() const { return {dim, target, source}; }
};

struct TraceRow {
  Index iteration = 0;
  double loss = 0.0;
  /// Kind-specific diagnostic (W2: cycle term; QC: duality gap).
  double aux = 0.0;
  double seconds = 0.0;
};

struct SolverOutput {
  SolverKind kind = SolverKind::kW2;
  Index dim = 0;
  IcnnPotential psi;
  std::optional<IcnnPotential> phi;
  std::vector<TraceRow> trace;
  bool diverged = false;
  Index iterations_done = 0;
  /// MMv1 inner solves that hit the cap, summed over training.
  Index skipped_samples = 0;
  /// QC steps dropped because the discrete solve failed its certificate.
  Index failed_solves = 0;
};

/// Runs the solver; writes "iter,loss,seconds" lines to `log` when given.
SolverOutput train(const SamplerPair& problem, const SolverConfig& cfg, std::ostream* log = nullptr);

/// grad psi for forward solvers, grad phi for reversed ones.
std::shared_ptr<TransportMap> extract_map(const SolverOutput& out);

/// The W2 objective on one batch pair, split into parts.
struct W2Loss {
  double total = 0.0;
  double cycle = 0.0;
};
W2Loss w2_loss(const IcnnPotential& psi, const IcnnPotential& phi, const Matrix& x, const Matrix& y,
               double lambda);
/// Parameter gradients of one W2 step. psi gets the gradient of the full
/// objective; phi gets lambda times the gradient of the cycle term only
/// (the dual part is maximal, not minimal, at the true conjugate).
ad::Gradients w2_update_grads(const IcnnPotential& psi, const IcnnPotential& phi, const Matrix& x,
                              const Matrix& y, double lambda);

/// min over the batch rows x_i of psi(x_i) - <x_i, y> + |y|^2/2, per row of y:
/// the batch-restricted value of min_x 1/2|x - y|^2 - f(x).
Vector batch_inner_values(const IcnnPotential& psi, const Matrix& x_batch, const Matrix& y);

/// `steps` Adam updates of phi on mean psi(grad phi(y)) - <grad phi(y), y>
/// with psi fixed and a fresh target batch per step (the MM/MMv2 inner
/// loop). psi and phi must use different name prefixes. Returns the losses;
/// throws ad::DivergenceError like train's divergence check.
std::vector<double> maximin_inner_steps(const IcnnPotential& psi, IcnnPotential& phi, Sampler& target,
                                        Index steps, const SolverConfig& cfg, ad::AdamState& state);

struct InnerSolve {
  Matrix x;
  std::vector<bool> converged;
};
/// Per-row gradient descent on psi(x) - <x, y> from x = y, with the MMv1
/// rate, cap and stopping rule from `cfg`.
InnerSolve mmv1_argmin(const IcnnPotential& psi, const Matrix& y, const SolverConfig& cfg);

}  // namespace w2bench
