#pragma once

// L2-UVP and cosine similarity of a fitted map against a pair's ground truth.
//
// Both metrics use one evaluation sample x_1..x_n ~ P drawn from the
// evaluation stream, and y_i = T*(x_i). Var(Q) is the empirical variance of
// those same y_i, so the constant map T = mean(y) scores exactly 100%.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2bench/benchmark.hpp"
#include "w2bench/maps.hpp"
#include "w2bench/solvers.hpp"

namespace w2bench {

inline constexpr Index kEvalSamples = Index{1} << 14;
inline constexpr Index kLinearFitSamples = Index{1} << 16;

class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// x ~ P and the ground truth y = T*(x) on it.
struct EvalSample {
  Matrix x;
  Matrix y;
  Vector mean_y;
  double var_y = 0.0;
};

/// Throws MetricError when n < 2.
EvalSample draw_eval_sample(const BenchmarkPair& pair, Index n = kEvalSamples, std::uint64_t seed = 0);

/// 100 * mean |T(x) - y|^2 / var_y. Throws MetricError when var_y == 0.
double l2_uvp(const Matrix& mapped, const EvalSample& sample);
double l2_uvp(const TransportMap& map, const BenchmarkPair& pair, Index n = kEvalSamples, std::uint64_t seed = 0);

/// <T - id, T* - id> / (|T - id| |T* - id|) in L2 of the sample. Throws
/// MetricError when either displacement is zero.
double cosine(const Matrix& mapped, const EvalSample& sample);
double cosine(const TransportMap& map, const BenchmarkPair& pair, Index n = kEvalSamples, std::uint64_t seed = 0);

enum class Baseline { kIdentity, kConstant, kLinear };
std::string to_string(Baseline b);  // "ID", "C", "L"

/// ID: identity. C: mean(y) of the evaluation sample. L: Gaussian OT map
/// between moment estimates of P and Q from 2^16 samples each.
std::shared_ptr<TransportMap> baseline_map(Baseline b, const BenchmarkPair& pair, const EvalSample& sample,
                                           std::uint64_t seed = 0);

struct EvalReport {
  std::string solver;
  Index dim = 0;
  std::uint64_t seed = 0;
  double uvp_pct = 0.0;
  std::optional<double> cos;
  Index n_samples = 0;
  bool diverged = false;
  std::uint32_t config_hash = 0;
};

struct EvalOptions {
  Index n = kEvalSamples;
  std::uint64_t seed = 0;
};

/// Scores extract_map(out). Throws MetricError on a dimension mismatch;
/// an undefined cosine is reported as an empty field.
EvalReport evaluate(const SolverOutput& out, const SolverConfig& cfg, const BenchmarkPair& pair,
                    const EvalOptions& options = {});
EvalReport evaluate_map(const std::string& name, const TransportMap& map, const BenchmarkPair& pair,
                        const EvalSample& sample);
/// Baselines. ID reports cos = 0 unless T* = id on the sample, where cos is
/// left undefined.
EvalReport evaluate_baseline(Baseline b, const BenchmarkPair& pair, const EvalOptions& options = {});

std::string csv_header();
std::string csv_row(const EvalReport& r);
void write_csv(std::ostream& out, const std::vector<EvalReport>& rows);

}  // namespace w2bench
