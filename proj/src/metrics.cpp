#include "w2bench/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include <json.hpp>

namespace w2bench {

namespace {

// Fixed-order sum of squared row distances, divided by n. Shared by the
// numerator and the variance so the constant baseline is exactly 100%.
double mean_sq_dist(const Matrix& a, const Matrix& b) {
  double total = 0.0;
  for (Index i = 0; i < a.rows(); ++i) {
    double row = 0.0;
    for (Index j = 0; j < a.cols(); ++j) {
      const double d = a(i, j) - b(i, j);
      row += d * d;
    }
    total += row;
  }
  return total / static_cast<double>(a.rows());
}

Vector column_mean(const Matrix& y) {
  Vector mean = Vector::Zero(y.cols());
  for (Index i = 0; i < y.rows(); ++i)
    for (Index j = 0; j < y.cols(); ++j) mean(j) += y(i, j);
  return mean / static_cast<double>(y.rows());
}

void check_shape(const Matrix& mapped, const EvalSample& sample) {
  if (mapped.rows() != sample.x.rows() || mapped.cols() != sample.x.cols())
    throw MetricError("mapped batch does not match the evaluation sample");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

EvalSample draw_eval_sample(const BenchmarkPair& pair, Index n, std::uint64_t seed) {
  if (n < 2) throw MetricError("evaluation needs at least 2 samples");
  const Rng rng = Rng(seed).fork(streams::kEvaluation);
  EvalSample s;
  s.x = pair.source_sampler(rng.fork(1))->sample(n);
  s.y = pair.ground_truth(s.x);
  s.mean_y = column_mean(s.y);
  s.var_y = mean_sq_dist(s.y, s.mean_y.transpose().replicate(n, 1));
  return s;
}

double l2_uvp(const Matrix& mapped, const EvalSample& sample) {
  check_shape(mapped, sample);
  if (!(sample.var_y > 0.0)) throw MetricError("target variance is zero");
  return 100.0 * (mean_sq_dist(mapped, sample.y) / sample.var_y);
}

double l2_uvp(const TransportMap& map, const BenchmarkPair& pair, Index n, std::uint64_t seed) {
  const EvalSample s = draw_eval_sample(pair, n, seed);
  return l2_uvp(map.apply(s.x), s);
}

double cosine(const Matrix& mapped, const EvalSample& sample) {
  check_shape(mapped, sample);
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (Index i = 0; i < mapped.rows(); ++i) {
    for (Index j = 0; j < mapped.cols(); ++j) {
      const double a = mapped(i, j) - sample.x(i, j);
      const double b = sample.y(i, j) - sample.x(i, j);
      dot += a * b;
      na += a * a;
      nb += b * b;
    }
  }
  if (!(nb > 0.0)) throw MetricError("cosine undefined: ground-truth displacement is zero");
  if (!(na > 0.0)) throw MetricError("cosine undefined: map displacement is zero");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

double cosine(const TransportMap& map, const BenchmarkPair& pair, Index n, std::uint64_t seed) {
  const EvalSample s = draw_eval_sample(pair, n, seed);
  return cosine(map.apply(s.x), s);
}

std::string to_string(Baseline b) {
  switch (b) {
    case Baseline::kIdentity:
      return "ID";
    case Baseline::kConstant:
      return "C";
    case Baseline::kLinear:
      return "L";
  }
  return "?";
}

std::shared_ptr<TransportMap> baseline_map(Baseline b, const BenchmarkPair& pair, const EvalSample& sample,
                                           std::uint64_t seed) {
  switch (b) {
    case Baseline::kIdentity:
      return std::make_shared<IdentityMap>(pair.dim());
    case Baseline::kConstant:
      return std::make_shared<ConstantMap>(sample.mean_y);
    case Baseline::kLinear: {
      const Rng rng = Rng(seed).fork(streams::kEvaluation);
      const Moments p = empirical_moments(pair.source_sampler(rng.fork(2))->sample(kLinearFitSamples));
      const Moments q = empirical_moments(pair.target_sampler(rng.fork(3))->sample(kLinearFitSamples));
      return std::make_shared<AffineMap>(gaussian_ot_map(p.mean, p.covariance, q.mean, q.covariance));
    }
  }
  throw MetricError("unknown baseline");
}

EvalReport evaluate_map(const std::string& name, const TransportMap& map, const BenchmarkPair& pair,
                        const EvalSample& sample) {
  if (map.dim() != pair.dim()) {
    throw MetricError("dimension mismatch: map has D=" + std::to_string(map.dim()) + ", pair has D=" +
                      std::to_string(pair.dim()));
  }
  const Matrix mapped = map.apply(sample.x);
  EvalReport r;
  r.solver = name;
  r.dim = pair.dim();
  r.n_samples = sample.x.rows();
  r.uvp_pct = l2_uvp(mapped, sample);
  try {
    r.cos = cosine(mapped, sample);
  } catch (const MetricError&) {
    r.cos.reset();
  }
  return r;
}

EvalReport evaluate(const SolverOutput& out, const SolverConfig& cfg, const BenchmarkPair& pair,
                    const EvalOptions& options) {
  if (out.dim != pair.dim()) {
    throw MetricError("dimension mismatch: artifact has D=" + std::to_string(out.dim) + ", pair has D=" +
                      std::to_string(pair.dim()));
  }
  const EvalSample sample = draw_eval_sample(pair, options.n, options.seed);
  EvalReport r = evaluate_map(to_string(out.kind), *extract_map(out), pair, sample);
  r.seed = cfg.seed;
  r.diverged = out.diverged;
  const std::string text = config_json(cfg);
  r.config_hash = crc32_of(text.data(), text.size());
  return r;
}

EvalReport evaluate_baseline(Baseline b, const BenchmarkPair& pair, const EvalOptions& options) {
  const EvalSample sample = draw_eval_sample(pair, options.n, options.seed);
  EvalReport r = evaluate_map(to_string(b), *baseline_map(b, pair, sample, options.seed), pair, sample);
  if (b == Baseline::kIdentity) {
    // Zero displacement: reported as orthogonal unless T* is the identity too.
    const bool truth_is_identity = (sample.y.array() == sample.x.array()).all();
    if (truth_is_identity) {
      r.cos.reset();
    } else {
      r.cos = 0.0;
    }
  }
  r.seed = options.seed;
  const std::string text = nlohmann::json{{"baseline", to_string(b)}, {"n", options.n}}.dump();
  r.config_hash = crc32_of(text.data(), text.size());
  return r;
}

std::string csv_header() { return "solver,D,seed,uvp_pct,cos,n_samples,diverged,config_hash"; }

std::string csv_row(const EvalReport& r) {
  char hash[16];
  std::snprintf(hash, sizeof hash, "%08x", r.config_hash);
  return r.solver + "," + std::to_string(r.dim) + "," + std::to_string(r.seed) + "," + format_double(r.uvp_pct) +
         "," + (r.cos ? format_double(*r.cos) : std::string()) + "," + std::to_string(r.n_samples) + "," +
         (r.diverged ? "1" : "0") + "," + hash;
}

void write_csv(std::ostream& out, const std::vector<EvalReport>& rows) {
  out << csv_header() << '\n';
  for (const EvalReport& r : rows) out << csv_row(r) << '\n';
}

}  // namespace w2bench
