#pragma once

// Benchmark pairs (P, grad psi # P) with a known optimal map, and the .w2pair
// container format.
//
// Pair files use the container in container.hpp with tag "W2PAIR01".
// Sections: source.weights, source.mean{m}, source.cov{m}, and per
// composition part k either part{k}.<parameter name> (ICNN) or part{k}.a,
// part{k}.b (quadratic).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2bench/container.hpp"
#include "w2bench/measures.hpp"
#include "w2bench/potentials.hpp"
#include "w2bench/solvers.hpp"

namespace w2bench {

inline constexpr int kPairFormatVersion = 1;

struct BenchmarkPair {
  GaussianMixture source;
  PotentialComposition potential;
  /// "hd", "gaussian" or "identity".
  std::string family = "hd";
  std::uint64_t seed = 0;
  /// W2 iterations used to fit each part (hd pairs only).
  Index fit_iterations = 0;

  Index dim() const { return source.dim(); }
  Matrix ground_truth(const Matrix& x) const { return potential.gradient(x); }
  std::shared_ptr<TransportMap> ground_truth_map() const;
  std::unique_ptr<Sampler> source_sampler(Rng rng) const;
  std::unique_ptr<Sampler> target_sampler(Rng rng) const;
  SamplerPair samplers() const;
};

class ConstructionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct HdPairOptions {
  std::uint64_t seed = 0;
  double iters_scale = 0.1;
  /// Overrides the scaled W2 iteration count when positive.
  Index fit_iterations = 0;
  /// Overrides the W2 learning rate when positive.
  double fit_lr = 0.0;
  double weight_first = 0.5;
  double weight_second = 0.5;
  std::ostream* log = nullptr;
};

/// P: normalized 3-mixture. Q1, Q2: normalized 10-mixtures. psi_k is fitted
/// by the W2 solver so grad psi_k # P ~ Q_k; the ground truth is
/// grad(w1 psi_1 + w2 psi_2). Throws ConstructionError if a fit diverges.
BenchmarkPair build_hd_pair(Index dim, const HdPairOptions& options);

/// P a random Gaussian, target another Gaussian, ground truth the affine
/// Brenier map between them (an explicit quadratic potential).
BenchmarkPair make_gaussian_pair(Index dim, std::uint64_t seed);

/// (P, P) with ground truth id = grad |x|^2/2.
BenchmarkPair make_identity_pair(const GaussianMixture& source, std::uint64_t seed = 0);

inline constexpr char kPairMagic[9] = "W2PAIR01";

std::vector<std::uint8_t> serialize_pair(const BenchmarkPair& pair);
/// Throws FormatError on version mismatch, checksum failure or truncation.
BenchmarkPair deserialize_pair(const std::vector<std::uint8_t>& bytes);
void save_pair(const BenchmarkPair& pair, const std::filesystem::path& path);
BenchmarkPair load_pair(const std::filesystem::path& path);

}  // namespace w2bench
