#pragma once

// Gaussian mixtures, samplers and the Gaussian (linear) OT map.

#include <cstdint>
#include <memory>
#include <vector>

#include "w2bench/maps.hpp"
#include "w2bench/rng.hpp"

namespace w2bench {

struct GaussianMixture {
  Vector weights;
  std::vector<Vector> means;
  std::vector<Matrix> covariances;

  Index dim() const { return means.empty() ? 0 : means.front().size(); }
  Index size() const { return static_cast<Index>(means.size()); }
};

inline constexpr double kGridSpacing = 1.0;
inline constexpr double kComponentScale = 0.4;

/// M components, uniform weights. Means sit on the grid
/// {-delta*M/2 + i*delta : i = 0..M-1}; on every axis each grid value is used
/// by exactly one component (independent random permutation per axis), so no
/// two means share a coordinate. Covariances are sigma^2 A A^T with the rows
/// of A uniform on the unit sphere.
GaussianMixture random_mixture(Index dim, Index components, std::uint64_t seed,
                               double delta = kGridSpacing, double sigma = kComponentScale);

/// Recentres the means exactly, then scales by a with
/// 1/a = sqrt(sum_m w_m |mu_m|^2 / D + mean diagonal covariance entry).
GaussianMixture normalize_mixture(const GaussianMixture& mixture);

struct Moments {
  Vector mean;
  Matrix covariance;
};

Moments mixture_moments(const GaussianMixture& mixture);
Moments empirical_moments(const Matrix& samples);

/// Symmetric PSD square root. Eigenvalues in [-1e-10, 0) are clamped to zero;
/// anything more negative is rejected.
Matrix spd_sqrt(const Matrix& sigma);

/// T(x) = S^{-1/2} (S^{1/2} Sq S^{1/2})^{1/2} S^{-1/2} (x - mu_p) + mu_q with S = Sigma_p.
AffineMap gaussian_ot_map(const Vector& mean_p, const Matrix& cov_p, const Vector& mean_q,
                          const Matrix& cov_q);

class Sampler {
 public:
  virtual ~Sampler() = default;
  virtual Index dim() const = 0;
  virtual Matrix sample(Index n) = 0;
};

class MixtureSampler final : public Sampler {
 public:
  /// Throws std::domain_error if a covariance has no Cholesky factor.
  MixtureSampler(GaussianMixture mixture, Rng rng);
  Index dim() const override { return mixture_.dim(); }
  Matrix sample(Index n) override;

 private:
  GaussianMixture mixture_;
  std::vector<Matrix> factors_;
  std::vector<double> cumulative_;
  Rng rng_;
};

class PushforwardSampler final : public Sampler {
 public:
  PushforwardSampler(std::unique_ptr<Sampler> base, std::shared_ptr<const TransportMap> map)
      : base_(std::move(base)), map_(std::move(map)) {}
  Index dim() const override { return map_->dim(); }
  Matrix sample(Index n) override { return map_->apply(base_->sample(n)); }

 private:
  std::unique_ptr<Sampler> base_;
  std::shared_ptr<const TransportMap> map_;
};

}  // namespace w2bench
