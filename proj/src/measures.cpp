#include "w2bench/measures.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

namespace w2bench {

GaussianMixture random_mixture(Index dim, Index components, std::uint64_t seed, double delta,
                               double sigma) {
  if (dim < 1 || components < 1) throw std::invalid_argument("random_mixture: need dim, M >= 1");
  Rng rng = Rng(seed).fork(streams::kMixture);
  GaussianMixture mix;
  mix.weights = Vector::Constant(components, 1.0 / static_cast<double>(components));
  mix.means.assign(static_cast<std::size_t>(components), Vector(dim));
  std::vector<Index> order(static_cast<std::size_t>(components));
  for (Index d = 0; d < dim; ++d) {
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (Index m = 0; m < components; ++m) {
      const double grid = -delta * static_cast<double>(components) / 2.0 +
                          static_cast<double>(order[static_cast<std::size_t>(m)]) * delta;
      mix.means[static_cast<std::size_t>(m)](d) = grid;
    }
  }
  for (Index m = 0; m < components; ++m) {
    Matrix a(dim, dim);
    for (Index i = 0; i < dim; ++i) {
      for (Index j = 0; j < dim; ++j) a(i, j) = rng.normal();
      a.row(i).normalize();
    }
    Matrix cov = sigma * sigma * a * a.transpose();
    cov.diagonal().setConstant(sigma * sigma);
    mix.covariances.push_back(0.5 * (cov + cov.transpose()));
  }
  return mix;
}

GaussianMixture normalize_mixture(const GaussianMixture& mixture) {
  GaussianMixture out = mixture;
  const Index d = mixture.dim();
  Vector center = Vector::Zero(d);
  for (Index m = 0; m < mixture.size(); ++m) center += mixture.weights(m) * mixture.means[static_cast<std::size_t>(m)];
  double spread = 0.0;
  double diag = 0.0;
  for (Index m = 0; m < mixture.size(); ++m) {
    Vector& mu = out.means[static_cast<std::size_t>(m)];
    mu -= center;
    spread += mixture.weights(m) * mu.squaredNorm();
    diag += mixture.weights(m) * mixture.covariances[static_cast<std::size_t>(m)].diagonal().mean();
  }
  const double a = 1.0 / std::sqrt(spread / static_cast<double>(d) + diag);
  for (Index m = 0; m < mixture.size(); ++m) {
    out.means[static_cast<std::size_t>(m)] *= a;
    out.covariances[static_cast<std::size_t>(m)] *= a * a;
  }
  return out;
}

Moments mixture_moments(const GaussianMixture& mixture) {
  const Index d = mixture.dim();
  Moments mo{Vector::Zero(d), Matrix::Zero(d, d)};
  for (Index m = 0; m < mixture.size(); ++m) {
    const auto k = static_cast<std::size_t>(m);
    mo.mean += mixture.weights(m) * mixture.means[k];
    mo.covariance += mixture.weights(m) * (mixture.covariances[k] + mixture.means[k] * mixture.means[k].transpose());
  }
  mo.covariance -= mo.mean * mo.mean.transpose();
  return mo;
}

Moments empirical_moments(const Matrix& samples) {
  Moments mo;
  mo.mean = samples.colwise().mean().transpose();
  const Matrix centered = samples.rowwise() - mo.mean.transpose();
  mo.covariance = centered.transpose() * centered / static_cast<double>(samples.rows());
  return mo;
}

Matrix spd_sqrt(const Matrix& sigma) {
  if (sigma.rows() != sigma.cols()) throw std::invalid_argument("spd_sqrt: matrix not square");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (sigma + sigma.transpose()));
  Vector values = eig.eigenvalues();
  if (values.size() > 0 && values.minCoeff() < -1e-10)
    throw std::domain_error("spd_sqrt: matrix has a negative eigenvalue");
  values = values.cwiseMax(0.0).cwiseSqrt();
  const Matrix& v = eig.eigenvectors();
  Matrix root = v * values.asDiagonal() * v.transpose();
  return 0.5 * (root + root.transpose());
}

AffineMap gaussian_ot_map(const Vector& mean_p, const Matrix& cov_p, const Vector& mean_q,
                          const Matrix& cov_q) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (cov_p + cov_p.transpose()));
  const Vector values = eig.eigenvalues();
  if (values.minCoeff() <= 1e-12 * std::max(1.0, values.maxCoeff()))
    throw std::domain_error("gaussian_ot_map: singular source covariance");
  const Matrix& v = eig.eigenvectors();
  const Matrix root = v * values.cwiseSqrt().asDiagonal() * v.transpose();
  const Matrix inv_root = v * values.cwiseSqrt().cwiseInverse().asDiagonal() * v.transpose();
  Matrix a = inv_root * spd_sqrt(root * cov_q * root) * inv_root;
  a = (0.5 * (a + a.transpose())).eval();
  Vector shift = mean_q - a * mean_p;
  return AffineMap(std::move(a), std::move(shift));
}

MixtureSampler::MixtureSampler(GaussianMixture mixture, Rng rng)
    : mixture_(std::move(mixture)), rng_(rng) {
  double total = 0.0;
  for (Index m = 0; m < mixture_.size(); ++m) {
    Eigen::LLT<Matrix> llt(mixture_.covariances[static_cast<std::size_t>(m)]);
    if (llt.info() != Eigen::Success) throw std::domain_error("sample: covariance is not positive definite");
    factors_.push_back(llt.matrixL());
    total += mixture_.weights(m);
    cumulative_.push_back(total);
  }
  for (double& c : cumulative_) c /= total;
}

Matrix MixtureSampler::sample(Index n) {
  const Index d = dim();
  Matrix out(n, d);
  Vector z(d);
  for (Index i = 0; i < n; ++i) {
    const double u = rng_.uniform();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    const auto m = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()), cumulative_.size() - 1);
    for (Index k = 0; k < d; ++k) z(k) = rng_.normal();
    out.row(i) = (mixture_.means[m] + factors_[m] * z).transpose();
  }
  return out;
}

}  // namespace w2bench
