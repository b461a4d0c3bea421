#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include <Eigen/Eigenvalues>

#include "fd_oracle.hpp"
#include "w2bench/measures.hpp"

using namespace w2bench;
using w2test::relative_error;

namespace {

Matrix random_spd(Rng& rng, Index d) {
  Matrix a(d, d);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j) a(i, j) = rng.normal();
  return a * a.transpose() + 0.1 * Matrix::Identity(d, d);
}

}  // namespace

TEST_CASE("mixture construction") {
  for (Index d : {1, 2, 5, 16}) {
    for (Index m : {1, 3, 10}) {
      GaussianMixture mix = random_mixture(d, m, 42);
      REQUIRE(mix.size() == m);
      for (const Matrix& cov : mix.covariances) {
        for (Index k = 0; k < d; ++k) CHECK(cov(k, k) == kComponentScale * kComponentScale);
        CHECK((cov - cov.transpose()).norm() == 0.0);
        CHECK(Eigen::SelfAdjointEigenSolver<Matrix>(cov).eigenvalues().minCoeff() > -1e-12);
      }
      for (Index k = 0; k < d; ++k) {
        std::set<double> values;
        for (const Vector& mu : mix.means) values.insert(mu(k));
        CHECK(static_cast<Index>(values.size()) == m);
      }
    }
  }
  GaussianMixture single = random_mixture(1, 1, 3);
  CHECK(single.covariances[0](0, 0) == doctest::Approx(0.16));
}

TEST_CASE("normalization") {
  GaussianMixture zero;
  zero.weights = Vector::Ones(2) / 2.0;
  zero.means = {Vector::Zero(3), Vector::Zero(3)};
  zero.covariances = {0.16 * Matrix::Identity(3, 3), 0.16 * Matrix::Identity(3, 3)};
  GaussianMixture nz = normalize_mixture(zero);
  CHECK(relative_error(nz.covariances[0], Matrix::Identity(3, 3)) < 1e-15);

  for (Index d : {2, 7, 16}) {
    GaussianMixture mix = normalize_mixture(random_mixture(d, 10, 5));
    Moments mo = mixture_moments(mix);
    for (Index k = 0; k < d; ++k) {
      CHECK(std::abs(mo.covariance(k, k) - 1.0) < 1e-12);
      CHECK(std::abs(mo.mean(k)) < 1e-12);
    }
    MixtureSampler sampler(mix, Rng(1).fork(streams::kSampling));
    Moments em = empirical_moments(sampler.sample(100000));
    for (Index k = 0; k < d; ++k) {
      CHECK(em.covariance(k, k) >= 0.98);
      CHECK(em.covariance(k, k) <= 1.02);
    }
  }
}

TEST_CASE("sampling") {
  GaussianMixture mix = normalize_mixture(random_mixture(4, 3, 9));
  MixtureSampler a(mix, Rng(7));
  MixtureSampler b(mix, Rng(7));
  CHECK(a.sample(100) == b.sample(100));

  Moments mo = mixture_moments(mix);
  MixtureSampler s(mix, Rng(8));
  const Index n = 100000;
  Vector mean = s.sample(n).colwise().mean().transpose();
  for (Index k = 0; k < 4; ++k)
    CHECK(std::abs(mean(k) - mo.mean(k)) < 3.0 * std::sqrt(mo.covariance(k, k) / static_cast<double>(n)));

  auto base = std::make_unique<MixtureSampler>(mix, Rng(11));
  PushforwardSampler pushed(std::move(base), std::make_shared<IdentityMap>(4));
  MixtureSampler plain(mix, Rng(11));
  CHECK(pushed.sample(50) == plain.sample(50));

  GaussianMixture bad = mix;
  bad.covariances[1](0, 0) = -1.0;
  CHECK_THROWS_AS(MixtureSampler(bad, Rng(1)), std::domain_error);
}

TEST_CASE("pushforward commutes with the map for a fixed seed") {
  GaussianMixture mix = normalize_mixture(random_mixture(3, 3, 2));
  auto map = std::make_shared<AffineMap>(Matrix::Identity(3, 3) * 2.0, Vector::Ones(3));
  PushforwardSampler pushed(std::make_unique<MixtureSampler>(mix, Rng(4)), map);
  MixtureSampler plain(mix, Rng(4));
  CHECK(pushed.sample(64) == map->apply(plain.sample(64)));
}

TEST_CASE("moments") {
  GaussianMixture one = random_mixture(3, 1, 1);
  Moments m1 = mixture_moments(one);
  CHECK(m1.mean == one.means[0]);
  CHECK(relative_error(m1.covariance, one.covariances[0]) < 1e-15);

  GaussianMixture sym;
  Vector mu(2);
  mu << 1.0, -2.0;
  Matrix s0(2, 2);
  s0 << 1.0, 0.3, 0.3, 0.5;
  sym.weights = Vector::Ones(2) / 2.0;
  sym.means = {mu, -mu};
  sym.covariances = {s0, s0};
  Moments ms = mixture_moments(sym);
  CHECK(ms.mean.norm() == 0.0);
  CHECK(relative_error(ms.covariance, s0 + mu * mu.transpose()) < 1e-15);

  GaussianMixture mix = normalize_mixture(random_mixture(3, 10, 6));
  Moments exact = mixture_moments(mix);
  MixtureSampler s(mix, Rng(3));
  Moments em = empirical_moments(s.sample(1000000));
  CHECK(relative_error(em.covariance, exact.covariance) < 1e-2);
  CHECK((em.mean - exact.mean).norm() < 1e-2);
}

TEST_CASE("spd square root") {
  CHECK(spd_sqrt(Matrix::Identity(4, 4)) == Matrix::Identity(4, 4));
  Matrix d(2, 2);
  d << 4, 0, 0, 9;
  Matrix r(2, 2);
  r << 2, 0, 0, 3;
  CHECK(relative_error(spd_sqrt(d), r) < 1e-15);
  Rng rng(5);
  Matrix s = random_spd(rng, 16);
  Matrix root = spd_sqrt(s);
  CHECK((root * root - s).norm() < 1e-10);
  Matrix almost = Matrix::Zero(2, 2);
  almost(0, 0) = 1.0;
  almost(1, 1) = -1e-12;
  CHECK(spd_sqrt(almost)(1, 1) == 0.0);
  almost(1, 1) = -1e-6;
  CHECK_THROWS_AS(spd_sqrt(almost), std::domain_error);
}

TEST_CASE("gaussian OT map") {
  Vector mq(3);
  mq << 1, 2, 3;
  AffineMap t = gaussian_ot_map(Vector::Zero(3), Matrix::Identity(3, 3), mq, Matrix::Identity(3, 3));
  Matrix x(1, 3);
  x << 0.5, -0.5, 2.0;
  CHECK(relative_error(t.apply(x), x + mq.transpose()) < 1e-15);

  AffineMap one = gaussian_ot_map(Vector::Constant(1, 1.0), Matrix::Constant(1, 1, 4.0), Vector::Constant(1, -1.0),
                                  Matrix::Constant(1, 1, 9.0));
  Matrix z = Matrix::Constant(1, 1, 3.0);
  CHECK(one.apply(z)(0, 0) == doctest::Approx(1.5 * (3.0 - 1.0) - 1.0));

  Rng rng(10);
  const Index d = 5;
  Matrix sp = random_spd(rng, d);
  Matrix sq = random_spd(rng, d);
  Vector mp = Vector::Random(d);
  Vector mean_q = Vector::Random(d);
  AffineMap g = gaussian_ot_map(mp, sp, mean_q, sq);
  CHECK((g.matrix() - g.matrix().transpose()).norm() == 0.0);
  CHECK(Eigen::SelfAdjointEigenSolver<Matrix>(g.matrix()).eigenvalues().minCoeff() > 0.0);
  AffineMap same = gaussian_ot_map(mp, sp, mp, sp);
  CHECK((same.matrix() - Matrix::Identity(d, d)).norm() < 1e-10);

  GaussianMixture p;
  p.weights = Vector::Ones(1);
  p.means = {mp};
  p.covariances = {sp};
  MixtureSampler s(p, Rng(12));
  Moments em = empirical_moments(g.apply(s.sample(100000)));
  CHECK(relative_error(em.covariance, sq) < 2e-2);
  CHECK((em.mean - mean_q).norm() / std::sqrt(sq.trace()) < 2e-2);

  CHECK_THROWS_AS(gaussian_ot_map(mp, Matrix::Zero(d, d), mean_q, sq), std::domain_error);
}
