#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "w2bench/discrete_ot.hpp"

using namespace w2bench;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_cost(std::mt19937_64& gen, int n, int m) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  MatrixXd c(n, m);
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < n; ++i) c(i, j) = dist(gen);
  return c;
}

VectorXd random_weights(std::mt19937_64& gen, int n) {
  std::uniform_real_distribution<double> dist(0.1, 1.0);
  VectorXd w(n);
  for (int i = 0; i < n; ++i) w(i) = dist(gen);
  return w / w.sum();
}

void check_certificate(const DiscreteOtResult& r, const MatrixXd& c, const VectorXd& a, const VectorXd& b) {
  CHECK((r.plan.rowwise().sum() - a).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((r.plan.colwise().sum().transpose() - b).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(r.plan.minCoeff() >= -1e-15);
  CHECK(std::abs(a.dot(r.f) + b.dot(r.g) - r.cost) <= 1e-9);
  CHECK(std::abs(a.dot(r.f)) <= 1e-12);
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      CHECK(r.f(i) + r.g(j) <= c(i, j) + 1e-9);
      if (r.plan(i, j) > 1e-14) CHECK(std::abs(r.f(i) + r.g(j) - c(i, j)) <= 1e-9);
    }
  }
}

}  // namespace

TEST_CASE("small closed cases") {
  MatrixXd c(2, 2);
  c << 0, 1, 1, 0;
  VectorXd u = VectorXd::Constant(2, 0.5);
  DiscreteOtResult r = solve_exact(c, u, u);
  CHECK(r.cost == 0.0);
  CHECK(r.plan == 0.5 * MatrixXd::Identity(2, 2));

  MatrixXd zero = MatrixXd::Zero(4, 4);
  VectorXd q = VectorXd::Constant(4, 0.25);
  DiscreteOtResult z = solve_exact(zero, q, q);
  CHECK(z.cost == 0.0);
  check_certificate(z, zero, q, q);
}

TEST_CASE("brute force") {
  MatrixXd c = MatrixXd::Ones(5, 5) - MatrixXd::Identity(5, 5);
  BruteForceResult r = brute_force(c);
  CHECK(r.cost == 0.0);
  CHECK(r.permutation == std::vector<int>{0, 1, 2, 3, 4});
  MatrixXd one(1, 1);
  one << 3.0;
  CHECK(brute_force(one).cost == 3.0);
  CHECK_THROWS_AS(brute_force(MatrixXd::Zero(9, 9)), DiscreteOtError);
}

TEST_CASE("uniform instances match brute force and certify") {
  std::mt19937_64 gen(99);
  for (int n = 1; n <= 6; ++n) {
    for (int trial = 0; trial < 100; ++trial) {
      MatrixXd c = random_cost(gen, n, n);
      VectorXd u = VectorXd::Constant(n, 1.0 / n);
      DiscreteOtResult r = solve_exact(c, u, u);
      REQUIRE(std::abs(r.cost - brute_force(c).cost) <= 1e-9);
      check_certificate(r, c, u, u);
    }
  }
}

TEST_CASE("general marginals by transportation simplex") {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(gen() % 9);
    const int m = 1 + static_cast<int>(gen() % 9);
    MatrixXd c = random_cost(gen, n, m);
    VectorXd a = random_weights(gen, n);
    VectorXd b = random_weights(gen, m);
    DiscreteOtResult r = solve_exact(c, a, b);
    check_certificate(r, c, a, b);
  }
}

TEST_CASE("simplex agrees with the assignment solver on permuted uniform weights") {
  // Weights equal to 1/n up to 1e-13 route through the simplex instead.
  std::mt19937_64 gen(6);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 7;
    MatrixXd c = random_cost(gen, n, n);
    VectorXd u = VectorXd::Constant(n, 1.0 / n);
    VectorXd a = u;
    a(0) += 1e-13;
    a(1) -= 1e-13;
    DiscreteOtResult exact = solve_exact(c, u, u);
    DiscreteOtResult simplex = solve_exact(c, a, u);
    CHECK(std::abs(exact.cost - simplex.cost) < 1e-9);
  }
}

TEST_CASE("larger uniform batch") {
  std::mt19937_64 gen(7);
  const int n = 64;
  MatrixXd c = random_cost(gen, n, n);
  VectorXd u = VectorXd::Constant(n, 1.0 / n);
  DiscreteOtResult r = solve_exact(c, u, u);
  check_certificate(r, c, u, u);
}

TEST_CASE("input validation") {
  MatrixXd c = MatrixXd::Zero(2, 2);
  VectorXd a(2), b(2);
  a << 0.5, 0.5;
  b << 0.5, 0.6;
  CHECK_THROWS_AS(solve_exact(c, a, b), DiscreteOtError);
  b << 1.5, -0.5;
  CHECK_THROWS_AS(solve_exact(c, a, b), DiscreteOtError);
}
