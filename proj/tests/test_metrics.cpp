#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "w2bench/metrics.hpp"

using namespace w2bench;

namespace {

BenchmarkPair icnn_pair(Index d, std::uint64_t seed) {
  BenchmarkPair pair;
  pair.source = normalize_mixture(random_mixture(d, 3, seed));
  pair.potential = compose_potentials({{make_dense_icnn(d, seed + 1, true, "a."), 0.5},
                                       {make_dense_icnn(d, seed + 2, true, "b."), 0.5}},
                                      CompositionMode::kSum);
  return pair;
}

class MatrixMap final : public TransportMap {
 public:
  MatrixMap(Index d, std::function<Matrix(const Matrix&)> f) : d_(d), f_(std::move(f)) {}
  Index dim() const override { return d_; }
  Matrix apply(const Matrix& x) const override { return f_(x); }

 private:
  Index d_;
  std::function<Matrix(const Matrix&)> f_;
};

}  // namespace

TEST_CASE("exact map scores zero and cosine one") {
  const BenchmarkPair p = icnn_pair(4, 1);
  const EvalSample s = draw_eval_sample(p, 4096, 3);
  CHECK(l2_uvp(s.y, s) == 0.0);
  CHECK(std::abs(cosine(s.y, s) - 1.0) < 1e-12);
  CHECK(l2_uvp(*p.ground_truth_map(), p, 4096, 3) == 0.0);
}

TEST_CASE("constant baseline is exactly 100 percent") {
  for (Index d : {1, 2, 5, 16}) {
    for (std::uint64_t seed : {0u, 1u, 2u}) {
      const BenchmarkPair p = icnn_pair(d, 10 + seed);
      const EvalReport r = evaluate_baseline(Baseline::kConstant, p, {kEvalSamples, seed});
      CHECK(r.uvp_pct == 100.0);
      CHECK(r.n_samples == kEvalSamples);
    }
  }
}

TEST_CASE("perturbed map matches the closed form") {
  const BenchmarkPair p = icnn_pair(3, 4);
  const EvalSample s = draw_eval_sample(p, 2048, 0);
  Vector u(3);
  u << 1.0, 2.0, -2.0;
  u /= 3.0;
  for (double eps : {1e-3, 0.1, 0.5}) {
    Matrix shifted = s.y;
    shifted.rowwise() += eps * u.transpose();
    CHECK(l2_uvp(shifted, s) == doctest::Approx(100.0 * eps * eps / s.var_y).epsilon(1e-9));
  }
}

TEST_CASE("reflected map has cosine minus one") {
  const BenchmarkPair p = icnn_pair(5, 6);
  const EvalSample s = draw_eval_sample(p, 2048, 1);
  const Matrix reflected = 2.0 * s.x - s.y;
  CHECK(std::abs(cosine(reflected, s) + 1.0) < 1e-12);
}

TEST_CASE("cosine is bounded for arbitrary maps") {
  const BenchmarkPair p = icnn_pair(3, 7);
  const EvalSample s = draw_eval_sample(p, 512, 2);
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix m(s.x.rows(), s.x.cols());
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal();
    const double c = cosine(m, s);
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
  }
  CHECK(std::abs(cosine(s.y + 1e-9 * (s.y - s.x), s) - 1.0) <= 1e-12);
}

TEST_CASE("uvp is invariant under permuting the sample") {
  const BenchmarkPair p = icnn_pair(4, 8);
  EvalSample s = draw_eval_sample(p, 1000, 3);
  const Matrix mapped = 0.9 * s.y + 0.1 * s.x;
  const double before = l2_uvp(mapped, s);
  std::vector<Index> perm(1000);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(1);
  std::shuffle(perm.begin(), perm.end(), rng);
  EvalSample t = s;
  t.x = s.x(perm, Eigen::all);
  t.y = s.y(perm, Eigen::all);
  CHECK(l2_uvp(mapped(perm, Eigen::all), t) == doctest::Approx(before).epsilon(1e-12));
}

TEST_CASE("identity pair: ID scores zero and cosine is undefined") {
  const BenchmarkPair id = make_identity_pair(normalize_mixture(random_mixture(3, 3, 2)));
  const EvalReport r = evaluate_baseline(Baseline::kIdentity, id);
  CHECK(r.uvp_pct == 0.0);
  CHECK_FALSE(r.cos.has_value());
  CHECK_THROWS_AS(cosine(IdentityMap(3), id, 1024), MetricError);

  const BenchmarkPair p = icnn_pair(3, 9);
  CHECK_THROWS_AS(cosine(IdentityMap(3), p, 1024), MetricError);
  const EvalReport r2 = evaluate_baseline(Baseline::kIdentity, p);
  REQUIRE(r2.cos.has_value());
  CHECK(*r2.cos == 0.0);
  CHECK(r2.uvp_pct > 0.0);
}

TEST_CASE("linear baseline on a Gaussian pair") {
  for (Index d : {2, 4, 8}) {
    const BenchmarkPair g = make_gaussian_pair(d, 100 + d);
    const EvalReport r = evaluate_baseline(Baseline::kLinear, g);
    CHECK(r.uvp_pct < 0.5);
    REQUIRE(r.cos.has_value());
    CHECK(*r.cos > 0.99);
  }
}

TEST_CASE("degenerate inputs") {
  const BenchmarkPair p = icnn_pair(2, 3);
  CHECK_THROWS_AS(draw_eval_sample(p, 1), MetricError);

  BenchmarkPair flat;
  flat.source = p.source;
  flat.potential = compose_potentials({{QuadraticPotential{Matrix::Zero(2, 2), Vector::Ones(2)}, 1.0}},
                                      CompositionMode::kSum);
  const EvalSample s = draw_eval_sample(flat, 100);
  CHECK(s.var_y == 0.0);
  CHECK_THROWS_AS(l2_uvp(s.y, s), MetricError);

  const MatrixMap wrong(3, [](const Matrix& x) { return x; });
  CHECK_THROWS_AS(evaluate_map("x", wrong, p, draw_eval_sample(p, 10)), MetricError);
}

TEST_CASE("evaluate and CSV rows") {
  const BenchmarkPair p = icnn_pair(2, 12);
  SolverOutput out;
  out.kind = SolverKind::kW2;
  out.dim = 2;
  out.psi = std::get<IcnnPotential>(p.potential.parts()[0].part);
  SolverConfig cfg = default_config(SolverKind::kW2);
  cfg.seed = 5;

  const EvalReport a = evaluate(out, cfg, p);
  const EvalReport b = evaluate(out, cfg, p);
  CHECK(csv_row(a) == csv_row(b));
  CHECK(a.solver == "W2");
  CHECK(a.seed == 5);
  CHECK(a.n_samples == kEvalSamples);

  SolverConfig other = cfg;
  other.lr = 2e-3;
  CHECK(evaluate(out, other, p).config_hash != a.config_hash);

  out.kind = SolverKind::kW2R;
  CHECK_THROWS(evaluate(out, cfg, p));
  out.dim = 3;
  CHECK_THROWS_AS(evaluate(out, cfg, p), MetricError);

  CHECK(csv_header() == "solver,D,seed,uvp_pct,cos,n_samples,diverged,config_hash");
  EvalReport r;
  r.solver = "ID";
  r.dim = 2;
  r.uvp_pct = 12.5;
  r.n_samples = 16384;
  r.config_hash = 0xabc;
  CHECK(csv_row(r) == "ID,2,0,12.500000,,16384,0,00000abc");
  r.cos = -0.25;
  r.diverged = true;
  CHECK(csv_row(r) == "ID,2,0,12.500000,-0.250000,16384,1,00000abc");
  std::ostringstream os;
  write_csv(os, {r});
  CHECK(os.str() == csv_header() + "\n" + csv_row(r) + "\n");
}
