#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "fd_oracle.hpp"
#include "w2bench/adcore.hpp"

using namespace w2bench::ad;
using w2test::central_difference;
using w2test::relative_error;

namespace {

Matrix uniform(std::mt19937_64& gen, Index rows, Index cols, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(gen);
  return m;
}

double scalar_of(const Graph& g, const ParameterSet& params, NodeRef root, const Matrix* x = nullptr) {
  Bindings b;
  b.bind_all(params);
  if (x) b.bind("x", *x);
  return eval(g, b, root)(0, 0);
}

// Small two-layer network with the same ingredients as the production
// potential: affine maps, CELU, an input-quadratic skip, and a beta term.
struct TinyNet {
  Graph graph;
  NodeRef x;
  NodeRef psi;
  ParameterSet params;

  TinyNet(std::mt19937_64& gen, Index dim, Index width) {
    x = graph.input("x", dim);
    auto p = [&](const std::string& name, Index r, Index c) {
      params[name] = uniform(gen, r, c);
      return graph.parameter(name, r, c);
    };
    NodeRef h1 = graph.celu(graph.affine(x, p("w0", width, dim), p("b0", 1, width)));
    NodeRef quad = graph.square(graph.affine(x, p("q", width, dim), p("qb", 1, width)));
    NodeRef h2 = graph.celu(graph.add(graph.affine(h1, p("w1", width, width)), quad));
    NodeRef out = graph.affine(h2, p("wout", 1, width));
    psi = graph.add(out, graph.scale(graph.sum_rows(graph.square(x)), 0.5e-4));
  }
};

}  // namespace

TEST_CASE("eval closed forms") {
  Graph g;
  NodeRef x = g.input("x", 2);
  NodeRef half_norm = g.scale(g.sum_rows(g.square(x)), 0.5);
  Matrix xv(1, 2);
  xv << 3, 4;
  Bindings b;
  b.bind("x", xv);
  CHECK(eval(g, b, half_norm)(0, 0) == doctest::Approx(12.5));

  NodeRef w = g.parameter("w", 3, 2);
  NodeRef bias = g.parameter("b", 1, 3);
  NodeRef y = g.affine(x, w, bias);
  Matrix wv = Matrix::Zero(3, 2);
  Matrix bv(1, 3);
  bv << 0.5, -1.0, 2.0;
  b.bind("w", wv).bind("b", bv);
  CHECK(eval(g, b, y) == bv);

  Graph g2;
  NodeRef z = g2.input("z", 1);
  NodeRef c = g2.celu(z);
  Matrix zv = Matrix::Constant(1, 1, -1.0);
  Bindings b2;
  b2.bind("z", zv);
  CHECK(eval(g2, b2, c)(0, 0) == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-15));
}

TEST_CASE("eval reports unbound leaves and shape mismatches") {
  Graph g;
  NodeRef x = g.input("x", 2);
  NodeRef w = g.parameter("w", 3, 2);
  NodeRef y = g.affine(x, w);
  Bindings b;
  Matrix xv = Matrix::Ones(4, 2);
  b.bind("x", xv);
  CHECK_THROWS_AS(eval(g, b, y), GraphError);
  Matrix bad = Matrix::Ones(3, 5);
  b.bind("w", bad);
  CHECK_THROWS_AS(eval(g, b, y), GraphError);
  CHECK_THROWS_AS(g.add(x, g.parameter("v", 1, 3)), GraphError);
}

TEST_CASE("input_grad of simple potentials") {
  Graph g;
  NodeRef x = g.input("x", 3);
  NodeRef half_norm = g.scale(g.sum_rows(g.square(x)), 0.5);
  NodeRef grad_half = input_grad(g, half_norm, x);
  Matrix a(1, 3);
  a << 0.3, -2.0, 1.5;
  NodeRef linear = g.affine(x, g.constant(a));
  NodeRef grad_linear = input_grad(g, linear, x);

  std::mt19937_64 gen(1);
  Matrix xv = uniform(gen, 5, 3);
  Bindings b;
  b.bind("x", xv);
  CHECK(relative_error(eval(g, b, grad_half), xv) < 1e-15);
  CHECK(relative_error(eval(g, b, grad_linear), a.replicate(5, 1)) < 1e-15);

  NodeRef not_scalar = g.square(x);
  CHECK_THROWS_AS(input_grad(g, not_scalar, x), GraphError);
}

TEST_CASE("input_grad matches finite differences on random networks") {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 100; ++trial) {
    TinyNet net(gen, 4, 6);
    NodeRef grad = input_grad(net.graph, net.psi, net.x);
    Matrix xv = uniform(gen, 1, 4);
    Bindings b;
    b.bind_all(net.params).bind("x", xv);
    Matrix got = eval(net.graph, b, grad);
    Matrix want = central_difference(
        [&](const Matrix& xx) { return scalar_of(net.graph, net.params, net.psi, &xx); }, xv);
    REQUIRE(relative_error(got, want) < 1e-6);
  }
}

TEST_CASE("param_grad simple cases") {
  Graph g;
  NodeRef theta = g.parameter("theta", 2, 3);
  NodeRef loss = g.sum(g.square(theta));
  std::mt19937_64 gen(3);
  ParameterSet p{{"theta", uniform(gen, 2, 3)}};
  Bindings b;
  b.bind_all(p);
  const NodeRef outs[] = {loss};
  Gradients grads = param_grad(g, evaluate(g, b, outs), loss);
  CHECK(relative_error(grads.at("theta"), 2.0 * p.at("theta")) < 1e-15);

  Graph g2;
  NodeRef t2 = g2.parameter("theta", 2, 2);
  NodeRef constant_loss = g2.sum(g2.step(t2));  // piecewise constant in theta
  ParameterSet p2{{"theta", Matrix::Constant(2, 2, 0.5)}};
  Bindings b2;
  b2.bind_all(p2);
  const NodeRef outs2[] = {constant_loss};
  Gradients zero = param_grad(g2, evaluate(g2, b2, outs2), constant_loss);
  CHECK(zero.at("theta").isZero(0.0));
}

TEST_CASE("param_grad signals divergence on non-finite loss") {
  Graph g;
  NodeRef theta = g.parameter("theta", 1, 1);
  NodeRef loss = g.sum(g.square(theta));
  ParameterSet p{{"theta", Matrix::Constant(1, 1, std::numeric_limits<double>::infinity())}};
  Bindings b;
  b.bind_all(p);
  const NodeRef outs[] = {loss};
  CHECK_THROWS_AS(param_grad(g, evaluate(g, b, outs), loss), DivergenceError);
}

TEST_CASE("gradient of gradient matches finite differences over parameters") {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 20; ++trial) {
    TinyNet net(gen, 3, 8);  // 3*8*2 + 8*2 + 64 + 8 = 136 parameters
    NodeRef grad = input_grad(net.graph, net.psi, net.x);
    NodeRef loss = net.graph.mean(net.graph.sum_rows(net.graph.square(net.graph.sub(grad, net.x))));
    Matrix xv = uniform(gen, 5, 3);
    Bindings b;
    b.bind_all(net.params).bind("x", xv);
    const NodeRef outs[] = {loss};
    Gradients grads = param_grad(net.graph, evaluate(net.graph, b, outs), loss);
    for (const auto& [name, value] : net.params) {
      Matrix want = central_difference(
          [&](const Matrix& v) {
            ParameterSet p = net.params;
            p[name] = v;
            return scalar_of(net.graph, p, loss, &xv);
          },
          value);
      INFO(name);
      REQUIRE(relative_error(grads.at(name), want) < 1e-4);
    }
  }
}

namespace {

struct OpCase {
  const char* name;
  std::vector<std::pair<Index, Index>> leaf_shapes;
  std::function<NodeRef(Graph&, const std::vector<NodeRef>&)> build;
};

std::vector<OpCase> op_cases() {
  using L = const std::vector<NodeRef>&;
  return {
      {"affine", {{3, 4}, {2, 4}, {1, 2}}, [](Graph& g, L l) { return g.affine(l[0], l[1], l[2]); }},
      {"matmul", {{3, 4}, {4, 2}}, [](Graph& g, L l) { return g.matmul(l[0], l[1]); }},
      {"matmul_ta", {{4, 3}, {4, 2}}, [](Graph& g, L l) { return g.matmul(l[0], l[1], true, false); }},
      {"matmul_tb", {{3, 4}, {2, 4}}, [](Graph& g, L l) { return g.matmul(l[0], l[1], false, true); }},
      {"matmul_tab", {{4, 3}, {2, 4}}, [](Graph& g, L l) { return g.matmul(l[0], l[1], true, true); }},
      {"add", {{3, 4}, {3, 4}}, [](Graph& g, L l) { return g.add(l[0], l[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](Graph& g, L l) { return g.sub(l[0], l[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](Graph& g, L l) { return g.mul(l[0], l[1]); }},
      {"scale", {{3, 4}}, [](Graph& g, L l) { return g.scale(l[0], -1.7); }},
      {"celu", {{3, 4}}, [](Graph& g, L l) { return g.celu(l[0]); }},
      {"celu_grad", {{3, 4}}, [](Graph& g, L l) { return g.celu_grad(l[0]); }},
      {"celu_curv", {{3, 4}}, [](Graph& g, L l) { return g.celu_curv(l[0]); }},
      {"square", {{3, 4}}, [](Graph& g, L l) { return g.square(l[0]); }},
      {"relu", {{3, 4}}, [](Graph& g, L l) { return g.relu(l[0]); }},
      {"sum", {{3, 4}}, [](Graph& g, L l) { return g.sum(l[0]); }},
      {"mean", {{3, 4}}, [](Graph& g, L l) { return g.mean(l[0]); }},
      {"sum_rows", {{3, 4}}, [](Graph& g, L l) { return g.sum_rows(l[0]); }},
      {"sum_cols", {{3, 4}}, [](Graph& g, L l) { return g.sum_cols(l[0]); }},
      {"broadcast_rows", {{1, 4}, {3, 2}}, [](Graph& g, L l) { return g.broadcast_rows(l[0], l[1]); }},
      {"broadcast_cols", {{3, 1}, {3, 5}}, [](Graph& g, L l) { return g.broadcast_cols(l[0], l[1]); }},
      {"broadcast_all", {{1, 1}, {3, 5}}, [](Graph& g, L l) { return g.broadcast_all(l[0], l[1], true); }},
      {"dot", {{3, 4}, {3, 4}}, [](Graph& g, L l) { return g.row_dot(l[0], l[1]); }},
      {"concat", {{3, 2}, {3, 3}}, [](Graph& g, L l) { return g.concat(l); }},
      {"slice", {{3, 5}}, [](Graph& g, L l) { return g.slice_cols(l[0], 1, 3); }},
      {"pad", {{3, 2}}, [](Graph& g, L l) { return g.pad_cols(l[0], 2, 5); }},
      {"min_rows", {{4, 3}}, [](Graph& g, L l) { return g.min_rows(l[0]); }},
      {"max_rows", {{4, 3}}, [](Graph& g, L l) { return g.max_rows(l[0]); }},
  };
}

}  // namespace

TEST_CASE("every op: reverse-mode and symbolic gradients match finite differences") {
  std::mt19937_64 gen(2024);
  for (const OpCase& op : op_cases()) {
    INFO(op.name);
    for (int trial = 0; trial < 100; ++trial) {
      Graph g;
      ParameterSet params;
      std::vector<NodeRef> leaves;
      for (std::size_t k = 0; k < op.leaf_shapes.size(); ++k) {
        auto [r, c] = op.leaf_shapes[k];
        const std::string name = "p" + std::to_string(k);
        params[name] = uniform(gen, r, c);
        leaves.push_back(g.parameter(name, r, c));
      }
      NodeRef out = op.build(g, leaves);
      Matrix weights = uniform(gen, g.node(out).rows, g.node(out).cols);
      NodeRef weighted = g.mul(out, g.constant(weights));
      NodeRef loss = g.sum(weighted);
      NodeRef per_row = g.sum_rows(weighted);

      Bindings b;
      b.bind_all(params);
      const NodeRef outs[] = {loss};
      Gradients grads = param_grad(g, evaluate(g, b, outs), loss);
      for (std::size_t k = 0; k < leaves.size(); ++k) {
        const std::string name = "p" + std::to_string(k);
        Matrix want = central_difference(
            [&](const Matrix& v) {
              ParameterSet p = params;
              p[name] = v;
              return scalar_of(g, p, loss);
            },
            params[name]);
        REQUIRE(relative_error(grads.at(name), want) < 1e-5);

        NodeRef symbolic = input_grad(g, per_row, leaves[k]);
        REQUIRE(relative_error(eval(g, b, symbolic), want) < 1e-5);
      }
    }
  }
}

TEST_CASE("eval is bitwise deterministic") {
  std::mt19937_64 gen(5);
  TinyNet net(gen, 4, 16);
  NodeRef grad = input_grad(net.graph, net.psi, net.x);
  Matrix xv = uniform(gen, 64, 4);
  Bindings b;
  b.bind_all(net.params).bind("x", xv);
  Matrix first = eval(net.graph, b, grad);
  Matrix second = eval(net.graph, b, grad);
  CHECK(std::memcmp(first.data(), second.data(), sizeof(double) * first.size()) == 0);
}

TEST_CASE("adam first step moves by lr against the gradient sign") {
  ParameterSet p{{"w", Matrix(1, 3)}};
  p["w"] << 1.0, 2.0, 3.0;
  Gradients g{{"w", Matrix(1, 3)}};
  g["w"] << 0.5, -4.0, 1e-3;
  AdamState state;
  const Matrix before = p["w"];
  adam_step(p, g, state, 1e-2);
  Matrix delta = p["w"] - before;
  CHECK(delta(0, 0) == doctest::Approx(-1e-2).epsilon(1e-6));
  CHECK(delta(0, 1) == doctest::Approx(1e-2).epsilon(1e-6));
  CHECK(delta(0, 2) == doctest::Approx(-1e-2).epsilon(1e-4));
}

TEST_CASE("adam with zero gradient") {
  ParameterSet p{{"w", Matrix::Constant(2, 2, 0.25)}};
  Gradients zero{{"w", Matrix::Zero(2, 2)}};
  AdamState state;
  adam_step(p, zero, state, 1e-1);
  CHECK(p["w"] == Matrix::Constant(2, 2, 0.25));

  Gradients g{{"w", Matrix::Constant(2, 2, 1.0)}};
  adam_step(p, g, state, 1e-1);
  const Matrix m = state.first_moment["w"];
  const Matrix v = state.second_moment["w"];
  adam_step(p, zero, state, 1e-1);
  CHECK(relative_error(state.first_moment["w"], 0.9 * m) < 1e-15);
  CHECK(relative_error(state.second_moment["w"], 0.999 * v) < 1e-15);
}

TEST_CASE("adam converges on a scalar quadratic") {
  // loss = (theta - 0.1)^2 from theta = 0. Adam moves at most ~lr per step, so the
  // start must lie well within 500 * lr of the optimum.
  Graph g;
  NodeRef theta = g.parameter("theta", 1, 1);
  NodeRef target = g.constant(Matrix::Constant(1, 1, 0.1));
  NodeRef loss = g.sum(g.square(g.sub(theta, target)));
  ParameterSet p{{"theta", Matrix::Zero(1, 1)}};
  AdamState state;
  for (int it = 0; it < 500; ++it) {
    Bindings b;
    b.bind_all(p);
    const NodeRef outs[] = {loss};
    adam_step(p, param_grad(g, evaluate(g, b, outs), loss), state, 1e-3);
  }
  CHECK(std::abs(p["theta"](0, 0) - 0.1) < 1e-2);
}
