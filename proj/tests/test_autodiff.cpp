#include "doctest.h"

#include "lsttm/autodiff.hpp"

#include <cmath>
#include <random>

using namespace lsttm::ad;

namespace {

Array random_array(std::mt19937_64& rng, Index rows, Index cols, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Array a(rows, cols);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = dist(rng);
  return a;
}

// Keeps values away from 0 so kinks (leaky relu) and poles (log, 1/x) stay
// outside the central-difference stencil.
Array away_from_zero(std::mt19937_64& rng, Index rows, Index cols) {
  Array a = random_array(rng, rows, cols, 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (Index i = 0; i < a.size(); ++i) {
    if (sign(rng)) a.data()[i] = -a.data()[i];
  }
  return a;
}

// Contracts an op output with fixed random weights so every output entry
// reaches the scalar.
Var project(const Var& y, const Array& weights) { return sum(mul(y, constant(weights))); }

struct Shape {
  Index rows;
  Index cols;
};

Shape random_shape(std::mt19937_64& rng) {
  std::uniform_int_distribution<Index> d(1, 4);
  return {d(rng), d(rng)};
}

constexpr int kTrials = 100;
constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("forward values of catalog ops") {
  SUBCASE("leaky relu with slope 0.2") {
    CHECK(leaky_relu(scalar(-2.0), 0.2).item() == doctest::Approx(-0.4).epsilon(1e-15));
    CHECK(leaky_relu(scalar(3.0), 0.2).item() == 3.0);
  }
  SUBCASE("softmax of equal logits") {
    Array x(2, 1);
    x << 1.0, 1.0;
    const Var y = softmax(constant(x));
    CHECK(y.value()(0, 0) == 0.5);
    CHECK(y.value()(1, 0) == 0.5);
  }
  SUBCASE("sigmoid at zero") { CHECK(sigmoid(scalar(0.0)).item() == 0.5); }
  SUBCASE("sigmoid is stable for large magnitudes") {
    CHECK(sigmoid(scalar(-800.0)).item() == 0.0);
    CHECK(sigmoid(scalar(800.0)).item() == 1.0);
  }
}

TEST_CASE("shape mismatches name the op and shapes") {
  const Var a = constant(Array::Zero(2, 3));
  const Var b = constant(Array::Zero(4, 5));
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(gather(a, make_indices({0, 2})), ShapeError);
  CHECK_THROWS_AS(dot(a, b), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 2), ShapeError);
}

TEST_CASE("backward examples") {
  SUBCASE("grad of x.x is 2x") {
    Array xv(2, 1);
    xv << 1.0, 2.0;
    const Var x = leaf(xv);
    const Var root = dot(x, x);
    const GradMap g = backward(root);
    CHECK(g.at(x.id())(0, 0) == 4.0 / 2.0);
    CHECK(g.at(x.id())(1, 0) == 4.0);
    CHECK(root.grad()(0, 0) == 1.0);
  }
  SUBCASE("repeated gather rows accumulate") {
    const Var e = leaf(Array::Constant(2, 1, 0.3));
    const Var root = sum(gather(e, make_indices({0, 0})));
    const GradMap g = backward(root);
    CHECK(g.at(e.id())(0, 0) == 2.0);
    CHECK(g.at(e.id())(1, 0) == 0.0);
  }
  SUBCASE("sigmoid(w.x) matches central differences") {
    std::mt19937_64 rng(7);
    const Array w = random_array(rng, 5, 1, -0.5, 0.5);
    const Array x = random_array(rng, 5, 1, -0.5, 0.5);
    const std::vector<Array> point{w, x};
    const auto res = grad_check([](std::span<const Var> v) { return sigmoid(dot(v[0], v[1])); }, point);
    CHECK(res.max_relative_error <= 1e-4);
  }
  SUBCASE("non-scalar root is rejected") {
    const Var x = leaf(Array::Ones(2, 1));
    CHECK_THROWS_AS(backward(mul(x, x)), ShapeError);
  }
  SUBCASE("unreachable leaf gets zero") {
    const Var x = leaf(Array::Ones(2, 1));
    const Var unused = leaf(Array::Ones(3, 2));
    const std::vector<Var> wrt{x, unused};
    const auto gs = grad(sum(x), wrt);
    CHECK(gs[1].value().isZero());
    CHECK(gs[1].rows() == 3);
  }
  SUBCASE("leaves are not mutated") {
    Array xv(2, 1);
    xv << 0.5, -1.5;
    const Var x = leaf(xv);
    backward(sum(sigmoid(x)));
    CHECK(x.value() == xv);
  }
  SUBCASE("grad keeps the value shape") {
    const Var x = leaf(Array::Ones(3, 2));
    CHECK(x.grad().rows() == 3);
    CHECK(x.grad().cols() == 2);
    CHECK(x.grad().isZero());
  }
}

TEST_CASE("grad_check examples") {
  SUBCASE("quadratic") {
    const double err = grad_check([](const Var& t) { return mul(t, t); }, Array::Constant(1, 1, 3.0));
    CHECK(err <= 1e-6);
  }
  SUBCASE("constant function") {
    const double err = grad_check([](const Var&) { return scalar(4.0); }, Array::Constant(3, 1, 1.0));
    CHECK(err == 0.0);
  }
  SUBCASE("non-finite probe reports its coordinate") {
    Array p(3, 1);
    p << 1.0, 1.0, 1e-5;
    try {
      (void)grad_check([](const Var& t) { return sum(log(t)); }, p, 1e-4);
      FAIL("expected GradCheckError");
    } catch (const GradCheckError& e) {
      CHECK(e.coordinate() == 2);
    }
  }
}

TEST_CASE("every catalog op passes central differences on random inputs") {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  auto check = [&](const TensorFunction& f, const std::vector<Array>& point) {
    const auto res = grad_check(f, point, 1e-4);
    worst = std::max(worst, res.max_relative_error);
    return res.max_relative_error;
  };

  for (int trial = 0; trial < kTrials; ++trial) {
    std::uniform_int_distribution<Index> dim(1, 4);
    const Index n = dim(rng);
    const Index m = dim(rng);
    const Index k = dim(rng);

    // matmul, all transpose combinations
    for (int t = 0; t < 4; ++t) {
      const bool ta = (t & 1) != 0;
      const bool tb = (t & 2) != 0;
      const Array a = ta ? random_array(rng, k, n) : random_array(rng, n, k);
      const Array b = tb ? random_array(rng, m, k) : random_array(rng, k, m);
      const Array w = random_array(rng, n, m);
      CHECK(check([&](std::span<const Var> v) { return project(matmul(v[0], v[1], ta, tb), w); }, {a, b}) <= kTol);
    }

    const Shape s = random_shape(rng);
    const Array a = random_array(rng, s.rows, s.cols);
    const Array b = random_array(rng, s.rows, s.cols);
    const Array w = random_array(rng, s.rows, s.cols);
    // add / mul, same shape and broadcast operands
    for (const Array& other : {b, Array(random_array(rng, 1, s.cols)), Array(random_array(rng, s.rows, 1)),
                               Array(random_array(rng, 1, 1))}) {
      CHECK(check([&](std::span<const Var> v) { return project(add(v[0], v[1]), w); }, {a, other}) <= kTol);
      CHECK(check([&](std::span<const Var> v) { return project(mul(v[0], v[1]), w); }, {a, other}) <= kTol);
    }

    // concat / slice / pad / reshape
    {
      const Array c = random_array(rng, s.rows, m);
      const Array wc = random_array(rng, s.rows, s.cols + m);
      CHECK(check([&](std::span<const Var> v) { return project(concat({v[0], v[1]}, 1), wc); }, {a, c}) <= kTol);
      const Array r = random_array(rng, m, s.cols);
      const Array wr = random_array(rng, s.rows + m, s.cols);
      CHECK(check([&](std::span<const Var> v) { return project(concat({v[0], v[1]}, 0), wr); }, {a, r}) <= kTol);
      const Index off = s.cols > 1 ? 1 : 0;
      const Array ws = random_array(rng, s.rows, s.cols - off);
      CHECK(check([&](std::span<const Var> v) { return project(slice(v[0], 1, off, s.cols - off), ws); }, {a}) <=
            kTol);
      const Array wp = random_array(rng, s.rows + 3, s.cols);
      CHECK(check([&](std::span<const Var> v) { return project(pad(v[0], 0, 2, s.rows + 3), wp); }, {a}) <= kTol);
      const Array wz = random_array(rng, 1, s.rows * s.cols);
      CHECK(check([&](std::span<const Var> v) { return project(reshape(v[0], 1, s.rows * s.cols), wz); }, {a}) <=
            kTol);
    }

    // unary ops
    {
      const Array x = away_from_zero(rng, s.rows, s.cols);
      const Array pos = random_array(rng, s.rows, s.cols, 0.2, 2.0);
      CHECK(check([&](std::span<const Var> v) { return project(leaky_relu(v[0], 0.2), w); }, {x}) <= kTol);
      CHECK(check([&](std::span<const Var> v) { return project(sigmoid(v[0]), w); }, {x}) <= kTol);
      CHECK(check([&](std::span<const Var> v) { return project(log(v[0]), w); }, {pos}) <= kTol);
      CHECK(check([&](std::span<const Var> v) { return project(reciprocal(v[0]), w); }, {pos}) <= kTol);
      CHECK(check([&](std::span<const Var> v) { return mul(sum(v[0]), sum(v[0])); }, {x}) <= kTol);
      CHECK(check([&](std::span<const Var> v) { return mul(mean(v[0]), sum(v[0])); }, {x}) <= kTol);
      CHECK(check([&](std::span<const Var> v) { return dot(v[0], v[1]); }, {x, b}) <= kTol);
      const Array wr = random_array(rng, s.rows, 1);
      CHECK(check([&](std::span<const Var> v) { return project(sum_to(v[0], s.rows, 1), wr); }, {x}) <= kTol);
      const Array wb = random_array(rng, s.rows, s.cols + 2);
      const Array col = random_array(rng, s.rows, 1);
      CHECK(check([&](std::span<const Var> v) { return project(broadcast_to(v[0], s.rows, s.cols + 2), wb); },
                  {col}) <= kTol);
    }

    // softmax, plain and segmented
    {
      const Array x = random_array(rng, n + 1, 1, -3.0, 3.0);
      const Array wx = random_array(rng, n + 1, 1);
      CHECK(check([&](std::span<const Var> v) { return project(softmax(v[0]), wx); }, {x}) <= kTol);
      std::vector<Index> seg;
      for (Index i = 0; i <= n; ++i) seg.push_back(i % 2);
      const IndexList ids = make_indices(seg);
      CHECK(check([&](std::span<const Var> v) { return project(segment_softmax(v[0], ids, 2), wx); }, {x}) <=
            kTol);
    }

    // gather / scatter_add with repeated rows
    {
      const Array table = random_array(rng, n + 1, m);
      std::uniform_int_distribution<Index> row(0, n);
      std::vector<Index> idx;
      for (int i = 0; i < 5; ++i) idx.push_back(row(rng));
      const IndexList ids = make_indices(idx);
      const Array wg = random_array(rng, 5, m);
      CHECK(check([&](std::span<const Var> v) { return project(gather(v[0], ids), wg); }, {table}) <= kTol);
      const Array src = random_array(rng, 5, m);
      const Array ws = random_array(rng, n + 1, m);
      CHECK(check([&](std::span<const Var> v) { return project(scatter_add(v[0], ids, n + 1), ws); }, {src}) <=
            kTol);
    }
  }
  MESSAGE("worst relative error over the catalog: " << worst);
}

TEST_CASE("second-order gradients through create_graph") {
  // f(x) = sum(sigmoid(x)^2); the Hessian-vector product from double
  // backward must match central differences of the first gradient.
  std::mt19937_64 rng(11);
  const Array x0 = random_array(rng, 4, 1);
  const Array v = random_array(rng, 4, 1);
  auto f = [](const Var& x) { return sum(mul(sigmoid(x), sigmoid(x))); };

  const Var x = leaf(x0);
  const std::vector<Var> wrt{x};
  const Var g = grad(f(x), wrt, true)[0];
  const Var gv = dot(g, constant(v));
  const Array hv = grad(gv, wrt)[0].value();

  const double h = 1e-5;
  auto first_grad = [&](const Array& at) {
    const Var p = leaf(at);
    const std::vector<Var> w{p};
    return grad(f(p), w)[0].value();
  };
  const Array numeric = (first_grad(x0 + h * v) - first_grad(x0 - h * v)) / (2.0 * h);
  CHECK((hv - numeric).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("backward is deterministic") {
  std::mt19937_64 rng(5);
  const Array a = random_array(rng, 6, 4);
  const Array b = random_array(rng, 4, 3);
  auto run = [&]() {
    const Var va = leaf(a);
    const Var vb = leaf(b);
    const Var h = leaky_relu(matmul(va, vb), 0.2);
    const Var root = sum(log(sigmoid(h)));
    const std::vector<Var> wrt{va, vb};
    const auto gs = grad(root, wrt);
    return std::make_pair(gs[0].value(), gs[1].value());
  };
  const auto first = run();
  const auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}

TEST_CASE("softmax outputs form a distribution") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<Index> len(1, 40);
    const Array x = random_array(rng, len(rng), 1, -8.0, 8.0);
    const Array y = softmax(constant(x)).value();
    CHECK(std::abs(y.sum() - 1.0) <= 1e-12);
    CHECK(y.minCoeff() > 0.0);
    if (y.rows() > 1) {
      CHECK(y.maxCoeff() < 1.0);
    }
  }
  Array big(2, 1);
  big << 1000.0, 1000.0;
  CHECK(softmax(constant(big)).value()(0, 0) == 0.5);
}

TEST_CASE("gather backward on disjoint rows equals per-row assignment") {
  std::mt19937_64 rng(3);
  const Array table = random_array(rng, 6, 3);
  const Array upstream = random_array(rng, 3, 3);
  const Var t = leaf(table);
  const Var root = sum(mul(gather(t, make_indices({4, 0, 2})), constant(upstream)));
  const std::vector<Var> wrt{t};
  const Array g = grad(root, wrt)[0].value();
  Array expected = Array::Zero(6, 3);
  expected.row(4) = upstream.row(0);
  expected.row(0) = upstream.row(1);
  expected.row(2) = upstream.row(2);
  CHECK(g == expected);
}

TEST_CASE("no-grad mode records nothing") {
  const Var x = leaf(Array::Ones(2, 1));
  NoGradGuard guard;
  const Var y = sigmoid(x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}
