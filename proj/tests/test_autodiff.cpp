#include <cmath>

#include "decode/autodiff.hpp"
#include "decode/corpus.hpp"
#include "decode/errors.hpp"
#include "decode/rng.hpp"
#include "doctest.h"

using namespace decode;
using ad::Graph;
using ad::Matrix;
using ad::Var;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal(0.0, scale);
  return m;
}

// Linear scalarization with fixed random weights: a 1x1 loss that reaches
// every output coordinate.
Var scalarize(Graph& g, Var y, const Matrix& left, const Matrix& right) {
  return matmul(matmul(g.constant(left), y), g.constant(right));
}

// Gradcheck harness for a single-input primitive under a fixed scalarizer.
double primitive_gradcheck(const std::function<Var(Graph&, Var)>& op, Eigen::Index rows,
                           Eigen::Index cols, std::uint64_t seed, double input_scale = 1.0) {
  Rng rng(seed);
  ad::ParamStore params;
  params["x"] = random_matrix(rng, rows, cols, input_scale);

  Matrix left, right;
  {
    Graph g;
    Var x = g.leaf(params["x"]);
    Var y = op(g, x);
    left = random_matrix(rng, 1, y.rows());
    right = random_matrix(rng, y.cols(), 1);
  }

  auto loss_fn = [&](const ad::ParamStore& p) {
    Graph g;
    Var x = g.leaf(p.at("x"), false);
    return scalarize(g, op(g, x), left, right).value()(0, 0);
  };

  ad::GradMap analytic;
  {
    Graph g;
    Var x = g.leaf(params["x"]);
    Var loss = scalarize(g, op(g, x), left, right);
    g.backward(loss);
    analytic["x"] = x.grad();
  }
  return ad::finite_diff_check(params, loss_fn, analytic, 1e-5, 256, seed).max_rel_err;
}

}  // namespace

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("softmax rows sum to one") {
  Rng rng(1);
  Graph g;
  Var x = g.leaf(random_matrix(rng, 7, 13, 3.0));
  Var y = softmax_rows(x);
  for (Eigen::Index r = 0; r < y.rows(); ++r)
    CHECK(std::abs(y.value().row(r).sum() - 1.0) <= 1e-12);
}

TEST_CASE("cross entropy of uniform logits is ln V") {
  Graph g;
  const int v = 37;
  Var logits = g.leaf(Matrix::Zero(5, v));
  Var loss = cross_entropy(logits, {3, 9, 1, 16, 4}, kPad);
  CHECK(loss.value()(0, 0) == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-12));
}

TEST_CASE("cross entropy ignores pad rows") {
  Graph g;
  Matrix logits = Matrix::Zero(3, 8);
  logits(0, 2) = 5.0;
  Var l = g.leaf(logits);
  // row 1 has target [PAD]: excluded from the mean.
  Var with_pad = cross_entropy(l, {2, kPad, 3}, kPad);
  Graph g2;
  Matrix two = Matrix::Zero(2, 8);
  two(0, 2) = 5.0;
  Var l2 = g2.leaf(two);
  Var without = cross_entropy(l2, {2, 3}, kPad);
  CHECK(with_pad.value()(0, 0) == doctest::Approx(without.value()(0, 0)).epsilon(1e-14));
  CHECK_THROWS_AS(cross_entropy(l, {kPad, kPad, kPad}, kPad), ValidationError);
}

TEST_CASE("layer_norm normalizes rows before the affine") {
  Rng rng(2);
  Graph g;
  const Eigen::Index d = 24;
  Var x = g.leaf(random_matrix(rng, 6, d, 2.5));
  Var gain = g.leaf(Matrix::Ones(1, d));
  Var bias = g.leaf(Matrix::Zero(1, d));
  Var y = layer_norm(x, gain, bias);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double mean = y.value().row(r).mean();
    const double var = (y.value().row(r).array() - mean).square().sum() / static_cast<double>(d);
    CHECK(std::abs(mean) <= 1e-9);
    CHECK(std::abs(var - 1.0) <= 1e-4);  // eps=1e-5 shifts variance slightly
  }
}

TEST_CASE("backward of sum of squares") {
  Graph g;
  Matrix x(1, 1);
  x(0, 0) = 3.0;
  Var xv = g.leaf(x);
  Var loss = matmul_nt(xv, xv);  // x * x^T = sum of squares for a row vector
  g.backward(loss);
  CHECK(xv.grad()(0, 0) == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("unreached parameters get zero gradient") {
  Graph g;
  Var used = g.leaf(Matrix::Ones(1, 1));
  Var unused = g.leaf(Matrix::Ones(2, 2));
  Var loss = matmul_nt(used, used);
  g.backward(loss);
  CHECK(unused.grad().isZero(0.0));
  CHECK(used.grad()(0, 0) == 2.0);
}

TEST_CASE("backward rejects non-scalar losses") {
  Graph g;
  Var x = g.leaf(Matrix::Ones(2, 3));
  CHECK_THROWS_AS(g.backward(x), ShapeError);
}

TEST_CASE("shape mismatches name the operation") {
  Graph g;
  Var a = g.leaf(Matrix::Ones(2, 3));
  Var b = g.leaf(Matrix::Ones(2, 3));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), ShapeError);
  CHECK_THROWS_WITH_AS(add(a, g.leaf(Matrix::Ones(3, 2))), doctest::Contains("add"), ShapeError);
}

TEST_CASE("every primitive passes the finite-difference check") {
  CHECK(primitive_gradcheck([](Graph&, Var x) { return relu(x); }, 5, 7, 11) < 1e-6);
  CHECK(primitive_gradcheck([](Graph&, Var x) { return gelu(x); }, 5, 7, 111) < 1e-6);
  CHECK(primitive_gradcheck([](Graph&, Var x) { return softmax_rows(x); }, 4, 9, 12) < 1e-6);
  CHECK(primitive_gradcheck([](Graph&, Var x) { return scale(x, -2.5); }, 3, 4, 13) < 1e-6);
  CHECK(primitive_gradcheck(
            [](Graph& g, Var x) {
              Rng r(140);
              return matmul(x, g.constant(random_matrix(r, 7, 4)));
            },
            5, 7, 14) < 1e-6);
  CHECK(primitive_gradcheck(
            [](Graph& g, Var x) {
              Rng r(150);
              return matmul_nt(x, g.constant(random_matrix(r, 6, 7)));
            },
            5, 7, 15) < 1e-6);
  CHECK(primitive_gradcheck(
            [](Graph& g, Var x) { return add(x, g.constant(Matrix::Constant(5, 5, 0.7))); }, 5,
            5, 16) < 1e-6);
  CHECK(primitive_gradcheck([](Graph&, Var x) { return slice_cols(x, 2, 3); }, 4, 8, 17) < 1e-6);
  CHECK(primitive_gradcheck([](Graph&, Var x) { return slice_rows(x, 1, 2); }, 5, 6, 18) < 1e-6);
  CHECK(primitive_gradcheck(
            [](Graph&, Var x) { return ad::concat_cols({slice_cols(x, 0, 2), slice_cols(x, 2, 2)}); },
            3, 4, 19) < 1e-6);
  CHECK(primitive_gradcheck([](Graph&, Var x) { return embedding_lookup(x, {2, 0, 2, 1}); }, 4,
                            6, 20) < 1e-6);
  CHECK(primitive_gradcheck([](Graph&, Var x) { return gather_rows(x, {3, 3, 0}); }, 5, 4, 21) <
        1e-6);
  CHECK(primitive_gradcheck([](Graph&, Var x) { return cross_entropy(x, {1, 4, 2}, kPad); }, 3,
                            6, 22) < 1e-6);
}

TEST_CASE("layer_norm and bce gradients match finite differences") {
  Rng rng(44);
  ad::ParamStore params;
  params["x"] = random_matrix(rng, 4, 8, 1.3);
  params["g"] = random_matrix(rng, 1, 8, 0.3) + Matrix::Ones(1, 8);
  params["b"] = random_matrix(rng, 1, 8, 0.3);
  const Matrix left = random_matrix(rng, 1, 4);
  const Matrix right = random_matrix(rng, 8, 1);

  auto build = [&](Graph& g, const ad::ParamStore& p, bool grad) {
    Var x = g.leaf(p.at("x"), grad);
    Var gain = g.leaf(p.at("g"), grad);
    Var bias = g.leaf(p.at("b"), grad);
    Var y = layer_norm(x, gain, bias);
    Var s = scalarize(g, y, left, right);
    return bce_with_logit(s, 1.0);
  };
  auto loss_fn = [&](const ad::ParamStore& p) {
    Graph g;
    return build(g, p, false).value()(0, 0);
  };
  ad::GradMap analytic;
  {
    Graph g;
    Var x = g.leaf(params.at("x"));
    Var gain = g.leaf(params.at("g"));
    Var bias = g.leaf(params.at("b"));
    Var loss = bce_with_logit(scalarize(g, layer_norm(x, gain, bias), left, right), 1.0);
    g.backward(loss);
    analytic["x"] = x.grad();
    analytic["g"] = gain.grad();
    analytic["b"] = bias.grad();
  }
  CHECK(ad::finite_diff_check(params, loss_fn, analytic, 1e-5, 64, 3).max_rel_err < 1e-6);
}

TEST_CASE("matmul and bias composition matches finite differences") {
  Rng rng(33);
  ad::ParamStore params;
  params["w"] = random_matrix(rng, 6, 4, 0.5);
  params["b"] = random_matrix(rng, 1, 4, 0.5);
  const Matrix input = random_matrix(rng, 3, 6, 1.0);
  const Matrix left = random_matrix(rng, 1, 3);
  const Matrix right = random_matrix(rng, 4, 1);

  auto build = [&](Graph& g, const ad::ParamStore& p, bool grad) {
    Var w = g.leaf(p.at("w"), grad);
    Var b = g.leaf(p.at("b"), grad);
    Var y = relu(add_bias(matmul(g.constant(input), w), b));
    return scalarize(g, y, left, right);
  };
  auto loss_fn = [&](const ad::ParamStore& p) {
    Graph g;
    return build(g, p, false).value()(0, 0);
  };
  ad::GradMap analytic;
  {
    Graph g;
    Var w = g.leaf(params.at("w"));
    Var b = g.leaf(params.at("b"));
    Var y = relu(add_bias(matmul(g.constant(input), w), b));
    Var loss = scalarize(g, y, left, right);
    g.backward(loss);
    analytic["w"] = w.grad();
    analytic["b"] = b.grad();
  }
  const auto report = ad::finite_diff_check(params, loss_fn, analytic, 1e-5, 64, 7);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("finite_diff_check on a quadratic is exact to roundoff") {
  ad::ParamStore params;
  params["x"] = Matrix::Constant(1, 3, 1.5);
  auto loss_fn = [](const ad::ParamStore& p) {
    Graph g;
    Var x = g.leaf(p.at("x"), false);
    return matmul_nt(x, x).value()(0, 0);
  };
  ad::GradMap analytic;
  analytic["x"] = 2.0 * params["x"];
  CHECK(ad::finite_diff_check(params, loss_fn, analytic).max_rel_err < 1e-9);
}

TEST_CASE("a corrupted backward rule is detected") {
  ad::ParamStore params;
  params["x"] = Matrix::Constant(1, 2, 0.8);
  // forward x^2 elementwise (summed), backward deliberately wrong: 3x.
  auto bad_square_loss = [](Graph& g, Var x) {
    Matrix sq = x.value().cwiseProduct(x.value());
    const int ix = x.id();
    Var y = g.custom(sq, {x}, [ix](Graph& g, int self) {
      g.grad_ref(ix) += 3.0 * g.value(ix).cwiseProduct(g.grad_ref(self));
    });
    return matmul(y, g.constant(Matrix::Ones(2, 1)));
  };
  auto loss_fn = [&](const ad::ParamStore& p) {
    Graph g;
    Var x = g.leaf(p.at("x"), false);
    return bad_square_loss(g, x).value()(0, 0);
  };
  ad::GradMap analytic;
  {
    Graph g;
    Var x = g.leaf(params.at("x"));
    Var loss = bad_square_loss(g, x);
    g.backward(loss);
    analytic["x"] = x.grad();
  }
  CHECK(ad::finite_diff_check(params, loss_fn, analytic).max_rel_err > 1e-2);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  ad::ParamStore params;
  params["w"] = Matrix::Constant(2, 2, 1.25);
  const Matrix before = params["w"];
  ad::GradMap grads;
  grads["w"] = Matrix::Zero(2, 2);
  ad::AdamState state;
  for (int i = 0; i < 10; ++i) ad::adam_step(params, grads, state);
  CHECK(params["w"] == before);
  CHECK(state.step == 10);
}

TEST_CASE("adam: constant gradient step magnitude approaches lr") {
  ad::ParamStore params;
  params["w"] = Matrix::Zero(1, 1);
  ad::GradMap grads;
  grads["w"] = Matrix::Constant(1, 1, 0.37);
  ad::AdamState state;
  state.config.lr = 0.01;
  double prev = params["w"](0, 0);
  double step_size = 0.0;
  for (int i = 0; i < 2000; ++i) {
    ad::adam_step(params, grads, state);
    step_size = std::abs(params["w"](0, 0) - prev);
    prev = params["w"](0, 0);
  }
  CHECK(step_size == doctest::Approx(0.01).epsilon(1e-3));
}

TEST_CASE("adam: identical runs give identical trajectories") {
  auto run = [] {
    Rng rng(5);
    ad::ParamStore params;
    params["w"] = random_matrix(rng, 3, 3, 0.1);
    ad::AdamState state;
    for (int i = 0; i < 50; ++i) {
      ad::GradMap grads;
      grads["w"] = random_matrix(rng, 3, 3, 0.2);
      ad::adam_step(params, grads, state);
    }
    return params["w"];
  };
  CHECK(run() == run());
}

TEST_CASE("adam rejects shape mismatches") {
  ad::ParamStore params;
  params["w"] = Matrix::Zero(2, 2);
  ad::GradMap grads;
  grads["w"] = Matrix::Zero(3, 1);
  ad::AdamState state;
  CHECK_THROWS_AS(ad::adam_step(params, grads, state), ShapeError);
}

TEST_CASE("global norm clipping") {
  ad::GradMap grads;
  grads["a"] = Matrix::Constant(2, 2, 3.0);
  grads["b"] = Matrix::Constant(1, 2, -4.0);
  const double norm = std::sqrt(4 * 9.0 + 2 * 16.0);
  CHECK(ad::clip_global_norm(grads, 1.0) == doctest::Approx(norm));
  double clipped_sq = 0.0;
  for (const auto& [name, g] : grads) clipped_sq += g.squaredNorm();
  CHECK(std::sqrt(clipped_sq) <= 1.0 + 1e-9);

  ad::GradMap small;
  small["a"] = Matrix::Constant(1, 1, 0.5);
  ad::clip_global_norm(small, 1.0);
  CHECK(small["a"](0, 0) == 0.5);  // below the threshold: untouched
}

TEST_SUITE_END();
