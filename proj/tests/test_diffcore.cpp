// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "poco/diffcore.hpp"
#include "poco/rng.hpp"

#include <cmath>

using namespace poco;
using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

Matrix triple_loop_matmul(const Matrix& a, const Matrix& b) {
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      for (Eigen::Index k = 0; k < a.cols(); ++k) out(i, j) += a(i, k) * b(k, j);
  return out;
}

}  // namespace

TEST_CASE("record evaluates supported kinds") {
  Tape t;
  Matrix x(1, 2), y(1, 2);
  x << 1, 2;
  y << 3, 4;
  std::array<Var, 2> xy{t.constant(x), t.constant(y)};
  Var s = t.record(ad::OpKind::kAdd, xy);
  CHECK(s.value()(0, 0) == 4.0);
  CHECK(s.value()(0, 1) == 6.0);

  std::array<Var, 1> one{t.constant(1.0)};
  CHECK(t.record(ad::OpKind::kLog, one).value()(0, 0) == 0.0);

  Rng rng(7);
  const Matrix a = random_matrix(rng, 2, 3);
  const Matrix b = random_matrix(rng, 3, 2);
  Var p = t.matmul(t.constant(a), t.constant(b));
  const Matrix oracle = triple_loop_matmul(a, b);
  CHECK((p.value() - oracle).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("shape mismatch reports both shapes") {
  Tape t;
  Var a = t.constant(Matrix::Zero(2, 3));
  Var b = t.constant(Matrix::Zero(3, 2));
  try {
    (void)t.add(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("3x2") != std::string::npos);
  }
  CHECK_THROWS_AS((void)t.matmul(a, a), std::invalid_argument);
}

TEST_CASE("backward on analytic cases") {
  ad::ParameterSet ps;
  Matrix x0(1, 3);
  x0 << 1, 2, 3;
  auto& x = ps.add("x", x0);
  auto& sigma = ps.add("sigma", Matrix::Constant(1, 1, 2.0));
  Tape t;
  Var root = t.add(t.sum(t.square(t.param(x))), t.log(t.param(sigma)));
  t.backward(root);
  CHECK(x.grad(0, 0) == doctest::Approx(2.0));
  CHECK(x.grad(0, 1) == doctest::Approx(4.0));
  CHECK(x.grad(0, 2) == doctest::Approx(6.0));
  CHECK(sigma.grad(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("backward preconditions") {
  Tape t;
  Var v = t.constant(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(t.backward(v), std::invalid_argument);
  Var s = t.sum(v);
  t.backward(s);
  CHECK_THROWS_AS(t.backward(s), std::logic_error);
  t.reset();
  Var s2 = t.sum(t.constant(Matrix::Ones(2, 2)));
  CHECK_NOTHROW(t.backward(s2));
}

TEST_CASE("reset keeps parameter data") {
  ad::ParameterSet ps;
  auto& w = ps.add("w", Matrix::Constant(2, 2, 3.0));
  Tape t;
  t.backward(t.sum(t.param(w)));
  t.reset();
  CHECK(t.size() == 0);
  CHECK(w.value(1, 1) == 3.0);
}

TEST_CASE("guards clamp log and div inputs") {
  Tape t;
  Var z = t.constant(Matrix::Zero(1, 1));
  CHECK(std::isfinite(t.log(z).value()(0, 0)));
  CHECK(t.log(z).value()(0, 0) == doctest::Approx(std::log(1e-12)));
  CHECK(std::isfinite(t.div(t.constant(1.0), z).value()(0, 0)));
}

// Every op kind, composed into a scalar, against central differences.
TEST_CASE("every op matches finite differences") {
  Rng rng(11);
  ad::ParameterSet ps;
  auto& a = ps.add("a", random_matrix(rng, 3, 4));
  auto& b = ps.add("b", random_matrix(rng, 3, 4));
  auto& c = ps.add("c", random_matrix(rng, 4, 2));
  auto& pos = ps.add("pos", random_matrix(rng, 3, 4, 0.5, 2.0));
  auto& row = ps.add("row", random_matrix(rng, 1, 4));
  auto& col = ps.add("col", random_matrix(rng, 3, 1));
  auto& sc = ps.add("sc", random_matrix(rng, 1, 1));

  auto build = [&](Tape& t) {
    Var va = t.param(a), vb = t.param(b), vc = t.param(c), vp = t.param(pos);
    Var terms = t.add(t.sub(va, vb), t.mul(va, vb));
    terms = t.add(terms, t.div(vb, vp));
    terms = t.add(terms, t.exp(t.scale(va, 0.5)));
    terms = t.add(terms, t.log(vp));
    terms = t.add(terms, t.tanh(vb));
    terms = t.add(terms, t.relu(t.shift(va, 0.05)));  // kinks away from samples
    terms = t.add(terms, t.square(vb));
    terms = t.add(terms, t.broadcast(t.param(row), 3, 4));
    terms = t.add(terms, t.broadcast(t.param(col), 3, 4));
    terms = t.add(terms, t.broadcast(t.param(sc), 3, 4));
    Var mm = t.matmul(terms, vc);                               // 3x2
    std::array<Var, 2> parts{mm, t.slice_cols(va, 1, 2)};
    Var cat = t.concat_cols(parts);                             // 3x4
    Var rep = t.repeat_rows(cat, 2);                            // 6x4
    Var rs = t.reshape(rep, 4, 6);
    Var rows = t.slice_rows(rs, 1, 2);
    Var sum_rows = t.sum_cols(t.square(rows));
    return t.add(t.add(t.mean(rs), t.sum(sum_rows)), t.mean(t.tanh(mm)));
  };
  const auto report = ad::check_gradients(ps, build);
  INFO("worst " << report.worst_parameter);
  CHECK(report.max_error < 1e-6);
  CHECK(report.checked == ps.scalar_count());
}

TEST_CASE("clamp composes from relu") {
  Tape t;
  Matrix x(1, 3);
  x << -9.0, 0.5, 9.0;
  Var y = ad::clamp(t.constant(x), -7.0, 7.0);
  CHECK(y.value()(0, 0) == -7.0);
  CHECK(y.value()(0, 1) == 0.5);
  CHECK(y.value()(0, 2) == 7.0);
}

TEST_CASE("adam step") {
  SUBCASE("descends on x^2") {
    ad::ParameterSet ps;
    auto& x = ps.add("x", Matrix::Constant(1, 1, 1.0));
    ad::Adam opt({.lr = 0.1});
    Tape t;
    t.backward(t.sum(t.square(t.param(x))));
    opt.step(ps);
    CHECK(x.value(0, 0) < 1.0);
  }
  SUBCASE("zero gradient leaves params and decays moments") {
    ad::Matrix v = Matrix::Constant(1, 2, 0.3);
    ad::AdamMoments st;
    ad::AdamOptions o;
    ad::adam_update(v, Matrix::Constant(1, 2, 1.0), st, o);
    const Matrix v1 = v;
    const double m1 = st.m(0, 0);
    const double s1 = st.v(0, 0);
    ad::adam_update(v, Matrix::Zero(1, 2), st, o);
    CHECK(st.m(0, 0) == doctest::Approx(0.9 * m1));
    CHECK(st.v(0, 0) == doctest::Approx(0.999 * s1));
    // The bias-corrected first moment is still nonzero, so a zero gradient
    // only leaves params unchanged from a fresh state.
    ad::AdamMoments fresh;
    ad::Matrix w = v1;
    ad::adam_update(w, Matrix::Zero(1, 2), fresh, o);
    CHECK(w == v1);
  }
  SUBCASE("converges on a 2D quadratic") {
    // f = (x-1)^2 + 3 (y+2)^2, minimizer (1, -2).
    ad::ParameterSet ps;
    auto& p = ps.add("p", Matrix::Zero(1, 2));
    ad::Adam opt({.lr = 0.05});
    Matrix target(1, 2), weight(1, 2);
    target << 1.0, -2.0;
    weight << 1.0, 3.0;
    for (int i = 0; i < 500; ++i) {
      ps.zero_grad();
      Tape t;
      Var d = t.sub(t.param(p), t.constant(target));
      t.backward(t.sum(t.mul(t.square(d), t.constant(weight))));
      opt.step(ps);
    }
    CHECK((p.value - target).norm() < 1e-3);
  }
  SUBCASE("non-finite gradient names the parameter") {
    ad::ParameterSet ps;
    auto& w = ps.add("head.w", Matrix::Zero(1, 1));
    w.grad(0, 0) = std::nan("");
    ad::Adam opt;
    try {
      opt.step(ps);
      FAIL("expected throw");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("head.w") != std::string::npos);
    }
  }
}

TEST_CASE("tape evaluation is deterministic") {
  auto run = [] {
    Rng rng(3);
    ad::ParameterSet ps;
    auto& w = ps.add("w", random_matrix(rng, 8, 8));
    Tape t;
    Var x = t.constant(random_matrix(rng, 5, 8));
    Var y = t.tanh(t.matmul(x, t.param(w)));
    Var l = t.mean(t.square(y));
    t.backward(l);
    return std::pair{l.value()(0, 0), w.grad};
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("tanh matches std::tanh") {
  Matrix x(1, 4001);
  for (int i = 0; i < x.cols(); ++i) x(0, i) = -40.0 + 0.02 * i;
  x(0, 0) = 1e-300;
  x(0, 1) = -1e-9;
  const Matrix y = ad::tanh_values(x);
  double worst = 0.0;
  for (int i = 0; i < x.cols(); ++i) {
    const double ref = std::tanh(x(0, i));
    worst = std::max(worst, std::abs(y(0, i) - ref) / std::max(std::abs(ref), 1e-300));
  }
  CHECK(worst < 1e-13);
  CHECK(ad::tanh_values(Matrix::Constant(1, 1, 800.0))(0, 0) == 1.0);
  CHECK(ad::tanh_values(Matrix::Constant(1, 1, -800.0))(0, 0) == -1.0);
}
