// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "poco/flow.hpp"
#include "poco/rng.hpp"

#include <cmath>

using namespace poco;
using ad::Matrix;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Overwrites every weight (including the zero-initialized output layers).
void randomize(ad::ParameterSet& ps, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto& p : ps)
    if (p.name.find(".bound") == std::string::npos) p.value = random_matrix(rng, p.value.rows(), p.value.cols(), scale);
}

flow::FlowConfig small_config(int cond_dim = 8) {
  flow::FlowConfig c;
  c.cond_dim = cond_dim;
  c.hidden = 16;
  return c;
}

double log_abs_det_numeric(const flow::CondFlow& f, const Eigen::Vector3d& x, const Matrix& cond) {
  const double h = 1e-6;
  Eigen::Matrix3d jac;
  for (int j = 0; j < 3; ++j) {
    Matrix xp = x.transpose(), xm = x.transpose();
    xp(0, j) += h;
    xm(0, j) -= h;
    jac.col(j) = (f.forward(xp, cond).z - f.forward(xm, cond).z).row(0).transpose() / (2 * h);
  }
  return std::log(std::abs(jac.determinant()));
}

}  // namespace

TEST_CASE("fresh flow is the identity") {
  ad::ParameterSet ps;
  flow::CondFlow f(ps, "flow", small_config(), 1);
  Rng rng(2);
  const Matrix x = random_matrix(rng, 10, 3);
  const Matrix c = random_matrix(rng, 10, 8);
  const auto fw = f.forward(x, c);
  CHECK(fw.z == x);
  CHECK(fw.logdet.cwiseAbs().maxCoeff() == 0.0);
  const auto inv = f.inverse(x, c);
  CHECK(inv.z == x);
}

TEST_CASE("masks partition the dims") {
  ad::ParameterSet ps;
  flow::CondFlow f(ps, "flow", small_config(), 1);
  CHECK(f.kept(0) == std::vector<int>{0});
  CHECK(f.transformed(0) == std::vector<int>{1, 2});
  CHECK(f.kept(1) == std::vector<int>{1, 2});
  CHECK(f.transformed(1) == std::vector<int>{0});
}

TEST_CASE("standard normal log density at identity") {
  ad::ParameterSet ps;
  flow::CondFlow f(ps, "flow", small_config(), 1);
  Matrix x(2, 3);
  x << 0, 0, 0, 1, 0, 0;
  const Eigen::VectorXd lp = f.log_prob(x, Matrix::Zero(2, 8));
  CHECK(lp(0) == doctest::Approx(-2.756815).epsilon(1e-6));
  CHECK(lp(1) == doctest::Approx(-3.256815).epsilon(1e-6));
}

TEST_CASE("logdet matches the numerical Jacobian") {
  ad::ParameterSet ps;
  flow::CondFlow f(ps, "flow", small_config(), 3);
  randomize(ps, 4, 0.5);
  Rng rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Vector3d x = random_matrix(rng, 3, 1).col(0);
    const Matrix c = random_matrix(rng, 1, 8);
    const double analytic = f.forward(Matrix(x.transpose()), c).logdet(0);
    const double numeric = log_abs_det_numeric(f, x, c);
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-2));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("conditioning changes the output") {
  ad::ParameterSet ps;
  flow::CondFlow f(ps, "flow", small_config(), 6);
  randomize(ps, 7, 0.5);
  Rng rng(8);
  const Matrix x = random_matrix(rng, 1, 3);
  const Matrix c1 = random_matrix(rng, 1, 8);
  const Matrix c2 = random_matrix(rng, 1, 8);
  CHECK((f.forward(x, c1).z - f.forward(x, c2).z).norm() > 1e-6);
}

TEST_CASE("inverse round trip and logdet identity") {
  for (int dim : {3, 72}) {
    ad::ParameterSet ps;
    auto cfg = small_config();
    cfg.dim = dim;
    flow::CondFlow f(ps, "flow", cfg, 9);
    randomize(ps, 10, 0.4);
    Rng rng(11);
    const Matrix x = random_matrix(rng, 50, dim, 1.5);
    const Matrix c = random_matrix(rng, 50, 8);
    const auto fw = f.forward(x, c);
    const auto inv = f.inverse(fw.z, c);
    CHECK((inv.z - x).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((inv.logdet + fw.logdet).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("density integrates to one") {
  ad::ParameterSet ps;
  flow::CondFlow f(ps, "flow", small_config(), 12);
  randomize(ps, 13, 0.15);
  Rng rng(14);
  const Matrix c = random_matrix(rng, 1, 8);
  const int n = 97;
  const double lo = -6.0, step = 12.0 / (n - 1);
  Matrix grid(n * n * n, 3);
  Eigen::Index r = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) grid.row(r++) << lo + i * step, lo + j * step, lo + k * step;
  const Eigen::VectorXd lp = f.log_prob(grid, c);
  const double mass = lp.array().exp().sum() * step * step * step;
  CHECK(std::abs(mass - 1.0) < 0.01);
}

TEST_CASE("log density is bounded above") {
  ad::ParameterSet ps;
  flow::CondFlow f(ps, "flow", small_config(), 15);
  randomize(ps, 16, 5.0);  // saturate the soft clamp
  Rng rng(17);
  const Matrix x = random_matrix(rng, 2000, 3, 0.01);
  const Matrix c = random_matrix(rng, 2000, 8);
  const double bound = 3 * 2.0 - 1.5 * std::log(2 * M_PI);
  CHECK(f.log_prob_upper_bound() == doctest::Approx(bound));
  CHECK(f.log_prob(x, c).maxCoeff() <= bound + 1e-12);
}

TEST_CASE("tape and plain paths agree, repeated condition rows") {
  ad::ParameterSet ps;
  flow::CondFlow f(ps, "flow", small_config(), 18);
  randomize(ps, 19, 0.5);
  Rng rng(20);
  const Matrix x = random_matrix(rng, 12, 3);
  const Matrix c = random_matrix(rng, 3, 8);  // each cond row covers 4 x rows
  ad::Tape t;
  const ad::Var lp = f.log_prob(t, t.constant(x), t.constant(c));
  const Eigen::VectorXd plain = f.log_prob(x, c);
  CHECK((lp.value().col(0) - plain).cwiseAbs().maxCoeff() < 1e-12);

  // Expanding the condition by hand gives the same result.
  Matrix expanded(12, 8);
  for (Eigen::Index r = 0; r < 12; ++r) expanded.row(r) = c.row(r / 4);
  CHECK((f.log_prob(x, expanded) - plain).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("no condition") {
  ad::ParameterSet ps;
  flow::CondFlow f(ps, "flow", small_config(0), 21);
  randomize(ps, 22, 0.5);
  CHECK_FALSE(ps.contains("flow.block0.scale.cond.w"));
  Rng rng(23);
  const Matrix x = random_matrix(rng, 5, 3);
  ad::Tape t;
  const ad::Var lp = f.log_prob(t, t.constant(x), std::nullopt);
  CHECK((lp.value().col(0) - f.log_prob(x, Matrix(5, 0))).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("log_prob gradients match finite differences") {
  ad::ParameterSet ps;
  flow::CondFlow f(ps, "flow", small_config(4), 24);
  randomize(ps, 25, 0.5);
  Rng rng(26);
  auto& x = ps.add("x", random_matrix(rng, 6, 3));
  auto& c = ps.add("c", random_matrix(rng, 2, 4));
  const auto report = ad::check_gradients(ps, [&](ad::Tape& t) {
    return t.sum(f.log_prob(t, t.param(x), t.param(c)));
  });
  INFO("worst " << report.worst_parameter);
  CHECK(report.max_error < 1e-4);
}

TEST_CASE("bad inputs") {
  ad::ParameterSet ps;
  flow::CondFlow f(ps, "flow", small_config(), 27);
  CHECK_THROWS_AS(f.forward(Matrix::Zero(4, 2), Matrix::Zero(4, 8)), std::invalid_argument);
  CHECK_THROWS_AS(f.forward(Matrix::Zero(4, 3), Matrix::Zero(3, 8)), std::invalid_argument);
  CHECK_THROWS_AS(f.forward(Matrix::Zero(4, 3), Matrix::Zero(4, 5)), std::invalid_argument);
  Matrix bad = Matrix::Zero(1, 3);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(f.forward(bad, Matrix::Zero(1, 8)), std::runtime_error);
}
