// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "poco/regressor.hpp"
#include "poco/synthdata.hpp"

#include <cmath>

using namespace poco;
using ad::Matrix;

namespace {

model::ModelConfig small(loss::Variant v, std::uint64_t seed = 1) {
  model::ModelConfig c;
  c.variant = v;
  c.hidden = 12;
  c.features = 10;
  c.scale_hidden = 8;
  c.cond_dim = 6;
  c.flow_hidden = 5;
  c.seed = seed;
  return c;
}

data::SampleBatch batch(int n, std::uint64_t seed) { return data::generate(data::default_sources()[1], n, seed); }

}  // namespace

TEST_CASE("zero network predicts rest pose and unit sigma") {
  model::PocoModel m(model::ModelConfig{});
  for (auto& p : m.params()) p.value.setZero();
  const auto pred = m.predict(batch(4, 1).inputs);
  CHECK(pred.pose.cwiseAbs().maxCoeff() == 0.0);
  CHECK((pred.sigma.array() == 1.0).all());
}

TEST_CASE("default sizes") {
  model::PocoModel m(model::ModelConfig{});
  const auto& ps = m.params();
  CHECK(ps.at("backbone.l0.w").value.rows() == data::kInputDim);
  CHECK(ps.at("backbone.l2.w").value.cols() == 256);
  CHECK(ps.at("scale.l0.w").value.cols() == 216);
  CHECK(ps.at("scale.l1.w").value.rows() == 432);
  CHECK(ps.at("scale.l1.w").value.cols() == 24);
  CHECK(ps.at("condition.w").value.cols() == 512);
  CHECK(m.flow()->config().cond_dim == 512);
  // backbone + pose/shape/camera heads
  const std::size_t base = (74 * 256 + 256) + 2 * (256 * 256 + 256) + 256 * 85 + 85;
  CHECK(m.base_parameter_count() == base);
}

TEST_CASE("variants own the right parts") {
  model::PocoModel base(small(loss::Variant::kBaseline));
  CHECK_FALSE(base.params().contains("scale.l0.w"));
  CHECK(base.flow() == nullptr);
  CHECK(base.uncertainty_parameter_count() == 0);

  model::PocoModel gauss(small(loss::Variant::kGauss));
  CHECK(gauss.params().contains("scale.l0.w"));
  CHECK(gauss.flow() == nullptr);

  model::PocoModel nflow(small(loss::Variant::kNFlow));
  CHECK(nflow.flow() != nullptr);
  CHECK(nflow.flow()->config().cond_dim == 0);
  CHECK_FALSE(nflow.params().contains("condition.w"));

  model::PocoModel poco(small(loss::Variant::kPoco));
  CHECK(poco.params().contains("condition.w"));
  CHECK(poco.flow()->config().cond_dim == 6);

  auto full = small(loss::Variant::kPoco);
  full.full_pose_flow = true;
  model::PocoModel wide(full);
  CHECK(wide.flow()->config().dim == 72);
}

TEST_CASE("prediction is deterministic") {
  const Matrix x = batch(8, 2).inputs;
  model::PocoModel a(model::ModelConfig{.seed = 5});
  model::PocoModel b(model::ModelConfig{.seed = 5});
  const auto pa = a.predict(x);
  const auto pb = b.predict(x);
  CHECK(pa.pose == pb.pose);
  CHECK(pa.sigma == pb.sigma);
  CHECK(pa.joints2d == pb.joints2d);
}

TEST_CASE("derived joints follow the body model") {
  model::PocoModel m(small(loss::Variant::kPoco, 3));
  const auto p = m.predict(batch(3, 3).inputs);
  const auto& sk = body::default_skeleton();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const Eigen::MatrixXd j3 = body::forward_kinematics(sk, p.pose.row(i).transpose(), p.shape.row(i).transpose());
    const Eigen::MatrixXd j2 = body::project(j3, p.camera.row(i).transpose());
    for (int k = 0; k < 24; ++k) {
      CHECK((p.joints3d.row(i).segment<3>(3 * k) - j3.row(k)).norm() < 1e-12);
      CHECK((p.joints2d.row(i).segment<2>(2 * k) - j2.row(k)).norm() < 1e-12);
    }
  }
}

TEST_CASE("sigma is pose conditioned, not flow-condition conditioned") {
  const Matrix x = batch(6, 4).inputs;
  model::PocoModel m(model::ModelConfig{.seed = 7});
  const Matrix sigma0 = m.predict(x).sigma;

  m.params().at("condition.w").value.array() += 0.5;
  CHECK(m.predict(x).sigma == sigma0);

  m.params().at("head.pose.w").value.array() += 0.05;
  CHECK((m.predict(x).sigma - sigma0).cwiseAbs().maxCoeff() > 1e-9);
}

TEST_CASE("image-only sigma ignores the pose head") {
  const Matrix x = batch(6, 4).inputs;
  model::PocoModel m(small(loss::Variant::kCondBdf, 8));
  const Matrix sigma0 = m.predict(x).sigma;
  m.params().at("head.pose.w").value.array() += 0.05;
  CHECK(m.predict(x).sigma == sigma0);
}

TEST_CASE("stop-gradient on the scale head's pose input") {
  const auto b = batch(4, 5);
  for (bool through : {false, true}) {
    auto cfg = small(loss::Variant::kCondScale, 9);
    cfg.scale_grad_through_pose = through;
    model::PocoModel m(cfg);
    ad::Tape t;
    const auto o = m.forward(t, b.inputs);
    t.backward(t.sum(*o.sigma));
    const double g = m.params().at("head.pose.w").grad.cwiseAbs().maxCoeff();
    if (through)
      CHECK(g > 0.0);
    else
      CHECK(g == 0.0);
  }
}

TEST_CASE("one backbone pass per sample") {
  model::PocoModel m(small(loss::Variant::kPoco));
  const auto b = batch(17, 6);
  const std::size_t before = m.backbone_evaluations();
  const auto p = m.predict(b.inputs);
  (void)model::sample_uncertainty(p.sigma, body::default_skeleton(), model::Normalization::kPerSample, {});
  CHECK(m.backbone_evaluations() - before == 17);
}

TEST_CASE("non-finite activations name the layer") {
  model::PocoModel m(small(loss::Variant::kGauss));
  m.params().at("backbone.l1.w").value(0, 0) = std::nan("");
  try {
    (void)m.predict(batch(2, 1).inputs);
    FAIL("expected throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("backbone.l1") != std::string::npos);
  }
  CHECK_THROWS_AS(m.predict(Matrix::Zero(2, 10)), std::invalid_argument);
}

TEST_CASE("uncertainty aggregation") {
  SUBCASE("chain example") {
    const auto sk = body::chain_skeleton(3);
    Eigen::VectorXd s(3);
    s << 0.1, 0.2, 0.3;
    const Eigen::VectorXd agg = model::accumulate_chain(s, sk);
    CHECK(agg(0) == doctest::Approx(0.1));
    CHECK(agg(1) == doctest::Approx(0.3));
    CHECK(agg(2) == doctest::Approx(0.6));
    const auto u = model::aggregate_uncertainty(s, sk);
    CHECK(u.normalized(0) == doctest::Approx(0.0));
    CHECK(u.normalized(1) == doctest::Approx(0.4));
    CHECK(u.normalized(2) == doctest::Approx(1.0));
    CHECK(u.u == doctest::Approx(0.4666667).epsilon(1e-6));
  }
  SUBCASE("equal sigma increases with depth") {
    const auto sk = body::chain_skeleton(6);
    const Eigen::VectorXd agg = model::accumulate_chain(Eigen::VectorXd::Constant(6, 0.4), sk);
    for (int j = 1; j < 6; ++j) CHECK(agg(j) > agg(j - 1));
  }
  SUBCASE("single joint is all zeros") {
    const auto sk = body::chain_skeleton(1);
    const auto u = model::aggregate_uncertainty(Eigen::VectorXd::Constant(1, 3.0), sk);
    CHECK(u.normalized(0) == 0.0);
    CHECK(u.u == 0.0);
  }
  SUBCASE("u stays in [0, 1]") {
    Rng rng(10);
    const auto& sk = body::default_skeleton();
    Matrix sig(200, 24);
    for (Eigen::Index i = 0; i < sig.size(); ++i) sig.data()[i] = std::exp(rng.normal(0.0, 2.0));
    const auto calib = model::calibrate(sig.topRows(50), sk);
    for (auto mode : {model::Normalization::kPerSample, model::Normalization::kGlobal}) {
      const Eigen::VectorXd u = model::sample_uncertainty(sig, sk, mode, calib);
      CHECK(u.minCoeff() >= 0.0);
      CHECK(u.maxCoeff() <= 1.0);
    }
  }
  SUBCASE("global normalization keeps the overall scale") {
    const auto& sk = body::default_skeleton();
    Matrix sig(2, 24);
    sig.row(0).setConstant(0.1);
    sig.row(1).setConstant(0.2);
    const auto calib = model::calibrate(sig, sk);
    const Eigen::VectorXd per = model::sample_uncertainty(sig, sk, model::Normalization::kPerSample, calib);
    const Eigen::VectorXd glob = model::sample_uncertainty(sig, sk, model::Normalization::kGlobal, calib);
    CHECK(per(0) == doctest::Approx(per(1)));
    CHECK(glob(1) > glob(0));
    CHECK_THROWS_AS(model::aggregate_uncertainty(sig.row(0).transpose(), sk, model::Normalization::kGlobal, {}),
                    std::invalid_argument);
  }
  CHECK(model::parse_normalization("global") == model::Normalization::kGlobal);
  CHECK_THROWS_AS(model::parse_normalization("zscore"), std::invalid_argument);
}

TEST_CASE("full objective gradients match finite differences for every variant") {
  const auto b = batch(3, 11);
  loss::Targets gt{b.pose, b.shape, b.joints3d, b.joints2d, b.visibility()};
  for (int r = 0; r < gt.pose.rows(); ++r) {
    Eigen::VectorXd row = gt.pose.row(r).transpose();
    body::canonicalize_pose(row);
    gt.pose.row(r) = row.transpose();
  }
  for (auto v : loss::all_variants()) {
    auto cfg = small(v, 12);
    cfg.head_init_scale = 0.3;
    // The detached rotation input is deliberately not the true gradient.
    cfg.scale_grad_through_pose = true;
    model::PocoModel m(cfg);
    Rng rng(13);
    // Give the zero-initialized flow output layers weight so every path is live.
    for (auto& p : m.params())
      if (p.name.find(".out.") != std::string::npos)
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = 0.3 * rng.normal();
    const auto report = ad::check_gradients(m.params(), [&](ad::Tape& t) {
      const auto o = m.forward(t, b.inputs);
      loss::Predictions p{o.pose, o.shape, o.joints3d, o.joints2d, o.sigma, o.flow_cond};
      return loss::total(p, gt, v, {}, m.flow()).total;
    });
    INFO(loss::to_string(v) << " worst " << report.worst_parameter << " err " << report.max_error);
    CHECK(report.max_error < 1e-4);
    CHECK(report.checked == m.params().scalar_count());
  }
}
