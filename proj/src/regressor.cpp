// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "poco/regressor.hpp"

#include "poco/rng.hpp"
#include "poco/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace poco::model {

using ad::Matrix;
using ad::Var;

namespace {

constexpr double kLogSigmaClamp = 7.0;

Matrix uniform_init(std::uint64_t seed, int rows, int cols, double scale) {
  Rng rng(seed);
  const double lim = scale / std::sqrt(static_cast<double>(rows));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-lim, lim);
  return m;
}

void require_finite(Var v, const std::string& layer) {
  if (!v.value().allFinite()) throw std::runtime_error("non-finite activation in layer " + layer);
}

bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }

}  // namespace

Normalization parse_normalization(std::string_view s) {
  if (s == "per_sample") return Normalization::kPerSample;
  if (s == "global") return Normalization::kGlobal;
  throw std::invalid_argument("unknown uncertainty normalization '" + std::string(s) +
                              "' (expected per_sample or global)");
}

std::string to_string(Normalization n) { return n == Normalization::kPerSample ? "per_sample" : "global"; }

PocoModel::PocoModel(ModelConfig config) : config_(config) {
  const auto& c = config_;
  if (c.hidden < 1 || c.features < 1 || c.scale_hidden < 1 || c.cond_dim < 1)
    throw std::invalid_argument("model sizes must be positive");
  const std::uint64_t s = c.seed;
  add_linear("backbone.l0", data::kInputDim, c.hidden, derive_seed(s, "backbone.l0"), 1.0);
  add_linear("backbone.l1", c.hidden, c.hidden, derive_seed(s, "backbone.l1"), 1.0);
  add_linear("backbone.l2", c.hidden, c.features, derive_seed(s, "backbone.l2"), 1.0);
  add_linear("head.pose", c.features, body::kPoseDim, derive_seed(s, "head.pose"), c.head_init_scale);
  add_linear("head.shape", c.features, body::kShapeDim, derive_seed(s, "head.shape"), c.head_init_scale);
  add_linear("head.camera", c.features, body::kCameraDim, derive_seed(s, "head.camera"), c.head_init_scale);
  params_.at("head.camera.b").value(0, 0) = 1.0;  // unit scale

  if (loss::has_sigma(c.variant)) {
    add_linear("scale.l0", c.features, c.scale_hidden, derive_seed(s, "scale.l0"), 1.0);
    add_linear("scale.l1", c.scale_hidden + body::kRotmatDim, body::kParts, derive_seed(s, "scale.l1"),
               c.head_init_scale);
  }
  const bool conditioned = loss::image_conditioned_flow(c.variant);
  if (conditioned) add_linear("condition", c.features, c.cond_dim, derive_seed(s, "condition"), 1.0);
  if (loss::uses_flow(c.variant)) {
    flow::FlowConfig fc;
    fc.dim = c.full_pose_flow ? body::kPoseDim : 3;
    fc.cond_dim = conditioned ? c.cond_dim : 0;
    fc.hidden = c.flow_hidden;
    fc.bound_init = c.flow_bound;
    flow_ = std::make_unique<flow::CondFlow>(params_, "flow", fc, derive_seed(s, "flow"));
  }
}

void PocoModel::add_linear(const std::string& name, int in, int out, std::uint64_t seed, double scale) {
  params_.add(name + ".w", uniform_init(seed, in, out, scale));
  params_.add(name + ".b", Matrix::Zero(1, out));
}

Var PocoModel::layer(ad::Tape& t, Var x, const std::string& name, bool activate) const {
  auto& ps = const_cast<ad::ParameterSet&>(params_);
  Var y = ad::affine(x, t.param(ps.at(name + ".w")), t.param(ps.at(name + ".b")));
  if (activate) y = t.tanh(y);
  require_finite(y, name);
  return y;
}

Output PocoModel::forward(ad::Tape& t, const Matrix& inputs, bool backbone_trainable) const {
  if (inputs.cols() != data::kInputDim)
    throw std::invalid_argument("model input has " + std::to_string(inputs.cols()) + " columns, expected " +
                                std::to_string(data::kInputDim));
  backbone_rows_ += static_cast<std::size_t>(inputs.rows());
  Var h = layer(t, t.constant(inputs), "backbone.l0", true);
  h = layer(t, h, "backbone.l1", true);
  Var feat = layer(t, h, "backbone.l2", true);
  if (!backbone_trainable) feat = ad::detach(feat);

  Output o;
  o.pose = layer(t, feat, "head.pose", false);
  o.shape = layer(t, feat, "head.shape", false);
  o.camera = layer(t, feat, "head.camera", false);
  const auto& sk = body::default_skeleton();
  o.joints3d = body::forward_kinematics(sk, o.pose, o.shape);
  o.joints2d = body::project(o.joints3d, o.camera);

  const auto variant = config_.variant;
  if (loss::has_sigma(variant)) {
    Var down = layer(t, feat, "scale.l0", true);
    Var pose_part = t.constant(Matrix::Zero(inputs.rows(), body::kRotmatDim));
    if (loss::pose_conditioned_scale(variant)) {
      Var rot = body::rotmats(o.pose);
      pose_part = config_.scale_grad_through_pose ? rot : ad::detach(rot);
    }
    Var raw = layer(t, ad::concat_cols({down, pose_part}), "scale.l1", false);
    o.sigma = t.exp(ad::clamp(raw, -kLogSigmaClamp, kLogSigmaClamp));
  }
  if (loss::image_conditioned_flow(variant)) o.flow_cond = layer(t, feat, "condition", false);
  return o;
}

Prediction PocoModel::predict(const Matrix& inputs) const {
  ad::Tape t;
  const Output o = forward(t, inputs);
  Prediction p;
  p.pose = o.pose.value();
  p.shape = o.shape.value();
  p.camera = o.camera.value();
  p.joints3d = o.joints3d.value();
  p.joints2d = o.joints2d.value();
  p.sigma = o.sigma ? o.sigma->value() : Matrix::Ones(inputs.rows(), body::kParts);
  return p;
}

bool PocoModel::is_uncertainty_parameter(std::string_view name) {
  return starts_with(name, "scale.") || starts_with(name, "condition.") || starts_with(name, "flow.");
}

std::size_t PocoModel::base_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (!is_uncertainty_parameter(p.name)) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::size_t PocoModel::uncertainty_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (is_uncertainty_parameter(p.name)) n += static_cast<std::size_t>(p.value.size());
  return n;
}

// ------------------------------------------------------------ aggregation

Eigen::VectorXd accumulate_chain(const Eigen::VectorXd& sigma, const body::Skeleton& sk) {
  if (sigma.size() != sk.parts()) throw std::invalid_argument("sigma length must equal part count");
  Eigen::VectorXd agg(sigma.size());
  for (int j = 0; j < sk.parts(); ++j) {
    const int p = sk.parent[static_cast<std::size_t>(j)];
    agg(j) = sigma(j) + (p < 0 ? 0.0 : agg(p));  // parents precede children
  }
  return agg;
}

Uncertainty aggregate_uncertainty(const Eigen::VectorXd& sigma, const body::Skeleton& sk, Normalization mode,
                                  const UncertaintyCalibration& calib) {
  const Eigen::VectorXd agg = accumulate_chain(sigma, sk);
  double lo = agg.minCoeff(), hi = agg.maxCoeff();
  if (mode == Normalization::kGlobal) {
    if (!calib.valid()) throw std::invalid_argument("global normalization needs a calibrated range");
    lo = calib.min;
    hi = calib.max;
  }
  Uncertainty out;
  if (hi <= lo) {
    out.normalized = Eigen::VectorXd::Zero(agg.size());
  } else {
    out.normalized = ((agg.array() - lo) / (hi - lo)).cwiseMax(0.0).cwiseMin(1.0).matrix();
  }
  out.u = out.normalized.mean();
  return out;
}

UncertaintyCalibration calibrate(const Matrix& sigma, const body::Skeleton& sk) {
  UncertaintyCalibration c{1e300, -1e300};
  for (Eigen::Index i = 0; i < sigma.rows(); ++i) {
    const Eigen::VectorXd agg = accumulate_chain(sigma.row(i).transpose(), sk);
    c.min = std::min(c.min, agg.minCoeff());
    c.max = std::max(c.max, agg.maxCoeff());
  }
  if (sigma.rows() == 0) c = {};
  return c;
}

Eigen::VectorXd sample_uncertainty(const Matrix& sigma, const body::Skeleton& sk, Normalization mode,
                                   const UncertaintyCalibration& calib) {
  Eigen::VectorXd u(sigma.rows());
  for (Eigen::Index i = 0; i < sigma.rows(); ++i)
    u(i) = aggregate_uncertainty(sigma.row(i).transpose(), sk, mode, calib).u;
  return u;
}

}  // namespace poco::model
