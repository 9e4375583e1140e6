// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "poco/losses.hpp"

#include "poco/bodymodel.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace poco::loss {

using ad::Matrix;
using ad::Var;

namespace {

constexpr int kParts = body::kParts;

struct VariantName {
  Variant v;
  const char* name;
};
constexpr VariantName kNames[] = {{Variant::kBaseline, "baseline"},   {Variant::kGauss, "gauss"},
                                  {Variant::kNFlow, "nflow"},         {Variant::kCondScale, "cond-scale"},
                                  {Variant::kCondBdf, "cond-bdf"},    {Variant::kPoco, "poco"}};

Var flat_sigma(Var sigma) { return ad::reshape(sigma, sigma.rows() * sigma.cols(), 1); }

void check_shapes(Var pose, Var gt, Var sigma) {
  if (pose.cols() != body::kPoseDim || gt.rows() != pose.rows() || gt.cols() != pose.cols())
    throw std::invalid_argument("pose and target must both be B x 72");
  if (sigma.rows() != pose.rows() || sigma.cols() != kParts) throw std::invalid_argument("sigma must be B x 24");
}

}  // namespace

Variant parse_variant(std::string_view name) {
  for (const auto& n : kNames)
    if (name == n.name) return n.v;
  throw std::invalid_argument("unknown variant '" + std::string(name) +
                              "' (expected baseline, gauss, nflow, cond-scale, cond-bdf or poco)");
}

std::string to_string(Variant v) {
  for (const auto& n : kNames)
    if (v == n.v) return n.name;
  return "unknown";
}

std::vector<Variant> all_variants() {
  std::vector<Variant> out;
  for (const auto& n : kNames) out.push_back(n.v);
  return out;
}

bool has_sigma(Variant v) { return v != Variant::kBaseline; }
bool uses_flow(Variant v) { return v != Variant::kBaseline && v != Variant::kGauss; }
bool pose_conditioned_scale(Variant v) { return v == Variant::kCondScale || v == Variant::kPoco; }
bool image_conditioned_flow(Variant v) { return v == Variant::kCondBdf || v == Variant::kPoco; }

Var floor_sigma(Var sigma, FloorCounter* counter) {
  const Matrix& s = sigma.value();
  const auto low = (s.array() < kSigmaFloor).count();
  if (low == 0) return sigma;
  if (counter != nullptr) counter->hits += static_cast<std::size_t>(low);
  ad::Tape& t = sigma.tape();
  return t.shift(t.relu(t.shift(sigma, -kSigmaFloor)), kSigmaFloor);
}

Var scaled_residual(Var pose, Var gt_pose, Var sigma) {
  ad::Tape& t = pose.tape();
  const Eigen::Index rows = pose.rows() * kParts;
  Var err = t.reshape(t.sub(gt_pose, pose), rows, 3);
  return t.div(err, t.broadcast(flat_sigma(sigma), rows, 3));
}

Var gauss(Var pose, Var gt_pose, Var sigma, FloorCounter* counter) {
  check_shapes(pose, gt_pose, sigma);
  ad::Tape& t = pose.tape();
  sigma = floor_sigma(sigma, counter);
  const Eigen::Index rows = pose.rows() * kParts;
  Var sq = t.sum_cols(t.square(t.reshape(t.sub(gt_pose, pose), rows, 3)));  // rows x 1
  Var s = flat_sigma(sigma);
  Var fit = t.div(sq, t.scale(t.square(s), 2.0));
  return t.mean(t.add(fit, t.log(s)));
}

FlowTerms flow_terms(Var pose, Var gt_pose, Var sigma, const flow::CondFlow& flow, std::optional<Var> cond,
                     FloorCounter* counter) {
  check_shapes(pose, gt_pose, sigma);
  const int dim = flow.config().dim;
  if (dim != 3 && dim != body::kPoseDim) throw std::invalid_argument("flow loss needs a 3D or 72D flow");
  ad::Tape& t = pose.tape();
  sigma = floor_sigma(sigma, counter);
  Var r = scaled_residual(pose, gt_pose, sigma);
  if (dim == body::kPoseDim) r = t.reshape(r, pose.rows(), dim);
  Var log_p = flow.log_prob(t, r, cond);
  Var log_q = t.shift(t.scale(t.sum_cols(t.square(r)), -0.5), flow::standard_normal_log_norm(dim));
  // A 72D row covers all 24 parts; rescale so both layouts are per part.
  const double per_part = 3.0 / dim;
  return {t.scale(t.mean(log_p), -per_part), t.scale(t.mean(log_q), -per_part), t.mean(t.log(flat_sigma(sigma)))};
}

Var nflow(Var pose, Var gt_pose, Var sigma, const flow::CondFlow& flow, std::optional<Var> cond,
          FloorCounter* counter) {
  const FlowTerms f = flow_terms(pose, gt_pose, sigma, flow, cond, counter);
  return f.neg_log_p + f.neg_log_q + f.log_sigma;
}

Var poco(Var pose, Var gt_pose, Var sigma, const flow::CondFlow& flow, std::optional<Var> cond, const LossWeights& w,
         FloorCounter* counter) {
  const FlowTerms f = flow_terms(pose, gt_pose, sigma, flow, cond, counter);
  return f.neg_log_p * w.nf + f.neg_log_q * w.q + f.log_sigma * w.sigma;
}

Var mse(Var a, Var b) {
  ad::Tape& t = a.tape();
  return t.mean(t.square(t.sub(a, b)));
}

Var mse_visible(Var joints2d, const Matrix& gt, const Matrix& visibility) {
  ad::Tape& t = joints2d.tape();
  if (visibility.rows() != joints2d.rows() || visibility.cols() != kParts || gt.rows() != joints2d.rows() ||
      gt.cols() != 2 * kParts || joints2d.cols() != 2 * kParts)
    throw std::invalid_argument("2D loss expects B x 48 joints and B x 24 visibility");
  Matrix weight(visibility.rows(), 2 * kParts);
  for (int k = 0; k < kParts; ++k) {
    weight.col(2 * k) = visibility.col(k);
    weight.col(2 * k + 1) = visibility.col(k);
  }
  const double count = weight.sum();
  if (count == 0.0) return t.constant(0.0);
  Var sq = t.square(t.sub(joints2d, t.constant(gt)));
  return t.scale(t.sum(t.mul(sq, t.constant(weight))), 1.0 / count);
}

TotalLoss total(const Predictions& p, const Targets& gt, Variant variant, const LossWeights& w,
                const flow::CondFlow* flow, Terms terms, FloorCounter* counter) {
  ad::Tape& t = p.pose.tape();
  TotalLoss out{t.constant(0.0), {}};
  auto add_term = [&](const std::string& name, Var v, double weight) {
    Var weighted = weight == 1.0 ? v : t.scale(v, weight);
    out.breakdown[name] = weighted.value()(0, 0);
    out.total = t.add(out.total, weighted);
  };
  Var gt_pose = t.constant(gt.pose);

  if (has_sigma(variant) && !p.sigma) throw std::invalid_argument(to_string(variant) + " needs a sigma prediction");
  switch (variant) {
    case Variant::kBaseline:
      if (terms == Terms::kAll) add_term("pose_mse", mse(p.pose, gt_pose), 1.0);
      break;
    case Variant::kGauss:
      add_term("gauss", gauss(p.pose, gt_pose, *p.sigma, counter), 1.0);
      break;
    default: {
      if (flow == nullptr) throw std::invalid_argument(to_string(variant) + " needs a flow");
      const std::optional<Var> cond = image_conditioned_flow(variant) ? p.flow_cond : std::nullopt;
      if (image_conditioned_flow(variant) && !cond) throw std::invalid_argument(to_string(variant) + " needs a flow condition");
      const FlowTerms f = flow_terms(p.pose, gt_pose, *p.sigma, *flow, cond, counter);
      // The plain flow variant is the unweighted likelihood; the steering
      // weights belong to the conditioned family.
      const bool steered = variant != Variant::kNFlow;
      add_term("nf", f.neg_log_p, steered ? w.nf : 1.0);
      add_term("q", f.neg_log_q, steered ? w.q : 1.0);
      add_term("sigma", f.log_sigma, steered ? w.sigma : 1.0);
    }
  }
  if (terms == Terms::kAll) {
    add_term("shape", mse(p.shape, t.constant(gt.shape)), w.shape);
    add_term("joints3d", mse(p.joints3d, t.constant(gt.joints3d)), w.joints3d);
    add_term("joints2d", mse_visible(p.joints2d, gt.joints2d, gt.visibility), w.joints2d);
  }
  return out;
}

}  // namespace poco::loss
