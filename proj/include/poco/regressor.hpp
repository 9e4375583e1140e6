// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Keypoint-to-body regressor with per-part uncertainty.
//
//   backbone   inputs -> 256 -> 256 -> F          (tanh after every layer)
//   pose/shape/camera heads: linear from F
//   scale head: tanh(F -> 216), then [216 | 216 rotation entries] -> 24 raw
//               log-sigma; sigma = exp(clamp(raw, -7, 7))
//   condition head: linear F -> c, feeds the flow
//
// Parameter names are grouped by prefix: "backbone.", "head.", "scale.",
// "condition.", "flow.". Which of the uncertainty parts exist depends on the
// variant (see losses.hpp).

#pragma once

#include "poco/bodymodel.hpp"
#include "poco/diffcore.hpp"
#include "poco/flow.hpp"
#include "poco/losses.hpp"

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

namespace poco::model {

enum class Normalization { kPerSample, kGlobal };
Normalization parse_normalization(std::string_view s);
std::string to_string(Normalization n);

struct ModelConfig {
  loss::Variant variant = loss::Variant::kPoco;
  int hidden = 256;
  int features = 256;
  int scale_hidden = 216;
  int cond_dim = 512;
  int flow_hidden = 64;
  double flow_bound = 2.0;
  bool full_pose_flow = false;
  /// Let sigma-loss gradients reach the pose head through the scale head's
  /// rotation input.
  bool scale_grad_through_pose = false;
  double head_init_scale = 0.01;
  std::uint64_t seed = 0;
};

/// Tape outputs of one forward pass.
struct Output {
  ad::Var pose;    // B x 72
  ad::Var shape;   // B x 10
  ad::Var camera;  // B x 3
  ad::Var joints3d;
  ad::Var joints2d;
  std::optional<ad::Var> sigma;      // B x 24
  std::optional<ad::Var> flow_cond;  // B x c
};

/// Plain outputs for evaluation.
struct Prediction {
  ad::Matrix pose, shape, camera, joints3d, joints2d, sigma;
  Eigen::Index size() const { return pose.rows(); }
};

/// Min/max of the aggregated uncertainty over a calibration set, used by
/// global normalization.
struct UncertaintyCalibration {
  double min = 0.0;
  double max = 0.0;
  bool valid() const { return max > min; }
};

class PocoModel {
 public:
  explicit PocoModel(ModelConfig config);
  PocoModel(const PocoModel&) = delete;
  PocoModel& operator=(const PocoModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ad::ParameterSet& params() { return params_; }
  const ad::ParameterSet& params() const { return params_; }
  const flow::CondFlow* flow() const { return flow_.get(); }

  /// With `backbone_trainable` false the backbone is cut from the tape, so
  /// backward stops at the features.
  Output forward(ad::Tape& tape, const ad::Matrix& inputs, bool backbone_trainable = true) const;
  Prediction predict(const ad::Matrix& inputs) const;

  /// Rows pushed through the backbone since construction.
  std::size_t backbone_evaluations() const { return backbone_rows_.load(); }

  /// Scalars in backbone + pose/shape/camera heads.
  std::size_t base_parameter_count() const;
  /// Scalars in the scale head, condition head and flow.
  std::size_t uncertainty_parameter_count() const;

  /// Prefix test for stage-2 training: scale head, condition head, flow.
  static bool is_uncertainty_parameter(std::string_view name);

 private:
  ad::Var layer(ad::Tape& t, ad::Var x, const std::string& name, bool activate) const;
  void add_linear(const std::string& name, int in, int out, std::uint64_t seed, double scale);

  ModelConfig config_;
  ad::ParameterSet params_;
  std::unique_ptr<flow::CondFlow> flow_;
  mutable std::atomic<std::size_t> backbone_rows_{0};
};

/// Per-part sums of sigma from the root to each part.
Eigen::VectorXd accumulate_chain(const Eigen::VectorXd& sigma, const body::Skeleton& sk);

struct Uncertainty {
  Eigen::VectorXd normalized;  // per part, in [0, 1]
  double u = 0.0;
};

/// Per-sample: min-max normalize the accumulated vector over its own parts;
/// a constant vector normalizes to zeros. Global: normalize with `calib` and
/// clip to [0, 1].
Uncertainty aggregate_uncertainty(const Eigen::VectorXd& sigma, const body::Skeleton& sk,
                                  Normalization mode = Normalization::kPerSample,
                                  const UncertaintyCalibration& calib = {});

/// Range of accumulated sigma over every row of `sigma` (N x 24).
UncertaintyCalibration calibrate(const ad::Matrix& sigma, const body::Skeleton& sk);

/// Scalar u for every row of `sigma`.
Eigen::VectorXd sample_uncertainty(const ad::Matrix& sigma, const body::Skeleton& sk, Normalization mode,
                                   const UncertaintyCalibration& calib);

}  // namespace poco::model
