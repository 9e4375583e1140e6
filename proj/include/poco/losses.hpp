// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Uncertainty losses over per-part pose residuals and the task losses.
//
// Shapes: pose B x 72, sigma B x 24 (one scale per part, shared by that
// part's three axis-angle components). All uncertainty losses are means over
// the B*24 (sample, part) pairs.

#pragma once

#include "poco/diffcore.hpp"
#include "poco/flow.hpp"

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace poco::loss {

enum class Variant { kBaseline, kGauss, kNFlow, kCondScale, kCondBdf, kPoco };

Variant parse_variant(std::string_view name);
std::string to_string(Variant v);
std::vector<Variant> all_variants();

bool has_sigma(Variant v);           // everything except baseline
bool uses_flow(Variant v);           // nflow, cond-scale, cond-bdf, poco
bool pose_conditioned_scale(Variant v);  // cond-scale, poco
bool image_conditioned_flow(Variant v);  // cond-bdf, poco

struct LossWeights {
  double nf = 1e-4;
  double q = 1e-2;
  double sigma = 1e-4;
  double shape = 1.0;
  double joints3d = 1.0;
  double joints2d = 1.0;
};

inline constexpr double kSigmaFloor = 1e-6;

/// Counts sigma entries that were raised to kSigmaFloor.
struct FloorCounter {
  std::size_t hits = 0;
};

/// max(sigma, kSigmaFloor), counting clamped entries.
ad::Var floor_sigma(ad::Var sigma, FloorCounter* counter);

/// (gt - pose) / sigma per part, as a (B*24) x 3 matrix. Rows are
/// sample-major: row b*24 + p.
ad::Var scaled_residual(ad::Var pose, ad::Var gt_pose, ad::Var sigma);

/// Mean over (sample, part) of |gt - pose|^2 / (2 sigma^2) + log sigma.
ad::Var gauss(ad::Var pose, ad::Var gt_pose, ad::Var sigma, FloorCounter* counter = nullptr);

/// The three flow-loss terms, each a 1x1 mean over (sample, part). A 72D
/// flow sees one row per sample; its terms are divided by 24.
struct FlowTerms {
  ad::Var neg_log_p;  // -log P(residual; cond)
  ad::Var neg_log_q;  // -log N(residual; 0, I)
  ad::Var log_sigma;
};
FlowTerms flow_terms(ad::Var pose, ad::Var gt_pose, ad::Var sigma, const flow::CondFlow& flow,
                     std::optional<ad::Var> cond, FloorCounter* counter = nullptr);

/// Unit-weighted flow loss: -log P - log Q + log sigma.
ad::Var nflow(ad::Var pose, ad::Var gt_pose, ad::Var sigma, const flow::CondFlow& flow, std::optional<ad::Var> cond,
              FloorCounter* counter = nullptr);

/// Weighted flow loss: -nf log P - q log Q + sigma_weight log sigma.
ad::Var poco(ad::Var pose, ad::Var gt_pose, ad::Var sigma, const flow::CondFlow& flow, std::optional<ad::Var> cond,
             const LossWeights& w, FloorCounter* counter = nullptr);

/// Mean of squared entries of a - b.
ad::Var mse(ad::Var a, ad::Var b);
/// Mean squared 2D error over visible keypoint coordinates; exactly 0 when
/// nothing is visible. `visibility` is B x 24.
ad::Var mse_visible(ad::Var joints2d, const ad::Matrix& gt_joints2d, const ad::Matrix& visibility);

struct Targets {
  ad::Matrix pose;  // canonicalized
  ad::Matrix shape;
  ad::Matrix joints3d;
  ad::Matrix joints2d;
  ad::Matrix visibility;
};

struct Predictions {
  ad::Var pose;
  ad::Var shape;
  ad::Var joints3d;
  ad::Var joints2d;
  std::optional<ad::Var> sigma;
  std::optional<ad::Var> flow_cond;
};

/// Which parts of the objective to include.
enum class Terms { kAll, kUncertaintyOnly };

struct TotalLoss {
  ad::Var total;
  std::map<std::string, double> breakdown;  // weighted terms; they sum to total
};

/// Variant loss plus weighted shape, 3D-joint and visible 2D-joint terms.
/// The baseline uses plain pose MSE as its variant loss. Flow variants use
/// the weighted form with whatever condition the predictions carry.
TotalLoss total(const Predictions& pred, const Targets& gt, Variant variant, const LossWeights& w,
                const flow::CondFlow* flow, Terms terms = Terms::kAll, FloorCounter* counter = nullptr);

}  // namespace poco::loss
