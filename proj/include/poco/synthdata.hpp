// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-source keypoint data with controlled ambiguity.
//
// Input row layout (kInputDim = 74):
//   [0, 48)   2D keypoints, (x, y) per part, zeroed where occluded
//   [48, 72)  visibility flags, 1 visible / 0 occluded
//   [72, 74)  context: keypoint bounding-box scale and aspect (w / h)

#pragma once

#include "poco/bodymodel.hpp"
#include "poco/diffcore.hpp"
#include "poco/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace poco::data {

inline constexpr int kKeypointCols = 2 * body::kParts;
inline constexpr int kVisibilityOffset = kKeypointCols;
inline constexpr int kContextOffset = kVisibilityOffset + body::kParts;
inline constexpr int kInputDim = kContextOffset + 2;

struct SourceSpec {
  std::string name = "source";
  /// Mean rotation angle per part (radians); axis is uniform on the sphere.
  std::vector<double> angle_mean = std::vector<double>(body::kParts, 0.35);
  /// Inverse spread of the angle: angle ~ clip(N(mean, 1/concentration), 0, pi).
  std::vector<double> concentration = std::vector<double>(body::kParts, 4.0);
  double shape_std = 1.0;
  double camera_scale_min = 0.8;
  double camera_scale_max = 1.2;
  double camera_shift_std = 0.05;
  double keypoint_noise = 0.0;  // normalized image units
  double occlusion_rate = 0.0;  // expected fraction of occluded parts
  int max_run = 4;              // longest occluded run along a kinematic chain

  void validate() const;
};

/// Builds a source whose angle means and spreads are uniform over non-leaf
/// parts; leaf parts (no children) get a fixed small angle since they do not
/// move any joint.
SourceSpec make_source(std::string name, double angle_mean, double concentration, double noise, double occlusion);

/// The three-source benchmark: clean, noisy and hard.
std::vector<SourceSpec> default_sources();
/// Held-out source with a wider pose prior, used as the unlabeled pool.
SourceSpec wild_source();

struct SampleBatch {
  ad::Matrix inputs;    // N x kInputDim
  ad::Matrix pose;      // N x 72
  ad::Matrix shape;     // N x 10
  ad::Matrix camera;    // N x 3
  ad::Matrix joints3d;  // N x 72
  ad::Matrix joints2d;  // N x 48
  std::vector<int> source;

  Eigen::Index size() const { return inputs.rows(); }
  SampleBatch subset(std::span<const Eigen::Index> rows) const;
  SampleBatch slice(Eigen::Index begin, Eigen::Index count) const;
  void append(const SampleBatch& other);
  /// Occluded-part count of row i, read back from the visibility flags.
  int occluded_count(Eigen::Index i) const;
  ad::Matrix visibility() const;  // N x 24
};

SampleBatch allocate(Eigen::Index n);

/// Samples poses from the source prior and renders keypoint inputs.
SampleBatch generate(const SourceSpec& spec, int n, std::uint64_t seed, int source_id = 0);

/// Writes keypoints/visibility/context for row `i` from its 2D joints.
void render_inputs(SampleBatch& batch, Eigen::Index i, const SourceSpec& spec, Rng& rng);

/// Occluded part mask with exactly K ~ Binomial(parts, rate) parts set,
/// grown as runs down the kinematic tree.
std::vector<bool> sample_occlusion(const body::Skeleton& sk, double rate, int max_run, Rng& rng);

struct SequenceSpec {
  int window_length = 6;
  double window_occlusion_rate = 0.6;
  double window_noise = 0.05;
};

struct Sequence {
  SampleBatch frames;
  std::vector<bool> degraded;  // true inside the occlusion window
  std::vector<int> keyframes;
};

/// Per-part quaternion slerp between keyframe poses; shape and camera are
/// fixed over the sequence.
Sequence make_sequence(const SourceSpec& spec, const SequenceSpec& seq, int frames, int n_keyframes,
                       std::uint64_t seed);

/// Quaternion slerp of two axis-angle rotations, returned as axis-angle.
body::Vec3 slerp_axis_angle(const body::Vec3& a, const body::Vec3& b, double t);

/// Mixes several sources into fixed-size batches. Each slot draws its source
/// from `ratios`, then takes the next sample of that source's current
/// shuffled epoch.
class BatchStream {
 public:
  BatchStream(std::vector<const SampleBatch*> sources, std::vector<double> ratios, int batch_size,
              std::uint64_t seed);

  SampleBatch next();
  std::vector<int> last_sources() const { return last_sources_; }

  /// Serializable position of the stream.
  std::string state() const;
  void set_state(const std::string& s);

 private:
  void reshuffle(std::size_t s);

  std::vector<const SampleBatch*> sources_;
  std::vector<double> cumulative_;
  int batch_size_;
  std::uint64_t seed_;
  Rng rng_;
  std::vector<std::vector<Eigen::Index>> order_;
  std::vector<std::size_t> cursor_;
  std::vector<std::uint64_t> epoch_;
  std::vector<int> last_sources_;
};

// ---------------------------------------------------------------- file I/O
//
// "CRDS" file: magic, u32 version, u32 sample count, u32 input dim, u32 part
// count, u32 shape dim, then little-endian float32 arrays in the order
// inputs, pose, shape, camera, joints3d, joints2d, source id.

inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(const std::filesystem::path& path, const SampleBatch& batch);
SampleBatch read_dataset(const std::filesystem::path& path);

}  // namespace poco::data
