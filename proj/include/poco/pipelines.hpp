// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Downstream uses of the uncertainty: pseudo-label self-training on an
// unlabeled pool, and gating plus slerp infilling of per-frame sequence
// estimates.

#pragma once

#include "poco/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace poco::pipe {

// ------------------------------------------------------------ pseudo-labels

struct PseudoGtPool {
  data::SampleBatch accepted;  // pool inputs with predictions as labels
  Eigen::VectorXd accepted_u;
  std::size_t rejected = 0;
  double threshold = 0.0;
};

/// Weak-perspective camera (s, tx, ty) fitting the visible keypoints of
/// `inputs` row `i` to `joints3d` (parts x 3) in least squares. Falls back to
/// `fallback` with fewer than two visible keypoints or a degenerate fit.
Eigen::Vector3d refit_camera(const Eigen::MatrixXd& joints3d, const ad::Matrix& inputs, Eigen::Index i,
                             const Eigen::Vector3d& fallback);

/// Keeps pool rows with u < tau; tau = 1 keeps every row. Labels are the
/// predicted pose and shape, joints from the body model, the observed
/// keypoints as 2D targets and a re-fitted camera.
PseudoGtPool select_pseudo_gt(const model::PocoModel& m, const model::UncertaintyCalibration& calib,
                              const data::SampleBatch& pool, double tau, model::Normalization norm);

// ---------------------------------------------------------------- bootstrap

struct BootstrapReport {
  double tau = 0.0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  bool finetuned = false;
  std::string warning;
  double val_pve_before = 0.0;
  double val_pve_after = 0.0;
  double test_pve_before = 0.0;
  double test_pve_after = 0.0;

  nlohmann::json to_json() const;
};

struct BootstrapResult {
  BootstrapReport report;
  train::Checkpoint checkpoint;  // finetuned model, or the input model when skipped
};

/// Everything a bootstrap run reads besides the threshold.
struct BootstrapInputs {
  const train::LoadedModel* start = nullptr;
  const data::SampleBatch* pool = nullptr;
  std::vector<data::SampleBatch> base;
  const data::SampleBatch* val = nullptr;   // selects the threshold; also calibrates
  const data::SampleBatch* test = nullptr;  // reported only
};

/// Finetunes `start` on base data mixed with pseudo-labels accepted at
/// `tau`. Zero accepted rows skip the finetune with a warning.
BootstrapResult bootstrap(const BootstrapInputs& in, double tau);

struct SweepRow {
  double tau = 0.0;
  std::size_t accepted = 0;
  double val_pve = 0.0;
  double test_pve = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  double best_tau = 0.0;  // minimizes validation PVE, ties to the smaller tau
  BootstrapResult best;
};

SweepResult sweep_threshold(const BootstrapInputs& in, const std::vector<double>& grid);
void write_sweep_csv(const std::filesystem::path& path, const SweepResult& r);

// ---------------------------------------------------------------- infilling

struct SequenceResult {
  ad::Matrix pose;    // frames x 72, after gating and infilling
  ad::Matrix shape;   // frames x 10
  ad::Matrix camera;  // frames x 3
  ad::Matrix raw_pose;
  Eigen::VectorXd u;
  std::vector<bool> accepted;
  std::vector<bool> infilled;  // rejected frames between two accepted ones
  std::vector<bool> held;      // rejected frames before the first or after the last accepted one
  Eigen::VectorXd mpjpe;       // per frame, gated; empty without ground truth
  Eigen::VectorXd raw_mpjpe;   // per frame, ungated
  double tau_hi = 0.0;

  nlohmann::json to_json() const;
};

/// Rejects frames with u > tau_hi and rebuilds them from the nearest
/// accepted neighbours: per-part slerp inside the sequence, holding at the
/// ends. `frames` ground truth (joints3d) is used for errors when present.
SequenceResult infill_sequence(const model::PocoModel& m, const model::UncertaintyCalibration& calib,
                               const data::SampleBatch& frames, double tau_hi, model::Normalization norm,
                               bool has_ground_truth = true);

/// Linear-interpolated quantile, q in [0, 1].
double quantile(Eigen::VectorXd values, double q);

}  // namespace poco::pipe
