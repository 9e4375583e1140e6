// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// The synthetic benchmark and the multi-run experiments built on it. All
// data derives from GenSettings::seed, so every variant and training seed
// sees identical samples.

#pragma once

#include "poco/pipelines.hpp"
#include "poco/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace poco::exp {

struct Benchmark {
  std::vector<data::SampleBatch> train;  // one per default source
  data::SampleBatch val;                 // all sources, concatenated
  data::SampleBatch test;
  data::SampleBatch pool;  // wild source; labels present but unused by training
};

Benchmark make_benchmark(const train::GenSettings& g);

/// Occluded sequences from the noisy source, seeded by (gen seed, index).
std::vector<data::Sequence> make_sequences(const train::GenSettings& g);

// ------------------------------------------------------------ variant grid

struct CellResult {
  loss::Variant variant = loss::Variant::kPoco;
  std::uint64_t seed = 0;
  metrics::EvalReport report;
  double u_visible = 0.0;   // mean u, no occluded part
  double u_occluded = 0.0;  // mean u, 8 or more occluded parts
  double seconds = 0.0;
  std::size_t base_params = 0;
  std::size_t uncertainty_params = 0;
  train::Checkpoint model;  // trained parameters and calibration
};

struct VariantSummary {
  loss::Variant variant = loss::Variant::kPoco;
  double pve = 0.0;  // medians over seeds
  double mpjpe = 0.0;
  double pa_mpjpe = 0.0;
  double pcc = 0.0;
  double u_visible = 0.0;
  double u_occluded = 0.0;
};

struct Comparison {
  std::vector<CellResult> cells;
  std::vector<VariantSummary> summary;  // in the order requested

  const VariantSummary& of(loss::Variant v) const;
  nlohmann::json to_json() const;
};

/// Trains `base` with the given variant and seed on the benchmark and
/// evaluates on its test split.
CellResult run_cell(const train::TrainConfig& base, loss::Variant v, std::uint64_t seed, const Benchmark& b,
                    std::ostream* progress = nullptr);

/// Needs at least two variants.
Comparison compare_variants(const train::TrainConfig& base, const std::vector<loss::Variant>& variants,
                            const std::vector<std::uint64_t>& seeds, const Benchmark& b,
                            std::ostream* progress = nullptr);
void write_comparison_csv(const std::filesystem::path& path, const Comparison& c);

double median(std::vector<double> v);

// ------------------------------------------------------ gradient checking

struct GradCheckRow {
  loss::Variant variant = loss::Variant::kPoco;
  ad::GradCheckReport report;
  double seconds = 0.0;
};

/// Finite-difference check of the full objective for every variant on a
/// tiny model and a random `batch`-sample batch. Output layers that start at
/// zero are randomized and the scale head sees the pose without a stop
/// gradient, so every parameter lies on a live path.
std::vector<GradCheckRow> gradient_check_all(int batch = 8, std::uint64_t seed = 1);

// --------------------------------------------------------------- infilling

/// Mean MPJPE over the occlusion window with and without gating.
struct WindowErrors {
  double gated = 0.0;
  double raw = 0.0;
  std::size_t rejected = 0;  // window frames rejected by the gate
};

WindowErrors window_errors(const pipe::SequenceResult& r, const data::Sequence& seq);

/// Default gate: the configured percentile of u over `val`.
double default_tau_hi(const model::PocoModel& m, const model::UncertaintyCalibration& calib,
                      const data::SampleBatch& val, double percentile, model::Normalization norm);

}  // namespace poco::exp
