// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-stage training, checkpoints and evaluation.
//
// Stage 1 trains every parameter on the full objective. Stage 2 freezes the
// backbone and the pose/shape/camera heads and trains the scale head,
// condition head and flow on the uncertainty terms only. Iteration numbers
// are global across stages: stage 2 covers [stage1_iters, stage1 + stage2).

#pragma once

#include "poco/diffcore.hpp"
#include "poco/losses.hpp"
#include "poco/metrics.hpp"
#include "poco/regressor.hpp"
#include "poco/synthdata.hpp"

#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace poco::train {

// ------------------------------------------------------------------ config

struct DataConfig {
  std::vector<std::string> train;  // dataset files
  std::vector<double> ratios;      // empty means proportional to size
  std::string val;
  std::string test;
  std::string pool;  // unlabeled inputs for pseudo-labelling
};

/// Pseudo-label self-training. An unset threshold is tuned on validation PVE
/// over `tau_grid`.
struct BootstrapSettings {
  std::optional<double> tau;
  std::vector<double> tau_grid = {0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0};
  double pseudo_ratio = 0.25;
  int finetune_iters = 1000;
  double finetune_lr = 3e-4;
};

/// Uncertainty-gated infilling. An unset threshold is the `percentile`
/// quantile of validation u.
struct InfillSettings {
  std::optional<double> tau_hi;
  double percentile = 0.9;
};

/// Synthetic benchmark sizes. Every source gets its own val and test split;
/// the unlabeled pool comes from the held-out "wild" source.
struct GenSettings {
  std::uint64_t seed = 0;
  std::vector<int> train_sizes = {20000, 10000, 10000};
  int val_size = 2000;
  int test_size = 2000;
  int pool_size = 4000;
  int sequences = 10;
  int sequence_frames = 48;
  int keyframes = 4;
};

struct TrainConfig {
  model::ModelConfig model;
  loss::LossWeights weights;
  ad::AdamOptions optim;
  int batch_size = 64;
  int stage1_iters = 8000;
  int stage2_iters = 2000;
  std::uint64_t seed = 0;
  int log_interval = 100;
  int eval_interval = 1000;
  int eval_samples = 1024;  // validation rows used for periodic evaluation; 0 = all
  int checkpoint_interval = 0;
  DataConfig data;
  model::Normalization normalization = model::Normalization::kGlobal;
  metrics::ErrorPairing pcc_error = metrics::ErrorPairing::kMpjpe;
  BootstrapSettings bootstrap;
  InfillSettings infill;
  GenSettings gen;

  void validate() const;
  int total_iters() const { return stage1_iters + stage2_iters; }

  /// INI text with every key, suitable for load().
  std::string to_ini() const;
  /// Hash of the model section; checkpoints refuse a mismatched model.
  std::string model_hash() const;
};

/// Every accepted "section.key" path, in file order.
std::vector<std::string> config_keys();

/// Applies "section.key=value" overrides on top of `text` (INI) and parses.
/// Unknown keys are errors.
TrainConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {});
TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
TrainConfig config_from_tree(const boost::property_tree::ptree& tree);

// -------------------------------------------------------------- checkpoint
//
// "POCO" file: magic, u32 version, u32 array count, name table (u32 byte
// length + UTF-8 name per array), then per array u32 rows, u32 cols and
// rows*cols little-endian float64 in row-major order, then u32 byte length +
// UTF-8 JSON metadata.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::vector<std::pair<std::string, ad::Matrix>> arrays;
  nlohmann::json meta = nlohmann::json::object();

  const ad::Matrix* find(const std::string& name) const;
};

/// Writes to a temporary sibling and renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Model and calibration restored from a checkpoint.
struct LoadedModel {
  TrainConfig config;
  std::unique_ptr<model::PocoModel> model;
  model::UncertaintyCalibration calibration;
};
LoadedModel load_model(const Checkpoint& ckpt, const TrainConfig* expected = nullptr);
LoadedModel load_model(const std::filesystem::path& path, const TrainConfig* expected = nullptr);
/// Parameters plus calibration only, no optimizer state.
Checkpoint model_checkpoint(const TrainConfig& cfg, const model::PocoModel& m, const model::UncertaintyCalibration& c);

/// Thrown when the loss or a gradient turns non-finite. The trainer has
/// already written the last finite state when a checkpoint path was set.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::int64_t iteration)
      : std::runtime_error(what), iteration_(iteration) {}
  std::int64_t iteration() const { return iteration_; }

 private:
  std::int64_t iteration_;
};

// ----------------------------------------------------------------- trainer

/// Canonicalized targets for a batch.
loss::Targets targets_of(const data::SampleBatch& b);

class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<data::SampleBatch> train_sets, std::optional<data::SampleBatch> val);

  /// Runs until `until` (exclusive, global iteration) or the end of stage 2.
  void run(std::int64_t until = -1);

  std::int64_t iteration() const { return iteration_; }
  bool finished() const { return iteration_ >= config_.total_iters(); }
  const TrainConfig& config() const { return config_; }
  model::PocoModel& model() { return *model_; }
  const model::UncertaintyCalibration& calibration() const { return calibration_; }

  /// JSON-lines records are written here as they are produced.
  void set_log(std::ostream* log) { log_ = log; }
  /// Where the last finite state goes on divergence, and where periodic
  /// checkpoints go.
  void set_checkpoint_path(std::filesystem::path p) { checkpoint_path_ = std::move(p); }
  /// Progress lines for humans (not part of the log).
  void set_progress(std::ostream* p) { progress_ = p; }

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ckpt);
  /// Starts from another model's parameters (same model hash) with fresh
  /// optimizer state, for finetuning.
  void initialize_from(const model::PocoModel& m);

  /// Validation loss and metrics on the first eval_samples rows.
  nlohmann::json validate_now();
  /// Recomputes the global-normalization range from the validation set (or
  /// the first training set).
  void calibrate();

 private:
  struct StepResult {
    double loss;
    std::map<std::string, double> terms;
  };
  StepResult step();
  void emit(const nlohmann::json& rec);
  bool in_stage2() const { return iteration_ >= config_.stage1_iters; }

  TrainConfig config_;
  std::vector<data::SampleBatch> train_sets_;
  std::optional<data::SampleBatch> val_;
  std::unique_ptr<model::PocoModel> model_;
  std::unique_ptr<data::BatchStream> stream_;
  ad::Adam adam_;
  std::int64_t iteration_ = 0;
  loss::FloorCounter floor_;
  model::UncertaintyCalibration calibration_;
  std::ostream* log_ = nullptr;
  std::ostream* progress_ = nullptr;
  std::filesystem::path checkpoint_path_;
};

// -------------------------------------------------------------- evaluation

struct EvalOptions {
  model::Normalization normalization = model::Normalization::kGlobal;
  metrics::ErrorPairing pairing = metrics::ErrorPairing::kMpjpe;
  int chunk = 512;
};

/// Predictions, u and metrics over a whole dataset.
struct Evaluation {
  model::Prediction prediction;
  Eigen::VectorXd u;
  metrics::EvalReport report;
};

model::Prediction predict_all(const model::PocoModel& m, const ad::Matrix& inputs, int chunk = 512);
Evaluation evaluate(const model::PocoModel& m, const model::UncertaintyCalibration& calib, const data::SampleBatch& d,
                    const EvalOptions& opt = {});

}  // namespace poco::train
