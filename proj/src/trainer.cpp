// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "poco/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace poco::train {

using ad::Matrix;

// -------------------------------------------------------------- checkpoint

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_f64(std::ostream& os, double d) {
  auto v = std::bit_cast<std::uint64_t>(d);
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap64(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("truncated checkpoint");
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
  return v;
}

double get_f64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap64(v);
  return std::bit_cast<double>(v);
}

std::string get_string(std::istream& is, std::uint32_t limit) {
  const std::uint32_t n = get_u32(is);
  if (n > limit) throw std::runtime_error("corrupt checkpoint string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("truncated checkpoint");
  return s;
}

constexpr const char* kMomentM = "adam.m/";
constexpr const char* kMomentV = "adam.v/";

}  // namespace

const Matrix* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, m] : arrays)
    if (n == name) return &m;
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os.write("POCO", 4);
    put_u32(os, kCheckpointVersion);
    put_u32(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
    for (const auto& [name, m] : ckpt.arrays) {
      put_u32(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
    }
    for (const auto& [name, m] : ckpt.arrays) {
      put_u32(os, static_cast<std::uint32_t>(m.rows()));
      put_u32(os, static_cast<std::uint32_t>(m.cols()));
      for (Eigen::Index i = 0; i < m.size(); ++i) put_f64(os, m.data()[i]);
    }
    const std::string meta = ckpt.meta.dump();
    put_u32(os, static_cast<std::uint32_t>(meta.size()));
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    os.flush();
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "POCO", 4) != 0) throw std::runtime_error("not a POCO checkpoint: " + path.string());
  const std::uint32_t version = get_u32(is);
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t n = get_u32(is);
  Checkpoint c;
  for (std::uint32_t i = 0; i < n; ++i) c.arrays.emplace_back(get_string(is, 1u << 16), Matrix());
  for (auto& [name, m] : c.arrays) {
    const std::uint32_t r = get_u32(is);
    const std::uint32_t k = get_u32(is);
    m.resize(r, k);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get_f64(is);
    if (!is) throw std::runtime_error("truncated checkpoint array " + name);
  }
  c.meta = nlohmann::json::parse(get_string(is, 1u << 30));
  return c;
}

Checkpoint model_checkpoint(const TrainConfig& cfg, const model::PocoModel& m, const model::UncertaintyCalibration& cal) {
  Checkpoint c;
  for (const auto& p : m.params()) c.arrays.emplace_back(p.name, p.value);
  c.meta["config"] = cfg.to_ini();
  c.meta["model_hash"] = cfg.model_hash();
  c.meta["calibration"] = {cal.min, cal.max};
  return c;
}

LoadedModel load_model(const Checkpoint& ckpt, const TrainConfig* expected) {
  LoadedModel out;
  out.config = parse_config(ckpt.meta.at("config").get<std::string>());
  const std::string hash = ckpt.meta.at("model_hash").get<std::string>();
  if (hash != out.config.model_hash()) throw std::runtime_error("checkpoint config does not match its model hash");
  if (expected != nullptr && expected->model_hash() != hash)
    throw std::runtime_error("checkpoint model hash " + hash + " does not match requested model " +
                             expected->model_hash());
  out.model = std::make_unique<model::PocoModel>(out.config.model);
  for (auto& p : out.model->params()) {
    const Matrix* m = ckpt.find(p.name);
    if (m == nullptr) throw std::runtime_error("checkpoint lacks parameter " + p.name);
    if (m->rows() != p.value.rows() || m->cols() != p.value.cols())
      throw std::runtime_error("checkpoint parameter " + p.name + " has the wrong shape");
    p.value = *m;
  }
  if (ckpt.meta.contains("calibration")) {
    out.calibration.min = ckpt.meta["calibration"][0].get<double>();
    out.calibration.max = ckpt.meta["calibration"][1].get<double>();
  }
  return out;
}

LoadedModel load_model(const std::filesystem::path& path, const TrainConfig* expected) {
  return load_model(load_checkpoint(path), expected);
}

// ----------------------------------------------------------------- trainer

loss::Targets targets_of(const data::SampleBatch& b) {
  loss::Targets t{b.pose, b.shape, b.joints3d, b.joints2d, b.visibility()};
  for (Eigen::Index r = 0; r < t.pose.rows(); ++r) {
    Eigen::VectorXd row = t.pose.row(r).transpose();
    body::canonicalize_pose(row);
    t.pose.row(r) = row.transpose();
  }
  return t;
}

Trainer::Trainer(TrainConfig config, std::vector<data::SampleBatch> train_sets, std::optional<data::SampleBatch> val)
    : config_(std::move(config)), train_sets_(std::move(train_sets)), val_(std::move(val)), adam_(config_.optim) {
  config_.validate();
  if (train_sets_.empty()) throw std::invalid_argument("training needs at least one dataset");
  config_.model.seed = derive_seed(config_.seed, "model");
  model_ = std::make_unique<model::PocoModel>(config_.model);
  std::vector<const data::SampleBatch*> ptrs;
  std::vector<double> ratios = config_.data.ratios;
  double total = 0.0;
  for (const auto& s : train_sets_) {
    ptrs.push_back(&s);
    total += static_cast<double>(s.size());
  }
  if (ratios.empty())
    for (const auto& s : train_sets_) ratios.push_back(static_cast<double>(s.size()) / total);
  if (ratios.size() != ptrs.size()) throw std::invalid_argument("one mix ratio per training set is required");
  stream_ = std::make_unique<data::BatchStream>(ptrs, ratios, config_.batch_size, derive_seed(config_.seed, "batches"));
}

void Trainer::emit(const nlohmann::json& rec) {
  if (log_ != nullptr) {
    *log_ << rec.dump() << '\n';
    log_->flush();
  }
}

Trainer::StepResult Trainer::step() {
  const bool stage2 = in_stage2();
  const data::SampleBatch b = stream_->next();
  auto& ps = model_->params();
  auto trainable = [stage2](std::string_view name) {
    return !stage2 || model::PocoModel::is_uncertainty_parameter(name);
  };
  // Parameters are finite on entry (Adam commits only finite updates), so
  // every failure below is a divergence of this step.
  try {
    ps.zero_grad();
    ad::Tape t;
    const model::Output o = model_->forward(t, b.inputs, !stage2);
    const loss::Predictions pred{o.pose, o.shape, o.joints3d, o.joints2d, o.sigma, o.flow_cond};
    const auto tl = loss::total(pred, targets_of(b), config_.model.variant, config_.weights, model_->flow(),
                                stage2 ? loss::Terms::kUncertaintyOnly : loss::Terms::kAll, &floor_);
    const double value = tl.total.value()(0, 0);
    if (!std::isfinite(value)) throw std::runtime_error("non-finite loss");
    t.backward(tl.total);
    adam_.step(ps, trainable);
    return {value, tl.breakdown};
  } catch (const std::runtime_error& e) {
    if (!checkpoint_path_.empty()) save_checkpoint(checkpoint_path_.string() + ".last_finite", checkpoint());
    throw TrainingDiverged(std::string(e.what()) + " at iteration " + std::to_string(iteration_), iteration_);
  }
}

void Trainer::run(std::int64_t until) {
  const std::int64_t end = until < 0 ? config_.total_iters() : std::min<std::int64_t>(until, config_.total_iters());
  const bool has_stage2_params = loss::has_sigma(config_.model.variant);
  if (iteration_ == 0 && end > 0 && config_.eval_interval > 0 && val_) emit(validate_now());
  while (iteration_ < end) {
    if (in_stage2() && !has_stage2_params) {
      iteration_ = end;  // nothing is trainable in stage 2
      break;
    }
    const StepResult r = step();
    ++iteration_;
    if (iteration_ % config_.log_interval == 0 || iteration_ == config_.total_iters()) {
      // `iter` counts completed steps, so step stage1_iters is still stage 1.
      nlohmann::json rec{{"event", "step"},
                         {"iter", iteration_},
                         {"stage", iteration_ > config_.stage1_iters ? 2 : 1},
                         {"loss", r.loss},
                         {"sigma_floor_hits", floor_.hits}};
      for (const auto& [k, v] : r.terms) rec["terms"][k] = v;
      emit(rec);
      if (progress_ != nullptr) *progress_ << "iter " << iteration_ << " loss " << r.loss << '\n';
    }
    if (config_.eval_interval > 0 && val_ &&
        (iteration_ % config_.eval_interval == 0 || iteration_ == config_.total_iters()))
      emit(validate_now());
    if (config_.checkpoint_interval > 0 && !checkpoint_path_.empty() && iteration_ % config_.checkpoint_interval == 0)
      save_checkpoint(checkpoint_path_, checkpoint());
  }
  if (finished()) calibrate();
}

void Trainer::calibrate() {
  const data::SampleBatch& ref = val_ ? *val_ : train_sets_.front();
  const model::Prediction p = predict_all(*model_, ref.inputs);
  calibration_ = model::calibrate(p.sigma, body::default_skeleton());
}

nlohmann::json Trainer::validate_now() {
  const data::SampleBatch& v = *val_;
  const Eigen::Index n = config_.eval_samples > 0 ? std::min<Eigen::Index>(config_.eval_samples, v.size()) : v.size();
  const data::SampleBatch sub = v.slice(0, n);
  // Validation loss of the full objective, in fixed chunks.
  double loss_sum = 0.0;
  const Eigen::Index chunk = 256;
  for (Eigen::Index s = 0; s < n; s += chunk) {
    const Eigen::Index m = std::min(chunk, n - s);
    const data::SampleBatch part = sub.slice(s, m);
    ad::Tape t;
    const model::Output o = model_->forward(t, part.inputs);
    const loss::Predictions pred{o.pose, o.shape, o.joints3d, o.joints2d, o.sigma, o.flow_cond};
    const auto tl = loss::total(pred, targets_of(part), config_.model.variant, config_.weights, model_->flow());
    loss_sum += tl.total.value()(0, 0) * static_cast<double>(m);
  }
  const model::Prediction p = predict_all(*model_, sub.inputs);
  // Per-sample normalization needs no calibration; global uses this subset.
  const model::UncertaintyCalibration cal = model::calibrate(p.sigma, body::default_skeleton());
  metrics::EvalInputs in;
  in.pred_joints3d = p.joints3d;
  in.gt_joints3d = sub.joints3d;
  in.u = model::sample_uncertainty(p.sigma, body::default_skeleton(),
                                   cal.valid() ? config_.normalization : model::Normalization::kPerSample, cal);
  const metrics::EvalReport r = metrics::evaluate(in, config_.pcc_error);
  return {{"event", "eval"},        {"iter", iteration_},    {"val_loss", loss_sum / static_cast<double>(n)},
          {"mpjpe_mm", r.mpjpe},    {"pve_mm", r.pve},       {"pa_mpjpe_mm", r.pa_mpjpe},
          {"pcc", r.pcc},           {"n", n}};
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c = model_checkpoint(config_, *model_, calibration_);
  nlohmann::json steps = nlohmann::json::object();
  for (const auto& [name, mom] : adam_.moments()) {
    c.arrays.emplace_back(kMomentM + name, mom.m);
    c.arrays.emplace_back(kMomentV + name, mom.v);
    steps[name] = mom.steps;
  }
  c.meta["adam_steps"] = steps;
  c.meta["iteration"] = iteration_;
  c.meta["stream"] = stream_->state();
  c.meta["sigma_floor_hits"] = floor_.hits;
  return c;
}

void Trainer::initialize_from(const model::PocoModel& m) {
  model::ModelConfig mine = config_.model;
  model::ModelConfig theirs = m.config();
  mine.seed = theirs.seed = 0;
  TrainConfig a, b;
  a.model = mine;
  b.model = theirs;
  if (a.model_hash() != b.model_hash()) throw std::invalid_argument("initialize_from needs the same model configuration");
  for (auto& p : model_->params()) p.value = m.params().at(p.name).value;
  adam_.moments().clear();
}

void Trainer::restore(const Checkpoint& ckpt) {
  const TrainConfig saved = parse_config(ckpt.meta.at("config").get<std::string>());
  if (saved.model_hash() != config_.model_hash())
    throw std::runtime_error("checkpoint model does not match the configured model");
  for (auto& p : model_->params()) {
    const Matrix* m = ckpt.find(p.name);
    if (m == nullptr || m->rows() != p.value.rows() || m->cols() != p.value.cols())
      throw std::runtime_error("checkpoint parameter " + p.name + " missing or misshapen");
    p.value = *m;
  }
  adam_.moments().clear();
  if (ckpt.meta.contains("adam_steps")) {
    for (const auto& [name, steps] : ckpt.meta["adam_steps"].items()) {
      const Matrix* m = ckpt.find(kMomentM + name);
      const Matrix* v = ckpt.find(kMomentV + name);
      if (m == nullptr || v == nullptr) throw std::runtime_error("checkpoint lacks optimizer state for " + name);
      adam_.moments()[name] = ad::AdamMoments{*m, *v, steps.get<std::int64_t>()};
    }
  }
  iteration_ = ckpt.meta.value("iteration", std::int64_t{0});
  if (ckpt.meta.contains("stream")) stream_->set_state(ckpt.meta["stream"].get<std::string>());
  floor_.hits = ckpt.meta.value("sigma_floor_hits", std::size_t{0});
  if (ckpt.meta.contains("calibration")) {
    calibration_.min = ckpt.meta["calibration"][0].get<double>();
    calibration_.max = ckpt.meta["calibration"][1].get<double>();
  }
}

// -------------------------------------------------------------- evaluation

model::Prediction predict_all(const model::PocoModel& m, const Matrix& inputs, int chunk) {
  model::Prediction out;
  const Eigen::Index n = inputs.rows();
  out.pose.resize(n, body::kPoseDim);
  out.shape.resize(n, body::kShapeDim);
  out.camera.resize(n, body::kCameraDim);
  out.joints3d.resize(n, 3 * body::kParts);
  out.joints2d.resize(n, 2 * body::kParts);
  out.sigma.resize(n, body::kParts);
  for (Eigen::Index s = 0; s < n; s += chunk) {
    const Eigen::Index k = std::min<Eigen::Index>(chunk, n - s);
    const model::Prediction p = m.predict(inputs.middleRows(s, k));
    out.pose.middleRows(s, k) = p.pose;
    out.shape.middleRows(s, k) = p.shape;
    out.camera.middleRows(s, k) = p.camera;
    out.joints3d.middleRows(s, k) = p.joints3d;
    out.joints2d.middleRows(s, k) = p.joints2d;
    out.sigma.middleRows(s, k) = p.sigma;
  }
  return out;
}

Evaluation evaluate(const model::PocoModel& m, const model::UncertaintyCalibration& calib, const data::SampleBatch& d,
                    const EvalOptions& opt) {
  Evaluation e;
  e.prediction = predict_all(m, d.inputs, opt.chunk);
  const auto& sk = body::default_skeleton();
  const bool global = opt.normalization == model::Normalization::kGlobal;
  if (global && !calib.valid() && loss::has_sigma(m.config().variant))
    throw std::runtime_error("global normalization requested but the checkpoint has no calibration");
  e.u = global && calib.valid() ? model::sample_uncertainty(e.prediction.sigma, sk, opt.normalization, calib)
                                : model::sample_uncertainty(e.prediction.sigma, sk, model::Normalization::kPerSample, {});
  metrics::EvalInputs in;
  in.pred_joints3d = e.prediction.joints3d;
  in.gt_joints3d = d.joints3d;
  in.sigma = e.prediction.sigma;
  in.u = e.u;
  for (Eigen::Index i = 0; i < d.size(); ++i) in.occluded.push_back(d.occluded_count(i));
  in.source = d.source;
  e.report = metrics::evaluate(in, opt.pairing);
  e.report.extra["base_parameters"] = static_cast<double>(m.base_parameter_count());
  e.report.extra["uncertainty_parameters"] = static_cast<double>(m.uncertainty_parameter_count());
  e.report.extra["parameter_overhead"] =
      static_cast<double>(m.uncertainty_parameter_count()) / static_cast<double>(m.base_parameter_count());
  return e;
}

}  // namespace poco::train
