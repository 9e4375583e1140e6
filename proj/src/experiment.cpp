// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "poco/experiment.hpp"

#include "poco/rng.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <stdexcept>

namespace poco::exp {

Benchmark make_benchmark(const train::GenSettings& g) {
  const auto sources = data::default_sources();
  if (g.train_sizes.size() != sources.size())
    throw std::invalid_argument("one training size per source is required");
  Benchmark b;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const int id = static_cast<int>(i);
    b.train.push_back(data::generate(sources[i], g.train_sizes[i], derive_seed(g.seed, "train", i), id));
    const auto val = data::generate(sources[i], g.val_size, derive_seed(g.seed, "val", i), id);
    const auto test = data::generate(sources[i], g.test_size, derive_seed(g.seed, "test", i), id);
    if (i == 0) {
      b.val = val;
      b.test = test;
    } else {
      b.val.append(val);
      b.test.append(test);
    }
  }
  b.pool = data::generate(data::wild_source(), g.pool_size, derive_seed(g.seed, "pool"),
                          static_cast<int>(sources.size()));
  return b;
}

std::vector<data::Sequence> make_sequences(const train::GenSettings& g) {
  const auto spec = data::default_sources()[1];
  std::vector<data::Sequence> out;
  for (int i = 0; i < g.sequences; ++i)
    out.push_back(data::make_sequence(spec, data::SequenceSpec{}, g.sequence_frames, g.keyframes,
                                      derive_seed(g.seed, "sequence", static_cast<std::uint64_t>(i))));
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

// ------------------------------------------------------------ variant grid

namespace {

double bucket_u(const metrics::EvalReport& r, const std::string& label) {
  for (const auto& b : r.by_occlusion)
    if (b.label == label) return b.u;
  return 0.0;
}

}  // namespace

CellResult run_cell(const train::TrainConfig& base, loss::Variant v, std::uint64_t seed, const Benchmark& b,
                    std::ostream* progress) {
  train::TrainConfig cfg = base;
  cfg.model.variant = v;
  cfg.seed = seed;
  cfg.data.train.clear();
  cfg.data.ratios.clear();
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  train::Trainer tr(cfg, b.train, b.val);
  tr.set_progress(progress);
  tr.run();
  train::EvalOptions opt;
  opt.normalization = cfg.normalization;
  opt.pairing = cfg.pcc_error;
  CellResult c;
  c.variant = v;
  c.seed = seed;
  c.report = train::evaluate(tr.model(), tr.calibration(), b.test, opt).report;
  c.u_visible = bucket_u(c.report, "0");
  c.u_occluded = bucket_u(c.report, "8+");
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.base_params = tr.model().base_parameter_count();
  c.uncertainty_params = tr.model().uncertainty_parameter_count();
  c.model = train::model_checkpoint(cfg, tr.model(), tr.calibration());
  return c;
}

Comparison compare_variants(const train::TrainConfig& base, const std::vector<loss::Variant>& variants,
                            const std::vector<std::uint64_t>& seeds, const Benchmark& b, std::ostream* progress) {
  if (variants.size() < 2) throw std::invalid_argument("compare_variants needs at least two variants");
  if (seeds.empty()) throw std::invalid_argument("compare_variants needs at least one seed");
  Comparison c;
  for (loss::Variant v : variants) {
    std::vector<double> pve, mpjpe, pa, pcc, u0, u8;
    for (std::uint64_t s : seeds) {
      c.cells.push_back(run_cell(base, v, s, b, progress));
      const CellResult& r = c.cells.back();
      if (progress)
        *progress << loss::to_string(v) << " seed " << s << ": pve " << r.report.pve << " pcc " << r.report.pcc
                  << " (" << r.seconds << " s)\n";
      pve.push_back(r.report.pve);
      mpjpe.push_back(r.report.mpjpe);
      pa.push_back(r.report.pa_mpjpe);
      pcc.push_back(r.report.pcc);
      u0.push_back(r.u_visible);
      u8.push_back(r.u_occluded);
    }
    c.summary.push_back({v, median(pve), median(mpjpe), median(pa), median(pcc), median(u0), median(u8)});
  }
  return c;
}

const VariantSummary& Comparison::of(loss::Variant v) const {
  for (const auto& s : summary)
    if (s.variant == v) return s;
  throw std::out_of_range("variant " + loss::to_string(v) + " is not part of the comparison");
}

nlohmann::json Comparison::to_json() const {
  nlohmann::json cj = nlohmann::json::array();
  for (const auto& r : cells) {
    nlohmann::json j = metrics::to_json(r.report);
    j["variant"] = loss::to_string(r.variant);
    j["seed"] = r.seed;
    j["u_visible"] = r.u_visible;
    j["u_occluded"] = r.u_occluded;
    j["seconds"] = r.seconds;
    j["base_params"] = r.base_params;
    j["uncertainty_params"] = r.uncertainty_params;
    cj.push_back(std::move(j));
  }
  nlohmann::json sj = nlohmann::json::array();
  for (const auto& s : summary)
    sj.push_back({{"variant", loss::to_string(s.variant)},
                  {"median_pve_mm", s.pve},
                  {"median_mpjpe_mm", s.mpjpe},
                  {"median_pa_mpjpe_mm", s.pa_mpjpe},
                  {"median_pcc", s.pcc},
                  {"median_u_visible", s.u_visible},
                  {"median_u_occluded", s.u_occluded}});
  return {{"cells", cj}, {"summary", sj}};
}

void write_comparison_csv(const std::filesystem::path& path, const Comparison& c) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "variant,seeds,median_pve_mm,median_mpjpe_mm,median_pa_mpjpe_mm,median_pcc,median_u_visible,"
        "median_u_occluded\n"
     << std::setprecision(10);
  for (const auto& s : c.summary) {
    std::size_t n = 0;
    for (const auto& r : c.cells) n += r.variant == s.variant;
    os << loss::to_string(s.variant) << ',' << n << ',' << s.pve << ',' << s.mpjpe << ',' << s.pa_mpjpe << ','
       << s.pcc << ',' << s.u_visible << ',' << s.u_occluded << '\n';
  }
}

// ------------------------------------------------------ gradient checking

std::vector<GradCheckRow> gradient_check_all(int batch, std::uint64_t seed) {
  if (batch < 1) throw std::invalid_argument("gradient check needs a nonempty batch");
  const data::SampleBatch b =
      data::generate(data::default_sources()[1], batch, derive_seed(seed, "gradcheck-data"), 1);
  const loss::Targets gt = train::targets_of(b);
  std::vector<GradCheckRow> out;
  for (loss::Variant v : loss::all_variants()) {
    model::ModelConfig cfg;
    cfg.variant = v;
    cfg.hidden = 12;
    cfg.features = 10;
    cfg.scale_hidden = 8;
    cfg.cond_dim = 6;
    cfg.flow_hidden = 5;
    cfg.head_init_scale = 0.3;
    cfg.scale_grad_through_pose = true;
    cfg.seed = derive_seed(seed, "gradcheck-model");
    model::PocoModel m(cfg);
    Rng rng(derive_seed(seed, "gradcheck-init"));
    for (auto& p : m.params())
      if (p.name.find(".out.") != std::string::npos)
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = 0.3 * rng.normal();
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckRow row;
    row.variant = v;
    row.report = ad::check_gradients(m.params(), [&](ad::Tape& t) {
      const auto o = m.forward(t, b.inputs);
      loss::Predictions p{o.pose, o.shape, o.joints3d, o.joints2d, o.sigma, o.flow_cond};
      return loss::total(p, gt, v, {}, m.flow()).total;
    });
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(row);
  }
  return out;
}

// --------------------------------------------------------------- infilling

WindowErrors window_errors(const pipe::SequenceResult& r, const data::Sequence& seq) {
  if (r.mpjpe.size() != static_cast<Eigen::Index>(seq.degraded.size()))
    throw std::invalid_argument("sequence result has no per-frame errors for this sequence");
  WindowErrors w;
  std::size_t n = 0;
  for (std::size_t f = 0; f < seq.degraded.size(); ++f) {
    if (!seq.degraded[f]) continue;
    const auto i = static_cast<Eigen::Index>(f);
    w.gated += r.mpjpe(i);
    w.raw += r.raw_mpjpe(i);
    w.rejected += r.accepted[f] ? 0 : 1;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("sequence has no occlusion window");
  w.gated /= static_cast<double>(n);
  w.raw /= static_cast<double>(n);
  return w;
}

double default_tau_hi(const model::PocoModel& m, const model::UncertaintyCalibration& calib,
                      const data::SampleBatch& val, double percentile, model::Normalization norm) {
  const auto p = train::predict_all(m, val.inputs);
  const Eigen::VectorXd u = model::sample_uncertainty(p.sigma, body::default_skeleton(), norm, calib);
  // The gate needs a threshold strictly inside (0, 1).
  return std::clamp(pipe::quantile(u, percentile), 1e-6, 1.0 - 1e-6);
}

}  // namespace poco::exp
