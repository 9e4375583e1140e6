// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include "poco/experiment.hpp"
#include "poco/pipelines.hpp"
#include "poco/rng.hpp"
#include "poco/trainer.hpp"

#include <CLI11.hpp>
#include <boost/algorithm/string.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>

#ifndef POCO_VERSION
#define POCO_VERSION "v0.0.0-0-gunknown"
#endif

namespace poco::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string version() { return POCO_VERSION; }

namespace {

// Raised for bad user input discovered after argument parsing.
struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Common {
  std::string config = "default";
  std::vector<std::string> overrides;
  std::string runs_root = "runs";
  std::string run_dir;
};

train::TrainConfig resolve_config(const Common& c) {
  if (c.config.empty() || c.config == "default") return train::parse_config("", c.overrides);
  if (!fs::exists(c.config)) throw InvalidInput("config file " + c.config + " does not exist");
  return train::load_config(c.config, c.overrides);
}

std::string fnv_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string utc_stamp(const char* format) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, format);
  return os.str();
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

// Owns the run directory and its manifest. The manifest is rewritten on
// completion or failure, so an aborted command still leaves a record.
class Run {
 public:
  Run(const Common& c, std::string command, const train::TrainConfig& cfg, std::vector<std::string> args)
      : command_(std::move(command)), args_(std::move(args)) {
    const std::string ini = cfg.to_ini();
    config_hash_ = fnv_hex(ini);
    model_hash_ = cfg.model_hash();
    created_ = utc_stamp("%Y-%m-%dT%H:%M:%SZ");
    if (!c.run_dir.empty()) {
      dir_ = c.run_dir;
    } else {
      const std::string base = command_ + "-" + config_hash_.substr(0, 12) + "-" + utc_stamp("%Y%m%dT%H%M%SZ");
      dir_ = fs::path(c.runs_root) / base;
      for (int k = 1; fs::exists(dir_); ++k) dir_ = fs::path(c.runs_root) / (base + "-" + std::to_string(k));
    }
    fs::create_directories(dir_);
    std::ofstream os(dir_ / "config.ini");
    if (!os) throw std::runtime_error("cannot write " + (dir_ / "config.ini").string());
    os << ini;
    outputs_.push_back("config.ini");
    write_manifest("running");
  }

  const fs::path& dir() const { return dir_; }

  /// Path of an artifact inside the run directory, recorded in the manifest.
  fs::path output(const std::string& name) {
    outputs_.push_back(name);
    return dir_ / name;
  }

  void finish(json summary) {
    summary_ = std::move(summary);
    write_manifest("ok");
  }
  void fail(const std::string& error, int code) {
    summary_ = {{"error", error}, {"exit_code", code}};
    write_manifest("failed");
  }

 private:
  void write_manifest(const std::string& status) {
    json out = outputs_;
    out.push_back("manifest.json");
    write_json(dir_ / "manifest.json", {{"version", version()},
                                        {"command", command_},
                                        {"args", args_},
                                        {"config_hash", config_hash_},
                                        {"model_hash", model_hash_},
                                        {"created_utc", created_},
                                        {"status", status},
                                        {"outputs", out},
                                        {"summary", summary_}});
  }

  std::string command_;
  std::vector<std::string> args_;
  fs::path dir_;
  std::string config_hash_, model_hash_, created_;
  std::vector<std::string> outputs_;
  json summary_ = json::object();
};

// Dataset files named in the config take precedence; anything else comes
// from the synthetic benchmark, generated on first use.
class Datasets {
 public:
  explicit Datasets(const train::TrainConfig& cfg) : cfg_(cfg) {}

  std::vector<data::SampleBatch> train() {
    if (cfg_.data.train.empty()) return generated().train;
    std::vector<data::SampleBatch> out;
    for (const auto& f : cfg_.data.train) out.push_back(read(f));
    return out;
  }

  /// "val", "test", "pool" or a dataset file path.
  data::SampleBatch split(const std::string& name) {
    if (name == "val") return cfg_.data.val.empty() ? generated().val : read(cfg_.data.val);
    if (name == "test") return cfg_.data.test.empty() ? generated().test : read(cfg_.data.test);
    if (name == "pool") return cfg_.data.pool.empty() ? generated().pool : read(cfg_.data.pool);
    return read(name);
  }

  const exp::Benchmark& generated() {
    if (!bench_) bench_ = exp::make_benchmark(cfg_.gen);
    return *bench_;
  }

 private:
  static data::SampleBatch read(const std::string& path) {
    if (!fs::exists(path)) throw InvalidInput("dataset " + path + " does not exist");
    return data::read_dataset(path);
  }

  const train::TrainConfig& cfg_;
  std::optional<exp::Benchmark> bench_;
};

train::LoadedModel load_for(const std::string& path, const train::TrainConfig& cfg) {
  if (path.empty()) throw InvalidInput("--checkpoint is required");
  if (!fs::exists(path)) throw InvalidInput("checkpoint " + path + " does not exist");
  train::LoadedModel m = train::load_model(path);
  // The checkpoint supplies the model; everything else follows this run.
  const model::ModelConfig keep = m.config.model;
  m.config = cfg;
  m.config.model = keep;
  if (m.config.normalization == model::Normalization::kGlobal && !m.calibration.valid())
    throw InvalidInput("checkpoint has no uncertainty calibration; use uncertainty.normalization=per_sample");
  return m;
}

train::EvalOptions eval_options(const train::TrainConfig& cfg) {
  train::EvalOptions o;
  o.normalization = cfg.normalization;
  o.pairing = cfg.pcc_error;
  return o;
}

std::string mm(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

template <class T>
std::vector<T> parse_list(const std::string& what, const std::string& s, const std::function<T(const std::string&)>& f) {
  std::vector<std::string> parts;
  boost::split(parts, s, boost::is_any_of(","));
  std::vector<T> out;
  for (auto& p : parts) {
    boost::trim(p);
    if (p.empty()) continue;
    try {
      out.push_back(f(p));
    } catch (const std::invalid_argument&) {
      throw InvalidInput("bad " + what + " entry '" + p + "'");
    } catch (const std::out_of_range&) {
      throw InvalidInput("bad " + what + " entry '" + p + "'");
    }
  }
  if (out.empty()) throw InvalidInput(what + " list is empty");
  return out;
}

// ---------------------------------------------------------------- commands

struct Context {
  std::ostream& out;
  std::ostream& err;
  bool verbose = false;
};

json cmd_gen_data(Run& run, const train::TrainConfig& cfg, Context& ctx) {
  const exp::Benchmark b = exp::make_benchmark(cfg.gen);
  const auto sources = data::default_sources();
  json files = json::object();
  json per_source = json::array();
  std::vector<std::string> train_files;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const std::string name = "train_" + sources[i].name + ".crds";
    data::write_dataset(run.output(name), b.train[i]);
    train_files.push_back(fs::absolute(run.dir() / name).string());
    files["train_" + sources[i].name] = name;
    per_source.push_back({{"source", sources[i].name},
                          {"id", i},
                          {"train", b.train[i].size()},
                          {"val", cfg.gen.val_size},
                          {"test", cfg.gen.test_size}});
  }
  data::write_dataset(run.output("val.crds"), b.val);
  data::write_dataset(run.output("test.crds"), b.test);
  data::write_dataset(run.output("pool.crds"), b.pool);
  files["val"] = "val.crds";
  files["test"] = "test.crds";
  files["pool"] = "pool.crds";
  const json manifest{{"seed", cfg.gen.seed},
                      {"files", files},
                      {"per_source", per_source},
                      {"pool", {{"source", data::wild_source().name}, {"count", b.pool.size()}}},
                      {"overrides",
                       {"data.train=" + boost::join(train_files, ","), "data.val=" + fs::absolute(run.dir() / "val.crds").string(),
                        "data.test=" + fs::absolute(run.dir() / "test.crds").string(),
                        "data.pool=" + fs::absolute(run.dir() / "pool.crds").string()}}};
  write_json(run.output("datasets.json"), manifest);
  Eigen::Index total = 0;
  for (const auto& t : b.train) total += t.size();
  ctx.out << "gen-data: " << total << " train, " << b.val.size() << " val, " << b.test.size() << " test, "
          << b.pool.size() << " pool samples -> " << run.dir().string() << "\n";
  return {{"train", total}, {"val", b.val.size()}, {"test", b.test.size()}, {"pool", b.pool.size()}};
}

json cmd_train(Run& run, const train::TrainConfig& cfg, Context& ctx, const std::string& resume) {
  Datasets ds(cfg);
  train::Trainer tr(cfg, ds.train(), ds.split("val"));
  if (!resume.empty()) {
    if (!fs::exists(resume)) throw InvalidInput("checkpoint " + resume + " does not exist");
    tr.restore(train::load_checkpoint(resume));
  }
  std::ofstream log(run.output("train.jsonl"));
  if (!log) throw std::runtime_error("cannot write the training log");
  tr.set_log(&log);
  tr.set_checkpoint_path(run.output("checkpoint.poco"));
  if (ctx.verbose) tr.set_progress(&ctx.err);
  tr.run();
  log.flush();
  train::save_checkpoint(run.dir() / "checkpoint.poco", tr.checkpoint());
  train::save_checkpoint(run.output("model.poco"), train::model_checkpoint(cfg, tr.model(), tr.calibration()));

  const auto ev = train::evaluate(tr.model(), tr.calibration(), ds.split("test"), eval_options(cfg));
  json report = metrics::to_json(ev.report);
  write_json(run.output("eval.json"), report);
  metrics::write_csv(run.output("eval.csv"), ev.report);
  ctx.out << "train: " << loss::to_string(cfg.model.variant) << ", " << tr.iteration() << " iterations, test PVE "
          << mm(ev.report.pve) << " mm, MPJPE " << mm(ev.report.mpjpe) << " mm, PCC " << num(ev.report.pcc) << " -> "
          << run.dir().string() << "\n";
  return {{"iterations", tr.iteration()}, {"pve_mm", ev.report.pve}, {"mpjpe_mm", ev.report.mpjpe},
          {"pcc", ev.report.pcc}};
}

json cmd_eval(Run& run, const train::TrainConfig& cfg, Context& ctx, const std::string& ckpt,
              const std::string& dataset) {
  const auto m = load_for(ckpt, cfg);
  Datasets ds(cfg);
  const auto d = ds.split(dataset);
  const auto ev = train::evaluate(*m.model, m.calibration, d, eval_options(cfg));
  json report = metrics::to_json(ev.report);
  report["dataset"] = dataset;
  report["variant"] = loss::to_string(m.config.model.variant);
  write_json(run.output("eval.json"), report);
  metrics::write_csv(run.output("eval.csv"), ev.report);
  ctx.out << "eval: " << dataset << " n=" << ev.report.n << " MPJPE " << mm(ev.report.mpjpe) << " PA-MPJPE "
          << mm(ev.report.pa_mpjpe) << " PVE " << mm(ev.report.pve) << " mm, PCC " << num(ev.report.pcc) << " -> "
          << run.dir().string() << "\n";
  return {{"mpjpe_mm", ev.report.mpjpe}, {"pa_mpjpe_mm", ev.report.pa_mpjpe}, {"pve_mm", ev.report.pve},
          {"pcc", ev.report.pcc}};
}

struct BootstrapData {
  train::LoadedModel start;
  data::SampleBatch pool, val, test;
  pipe::BootstrapInputs inputs;
};

std::unique_ptr<BootstrapData> bootstrap_data(const train::TrainConfig& cfg, const std::string& ckpt) {
  auto b = std::make_unique<BootstrapData>();
  b->start = load_for(ckpt, cfg);
  Datasets ds(cfg);
  b->pool = ds.split("pool");
  b->val = ds.split("val");
  b->test = ds.split("test");
  b->inputs = {&b->start, &b->pool, ds.train(), &b->val, &b->test};
  return b;
}

json sweep_json(const pipe::SweepResult& s) {
  json rows = json::array();
  for (const auto& r : s.rows)
    rows.push_back({{"tau", r.tau}, {"accepted", r.accepted}, {"val_pve_mm", r.val_pve}, {"test_pve_mm", r.test_pve}});
  return {{"rows", rows}, {"best_tau", s.best_tau}};
}

json cmd_bootstrap(Run& run, const train::TrainConfig& cfg, Context& ctx, const std::string& ckpt,
                   std::optional<double> tau) {
  auto b = bootstrap_data(cfg, ckpt);
  if (!tau) tau = cfg.bootstrap.tau;
  pipe::BootstrapResult res;
  json extra = json::object();
  if (tau) {
    res = pipe::bootstrap(b->inputs, *tau);
  } else {
    pipe::SweepResult s = pipe::sweep_threshold(b->inputs, cfg.bootstrap.tau_grid);
    pipe::write_sweep_csv(run.output("sweep.csv"), s);
    extra = sweep_json(s);
    res = std::move(s.best);
  }
  train::save_checkpoint(run.output("model.poco"), res.checkpoint);
  json report = res.report.to_json();
  report["threshold_source"] = tau ? "config" : "validation sweep";
  if (!extra.empty()) report["sweep"] = extra;
  write_json(run.output("bootstrap.json"), report);
  if (!res.report.warning.empty()) ctx.err << "warning: " << res.report.warning << "\n";
  ctx.out << "bootstrap: tau " << num(res.report.tau) << ", " << res.report.accepted << " accepted, "
          << res.report.rejected << " rejected, test PVE " << mm(res.report.test_pve_before) << " -> "
          << mm(res.report.test_pve_after) << " mm -> " << run.dir().string() << "\n";
  return report;
}

json cmd_sweep(Run& run, const train::TrainConfig& cfg, Context& ctx, const std::string& ckpt) {
  auto b = bootstrap_data(cfg, ckpt);
  const pipe::SweepResult s = pipe::sweep_threshold(b->inputs, cfg.bootstrap.tau_grid);
  pipe::write_sweep_csv(run.output("sweep.csv"), s);
  const json j = sweep_json(s);
  write_json(run.output("sweep.json"), j);
  train::save_checkpoint(run.output("model.poco"), s.best.checkpoint);
  ctx.out << "sweep-threshold: " << s.rows.size() << " thresholds, best tau " << num(s.best_tau) << " (val PVE "
          << mm(s.best.report.val_pve_after) << " mm) -> " << run.dir().string() << "\n";
  return j;
}

json cmd_infill(Run& run, const train::TrainConfig& cfg, Context& ctx, const std::string& ckpt,
                const std::string& sequence, std::optional<double> tau_hi) {
  const auto m = load_for(ckpt, cfg);
  Datasets ds(cfg);
  if (!tau_hi) tau_hi = cfg.infill.tau_hi;
  const bool tuned = !tau_hi;
  if (!tau_hi)
    tau_hi = exp::default_tau_hi(*m.model, m.calibration, ds.split("val"), cfg.infill.percentile, cfg.normalization);
  if (!(*tau_hi > 0.0 && *tau_hi < 1.0)) throw InvalidInput("infill threshold must lie in (0, 1)");

  json report{{"tau_hi", *tau_hi}, {"threshold_source", tuned ? "validation percentile" : "config"}};
  if (!sequence.empty()) {
    if (!fs::exists(sequence)) throw InvalidInput("sequence " + sequence + " does not exist");
    const auto frames = data::read_dataset(sequence);
    const auto r = pipe::infill_sequence(*m.model, m.calibration, frames, *tau_hi, cfg.normalization);
    report["sequence"] = r.to_json();
    report["mean_mpjpe_mm"] = r.mpjpe.mean();
    report["mean_raw_mpjpe_mm"] = r.raw_mpjpe.mean();
    write_json(run.output("infill.json"), report);
    ctx.out << "infill: " << frames.size() << " frames, MPJPE " << mm(r.raw_mpjpe.mean()) << " -> "
            << mm(r.mpjpe.mean()) << " mm with gating -> " << run.dir().string() << "\n";
    return {{"tau_hi", *tau_hi}, {"mean_mpjpe_mm", r.mpjpe.mean()}, {"mean_raw_mpjpe_mm", r.raw_mpjpe.mean()}};
  }

  const auto seqs = exp::make_sequences(cfg.gen);
  json items = json::array();
  std::size_t improved = 0;
  double gated = 0.0;
  double raw = 0.0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto r = pipe::infill_sequence(*m.model, m.calibration, seqs[i].frames, *tau_hi, cfg.normalization);
    const auto w = exp::window_errors(r, seqs[i]);
    improved += w.gated < w.raw ? 1 : 0;
    gated += w.gated;
    raw += w.raw;
    json item = r.to_json();
    item["index"] = i;
    item["window_mpjpe_mm"] = w.gated;
    item["window_raw_mpjpe_mm"] = w.raw;
    item["window_rejected"] = w.rejected;
    items.push_back(std::move(item));
  }
  const double n = static_cast<double>(seqs.size());
  report["sequences"] = items;
  report["improved_fraction"] = static_cast<double>(improved) / n;
  report["mean_window_mpjpe_mm"] = gated / n;
  report["mean_window_raw_mpjpe_mm"] = raw / n;
  write_json(run.output("infill.json"), report);
  ctx.out << "infill: " << seqs.size() << " sequences, window MPJPE " << mm(raw / n) << " -> " << mm(gated / n)
          << " mm with gating, improved " << improved << "/" << seqs.size() << " -> " << run.dir().string() << "\n";
  return {{"tau_hi", *tau_hi}, {"improved_fraction", static_cast<double>(improved) / n}};
}

json cmd_grad_check(Run& run, Context& ctx, int batch, std::uint64_t seed, bool& passed) {
  const auto rows = exp::gradient_check_all(batch, seed);
  std::ofstream csv(run.output("gradcheck.csv"));
  csv << "variant,max_rel_error,worst_parameter,checked,seconds\n" << std::setprecision(6);
  json out = json::array();
  passed = true;
  ctx.out << std::left << std::setw(12) << "variant" << std::setw(14) << "max_rel_err" << "worst parameter\n";
  for (const auto& r : rows) {
    const bool ok = r.report.max_error < 1e-4;
    passed = passed && ok;
    csv << loss::to_string(r.variant) << ',' << r.report.max_error << ',' << r.report.worst_parameter << ','
        << r.report.checked << ',' << r.seconds << '\n';
    ctx.out << std::left << std::setw(12) << loss::to_string(r.variant) << std::setw(14) << num(r.report.max_error)
            << r.report.worst_parameter << (ok ? "" : "  FAIL") << "\n";
    out.push_back({{"variant", loss::to_string(r.variant)},
                   {"max_rel_error", r.report.max_error},
                   {"worst_parameter", r.report.worst_parameter},
                   {"checked", r.report.checked}});
  }
  ctx.out << "grad-check: " << (passed ? "all variants below 1e-4" : "FAILED") << " -> " << run.dir().string()
          << "\n";
  return {{"variants", out}, {"passed", passed}};
}

json cmd_skeleton(Run& run, Context& ctx) {
  const auto& sk = body::default_skeleton();
  json offsets = json::array();
  for (const auto& o : sk.rest_offsets) offsets.push_back({o.x(), o.y(), o.z()});
  auto rows = [](const Eigen::MatrixXd& m) {
    json a = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
      a.push_back(row);
    }
    return a;
  };
  const json j{{"parts", sk.parts()},
               {"names", sk.names},
               {"parents", sk.parent},
               {"offsets", offsets},
               {"shape_basis", rows(sk.shape_basis)},
               {"weights", rows(sk.vertex_weights)}};
  write_json(run.output("skeleton.json"), j);
  ctx.out << "skeleton-dump: " << sk.parts() << " parts, " << sk.vertex_weights.rows() << " vertices -> "
          << (run.dir() / "skeleton.json").string() << "\n";
  return {{"parts", sk.parts()}};
}

json cmd_compare(Run& run, const train::TrainConfig& cfg, Context& ctx, const std::string& variants_arg,
                 const std::string& seeds_arg) {
  const auto variants = parse_list<loss::Variant>("variant", variants_arg,
                                                  [](const std::string& s) { return loss::parse_variant(s); });
  const auto seeds = parse_list<std::uint64_t>("seed", seeds_arg, [](const std::string& s) {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return static_cast<std::uint64_t>(v);
  });
  if (variants.size() < 2) throw InvalidInput("compare-variants needs at least two variants");
  Datasets ds(cfg);
  exp::Benchmark b;
  b.train = ds.train();
  b.val = ds.split("val");
  b.test = ds.split("test");
  const auto c = exp::compare_variants(cfg, variants, seeds, b, ctx.verbose ? &ctx.err : nullptr);
  exp::write_comparison_csv(run.output("compare.csv"), c);
  write_json(run.output("compare.json"), c.to_json());
  ctx.out << "compare-variants:";
  for (const auto& s : c.summary)
    ctx.out << " " << loss::to_string(s.variant) << " PVE " << mm(s.pve) << " PCC " << num(s.pcc) << ";";
  ctx.out << " -> " << run.dir().string() << "\n";
  return c.to_json()["summary"];
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "INI config file, or 'default'");
  sub->add_option("-s,--set", c.overrides, "Override as section.key=value (repeatable)");
  sub->add_option("--runs", c.runs_root, "Parent directory for run directories");
  sub->add_option("--run-dir", c.run_dir, "Exact run directory (overrides --runs)");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Pose regression with single-pass uncertainty: data, training and downstream pipelines", "poco"};
  app.set_version_flag("--version", version());
  app.require_subcommand(1);
  Context ctx{out, err};
  app.add_flag("-v,--verbose", ctx.verbose, "Progress on stderr");

  Common common;
  std::string checkpoint, dataset = "test", resume, sequence, variants = "gauss,nflow,poco", seeds = "1,2,3,4,5";
  std::optional<double> tau, tau_hi;
  int batch = 8;
  std::uint64_t gc_seed = 1;

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic benchmark datasets");
  auto* trn = app.add_subcommand("train", "Two-stage training, then test evaluation");
  trn->add_option("--resume", resume, "Trainer checkpoint to continue from");
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  ev->add_option("--dataset", dataset, "val, test, pool or a dataset file");
  auto* bs = app.add_subcommand("bootstrap", "Pseudo-label self-training on the unlabeled pool");
  bs->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  bs->add_option("--tau", tau, "Acceptance threshold (default: bootstrap.tau, else tuned on validation)");
  auto* inf = app.add_subcommand("infill", "Uncertainty-gated infilling of sequences");
  inf->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  inf->add_option("--sequence", sequence, "Ordered dataset file; default: synthetic occluded sequences");
  inf->add_option("--tau-hi", tau_hi, "Rejection threshold (default: infill.tau_hi, else a validation percentile)");
  auto* sw = app.add_subcommand("sweep-threshold", "Bootstrap over bootstrap.tau_grid");
  sw->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every loss variant");
  gc->add_option("--batch", batch, "Samples per batch");
  gc->add_option("--seed", gc_seed, "Seed for data and parameters");
  auto* sk = app.add_subcommand("skeleton-dump", "Write the skeleton constants as JSON");
  auto* cmp = app.add_subcommand("compare-variants", "Train and evaluate variants over seeds");
  cmp->add_option("--variants", variants, "Comma-separated variant names");
  cmp->add_option("--seeds", seeds, "Comma-separated training seeds");
  for (auto* s : {gen, trn, ev, bs, inf, sw, gc, sk, cmp}) add_common(s, common);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  std::unique_ptr<Run> run_dir;
  try {
    const train::TrainConfig cfg = resolve_config(common);
    run_dir = std::make_unique<Run>(common, command, cfg, args);
    Run& r = *run_dir;
    json summary;
    int code = kExitOk;
    if (sub == gen) summary = cmd_gen_data(r, cfg, ctx);
    else if (sub == trn) summary = cmd_train(r, cfg, ctx, resume);
    else if (sub == ev) summary = cmd_eval(r, cfg, ctx, checkpoint, dataset);
    else if (sub == bs) summary = cmd_bootstrap(r, cfg, ctx, checkpoint, tau);
    else if (sub == inf) summary = cmd_infill(r, cfg, ctx, checkpoint, sequence, tau_hi);
    else if (sub == sw) summary = cmd_sweep(r, cfg, ctx, checkpoint);
    else if (sub == gc) {
      bool passed = false;
      summary = cmd_grad_check(r, ctx, batch, gc_seed, passed);
      code = passed ? kExitOk : kExitFailure;
    } else if (sub == sk) summary = cmd_skeleton(r, ctx);
    else summary = cmd_compare(r, cfg, ctx, variants, seeds);
    if (code == kExitOk) r.finish(summary);
    else r.fail("check failed", code);
    return code;
  } catch (const train::TrainingDiverged& e) {
    err << "error: training diverged: " << e.what() << "\n";
    if (run_dir) run_dir->fail(e.what(), kExitFailure);
    return kExitFailure;
  } catch (const std::invalid_argument& e) {
    // Config, argument and input validation all raise invalid_argument.
    err << "error: " << e.what() << "\n";
    if (run_dir) run_dir->fail(e.what(), kExitInvalid);
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    if (run_dir) run_dir->fail(e.what(), kExitFailure);
    return kExitFailure;
  }
}

}  // namespace poco::cli
