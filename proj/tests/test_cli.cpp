// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cli.hpp"

#include "poco/synthdata.hpp"
#include "poco/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

using namespace poco;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result call(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is);
  return json::parse(is);
}

// Small sizes so every command finishes in well under a second.
const char* kSmallIni = R"([model]
variant = gauss
hidden = 24
features = 24
scale_hidden = 12
cond_dim = 12
flow_hidden = 6
[train]
batch_size = 16
stage1_iters = 30
stage2_iters = 10
eval_interval = 0
[bootstrap]
finetune_iters = 5
tau_grid = 0, 1
[gen]
train_sizes = 120, 80, 80
val_size = 40
test_size = 40
pool_size = 60
sequences = 2
sequence_frames = 12
keyframes = 3
)";

struct Workspace {
  fs::path root;
  fs::path ini;
  Workspace() {
    root = fs::temp_directory_path() / "poco_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    ini = root / "small.ini";
    std::ofstream(ini) << kSmallIni;
  }
  ~Workspace() { fs::remove_all(root); }
  std::string dir(const std::string& name) const { return (root / name).string(); }
  std::vector<std::string> common(const std::string& run) const {
    return {"-c", ini.string(), "--run-dir", dir(run)};
  }
};

std::vector<std::string> operator+(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("version string has the describe shape") {
  CHECK(std::regex_match(cli::version(), std::regex(R"(v?[0-9A-Za-z._]+-[0-9]+-g[0-9a-z]+(-dirty)?)")));
  const auto r = call({"--version"});
  CHECK(r.code == 0);
  CHECK(r.out.find(cli::version()) != std::string::npos);
}

TEST_CASE("argument and config errors exit with 1") {
  Workspace ws;
  CHECK(call({}).code == cli::kExitInvalid);
  CHECK(call({"frobnicate"}).code == cli::kExitInvalid);
  CHECK(call({"eval"}).code == cli::kExitInvalid);  // --checkpoint is required

  const auto unknown = call({"skeleton-dump", "--run-dir", ws.dir("u"), "-s", "model.width=3"});
  CHECK(unknown.code == cli::kExitInvalid);
  for (const auto& k : train::config_keys()) CHECK(unknown.err.find(k) != std::string::npos);

  CHECK(call({"train", "-c", ws.dir("missing.ini"), "--run-dir", ws.dir("m")}).code == cli::kExitInvalid);
  CHECK(call({"train", "--run-dir", ws.dir("b"), "-s", "train.batch_size=0"}).code == cli::kExitInvalid);
  const auto nock = call(std::vector<std::string>{"eval", "--checkpoint", ws.dir("none.poco")} + ws.common("e"));
  CHECK(nock.code == cli::kExitInvalid);
  // The failed run still leaves its manifest behind.
  const json m = read_json(ws.root / "e" / "manifest.json");
  CHECK(m["status"] == "failed");
  CHECK(m["summary"]["exit_code"] == 1);
}

TEST_CASE("runtime failures exit with 2") {
  Workspace ws;
  std::ofstream(ws.root / "bad.poco") << "not a checkpoint";
  const auto r = call(std::vector<std::string>{"eval", "--checkpoint", ws.dir("bad.poco")} + ws.common("x"));
  CHECK(r.code == cli::kExitFailure);
  CHECK(r.err.find("error:") == 0);
}

TEST_CASE("skeleton dump is a self-describing oracle") {
  Workspace ws;
  const auto r = call({"skeleton-dump", "--run-dir", ws.dir("sk")});
  REQUIRE(r.code == 0);
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 1);
  const json j = read_json(ws.root / "sk" / "skeleton.json");
  const auto& sk = body::default_skeleton();
  CHECK(j["parts"] == 24);
  CHECK(j["parents"].get<std::vector<int>>() == sk.parent);
  for (int k = 0; k < 24; ++k)
    for (int c = 0; c < 3; ++c) CHECK(j["offsets"][k][c].get<double>() == sk.rest_offsets[k](c));
  CHECK(j["weights"].size() == static_cast<std::size_t>(sk.vertex_weights.rows()));
}

TEST_CASE("default run directories are named from the config hash and time") {
  Workspace ws;
  const auto r = call({"skeleton-dump", "--runs", ws.dir("runs")});
  REQUIRE(r.code == 0);
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(ws.root / "runs")) dirs.push_back(e.path());
  REQUIRE(dirs.size() == 1);
  const std::string name = dirs[0].filename().string();
  CHECK(std::regex_match(name, std::regex(R"(skeleton-dump-[0-9a-f]{12}-[0-9]{8}T[0-9]{6}Z)")));
  const json m = read_json(dirs[0] / "manifest.json");
  CHECK(name.find(m["config_hash"].get<std::string>().substr(0, 12)) != std::string::npos);
  CHECK(m["version"] == cli::version());
  CHECK(m["status"] == "ok");
  // A second run in the same second gets a distinct directory.
  REQUIRE(call({"skeleton-dump", "--runs", ws.dir("runs")}).code == 0);
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(ws.root / "runs")) ++n;
  CHECK(n == 2);
}

TEST_CASE("gen-data, train, eval and the pipelines end to end") {
  Workspace ws;
  const auto gen = call(std::vector<std::string>{"gen-data"} + ws.common("data"));
  REQUIRE(gen.code == 0);
  const json ds = read_json(ws.root / "data" / "datasets.json");
  REQUIRE(ds["per_source"].size() == 3);
  CHECK(ds["per_source"][0]["train"] == 120);
  CHECK(ds["per_source"][2]["train"] == 80);
  for (const auto& name : {"train_clean", "train_noisy", "train_hard"})
    CHECK(fs::exists(ws.root / "data" / ds["files"][name].get<std::string>()));
  CHECK(data::read_dataset(ws.root / "data" / "test.crds").size() == 120);

  std::vector<std::string> data_args;
  for (const auto& o : ds["overrides"]) data_args.insert(data_args.end(), {"-s", o.get<std::string>()});

  const auto tr = call(std::vector<std::string>{"train"} + ws.common("train") + data_args);
  REQUIRE(tr.code == 0);
  const fs::path run = ws.root / "train";
  for (const auto& f : {"config.ini", "manifest.json", "train.jsonl", "model.poco", "checkpoint.poco", "eval.json"})
    CHECK(fs::exists(run / f));
  const json man = read_json(run / "manifest.json");
  CHECK(man["status"] == "ok");
  CHECK(man["outputs"].size() >= 6);
  {
    std::ifstream log(run / "train.jsonl");
    std::string line;
    std::size_t steps = 0;
    while (std::getline(log, line)) steps += json::parse(line)["event"] == "step";
    CHECK(steps > 0);
  }

  // The snapshot reproduces the run.
  const auto again = call(std::vector<std::string>{"train", "-c", (run / "config.ini").string(), "--run-dir",
                                                    ws.dir("train2")});
  REQUIRE(again.code == 0);
  CHECK(read_json(ws.root / "train2" / "eval.json")["pve_mm"] == read_json(run / "eval.json")["pve_mm"]);

  const std::string model = (run / "model.poco").string();
  const auto ev = call(std::vector<std::string>{"eval", "--checkpoint", model, "--dataset", "test"} +
                       ws.common("eval") + data_args);
  REQUIRE(ev.code == 0);
  const json rep = read_json(ws.root / "eval" / "eval.json");
  for (const auto& k : {"mpjpe_mm", "pa_mpjpe_mm", "pve_mm", "pcc"}) CHECK(rep.contains(k));
  CHECK(rep["pve_mm"] == read_json(run / "eval.json")["pve_mm"]);

  const auto bs = call(std::vector<std::string>{"bootstrap", "--checkpoint", model, "--tau", "0"} +
                       ws.common("bs") + data_args);
  REQUIRE(bs.code == 0);
  const json bj = read_json(ws.root / "bs" / "bootstrap.json");
  CHECK(bj["accepted"] == 0);
  CHECK(bj.contains("warning"));
  CHECK(bj["test_pve_after_mm"] == bj["test_pve_before_mm"]);

  const auto sw = call(std::vector<std::string>{"sweep-threshold", "--checkpoint", model} + ws.common("sw") +
                       data_args);
  REQUIRE(sw.code == 0);
  std::ifstream csv(ws.root / "sw" / "sweep.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "tau,accepted,val_pve_mm,test_pve_mm,selected");

  const auto inf = call(std::vector<std::string>{"infill", "--checkpoint", model} + ws.common("inf") + data_args);
  REQUIRE(inf.code == 0);
  const json ij = read_json(ws.root / "inf" / "infill.json");
  CHECK(ij["sequences"].size() == 2);
  CHECK(ij["sequences"][0]["frames"].size() == 12);
  CHECK(ij["tau_hi"].get<double>() > 0.0);

  const auto bad_tau = call(std::vector<std::string>{"infill", "--checkpoint", model, "--tau-hi", "1.5"} +
                            ws.common("inf2") + data_args);
  CHECK(bad_tau.code == cli::kExitInvalid);

  const auto resumed = call(std::vector<std::string>{"train", "--resume", (run / "checkpoint.poco").string()} +
                            ws.common("resume") + data_args);
  REQUIRE(resumed.code == 0);
  CHECK(read_json(ws.root / "resume" / "eval.json")["pve_mm"] == read_json(run / "eval.json")["pve_mm"]);
}

TEST_CASE("compare-variants writes per-variant medians") {
  Workspace ws;
  const auto r = call(std::vector<std::string>{"compare-variants", "--variants", "baseline,baseline", "--seeds", "3"} +
                      ws.common("cmp"));
  REQUIRE(r.code == 0);
  const json j = read_json(ws.root / "cmp" / "compare.json");
  REQUIRE(j["summary"].size() == 2);
  // Same variant and seed on identical data gives identical rows.
  CHECK(j["summary"][0] == j["summary"][1]);
  std::ifstream csv(ws.root / "cmp" / "compare.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header.rfind("variant,seeds,median_pve_mm", 0) == 0);

  CHECK(call(std::vector<std::string>{"compare-variants", "--variants", "poco"} + ws.common("c1")).code ==
        cli::kExitInvalid);
  CHECK(call(std::vector<std::string>{"compare-variants", "--seeds", "x"} + ws.common("c2")).code ==
        cli::kExitInvalid);
}
