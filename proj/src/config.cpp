// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "poco/trainer.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>

#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

namespace poco::train {

namespace {

namespace pt = boost::property_tree;

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

double to_double(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  try {
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("config key " + key + ": '" + s + "' is not a number");
}

long long to_int(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  try {
    const long long v = std::stoll(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("config key " + key + ": '" + s + "' is not an integer");
}

bool to_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("config key " + key + ": '" + s + "' is not a boolean");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (boost::trim_copy(s).empty()) return out;
  boost::split(out, s, boost::is_any_of(","));
  for (auto& x : out) boost::trim(x);
  return out;
}

std::string join_reals(const std::vector<double>& v) {
  std::vector<std::string> s;
  for (double r : v) s.push_back(fmt(r));
  return boost::join(s, ",");
}

std::vector<double> parse_reals(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& x : split_list(v)) out.push_back(to_double(key, x));
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::vector<std::string> s;
  for (int r : v) s.push_back(std::to_string(r));
  return boost::join(s, ",");
}

std::vector<int> parse_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& x : split_list(v)) out.push_back(static_cast<int>(to_int(key, x)));
  return out;
}

// "auto" stands for an unset value that is derived at run time.
std::string optional_real(const std::optional<double>& v) { return v ? fmt(*v) : "auto"; }

std::optional<double> parse_optional_real(const std::string& key, const std::string& v) {
  if (v == "auto") return std::nullopt;
  return to_double(key, v);
}

struct Key {
  std::string path;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

#define POCO_INT_KEY(path, field)                                                                   \
  Key {                                                                                             \
    path, [](const TrainConfig& c) { return std::to_string(c.field); },                            \
        [](TrainConfig& c, const std::string& v) { c.field = static_cast<decltype(c.field)>(to_int(path, v)); } \
  }
#define POCO_REAL_KEY(path, field)                                                   \
  Key {                                                                              \
    path, [](const TrainConfig& c) { return fmt(c.field); },                         \
        [](TrainConfig& c, const std::string& v) { c.field = to_double(path, v); }  \
  }
#define POCO_BOOL_KEY(path, field)                                                  \
  Key {                                                                             \
    path, [](const TrainConfig& c) { return std::string(c.field ? "true" : "false"); }, \
        [](TrainConfig& c, const std::string& v) { c.field = to_bool(path, v); }    \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      Key{"model.variant", [](const TrainConfig& c) { return loss::to_string(c.model.variant); },
          [](TrainConfig& c, const std::string& v) { c.model.variant = loss::parse_variant(v); }},
      POCO_INT_KEY("model.hidden", model.hidden),
      POCO_INT_KEY("model.features", model.features),
      POCO_INT_KEY("model.scale_hidden", model.scale_hidden),
      POCO_INT_KEY("model.cond_dim", model.cond_dim),
      POCO_INT_KEY("model.flow_hidden", model.flow_hidden),
      POCO_REAL_KEY("model.flow_bound", model.flow_bound),
      POCO_BOOL_KEY("model.full_pose_flow", model.full_pose_flow),
      POCO_BOOL_KEY("model.scale_grad_through_pose", model.scale_grad_through_pose),
      POCO_REAL_KEY("model.head_init_scale", model.head_init_scale),
      POCO_REAL_KEY("loss.nf", weights.nf),
      POCO_REAL_KEY("loss.q", weights.q),
      POCO_REAL_KEY("loss.sigma", weights.sigma),
      POCO_REAL_KEY("loss.shape", weights.shape),
      POCO_REAL_KEY("loss.joints3d", weights.joints3d),
      POCO_REAL_KEY("loss.joints2d", weights.joints2d),
      POCO_REAL_KEY("optim.lr", optim.lr),
      POCO_REAL_KEY("optim.beta1", optim.beta1),
      POCO_REAL_KEY("optim.beta2", optim.beta2),
      POCO_REAL_KEY("optim.eps", optim.eps),
      POCO_INT_KEY("train.batch_size", batch_size),
      POCO_INT_KEY("train.stage1_iters", stage1_iters),
      POCO_INT_KEY("train.stage2_iters", stage2_iters),
      POCO_INT_KEY("train.seed", seed),
      POCO_INT_KEY("train.log_interval", log_interval),
      POCO_INT_KEY("train.eval_interval", eval_interval),
      POCO_INT_KEY("train.eval_samples", eval_samples),
      POCO_INT_KEY("train.checkpoint_interval", checkpoint_interval),
      Key{"data.train", [](const TrainConfig& c) { return boost::join(c.data.train, ","); },
          [](TrainConfig& c, const std::string& v) { c.data.train = split_list(v); }},
      Key{"data.ratios", [](const TrainConfig& c) { return join_reals(c.data.ratios); },
          [](TrainConfig& c, const std::string& v) { c.data.ratios = parse_reals("data.ratios", v); }},
      Key{"data.val", [](const TrainConfig& c) { return c.data.val; },
          [](TrainConfig& c, const std::string& v) { c.data.val = boost::trim_copy(v); }},
      Key{"data.test", [](const TrainConfig& c) { return c.data.test; },
          [](TrainConfig& c, const std::string& v) { c.data.test = boost::trim_copy(v); }},
      Key{"data.pool", [](const TrainConfig& c) { return c.data.pool; },
          [](TrainConfig& c, const std::string& v) { c.data.pool = boost::trim_copy(v); }},
      Key{"uncertainty.normalization", [](const TrainConfig& c) { return model::to_string(c.normalization); },
          [](TrainConfig& c, const std::string& v) { c.normalization = model::parse_normalization(v); }},
      Key{"eval.pcc_error", [](const TrainConfig& c) { return metrics::to_string(c.pcc_error); },
          [](TrainConfig& c, const std::string& v) { c.pcc_error = metrics::parse_pairing(v); }},
      Key{"bootstrap.tau", [](const TrainConfig& c) { return optional_real(c.bootstrap.tau); },
          [](TrainConfig& c, const std::string& v) { c.bootstrap.tau = parse_optional_real("bootstrap.tau", v); }},
      Key{"bootstrap.tau_grid", [](const TrainConfig& c) { return join_reals(c.bootstrap.tau_grid); },
          [](TrainConfig& c, const std::string& v) { c.bootstrap.tau_grid = parse_reals("bootstrap.tau_grid", v); }},
      POCO_REAL_KEY("bootstrap.pseudo_ratio", bootstrap.pseudo_ratio),
      POCO_INT_KEY("bootstrap.finetune_iters", bootstrap.finetune_iters),
      POCO_REAL_KEY("bootstrap.finetune_lr", bootstrap.finetune_lr),
      Key{"infill.tau_hi", [](const TrainConfig& c) { return optional_real(c.infill.tau_hi); },
          [](TrainConfig& c, const std::string& v) { c.infill.tau_hi = parse_optional_real("infill.tau_hi", v); }},
      POCO_REAL_KEY("infill.percentile", infill.percentile),
      POCO_INT_KEY("gen.seed", gen.seed),
      Key{"gen.train_sizes", [](const TrainConfig& c) { return join_ints(c.gen.train_sizes); },
          [](TrainConfig& c, const std::string& v) { c.gen.train_sizes = parse_ints("gen.train_sizes", v); }},
      POCO_INT_KEY("gen.val_size", gen.val_size),
      POCO_INT_KEY("gen.test_size", gen.test_size),
      POCO_INT_KEY("gen.pool_size", gen.pool_size),
      POCO_INT_KEY("gen.sequences", gen.sequences),
      POCO_INT_KEY("gen.sequence_frames", gen.sequence_frames),
      POCO_INT_KEY("gen.keyframes", gen.keyframes),
  };
  return k;
}

#undef POCO_INT_KEY
#undef POCO_REAL_KEY
#undef POCO_BOOL_KEY

}  // namespace

void TrainConfig::validate() const {
  if (stage1_iters < 0 || stage2_iters < 0) throw std::invalid_argument("iterations must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!(optim.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (log_interval < 1 || eval_interval < 0 || checkpoint_interval < 0 || eval_samples < 0)
    throw std::invalid_argument("intervals must be nonnegative (log interval >= 1)");
  if (!data.train.empty() && !data.ratios.empty() && data.ratios.size() != data.train.size())
    throw std::invalid_argument("data.ratios needs one entry per training file");
  for (double w : {weights.nf, weights.q, weights.sigma, weights.shape, weights.joints3d, weights.joints2d})
    if (w < 0.0) throw std::invalid_argument("loss weights must be nonnegative");
  auto unit = [](double t) { return t >= 0.0 && t <= 1.0; };
  if (bootstrap.tau && !unit(*bootstrap.tau)) throw std::invalid_argument("bootstrap.tau must lie in [0, 1]");
  if (bootstrap.tau_grid.empty()) throw std::invalid_argument("bootstrap.tau_grid must not be empty");
  for (double t : bootstrap.tau_grid)
    if (!unit(t)) throw std::invalid_argument("bootstrap.tau_grid values must lie in [0, 1]");
  if (!(bootstrap.pseudo_ratio > 0.0 && bootstrap.pseudo_ratio < 1.0))
    throw std::invalid_argument("bootstrap.pseudo_ratio must lie in (0, 1)");
  if (bootstrap.finetune_iters < 0 || !(bootstrap.finetune_lr > 0.0))
    throw std::invalid_argument("bootstrap finetune settings out of range");
  if (infill.tau_hi && !(*infill.tau_hi > 0.0 && *infill.tau_hi < 1.0))
    throw std::invalid_argument("infill.tau_hi must lie in (0, 1)");
  if (!(infill.percentile > 0.0 && infill.percentile < 1.0))
    throw std::invalid_argument("infill.percentile must lie in (0, 1)");
  if (gen.train_sizes.size() != data::default_sources().size())
    throw std::invalid_argument("gen.train_sizes needs one size per source (clean, noisy, hard)");
  for (int n : gen.train_sizes)
    if (n < 1) throw std::invalid_argument("gen.train_sizes must be positive");
  if (gen.val_size < 1 || gen.test_size < 1 || gen.pool_size < 1)
    throw std::invalid_argument("gen split sizes must be positive");
  if (gen.sequences < 1 || gen.sequence_frames < 2 || gen.keyframes < 2 || gen.keyframes > gen.sequence_frames)
    throw std::invalid_argument("gen sequence settings out of range");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const Key& k : keys()) out.push_back(k.path);
  return out;
}

std::string TrainConfig::to_ini() const {
  std::ostringstream os;
  std::string section;
  for (const Key& k : keys()) {
    const auto dot = k.path.find('.');
    const std::string sec = k.path.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) os << '\n';
      os << '[' << sec << "]\n";
      section = sec;
    }
    os << k.path.substr(dot + 1) << " = " << k.get(*this) << '\n';
  }
  return os.str();
}

std::string TrainConfig::model_hash() const {
  std::string canon;
  for (const Key& k : keys())
    if (k.path.rfind("model.", 0) == 0) canon += k.path + "=" + k.get(*this) + ";";
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

TrainConfig config_from_tree(const pt::ptree& tree) {
  TrainConfig c;
  std::set<std::string> known;
  for (const Key& k : keys()) known.insert(k.path);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw std::invalid_argument("config key '" + section + "' must live in a section");
    for (const auto& [name, leaf] : body) {
      const std::string path = section + "." + name;
      if (!known.count(path))
        throw std::invalid_argument("unknown config key '" + path + "'; valid keys: " +
                                    boost::join(config_keys(), ", "));
    }
  }
  for (const Key& k : keys())
    if (auto v = tree.get_optional<std::string>(k.path)) k.set(c, boost::trim_copy(*v));
  c.validate();
  return c;
}

TrainConfig parse_config(const std::string& text, const std::vector<std::string>& overrides) {
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(std::string("config parse error: ") + e.what());
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || o.find('.') > eq)
      throw std::invalid_argument("override '" + o + "' must look like section.key=value");
    tree.put(boost::trim_copy(o.substr(0, eq)), boost::trim_copy(o.substr(eq + 1)));
  }
  return config_from_tree(tree);
}

TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  std::ostringstream text;
  text << is.rdbuf();
  return parse_config(text.str(), overrides);
}

}  // namespace poco::train
