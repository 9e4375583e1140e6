// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "poco/pipelines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

namespace poco::pipe {

using ad::Matrix;

namespace {

// PVE only depends on the pose and shape, so calibration is irrelevant here;
// per-sample normalization avoids requiring one.
double pve_of(const model::PocoModel& m, const data::SampleBatch& d) {
  train::EvalOptions o;
  o.normalization = model::Normalization::kPerSample;
  return train::evaluate(m, {}, d, o).report.pve;
}

void require_unit(double tau, const char* what) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument(std::string(what) + " must lie in [0, 1]");
}

}  // namespace

// ------------------------------------------------------------ pseudo-labels

Eigen::Vector3d refit_camera(const Eigen::MatrixXd& joints3d, const Matrix& inputs, Eigen::Index i,
                             const Eigen::Vector3d& fallback) {
  // Minimize sum over visible k of |s * X_k + t - x_k|^2 with X_k the (x, y)
  // of joint k: s = cov(X, x) / var(X), t = mean(x) - s * mean(X).
  Eigen::Vector2d mean_x = Eigen::Vector2d::Zero();
  Eigen::Vector2d mean_k = Eigen::Vector2d::Zero();
  int n = 0;
  for (int k = 0; k < body::kParts; ++k) {
    if (inputs(i, data::kVisibilityOffset + k) < 0.5) continue;
    mean_x += joints3d.row(k).head<2>().transpose();
    mean_k += Eigen::Vector2d(inputs(i, 2 * k), inputs(i, 2 * k + 1));
    ++n;
  }
  if (n < 2) return fallback;
  mean_x /= n;
  mean_k /= n;
  double cov = 0.0;
  double var = 0.0;
  for (int k = 0; k < body::kParts; ++k) {
    if (inputs(i, data::kVisibilityOffset + k) < 0.5) continue;
    const Eigen::Vector2d dx = joints3d.row(k).head<2>().transpose() - mean_x;
    const Eigen::Vector2d dk = Eigen::Vector2d(inputs(i, 2 * k), inputs(i, 2 * k + 1)) - mean_k;
    cov += dx.dot(dk);
    var += dx.squaredNorm();
  }
  if (var < 1e-12) return fallback;
  const double s = cov / var;
  if (!(s > 0.0) || !std::isfinite(s)) return fallback;
  const Eigen::Vector2d t = mean_k - s * mean_x;
  return {s, t.x(), t.y()};
}

PseudoGtPool select_pseudo_gt(const model::PocoModel& m, const model::UncertaintyCalibration& calib,
                              const data::SampleBatch& pool, double tau, model::Normalization norm) {
  require_unit(tau, "pseudo-label threshold");
  if (norm == model::Normalization::kGlobal && !calib.valid())
    throw std::invalid_argument("global normalization needs a calibration");
  const model::Prediction p = train::predict_all(m, pool.inputs);
  const Eigen::VectorXd u = model::sample_uncertainty(p.sigma, body::default_skeleton(), norm, calib);

  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < pool.size(); ++i)
    if (tau >= 1.0 || u(i) < tau) keep.push_back(i);

  PseudoGtPool out;
  out.threshold = tau;
  out.rejected = static_cast<std::size_t>(pool.size()) - keep.size();
  out.accepted = data::allocate(static_cast<Eigen::Index>(keep.size()));
  out.accepted_u.resize(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const Eigen::Index i = keep[r];
    const auto row = static_cast<Eigen::Index>(r);
    data::SampleBatch& a = out.accepted;
    a.inputs.row(row) = pool.inputs.row(i);
    a.pose.row(row) = p.pose.row(i);
    a.shape.row(row) = p.shape.row(i);
    a.joints3d.row(row) = p.joints3d.row(i);
    const Eigen::MatrixXd joints = metrics::unflatten(p.joints3d, i);
    const Eigen::Vector3d cam = refit_camera(joints, pool.inputs, i, p.camera.row(i).transpose());
    a.camera.row(row) = cam.transpose();
    const Eigen::MatrixXd projected = body::project(joints, cam);
    for (int k = 0; k < body::kParts; ++k) {
      const bool visible = pool.inputs(i, data::kVisibilityOffset + k) >= 0.5;
      a.joints2d(row, 2 * k) = visible ? pool.inputs(i, 2 * k) : projected(k, 0);
      a.joints2d(row, 2 * k + 1) = visible ? pool.inputs(i, 2 * k + 1) : projected(k, 1);
    }
    a.source[r] = pool.source[static_cast<std::size_t>(i)];
    out.accepted_u(row) = u(i);
  }
  return out;
}

// ---------------------------------------------------------------- bootstrap

nlohmann::json BootstrapReport::to_json() const {
  nlohmann::json j{{"tau", tau},
                   {"accepted", accepted},
                   {"rejected", rejected},
                   {"finetuned", finetuned},
                   {"val_pve_before_mm", val_pve_before},
                   {"val_pve_after_mm", val_pve_after},
                   {"test_pve_before_mm", test_pve_before},
                   {"test_pve_after_mm", test_pve_after}};
  if (!warning.empty()) j["warning"] = warning;
  return j;
}

BootstrapResult bootstrap(const BootstrapInputs& in, double tau) {
  if (in.start == nullptr || in.pool == nullptr || in.val == nullptr || in.test == nullptr)
    throw std::invalid_argument("bootstrap needs a model, a pool, a validation set and a test set");
  if (in.base.empty()) throw std::invalid_argument("bootstrap needs base training data");
  require_unit(tau, "bootstrap threshold");
  const train::TrainConfig& start_cfg = in.start->config;
  const model::PocoModel& start = *in.start->model;

  BootstrapResult res;
  BootstrapReport& rep = res.report;
  rep.tau = tau;
  rep.val_pve_before = pve_of(start, *in.val);
  rep.test_pve_before = pve_of(start, *in.test);

  const PseudoGtPool sel = select_pseudo_gt(start, in.start->calibration, *in.pool, tau, start_cfg.normalization);
  rep.accepted = static_cast<std::size_t>(sel.accepted.size());
  rep.rejected = sel.rejected;
  if (sel.accepted.size() == 0) {
    rep.warning = "no pool sample has u below the threshold; finetune skipped";
    rep.val_pve_after = rep.val_pve_before;
    rep.test_pve_after = rep.test_pve_before;
    res.checkpoint = train::model_checkpoint(start_cfg, start, in.start->calibration);
    return res;
  }

  train::TrainConfig cfg = start_cfg;
  const auto& bs = start_cfg.bootstrap;
  cfg.stage1_iters = bs.finetune_iters;
  cfg.stage2_iters = 0;
  cfg.optim.lr = bs.finetune_lr;
  cfg.eval_interval = 0;
  cfg.checkpoint_interval = 0;
  std::vector<data::SampleBatch> sets = in.base;
  double base_total = 0.0;
  for (const auto& b : sets) base_total += static_cast<double>(b.size());
  cfg.data.ratios.clear();
  for (const auto& b : sets) cfg.data.ratios.push_back((1.0 - bs.pseudo_ratio) * static_cast<double>(b.size()) / base_total);
  cfg.data.ratios.push_back(bs.pseudo_ratio);
  sets.push_back(sel.accepted);
  cfg.data.train.clear();  // in-memory sets; file names do not apply

  train::Trainer tr(cfg, std::move(sets), *in.val);
  tr.initialize_from(start);
  tr.run();
  rep.finetuned = true;
  rep.val_pve_after = pve_of(tr.model(), *in.val);
  rep.test_pve_after = pve_of(tr.model(), *in.test);
  res.checkpoint = train::model_checkpoint(cfg, tr.model(), tr.calibration());
  return res;
}

SweepResult sweep_threshold(const BootstrapInputs& in, const std::vector<double>& grid) {
  if (grid.empty()) throw std::invalid_argument("threshold grid must not be empty");
  std::vector<double> taus = grid;
  std::sort(taus.begin(), taus.end());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  SweepResult out;
  bool have = false;
  for (double tau : taus) {
    BootstrapResult r = bootstrap(in, tau);
    out.rows.push_back({tau, r.report.accepted, r.report.val_pve_after, r.report.test_pve_after});
    if (!have || r.report.val_pve_after < out.best.report.val_pve_after) {
      out.best_tau = tau;
      out.best = std::move(r);
      have = true;
    }
  }
  return out;
}

void write_sweep_csv(const std::filesystem::path& path, const SweepResult& r) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "tau,accepted,val_pve_mm,test_pve_mm,selected\n" << std::setprecision(10);
  for (const auto& row : r.rows)
    os << row.tau << ',' << row.accepted << ',' << row.val_pve << ',' << row.test_pve << ','
       << (row.tau == r.best_tau ? 1 : 0) << '\n';
}

// ---------------------------------------------------------------- infilling

double quantile(Eigen::VectorXd values, double q) {
  if (values.size() == 0) throw std::invalid_argument("quantile of an empty array");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile level must lie in [0, 1]");
  std::sort(values.data(), values.data() + values.size());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<Eigen::Index>(std::floor(pos));
  const Eigen::Index hi = std::min<Eigen::Index>(lo + 1, values.size() - 1);
  return values(lo) + (pos - static_cast<double>(lo)) * (values(hi) - values(lo));
}

nlohmann::json SequenceResult::to_json() const {
  nlohmann::json frames = nlohmann::json::array();
  for (Eigen::Index f = 0; f < u.size(); ++f) {
    const auto k = static_cast<std::size_t>(f);
    nlohmann::json rec{{"frame", f},
                       {"u", u(f)},
                       {"accepted", static_cast<bool>(accepted[k])},
                       {"infilled", static_cast<bool>(infilled[k])},
                       {"held", static_cast<bool>(held[k])}};
    if (mpjpe.size() > 0) {
      rec["mpjpe_mm"] = mpjpe(f);
      rec["raw_mpjpe_mm"] = raw_mpjpe(f);
    }
    frames.push_back(rec);
  }
  return {{"tau_hi", tau_hi}, {"frames", frames}};
}

SequenceResult infill_sequence(const model::PocoModel& m, const model::UncertaintyCalibration& calib,
                               const data::SampleBatch& frames, double tau_hi, model::Normalization norm,
                               bool has_ground_truth) {
  const Eigen::Index n = frames.size();
  if (n < 2) throw std::invalid_argument("infilling needs at least 2 frames");
  if (!(tau_hi > 0.0 && tau_hi < 1.0)) throw std::invalid_argument("infill threshold must lie in (0, 1)");
  if (norm == model::Normalization::kGlobal && !calib.valid())
    throw std::invalid_argument("global normalization needs a calibration");
  const auto& sk = body::default_skeleton();
  const model::Prediction p = train::predict_all(m, frames.inputs);

  SequenceResult r;
  r.tau_hi = tau_hi;
  r.u = model::sample_uncertainty(p.sigma, sk, norm, calib);
  r.raw_pose = p.pose;
  r.pose = p.pose;
  r.shape = p.shape;
  r.camera = p.camera;
  const auto frames_n = static_cast<std::size_t>(n);
  r.accepted.assign(frames_n, false);
  r.infilled.assign(frames_n, false);
  r.held.assign(frames_n, false);
  std::vector<Eigen::Index> anchors;
  for (Eigen::Index f = 0; f < n; ++f) {
    r.accepted[static_cast<std::size_t>(f)] = !(r.u(f) > tau_hi);
    if (r.accepted[static_cast<std::size_t>(f)]) anchors.push_back(f);
  }
  if (anchors.empty()) throw std::runtime_error("every frame is above the threshold; nothing to anchor infilling");

  std::size_t next = 0;  // first anchor at or after f
  for (Eigen::Index f = 0; f < n; ++f) {
    const auto k = static_cast<std::size_t>(f);
    while (next < anchors.size() && anchors[next] < f) ++next;
    if (r.accepted[k]) continue;
    const bool has_prev = next > 0;
    const bool has_next = next < anchors.size();
    if (has_prev && has_next) {
      const Eigen::Index a = anchors[next - 1];
      const Eigen::Index b = anchors[next];
      const double t = static_cast<double>(f - a) / static_cast<double>(b - a);
      for (int q = 0; q < body::kParts; ++q) {
        const body::Vec3 pa = p.pose.row(a).segment<3>(3 * q).transpose();
        const body::Vec3 pb = p.pose.row(b).segment<3>(3 * q).transpose();
        r.pose.row(f).segment<3>(3 * q) = data::slerp_axis_angle(pa, pb, t).transpose();
      }
      r.shape.row(f) = (1.0 - t) * p.shape.row(a) + t * p.shape.row(b);
      r.camera.row(f) = (1.0 - t) * p.camera.row(a) + t * p.camera.row(b);
      r.infilled[k] = true;
    } else {
      const Eigen::Index src = has_prev ? anchors[next - 1] : anchors[next];
      r.pose.row(f) = p.pose.row(src);
      r.shape.row(f) = p.shape.row(src);
      r.camera.row(f) = p.camera.row(src);
      r.held[k] = true;
    }
  }

  if (has_ground_truth) {
    r.mpjpe.resize(n);
    r.raw_mpjpe.resize(n);
    for (Eigen::Index f = 0; f < n; ++f) {
      const Eigen::MatrixXd gt = metrics::unflatten(frames.joints3d, f);
      const Eigen::MatrixXd gated =
          body::forward_kinematics(sk, r.pose.row(f).transpose(), r.shape.row(f).transpose());
      r.mpjpe(f) = metrics::mpjpe(gated, gt);
      r.raw_mpjpe(f) = metrics::mpjpe(metrics::unflatten(p.joints3d, f), gt);
    }
  }
  return r;
}

}  // namespace poco::pipe
