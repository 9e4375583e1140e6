// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "poco/metrics.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace poco::metrics {

namespace {

void require_same(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.cols() != 3)
    throw std::invalid_argument(std::string(what) + " needs matching n x 3 point sets");
}

double mean_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::VectorXd d = (a - b).rowwise().norm();
  return pairwise_mean(d);
}

template <typename F>
Eigen::VectorXd per_row(Eigen::Index n, Exec exec, F&& f) {
  Eigen::VectorXd out(n);
  if (exec == Exec::kParallel) {
#pragma omp parallel for schedule(static)
    for (Eigen::Index i = 0; i < n; ++i) out(i) = f(i);
  } else {
    for (Eigen::Index i = 0; i < n; ++i) out(i) = f(i);
  }
  return out;
}

Bucket make_bucket(std::string label, const std::vector<Eigen::Index>& rows, const Eigen::VectorXd& err,
                   const Eigen::VectorXd& u) {
  Bucket b;
  b.label = std::move(label);
  b.n = rows.size();
  if (rows.empty()) return b;
  Eigen::VectorXd e(static_cast<Eigen::Index>(rows.size())), uu(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    e(static_cast<Eigen::Index>(k)) = err(rows[k]);
    uu(static_cast<Eigen::Index>(k)) = u.size() > 0 ? u(rows[k]) : 0.0;
  }
  b.mpjpe = pairwise_mean(e);
  b.u = pairwise_mean(uu);
  return b;
}

}  // namespace

double pairwise_sum(const double* data, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += data[i];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(data, half) + pairwise_sum(data + half, n - half);
}

double pairwise_mean(const Eigen::VectorXd& v) {
  if (v.size() == 0) return 0.0;
  return pairwise_sum(v.data(), static_cast<std::size_t>(v.size())) / static_cast<double>(v.size());
}

double mpjpe(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt) {
  require_same(pred, gt, "mpjpe");
  const Eigen::MatrixXd p = pred.rowwise() - pred.row(0);
  const Eigen::MatrixXd g = gt.rowwise() - gt.row(0);
  return kMillimeters * mean_distance(p, g);
}

Eigen::MatrixXd Similarity::apply(const Eigen::MatrixXd& points) const {
  Eigen::MatrixXd out = scale * points * rotation.transpose();
  out.rowwise() += translation.transpose();
  return out;
}

Similarity procrustes(const Eigen::MatrixXd& source, const Eigen::MatrixXd& target) {
  require_same(source, target, "procrustes");
  const auto n = static_cast<double>(source.rows());
  const Eigen::RowVector3d mu_s = source.colwise().mean();
  const Eigen::RowVector3d mu_t = target.colwise().mean();
  const Eigen::MatrixXd xs = source.rowwise() - mu_s;
  const Eigen::MatrixXd xt = target.rowwise() - mu_t;

  const Eigen::JacobiSVD<Eigen::MatrixXd> rank_check(xt);
  const Eigen::VectorXd sv = rank_check.singularValues();
  if (sv.size() < 2 || sv(1) <= 1e-12 * std::max(sv(0), 1e-300))
    throw std::invalid_argument("procrustes target is degenerate (rank < 2)");

  const Eigen::Matrix3d cov = xt.transpose() * xs / n;
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d d = Eigen::Vector3d::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) d(2) = -1.0;
  Similarity s;
  s.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  const double var_s = xs.squaredNorm() / n;
  s.scale = var_s > 0.0 ? svd.singularValues().dot(d) / var_s : 1.0;
  s.translation = mu_t.transpose() - s.scale * s.rotation * mu_s.transpose();
  return s;
}

double pa_mpjpe(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt) {
  const Similarity s = procrustes(pred, gt);
  return kMillimeters * mean_distance(s.apply(pred), gt);
}

double pve(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt) {
  require_same(pred, gt, "pve");
  return kMillimeters * mean_distance(pred, gt);
}

Correlation pcc(const Eigen::VectorXd& u, const Eigen::VectorXd& e) {
  if (u.size() != e.size()) throw std::invalid_argument("pcc needs equal-length arrays");
  if (u.size() < 2) return {0.0, true};
  const Eigen::VectorXd du = u.array() - pairwise_mean(u);
  const Eigen::VectorXd de = e.array() - pairwise_mean(e);
  const Eigen::VectorXd prod = du.cwiseProduct(de);
  const Eigen::VectorXd su = du.cwiseAbs2();
  const Eigen::VectorXd se = de.cwiseAbs2();
  const double cov = pairwise_sum(prod.data(), static_cast<std::size_t>(prod.size()));
  const double vu = pairwise_sum(su.data(), static_cast<std::size_t>(su.size()));
  const double ve = pairwise_sum(se.data(), static_cast<std::size_t>(se.size()));
  // A spread at rounding level is a constant array, not a signal.
  auto flat = [](double var, const Eigen::VectorXd& x) {
    const double n = static_cast<double>(x.size());
    return std::sqrt(var / n) <= 1e-12 * std::max(1.0, x.cwiseAbs().maxCoeff());
  };
  if (flat(vu, u) || flat(ve, e)) return {0.0, true};
  return {std::clamp(cov / std::sqrt(vu * ve), -1.0, 1.0), false};
}

Eigen::MatrixXd unflatten(const ad::Matrix& rows, Eigen::Index i) {
  const Eigen::Index parts = rows.cols() / 3;
  Eigen::MatrixXd out(parts, 3);
  for (Eigen::Index k = 0; k < parts; ++k) out.row(k) = rows.row(i).segment<3>(3 * k);
  return out;
}

Eigen::VectorXd batch_mpjpe(const ad::Matrix& pred, const ad::Matrix& gt, Exec exec) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw std::invalid_argument("batch shapes differ");
  return per_row(pred.rows(), exec, [&](Eigen::Index i) { return mpjpe(unflatten(pred, i), unflatten(gt, i)); });
}

Eigen::VectorXd batch_pa_mpjpe(const ad::Matrix& pred, const ad::Matrix& gt, Exec exec) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw std::invalid_argument("batch shapes differ");
  return per_row(pred.rows(), exec, [&](Eigen::Index i) { return pa_mpjpe(unflatten(pred, i), unflatten(gt, i)); });
}

Eigen::VectorXd batch_pve(const body::Skeleton& sk, const ad::Matrix& pred, const ad::Matrix& gt, Exec exec) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw std::invalid_argument("batch shapes differ");
  return per_row(pred.rows(), exec, [&](Eigen::Index i) {
    return pve(body::vertices(sk, unflatten(pred, i)), body::vertices(sk, unflatten(gt, i)));
  });
}

ErrorPairing parse_pairing(std::string_view s) {
  if (s == "mpjpe") return ErrorPairing::kMpjpe;
  if (s == "pa_mpjpe") return ErrorPairing::kPaMpjpe;
  throw std::invalid_argument("unknown error pairing '" + std::string(s) + "' (expected mpjpe or pa_mpjpe)");
}

std::string to_string(ErrorPairing p) { return p == ErrorPairing::kMpjpe ? "mpjpe" : "pa_mpjpe"; }

std::string occlusion_bucket(int occluded) {
  if (occluded == 0) return "0";
  if (occluded <= 3) return "1-3";
  if (occluded <= 7) return "4-7";
  return "8+";
}

EvalReport evaluate(const EvalInputs& in, ErrorPairing pairing, Exec exec) {
  const auto& sk = body::default_skeleton();
  EvalReport r;
  r.n = static_cast<std::size_t>(in.gt_joints3d.rows());
  r.pairing = pairing;
  r.per_mpjpe = batch_mpjpe(in.pred_joints3d, in.gt_joints3d, exec);
  r.per_pa_mpjpe = batch_pa_mpjpe(in.pred_joints3d, in.gt_joints3d, exec);
  r.per_pve = batch_pve(sk, in.pred_joints3d, in.gt_joints3d, exec);
  r.per_u = in.u;
  r.occluded = in.occluded;
  r.source = in.source;
  r.mpjpe = pairwise_mean(r.per_mpjpe);
  r.pa_mpjpe = pairwise_mean(r.per_pa_mpjpe);
  r.pve = pairwise_mean(r.per_pve);
  const Eigen::VectorXd& err = pairing == ErrorPairing::kMpjpe ? r.per_mpjpe : r.per_pa_mpjpe;
  if (in.u.size() == err.size() && err.size() > 0) {
    const Correlation c = pcc(in.u, err);
    r.pcc = c.value;
    r.pcc_degenerate = c.degenerate;
  } else {
    r.pcc_degenerate = true;
  }
  if (in.sigma.rows() == err.size() && in.sigma.cols() > 0)
    for (Eigen::Index j = 0; j < in.sigma.cols(); ++j) r.per_part_pcc.push_back(pcc(in.sigma.col(j), err).value);

  if (in.occluded.size() == r.n) {
    for (const char* label : {"0", "1-3", "4-7", "8+"}) {
      std::vector<Eigen::Index> rows;
      for (std::size_t i = 0; i < r.n; ++i)
        if (occlusion_bucket(in.occluded[i]) == label) rows.push_back(static_cast<Eigen::Index>(i));
      r.by_occlusion.push_back(make_bucket(label, rows, r.per_mpjpe, in.u));
    }
  }
  if (in.source.size() == r.n) {
    std::map<int, std::vector<Eigen::Index>> groups;
    for (std::size_t i = 0; i < r.n; ++i) groups[in.source[i]].push_back(static_cast<Eigen::Index>(i));
    for (const auto& [id, rows] : groups) r.by_source.push_back(make_bucket(std::to_string(id), rows, r.per_mpjpe, in.u));
  }
  return r;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["n"] = r.n;
  j["mpjpe_mm"] = r.mpjpe;
  j["pa_mpjpe_mm"] = r.pa_mpjpe;
  j["pve_mm"] = r.pve;
  j["pcc"] = r.pcc;
  j["pcc_degenerate"] = r.pcc_degenerate;
  j["pcc_error"] = to_string(r.pairing);
  auto buckets = [](const std::vector<Bucket>& bs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& b : bs) arr.push_back({{"group", b.label}, {"n", b.n}, {"mpjpe_mm", b.mpjpe}, {"mean_u", b.u}});
    return arr;
  };
  j["by_occlusion"] = buckets(r.by_occlusion);
  j["by_source"] = buckets(r.by_source);
  j["per_part_pcc"] = r.per_part_pcc;
  for (const auto& [k, v] : r.extra) j[k] = v;
  return j;
}

void write_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "index,source,occluded,u,mpjpe_mm,pa_mpjpe_mm,pve_mm\n";
  os.precision(10);
  for (std::size_t i = 0; i < r.n; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    os << i << ',' << (i < r.source.size() ? r.source[i] : -1) << ',' << (i < r.occluded.size() ? r.occluded[i] : -1)
       << ',' << (k < r.per_u.size() ? r.per_u(k) : 0.0) << ',' << r.per_mpjpe(k) << ',' << r.per_pa_mpjpe(k) << ','
       << r.per_pve(k) << '\n';
  }
}

}  // namespace poco::metrics
