// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pose and uncertainty metrics. Distances are reported in millimeters
// (world units are meters, scaled by 1000). Joint sets are parts x 3; batch
// versions take one flattened sample per row.

#pragma once

#include "poco/bodymodel.hpp"
#include "poco/diffcore.hpp"

#include <filesystem>
#include <map>
#include <json.hpp>
#include <string>
#include <string_view>
#include <vector>

namespace poco::metrics {

inline constexpr double kMillimeters = 1000.0;

/// Root-relative mean joint distance; part 0 is the root.
double mpjpe(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt);

struct Similarity {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::MatrixXd apply(const Eigen::MatrixXd& points) const;
};

/// Least-squares similarity taking `source` onto `target` (det R = +1).
/// Throws std::invalid_argument when `target` has rank < 2.
Similarity procrustes(const Eigen::MatrixXd& source, const Eigen::MatrixXd& target);

/// MPJPE after similarity-aligning pred onto gt.
double pa_mpjpe(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt);

/// Mean vertex distance, no alignment.
double pve(const Eigen::MatrixXd& pred_vertices, const Eigen::MatrixXd& gt_vertices);

struct Correlation {
  double value = 0.0;
  bool degenerate = false;  // zero variance in an argument; value is 0
};
Correlation pcc(const Eigen::VectorXd& u, const Eigen::VectorXd& e);

/// Sum in a fixed pairwise order, independent of thread count.
double pairwise_sum(const double* data, std::size_t n);
double pairwise_mean(const Eigen::VectorXd& v);

// ---------------------------------------------------------------- batched
//
// Rows are samples: joints N x (3 * parts). The parallel path splits rows
// across OpenMP threads; each row's value is computed the same way in both
// paths, so results are identical.

enum class Exec { kSerial, kParallel };

Eigen::VectorXd batch_mpjpe(const ad::Matrix& pred, const ad::Matrix& gt, Exec exec = Exec::kParallel);
Eigen::VectorXd batch_pa_mpjpe(const ad::Matrix& pred, const ad::Matrix& gt, Exec exec = Exec::kParallel);
/// PVE on surrogate vertices derived from each row's joints.
Eigen::VectorXd batch_pve(const body::Skeleton& sk, const ad::Matrix& pred_joints, const ad::Matrix& gt_joints,
                          Exec exec = Exec::kParallel);

/// One flattened sample as parts x 3.
Eigen::MatrixXd unflatten(const ad::Matrix& rows, Eigen::Index i);

// ----------------------------------------------------------------- report

enum class ErrorPairing { kMpjpe, kPaMpjpe };
ErrorPairing parse_pairing(std::string_view s);
std::string to_string(ErrorPairing p);

struct Bucket {
  std::string label;
  std::size_t n = 0;
  double mpjpe = 0.0;
  double u = 0.0;
};

struct EvalReport {
  std::size_t n = 0;
  double mpjpe = 0.0;
  double pa_mpjpe = 0.0;
  double pve = 0.0;
  double pcc = 0.0;
  bool pcc_degenerate = false;
  ErrorPairing pairing = ErrorPairing::kMpjpe;
  Eigen::VectorXd per_mpjpe, per_pa_mpjpe, per_pve, per_u;
  std::vector<int> occluded, source;
  std::vector<Bucket> by_occlusion;
  std::vector<Bucket> by_source;
  std::vector<double> per_part_pcc;  // diagnostic: sigma of part j vs sample error
  std::map<std::string, double> extra;
};

struct EvalInputs {
  ad::Matrix pred_joints3d;
  ad::Matrix gt_joints3d;
  ad::Matrix sigma;  // N x 24, may be empty
  Eigen::VectorXd u;
  std::vector<int> occluded;
  std::vector<int> source;
};

EvalReport evaluate(const EvalInputs& in, ErrorPairing pairing = ErrorPairing::kMpjpe,
                    Exec exec = Exec::kParallel);

/// Occlusion bucket label for an occluded-part count.
std::string occlusion_bucket(int occluded);

nlohmann::json to_json(const EvalReport& r);
/// One row per sample: index, source, occluded, u, mpjpe, pa_mpjpe, pve.
void write_csv(const std::filesystem::path& path, const EvalReport& r);

}  // namespace poco::metrics
