// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy articulated body: a fixed 24-part kinematic tree (same parent layout as
// the common 24-joint human template), bone-length shape coefficients,
// surrogate vertices as fixed convex combinations of joints, and a
// weak-perspective camera.
//
// Conventions: y up, x to the subject's left, z toward the camera. World
// units are meters. Pose is 24 axis-angle vectors; a part's rotation turns
// the bones of its children.

#pragma once

#include "poco/diffcore.hpp"

#include <Eigen/Dense>

#include <array>
#include <span>
#include <string>
#include <vector>

namespace poco::body {

inline constexpr int kParts = 24;
inline constexpr int kPoseDim = kParts * 3;   // 72
inline constexpr int kShapeDim = 10;
inline constexpr int kCameraDim = 3;          // (s, tx, ty)
inline constexpr int kRotmatDim = kParts * 9; // 216
inline constexpr int kVertices = 64;

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Skeleton {
  std::vector<int> parent;              // parent[0] == -1
  std::vector<Vec3> rest_offsets;       // bone from parent to part, meters
  Eigen::MatrixXd shape_basis;          // parts x kShapeDim
  Eigen::MatrixXd vertex_weights;       // V x parts, rows sum to 1
  std::vector<std::string> names;

  int parts() const { return static_cast<int>(parent.size()); }
  /// Throws unless parent describes a single tree rooted at 0 with parents
  /// preceding children.
  void validate() const;
};

/// The shipped 24-part humanoid.
const Skeleton& default_skeleton();

/// Chain skeleton 0 -> 1 -> ... -> n-1 with unit-x bones and zero shape
/// basis; used by tests.
Skeleton chain_skeleton(int n, double bone_length = 1.0);

struct BodyParams {
  Eigen::VectorXd pose = Eigen::VectorXd::Zero(kPoseDim);
  Eigen::VectorXd shape = Eigen::VectorXd::Zero(kShapeDim);
  Eigen::Vector3d camera = Eigen::Vector3d(1.0, 0.0, 0.0);
};

/// Rodrigues' formula.
Mat3 rotation(const Vec3& axis_angle);
/// Wraps the angle into [0, pi], flipping the axis where needed.
Vec3 canonicalize(const Vec3& axis_angle);
void canonicalize_pose(Eigen::Ref<Eigen::VectorXd> pose);
Vec3 axis_angle_from_matrix(const Mat3& r);

/// scale_b(beta) = 1 + sum_i beta_i * basis(b, i).
Eigen::VectorXd bone_scales(const Skeleton& sk, const Eigen::VectorXd& shape);

/// Joints as a parts x 3 matrix.
Eigen::MatrixXd forward_kinematics(const Skeleton& sk, const Eigen::VectorXd& pose,
                                   const Eigen::VectorXd& shape);
Eigen::MatrixXd vertices(const Skeleton& sk, const Eigen::MatrixXd& joints);
Eigen::MatrixXd project(const Eigen::MatrixXd& points3d, const Eigen::Vector3d& camera);
/// parts x 9 rotation matrices, row-major per part.
Eigen::MatrixXd rotmats(const Eigen::VectorXd& pose);

// ---------------------------------------------------------------- on tape
//
// Batched, differentiable versions. Rows are samples; pose is B x 72,
// shape B x 10, camera B x 3, joints B x (3 * parts) flattened per part.

ad::Var forward_kinematics(const Skeleton& sk, ad::Var pose, ad::Var shape);
ad::Var rotmats(ad::Var pose);
ad::Var vertices(const Skeleton& sk, ad::Var joints);
ad::Var project(ad::Var joints, ad::Var camera);

}  // namespace poco::body
