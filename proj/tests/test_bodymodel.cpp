// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "poco/bodymodel.hpp"
#include "poco/rng.hpp"

#include <cmath>
#include <numbers>

using namespace poco;
using namespace poco::body;

namespace {

Vec3 random_axis_angle(Rng& rng, double max_angle) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  return rng.uniform(0.0, max_angle) * axis;
}

Eigen::VectorXd random_pose(Rng& rng, int parts, double max_angle) {
  Eigen::VectorXd pose(3 * parts);
  for (int k = 0; k < parts; ++k) pose.segment<3>(3 * k) = random_axis_angle(rng, max_angle);
  return pose;
}

// Homogeneous 4x4 chain composition, independent of the library's FK.
Eigen::MatrixXd homogeneous_fk(const Skeleton& sk, const Eigen::VectorXd& pose, const Eigen::VectorXd& shape) {
  const int n = sk.parts();
  std::vector<Eigen::Matrix4d> world(static_cast<std::size_t>(n));
  Eigen::MatrixXd joints(n, 3);
  const Eigen::VectorXd scale = Eigen::VectorXd::Ones(n) + sk.shape_basis * shape;
  for (int b = 0; b < n; ++b) {
    const Vec3 w = pose.segment<3>(3 * b);
    Eigen::Matrix4d local = Eigen::Matrix4d::Identity();
    if (w.norm() > 0) local.topLeftCorner<3, 3>() = Eigen::AngleAxisd(w.norm(), w.normalized()).toRotationMatrix();
    Eigen::Matrix4d trans = Eigen::Matrix4d::Identity();
    trans.topRightCorner<3, 1>() = scale[b] * sk.rest_offsets[static_cast<std::size_t>(b)];
    const int p = sk.parent[static_cast<std::size_t>(b)];
    // Bone translation is expressed in the parent's frame, then the part's
    // own rotation applies to everything below it.
    const Eigen::Matrix4d parent_world = p < 0 ? Eigen::Matrix4d::Identity() : world[static_cast<std::size_t>(p)];
    if (p < 0) {
      world[0] = local;
      joints.row(0) = (local.topLeftCorner<3, 3>() * trans.topRightCorner<3, 1>()).transpose();
    } else {
      world[static_cast<std::size_t>(b)] = parent_world * trans * local;
      joints.row(b) = world[static_cast<std::size_t>(b)].topRightCorner<3, 1>().transpose();
    }
  }
  return joints;
}

}  // namespace

TEST_CASE("default skeleton is a valid 24-part tree") {
  const Skeleton& sk = default_skeleton();
  CHECK(sk.parts() == 24);
  CHECK_NOTHROW(sk.validate());
  CHECK(sk.vertex_weights.rows() == kVertices);
  for (Eigen::Index v = 0; v < sk.vertex_weights.rows(); ++v) {
    int nonzero = 0;
    for (Eigen::Index j = 0; j < sk.vertex_weights.cols(); ++j) nonzero += sk.vertex_weights(v, j) > 0 ? 1 : 0;
    CHECK(nonzero <= 3);
  }
  Skeleton bad = chain_skeleton(3);
  bad.parent[2] = 2;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("rotmats") {
  CHECK(rotation(Vec3::Zero()).isApprox(Mat3::Identity(), 1e-15));
  Mat3 rz;
  rz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  CHECK((rotation(Vec3(0, 0, std::numbers::pi / 2)) - rz).cwiseAbs().maxCoeff() < 1e-15);
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const Vec3 w = random_axis_angle(rng, std::numbers::pi);
    const Mat3 r = rotation(w);
    CHECK((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((r - Eigen::AngleAxisd(w.norm(), w.normalized()).toRotationMatrix()).cwiseAbs().maxCoeff() < 1e-12);
  }
  const Eigen::MatrixXd flat = rotmats(Eigen::VectorXd::Zero(kPoseDim));
  CHECK(flat.rows() * flat.cols() == kRotmatDim);
}

TEST_CASE("canonicalization wraps into [0, pi]") {
  const Vec3 w(0, 0, 1.5 * std::numbers::pi);
  const Vec3 c = canonicalize(w);
  CHECK(c.norm() <= std::numbers::pi + 1e-12);
  CHECK((rotation(c) - rotation(w)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(c.z() == doctest::Approx(-0.5 * std::numbers::pi));
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const Vec3 v = random_axis_angle(rng, 4.0 * std::numbers::pi);
    const Vec3 cv = canonicalize(v);
    CHECK(cv.norm() <= std::numbers::pi + 1e-12);
    CHECK((rotation(cv) - rotation(v)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("forward kinematics") {
  const Skeleton& sk = default_skeleton();
  SUBCASE("rest pose is cumulative offsets") {
    const Eigen::MatrixXd j = forward_kinematics(sk, Eigen::VectorXd::Zero(kPoseDim), Eigen::VectorXd::Zero(kShapeDim));
    for (int b = 1; b < sk.parts(); ++b) {
      const int p = sk.parent[static_cast<std::size_t>(b)];
      const Vec3 expect = j.row(p).transpose() + sk.rest_offsets[static_cast<std::size_t>(b)];
      CHECK((j.row(b).transpose() - expect).norm() < 1e-15);
    }
  }
  SUBCASE("quarter turn of the root") {
    const Skeleton chain = chain_skeleton(2, 0.7);
    Eigen::VectorXd pose = Eigen::VectorXd::Zero(6);
    pose[2] = std::numbers::pi / 2;
    const Eigen::MatrixXd j = forward_kinematics(chain, pose, Eigen::VectorXd::Zero(kShapeDim));
    CHECK((j.row(1) - Eigen::RowVector3d(0, 0.7, 0)).norm() < 1e-15);
  }
  SUBCASE("matches homogeneous-matrix chain") {
    const Skeleton chain = chain_skeleton(3, 0.5);
    Rng rng(9);
    for (int i = 0; i < 20; ++i) {
      const Eigen::VectorXd pose = random_pose(rng, 3, std::numbers::pi);
      const Eigen::MatrixXd a = forward_kinematics(chain, pose, Eigen::VectorXd::Zero(kShapeDim));
      const Eigen::MatrixXd b = homogeneous_fk(chain, pose, Eigen::VectorXd::Zero(kShapeDim));
      CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
    }
    const Eigen::VectorXd pose = random_pose(rng, kParts, 1.0);
    Eigen::VectorXd shape(kShapeDim);
    for (int i = 0; i < kShapeDim; ++i) shape[i] = rng.normal();
    CHECK((forward_kinematics(sk, pose, shape) - homogeneous_fk(sk, pose, shape)).cwiseAbs().maxCoeff() < 1e-10);
  }
  SUBCASE("root rotation is rigid") {
    Rng rng(4);
    Eigen::VectorXd pose = random_pose(rng, kParts, 0.8);
    pose.segment<3>(0).setZero();
    const Eigen::VectorXd shape = Eigen::VectorXd::Zero(kShapeDim);
    const Eigen::MatrixXd base = forward_kinematics(sk, pose, shape);
    const Vec3 w = random_axis_angle(rng, 2.0);
    pose.segment<3>(0) = w;
    const Eigen::MatrixXd turned = forward_kinematics(sk, pose, shape);
    const Eigen::MatrixXd expect = (rotation(w) * base.transpose()).transpose();
    CHECK((turned - expect).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("zero shape means unit bone scales") {
    CHECK((bone_scales(sk, Eigen::VectorXd::Zero(kShapeDim)).array() == 1.0).all());
  }
}

TEST_CASE("vertices") {
  Skeleton sk = chain_skeleton(3);
  Eigen::MatrixXd joints(3, 3);
  joints << 0, 0, 0, 1, 2, 3, 4, 6, 8;
  sk.vertex_weights = Eigen::MatrixXd::Zero(2, 3);
  sk.vertex_weights(0, 2) = 1.0;
  sk.vertex_weights(1, 1) = 0.5;
  sk.vertex_weights(1, 2) = 0.5;
  const Eigen::MatrixXd v = vertices(sk, joints);
  CHECK((v.row(0) - joints.row(2)).norm() == 0.0);
  CHECK((v.row(1) - Eigen::RowVector3d(2.5, 4, 5.5)).norm() < 1e-15);

  const Skeleton& def = default_skeleton();
  Rng rng(1);
  Eigen::MatrixXd j(kParts, 3);
  for (Eigen::Index i = 0; i < j.size(); ++i) j.data()[i] = rng.normal();
  const Eigen::MatrixXd got = vertices(def, j);
  for (int vi = 0; vi < kVertices; ++vi) {
    Eigen::RowVector3d acc = Eigen::RowVector3d::Zero();
    for (int k = 0; k < kParts; ++k) acc += def.vertex_weights(vi, k) * j.row(k);
    CHECK((got.row(vi) - acc).norm() < 1e-13);
  }
}

TEST_CASE("weak-perspective projection") {
  Eigen::MatrixXd p(1, 3);
  p << 3, 4, 9;
  CHECK((project(p, {1, 0, 0}) - Eigen::RowVector2d(3, 4)).norm() == 0.0);
  CHECK((project(p, {2, 1, 0}) - Eigen::RowVector2d(7, 8)).norm() == 0.0);
  Eigen::MatrixXd q = p;
  q(0, 2) *= 10.0;
  CHECK(project(q, {2, 1, 0}) == project(p, {2, 1, 0}));
}

TEST_CASE("tape versions match plain versions and their gradients") {
  const Skeleton& sk = default_skeleton();
  Rng rng(21);
  const int batch = 3;
  ad::ParameterSet ps;
  ad::Matrix pose0(batch, kPoseDim), shape0(batch, kShapeDim), cam0(batch, 3);
  for (int s = 0; s < batch; ++s) {
    pose0.row(s) = random_pose(rng, kParts, 1.2).transpose();
    for (int i = 0; i < kShapeDim; ++i) shape0(s, i) = rng.normal();
    cam0.row(s) << rng.uniform(0.5, 1.5), rng.normal(0, 0.1), rng.normal(0, 0.1);
  }
  // One tiny angle exercises the series branch.
  pose0.row(0).segment<3>(6) << 1e-5, -2e-5, 1e-5;
  auto& pose = ps.add("pose", pose0);
  auto& shape = ps.add("shape", shape0);
  auto& cam = ps.add("cam", cam0);

  {
    ad::Tape t;
    ad::Var j = forward_kinematics(sk, t.param(pose), t.param(shape));
    for (int s = 0; s < batch; ++s) {
      const Eigen::MatrixXd plain = forward_kinematics(sk, pose0.row(s).transpose(), shape0.row(s).transpose());
      for (int b = 0; b < kParts; ++b)
        CHECK((j.value().row(s).segment<3>(3 * b) - plain.row(b)).norm() < 1e-14);
      const Eigen::MatrixXd v2 = project(plain, cam0.row(s).transpose());
      ad::Var p2 = project(j, t.param(cam));
      CHECK(std::abs(p2.value()(s, 2 * 5 + 1) - v2(5, 1)) < 1e-14);
      ad::Var verts = vertices(sk, j);
      const Eigen::MatrixXd pv = vertices(sk, plain);
      CHECK(std::abs(verts.value()(s, 3 * 10 + 2) - pv(10, 2)) < 1e-14);
    }
  }

  Eigen::MatrixXd weights(batch, 3 * kVertices + 2 * kParts + kRotmatDim);
  for (Eigen::Index i = 0; i < weights.size(); ++i) weights.data()[i] = rng.normal();
  auto build = [&](ad::Tape& t) {
    ad::Var j = forward_kinematics(sk, t.param(pose), t.param(shape));
    ad::Var verts = vertices(sk, j);
    ad::Var p2 = project(j, t.param(cam));
    ad::Var rm = rotmats(t.param(pose));
    std::array<ad::Var, 3> parts{verts, p2, rm};
    ad::Var all = t.concat_cols(parts);
    return t.sum(t.mul(all, t.constant(weights)));
  };
  const auto report = ad::check_gradients(ps, build);
  INFO("worst " << report.worst_parameter);
  CHECK(report.max_error < 1e-6);
}
