// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "poco/bodymodel.hpp"

#include "poco/rng.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>

namespace poco::body {
namespace {

// Scalar carrying its derivative with respect to the three axis-angle
// components; lets Rodrigues produce dR/dw exactly.
struct Dual {
  double v = 0.0;
  std::array<double, 3> d{};
};

Dual operator+(Dual a, const Dual& b) {
  a.v += b.v;
  for (int i = 0; i < 3; ++i) a.d[i] += b.d[i];
  return a;
}
Dual operator*(const Dual& a, const Dual& b) {
  Dual r;
  r.v = a.v * b.v;
  for (int i = 0; i < 3; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
Dual operator*(double s, Dual a) {
  a.v *= s;
  for (auto& x : a.d) x *= s;
  return a;
}
Dual operator+(Dual a, double s) {
  a.v += s;
  return a;
}
Dual operator+(double s, Dual a) { return a + s; }
// f(a) with f' given.
Dual apply(const Dual& a, double f, double df) {
  Dual r;
  r.v = f;
  for (int i = 0; i < 3; ++i) r.d[i] = df * a.d[i];
  return r;
}

// R and its 9x3 Jacobian (row-major R entries by axis-angle components).
struct RodriguesResult {
  Mat3 r;
  Eigen::Matrix<double, 9, 3> jac;
};

RodriguesResult rodrigues_with_jacobian(const Vec3& w) {
  std::array<Dual, 3> x;
  for (int i = 0; i < 3; ++i) {
    x[i].v = w[i];
    x[i].d = {0.0, 0.0, 0.0};
    x[i].d[i] = 1.0;
  }
  const Dual t2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
  Dual a;  // sin(t)/t
  Dual b;  // (1 - cos t)/t^2
  if (t2.v < 1e-6) {
    // Series in t^2 keeps the derivative finite at the origin.
    a = 1.0 + (-1.0 / 6.0) * t2 + (1.0 / 120.0) * (t2 * t2);
    b = Dual{0.5, {}} + (-1.0 / 24.0) * t2 + (1.0 / 720.0) * (t2 * t2);
  } else {
    const double t = std::sqrt(t2.v);
    const double s = std::sin(t);
    const double c = std::cos(t);
    // d/d(t2) of sin(t)/t and (1-cos t)/t^2.
    const double da = (c / t - s / t2.v) / (2.0 * t);
    const double db = (s / t2.v - 2.0 * (1.0 - c) / (t2.v * t)) / (2.0 * t);
    a = apply(t2, s / t, da);
    b = apply(t2, (1.0 - c) / t2.v, db);
  }
  // K = [w]x ; R = I + a K + b K^2
  std::array<std::array<Dual, 3>, 3> k;
  const Dual zero{};
  k[0] = {zero, -1.0 * x[2], x[1]};
  k[1] = {x[2], zero, -1.0 * x[0]};
  k[2] = {-1.0 * x[1], x[0], zero};
  RodriguesResult out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      Dual k2;
      for (int m = 0; m < 3; ++m) k2 = k2 + k[i][m] * k[m][j];
      Dual rij = a * k[i][j] + b * k2;
      if (i == j) rij = rij + 1.0;
      out.r(i, j) = rij.v;
      for (int c = 0; c < 3; ++c) out.jac(3 * i + j, c) = rij.d[c];
    }
  }
  return out;
}

Skeleton make_default() {
  Skeleton sk;
  sk.parent = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};
  sk.names = {"pelvis",     "l_hip",      "r_hip",   "spine1",  "l_knee",  "r_knee",
              "spine2",     "l_ankle",    "r_ankle", "spine3",  "l_foot",  "r_foot",
              "neck",       "l_collar",   "r_collar", "head",   "l_shoulder", "r_shoulder",
              "l_elbow",    "r_elbow",    "l_wrist", "r_wrist", "l_hand",  "r_hand"};
  sk.rest_offsets = {
      {0.0, 0.0, 0.0},     {0.06, -0.09, 0.0},  {-0.06, -0.09, 0.0}, {0.0, 0.11, -0.02},
      {0.04, -0.38, 0.0},  {-0.04, -0.38, 0.0}, {0.0, 0.14, 0.0},    {-0.01, -0.40, -0.03},
      {0.01, -0.40, -0.03}, {0.0, 0.06, 0.02},  {0.02, -0.06, 0.12}, {-0.02, -0.06, 0.12},
      {0.0, 0.21, -0.02},  {0.07, 0.12, 0.0},   {-0.07, 0.12, 0.0},  {0.0, 0.09, 0.05},
      {0.11, 0.04, -0.01}, {-0.11, 0.04, -0.01}, {0.26, 0.0, -0.02}, {-0.26, 0.0, -0.02},
      {0.25, 0.0, 0.0},    {-0.25, 0.0, 0.0},   {0.08, -0.01, 0.0},  {-0.08, -0.01, 0.0}};

  Rng rng(derive_seed(20260611, "skeleton"));
  sk.shape_basis = Eigen::MatrixXd::Zero(kParts, kShapeDim);
  for (int b = 1; b < kParts; ++b)
    for (int i = 0; i < kShapeDim; ++i) sk.shape_basis(b, i) = 0.03 * rng.normal();

  // Each surrogate vertex blends a part, its parent and sometimes a random
  // third joint.
  sk.vertex_weights = Eigen::MatrixXd::Zero(kVertices, kParts);
  for (int v = 0; v < kVertices; ++v) {
    const int j = 1 + static_cast<int>(rng.below(kParts - 1));
    const int p = sk.parent[static_cast<std::size_t>(j)];
    double wj = rng.uniform(0.2, 1.0);
    double wp = rng.uniform(0.0, 1.0 - wj);
    sk.vertex_weights(v, j) += wj;
    sk.vertex_weights(v, p) += wp;
    const double rest = 1.0 - wj - wp;
    if (rng.uniform() < 0.5) {
      const int q = static_cast<int>(rng.below(kParts));
      sk.vertex_weights(v, q) += rest;
    } else {
      sk.vertex_weights(v, j) += rest;
    }
  }
  sk.validate();
  return sk;
}

}  // namespace

void Skeleton::validate() const {
  const int n = parts();
  if (n < 1) throw std::invalid_argument("skeleton has no parts");
  if (parent[0] != -1) throw std::invalid_argument("part 0 must be the root");
  if (static_cast<int>(rest_offsets.size()) != n) throw std::invalid_argument("offset count mismatch");
  for (int i = 1; i < n; ++i) {
    const int p = parent[static_cast<std::size_t>(i)];
    if (p < 0 || p >= i) throw std::invalid_argument("parent of part " + std::to_string(i) + " must precede it");
  }
  if (shape_basis.rows() != n || shape_basis.cols() != kShapeDim)
    throw std::invalid_argument("shape basis must be parts x 10");
  if (vertex_weights.cols() != n) throw std::invalid_argument("vertex weights must have one column per part");
  for (Eigen::Index v = 0; v < vertex_weights.rows(); ++v) {
    if ((vertex_weights.row(v).array() < 0.0).any() || std::abs(vertex_weights.row(v).sum() - 1.0) > 1e-12)
      throw std::invalid_argument("vertex weight rows must be nonnegative and sum to 1");
  }
}

const Skeleton& default_skeleton() {
  static const Skeleton sk = make_default();
  return sk;
}

Skeleton chain_skeleton(int n, double bone_length) {
  Skeleton sk;
  for (int i = 0; i < n; ++i) {
    sk.parent.push_back(i - 1);
    sk.rest_offsets.push_back(i == 0 ? Vec3::Zero() : Vec3(bone_length, 0.0, 0.0));
    sk.names.push_back("p" + std::to_string(i));
  }
  sk.shape_basis = Eigen::MatrixXd::Zero(n, kShapeDim);
  sk.vertex_weights = Eigen::MatrixXd::Identity(n, n);
  sk.validate();
  return sk;
}

Mat3 rotation(const Vec3& w) { return rodrigues_with_jacobian(w).r; }

Vec3 canonicalize(const Vec3& w) {
  const double angle = w.norm();
  if (angle <= std::numbers::pi) return w;
  const Vec3 axis = w / angle;
  double a = std::fmod(angle, 2.0 * std::numbers::pi);
  if (a > std::numbers::pi) return -(2.0 * std::numbers::pi - a) * axis;
  return a * axis;
}

void canonicalize_pose(Eigen::Ref<Eigen::VectorXd> pose) {
  for (Eigen::Index k = 0; k + 2 < pose.size(); k += 3) pose.segment<3>(k) = canonicalize(pose.segment<3>(k));
}

Vec3 axis_angle_from_matrix(const Mat3& r) {
  const Eigen::AngleAxisd aa(r);
  return aa.angle() * aa.axis();
}

Eigen::VectorXd bone_scales(const Skeleton& sk, const Eigen::VectorXd& shape) {
  return (Eigen::VectorXd::Ones(sk.parts()) + sk.shape_basis * shape).eval();
}

Eigen::MatrixXd forward_kinematics(const Skeleton& sk, const Eigen::VectorXd& pose, const Eigen::VectorXd& shape) {
  const int n = sk.parts();
  const Eigen::VectorXd scales = bone_scales(sk, shape);
  std::vector<Mat3> global(static_cast<std::size_t>(n));
  Eigen::MatrixXd joints(n, 3);
  for (int b = 0; b < n; ++b) {
    const Mat3 r = rotation(pose.segment<3>(3 * b));
    const Vec3 bone = scales[b] * sk.rest_offsets[static_cast<std::size_t>(b)];
    const int p = sk.parent[static_cast<std::size_t>(b)];
    if (p < 0) {
      global[0] = r;
      joints.row(0) = (r * bone).transpose();
    } else {
      const Mat3& gp = global[static_cast<std::size_t>(p)];
      joints.row(b) = joints.row(p) + (gp * bone).transpose();
      global[static_cast<std::size_t>(b)] = gp * r;
    }
  }
  return joints;
}

Eigen::MatrixXd vertices(const Skeleton& sk, const Eigen::MatrixXd& joints) { return sk.vertex_weights * joints; }

Eigen::MatrixXd project(const Eigen::MatrixXd& p, const Eigen::Vector3d& cam) {
  Eigen::MatrixXd out(p.rows(), 2);
  out.col(0) = (cam[0] * p.col(0)).array() + cam[1];
  out.col(1) = (cam[0] * p.col(1)).array() + cam[2];
  return out;
}

Eigen::MatrixXd rotmats(const Eigen::VectorXd& pose) {
  const Eigen::Index n = pose.size() / 3;
  Eigen::MatrixXd out(n, 9);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Mat3 r = rotation(pose.segment<3>(3 * k));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) out(k, 3 * i + j) = r(i, j);
  }
  return out;
}

// ----------------------------------------------------------------- tape ops

ad::Var forward_kinematics(const Skeleton& sk, ad::Var pose, ad::Var shape) {
  const int n = sk.parts();
  const Eigen::Index batch = pose.rows();
  if (pose.cols() != 3 * n || shape.cols() != kShapeDim || shape.rows() != batch)
    throw std::invalid_argument("forward_kinematics: expected pose Bx" + std::to_string(3 * n) + " and shape Bx10");

  struct Cache {
    std::vector<Mat3> global;
    std::vector<Mat3> local;
    std::vector<Eigen::Matrix<double, 9, 3>> jac;
    Eigen::VectorXd scales;
  };
  auto caches = std::make_shared<std::vector<Cache>>(static_cast<std::size_t>(batch));
  ad::Matrix out(batch, 3 * n);
  const ad::Matrix& pv = pose.value();
  const ad::Matrix& sv = shape.value();

  for (Eigen::Index s = 0; s < batch; ++s) {
    Cache& c = (*caches)[static_cast<std::size_t>(s)];
    c.global.resize(static_cast<std::size_t>(n));
    c.local.resize(static_cast<std::size_t>(n));
    c.jac.resize(static_cast<std::size_t>(n));
    c.scales = bone_scales(sk, sv.row(s).transpose());
    for (int b = 0; b < n; ++b) {
      const auto rr = rodrigues_with_jacobian(pv.row(s).segment<3>(3 * b).transpose());
      const auto ub = static_cast<std::size_t>(b);
      c.local[ub] = rr.r;
      c.jac[ub] = rr.jac;
      const Vec3 bone = c.scales[b] * sk.rest_offsets[ub];
      const int p = sk.parent[ub];
      if (p < 0) {
        c.global[ub] = rr.r;
        out.row(s).segment<3>(3 * b) = (rr.r * bone).transpose();
      } else {
        const Mat3& gp = c.global[static_cast<std::size_t>(p)];
        out.row(s).segment<3>(3 * b) = out.row(s).segment<3>(3 * p) + (gp * bone).transpose();
        c.global[ub] = gp * rr.r;
      }
    }
  }

  const Skeleton* skp = &sk;
  std::array<ad::Var, 2> inputs{pose, shape};
  return pose.tape().custom(inputs, std::move(out), [caches, skp, n](const ad::Matrix& g, std::span<ad::Matrix* const> slots) {
    ad::Matrix& gpose = *slots[0];
    ad::Matrix& gshape = *slots[1];
    const Skeleton& sk = *skp;
    std::vector<Vec3> gj(static_cast<std::size_t>(n));
    std::vector<Mat3> gg(static_cast<std::size_t>(n));
    for (Eigen::Index s = 0; s < g.rows(); ++s) {
      const Cache& c = (*caches)[static_cast<std::size_t>(s)];
      for (int b = 0; b < n; ++b) {
        gj[static_cast<std::size_t>(b)] = g.row(s).segment<3>(3 * b).transpose();
        gg[static_cast<std::size_t>(b)].setZero();
      }
      Eigen::VectorXd gscale = Eigen::VectorXd::Zero(n);
      for (int b = n - 1; b >= 0; --b) {
        const auto ub = static_cast<std::size_t>(b);
        const int p = sk.parent[ub];
        const Vec3& off = sk.rest_offsets[ub];
        const Vec3 bone = c.scales[b] * off;
        Mat3 grot;
        if (p < 0) {
          // J0 = R0 * bone0, G0 = R0
          gg[ub] += gj[ub] * bone.transpose();
          gscale[b] += off.dot(c.global[ub].transpose() * gj[ub]);
          grot = gg[ub];
        } else {
          const auto up = static_cast<std::size_t>(p);
          const Mat3& gp = c.global[up];
          gj[up] += gj[ub];
          gg[up] += gj[ub] * bone.transpose();
          gscale[b] += off.dot(gp.transpose() * gj[ub]);
          // G_b = G_p R_b
          gg[up] += gg[ub] * c.local[ub].transpose();
          grot = gp.transpose() * gg[ub];
        }
        Eigen::Matrix<double, 1, 9> flat;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) flat(3 * i + j) = grot(i, j);
        gpose.row(s).segment<3>(3 * b) += flat * c.jac[ub];
      }
      gshape.row(s) += (sk.shape_basis.transpose() * gscale).transpose();
    }
  });
}

ad::Var rotmats(ad::Var pose) {
  const Eigen::Index batch = pose.rows();
  const Eigen::Index parts = pose.cols() / 3;
  auto jacs = std::make_shared<std::vector<Eigen::Matrix<double, 9, 3>>>(static_cast<std::size_t>(batch * parts));
  ad::Matrix out(batch, 9 * parts);
  for (Eigen::Index s = 0; s < batch; ++s) {
    for (Eigen::Index k = 0; k < parts; ++k) {
      const auto rr = rodrigues_with_jacobian(pose.value().row(s).segment<3>(3 * k).transpose());
      (*jacs)[static_cast<std::size_t>(s * parts + k)] = rr.jac;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) out(s, 9 * k + 3 * i + j) = rr.r(i, j);
    }
  }
  std::array<ad::Var, 1> inputs{pose};
  return pose.tape().custom(inputs, std::move(out), [jacs, parts](const ad::Matrix& g, std::span<ad::Matrix* const> slots) {
    ad::Matrix& gp = *slots[0];
    for (Eigen::Index s = 0; s < g.rows(); ++s)
      for (Eigen::Index k = 0; k < parts; ++k)
        gp.row(s).segment<3>(3 * k) += g.row(s).segment<9>(9 * k) * (*jacs)[static_cast<std::size_t>(s * parts + k)];
  });
}

ad::Var vertices(const Skeleton& sk, ad::Var joints) {
  const Eigen::Index n = sk.parts();
  const Eigen::Index nv = sk.vertex_weights.rows();
  ad::Matrix k = ad::Matrix::Zero(3 * n, 3 * nv);
  for (Eigen::Index v = 0; v < nv; ++v)
    for (Eigen::Index j = 0; j < n; ++j)
      for (int c = 0; c < 3; ++c) k(3 * j + c, 3 * v + c) = sk.vertex_weights(v, j);
  ad::Tape& t = joints.tape();
  return t.matmul(joints, t.constant(std::move(k)));
}

ad::Var project(ad::Var joints, ad::Var camera) {
  ad::Tape& t = joints.tape();
  const Eigen::Index n = joints.cols() / 3;
  const Eigen::Index batch = joints.rows();
  ad::Matrix select = ad::Matrix::Zero(3 * n, 2 * n);
  ad::Matrix spread = ad::Matrix::Zero(2, 2 * n);
  for (Eigen::Index j = 0; j < n; ++j) {
    select(3 * j, 2 * j) = 1.0;
    select(3 * j + 1, 2 * j + 1) = 1.0;
    spread(0, 2 * j) = 1.0;
    spread(1, 2 * j + 1) = 1.0;
  }
  ad::Var xy = t.matmul(joints, t.constant(std::move(select)));
  ad::Var s = t.broadcast(t.slice_cols(camera, 0, 1), batch, 2 * n);
  ad::Var shift = t.matmul(t.slice_cols(camera, 1, 2), t.constant(std::move(spread)));
  return t.add(t.mul(xy, s), shift);
}

}  // namespace poco::body
