// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "poco/flow.hpp"

#include "poco/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace poco::flow {

using ad::Matrix;
using ad::Var;

namespace {

Matrix uniform_init(Rng& rng, int rows, int cols) {
  const double lim = 1.0 / std::sqrt(static_cast<double>(rows));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-lim, lim);
  return m;
}

Matrix selection(int dim, const std::vector<int>& idx) {
  Matrix s = Matrix::Zero(dim, static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) s(idx[j], static_cast<Eigen::Index>(j)) = 1.0;
  return s;
}

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw std::runtime_error(std::string("flow produced non-finite ") + what);
}

}  // namespace

double standard_normal_log_norm(int dim) { return -0.5 * dim * std::log(2.0 * std::numbers::pi); }

CondFlow::CondFlow(ad::ParameterSet& ps, std::string prefix, FlowConfig config, std::uint64_t seed)
    : config_(config), prefix_(std::move(prefix)) {
  if (config_.dim < 2) throw std::invalid_argument("flow dim must be >= 2");
  if (config_.cond_dim < 0 || config_.hidden < 1 || config_.blocks < 1)
    throw std::invalid_argument("bad flow configuration");
  for (int b = 0; b < config_.blocks; ++b) {
    Block blk;
    // dim 3: {0} | {1,2} then {1,2} | {0}. Otherwise even | odd alternating.
    for (int i = 0; i < config_.dim; ++i) {
      const bool keep = config_.dim == 3 ? ((i == 0) == (b % 2 == 0)) : ((i % 2 == 0) == (b % 2 == 0));
      (keep ? blk.kept : blk.transformed).push_back(i);
    }
    blk.select_kept = selection(config_.dim, blk.kept);
    blk.select_tr = selection(config_.dim, blk.transformed);
    const std::string base = prefix_ + ".block" + std::to_string(b);
    const int in = static_cast<int>(blk.kept.size());
    const int out = static_cast<int>(blk.transformed.size());
    blk.scale = make_net(ps, base + ".scale", in, out, derive_seed(seed, base + ".scale"));
    blk.shift = make_net(ps, base + ".shift", in, out, derive_seed(seed, base + ".shift"));
    blk.bound = &ps.add(base + ".bound", Matrix::Constant(1, 1, config_.bound_init));
    blocks_.push_back(std::move(blk));
  }
}

CondFlow::Net CondFlow::make_net(ad::ParameterSet& ps, const std::string& name, int in, int out,
                                 std::uint64_t seed) const {
  Rng rng(seed);
  const int h = config_.hidden;
  Net n;
  // Fan-in of the first layer counts both the kept dims and the condition.
  const int fan_in = in + config_.cond_dim;
  Matrix w_in = uniform_init(rng, fan_in, h);
  n.w_in = &ps.add(name + ".in.w", w_in.topRows(in));
  if (config_.cond_dim > 0) n.w_cond = &ps.add(name + ".cond.w", w_in.bottomRows(config_.cond_dim));
  n.b_in = &ps.add(name + ".in.b", Matrix::Zero(1, h));
  n.w_mid = &ps.add(name + ".mid.w", uniform_init(rng, h, h));
  n.b_mid = &ps.add(name + ".mid.b", Matrix::Zero(1, h));
  n.w_out = &ps.add(name + ".out.w", Matrix::Zero(h, out));
  n.b_out = &ps.add(name + ".out.b", Matrix::Zero(1, out));
  return n;
}

Eigen::Index CondFlow::repeat_factor(Eigen::Index rows, const Matrix& cond) const {
  if (cond.cols() == 0) return 1;
  if (cond.cols() != config_.cond_dim)
    throw std::invalid_argument("flow condition has " + std::to_string(cond.cols()) + " columns, expected " +
                                std::to_string(config_.cond_dim));
  if (cond.rows() == 0 || rows % cond.rows() != 0)
    throw std::invalid_argument("flow input rows must be a multiple of condition rows");
  return rows / cond.rows();
}

// ------------------------------------------------------------------ tape

Var CondFlow::net_tape(ad::Tape& t, const Net& n, Var kept, std::optional<Var> cond, Eigen::Index times) const {
  Var pre = ad::affine(kept, t.param(*n.w_in), t.param(*n.b_in));
  if (cond && n.w_cond != nullptr) {
    Var proj = t.matmul(*cond, t.param(*n.w_cond));
    pre = t.add(pre, times == 1 ? proj : t.repeat_rows(proj, times));
  }
  Var h = t.tanh(pre);
  h = t.tanh(ad::affine(h, t.param(*n.w_mid), t.param(*n.b_mid)));
  return ad::affine(h, t.param(*n.w_out), t.param(*n.b_out));
}

CondFlow::TapeOutput CondFlow::forward(ad::Tape& t, Var x, std::optional<Var> cond) const {
  if (x.cols() != config_.dim) throw std::invalid_argument("flow input has wrong width");
  const Eigen::Index times = cond ? repeat_factor(x.rows(), cond->value()) : 1;
  Var y = x;
  std::optional<Var> logdet;
  for (const Block& b : blocks_) {
    Var kept = t.matmul(y, t.constant(b.select_kept));
    Var tr = t.matmul(y, t.constant(b.select_tr));
    Var raw = net_tape(t, b.scale, kept, cond, times);
    Var s = t.mul(t.tanh(raw), t.broadcast(t.param(*b.bound), raw.rows(), raw.cols()));
    Var shift = net_tape(t, b.shift, kept, cond, times);
    Var out = t.add(t.mul(tr, t.exp(s)), shift);
    y = t.add(t.matmul(kept, t.constant(b.select_kept.transpose())),
              t.matmul(out, t.constant(b.select_tr.transpose())));
    Var ld = t.sum_cols(s);
    logdet = logdet ? t.add(*logdet, ld) : ld;
  }
  require_finite(y.value(), "output");
  return {y, *logdet};
}

Var CondFlow::log_prob(ad::Tape& t, Var x, std::optional<Var> cond) const {
  TapeOutput f = forward(t, x, cond);
  Var quad = t.scale(t.sum_cols(t.square(f.z)), -0.5);
  return t.add(t.shift(quad, standard_normal_log_norm(config_.dim)), f.logdet);
}

// ----------------------------------------------------------------- plain

Matrix CondFlow::net_plain(const Net& n, const Matrix& kept, const Matrix& cond, Eigen::Index times) const {
  Matrix pre = kept * n.w_in->value;
  pre.rowwise() += n.b_in->value.row(0);
  if (cond.cols() > 0 && n.w_cond != nullptr) {
    const Matrix proj = cond * n.w_cond->value;
    for (Eigen::Index r = 0; r < pre.rows(); ++r) pre.row(r) += proj.row(r / times);
  }
  Matrix h = ad::tanh_values(pre);
  Matrix mid = h * n.w_mid->value;
  mid.rowwise() += n.b_mid->value.row(0);
  h = ad::tanh_values(mid);
  Matrix out = h * n.w_out->value;
  out.rowwise() += n.b_out->value.row(0);
  return out;
}

void CondFlow::block_st(const Block& b, const Matrix& kept, const Matrix& cond, Eigen::Index times, Matrix& s,
                        Matrix& t) const {
  s = ad::tanh_values(net_plain(b.scale, kept, cond, times)) * b.bound->value(0, 0);
  t = net_plain(b.shift, kept, cond, times);
}

CondFlow::Output CondFlow::forward(const Matrix& x, const Matrix& cond) const {
  if (x.cols() != config_.dim) throw std::invalid_argument("flow input has wrong width");
  const Eigen::Index times = repeat_factor(x.rows(), cond);
  Output o{x, Eigen::VectorXd::Zero(x.rows())};
  for (const Block& b : blocks_) {
    const Matrix kept = o.z * b.select_kept;
    const Matrix tr = o.z * b.select_tr;
    Matrix s, t;
    block_st(b, kept, cond, times, s, t);
    const Matrix out = (tr.array() * s.array().exp() + t.array()).matrix();
    o.z = kept * b.select_kept.transpose() + out * b.select_tr.transpose();
    o.logdet += s.rowwise().sum();
  }
  require_finite(o.z, "output");
  return o;
}

CondFlow::Output CondFlow::inverse(const Matrix& z, const Matrix& cond) const {
  if (z.cols() != config_.dim) throw std::invalid_argument("flow input has wrong width");
  const Eigen::Index times = repeat_factor(z.rows(), cond);
  Output o{z, Eigen::VectorXd::Zero(z.rows())};
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    const Block& b = *it;
    const Matrix kept = o.z * b.select_kept;
    const Matrix out = o.z * b.select_tr;
    Matrix s, t;
    block_st(b, kept, cond, times, s, t);
    const Matrix tr = ((out.array() - t.array()) * (-s.array()).exp()).matrix();
    o.z = kept * b.select_kept.transpose() + tr * b.select_tr.transpose();
    o.logdet -= s.rowwise().sum();
  }
  require_finite(o.z, "inverse output");
  return o;
}

Eigen::VectorXd CondFlow::log_prob(const Matrix& x, const Matrix& cond) const {
  const Output f = forward(x, cond);
  return (-0.5 * f.z.rowwise().squaredNorm()).array() + standard_normal_log_norm(config_.dim) + f.logdet.array();
}

double CondFlow::log_prob_upper_bound() const {
  double total = 0.0;
  for (const Block& b : blocks_) total += static_cast<double>(b.transformed.size()) * std::abs(b.bound->value(0, 0));
  return total + standard_normal_log_norm(config_.dim);
}

}  // namespace poco::flow
