// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Conditional affine-coupling flow over small residual vectors.
//
// Each block keeps a subset of dims fixed and transforms the rest:
//   y_t = x_t * exp(s) + t,   s = bound * tanh(S([x_k, c])),  t = T([x_k, c])
// so |s| <= |bound| per transformed dim. S and T are separate
// in -> hidden -> hidden -> out tanh perceptrons whose output layers start
// at zero, which makes a fresh flow the identity.
//
// Rows of `x` may outnumber rows of `cond`: with R = Rc * k, cond row i
// conditions x rows [i*k, (i+1)*k). The condition is projected once per
// cond row and then repeated.

#pragma once

#include "poco/diffcore.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace poco::flow {

struct FlowConfig {
  int dim = 3;
  int cond_dim = 512;
  int hidden = 64;
  int blocks = 2;
  double bound_init = 2.0;
};

class CondFlow {
 public:
  CondFlow(ad::ParameterSet& params, std::string prefix, FlowConfig config, std::uint64_t seed);

  const FlowConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }

  struct TapeOutput {
    ad::Var z;       // R x d
    ad::Var logdet;  // R x 1
  };
  TapeOutput forward(ad::Tape& tape, ad::Var x, std::optional<ad::Var> cond) const;
  /// Per-row log density, R x 1.
  ad::Var log_prob(ad::Tape& tape, ad::Var x, std::optional<ad::Var> cond) const;

  struct Output {
    ad::Matrix z;
    Eigen::VectorXd logdet;
  };
  /// Plain evaluation; an empty `cond` (0 columns) means no condition.
  Output forward(const ad::Matrix& x, const ad::Matrix& cond) const;
  Output inverse(const ad::Matrix& z, const ad::Matrix& cond) const;
  Eigen::VectorXd log_prob(const ad::Matrix& x, const ad::Matrix& cond) const;

  /// Largest value log_prob can take: every transformed dim at +|bound|.
  double log_prob_upper_bound() const;

  /// Dims held fixed / transformed by block `b`.
  const std::vector<int>& kept(int b) const { return blocks_[static_cast<std::size_t>(b)].kept; }
  const std::vector<int>& transformed(int b) const { return blocks_[static_cast<std::size_t>(b)].transformed; }

 private:
  struct Net {
    ad::Parameter* w_in = nullptr;    // kept x hidden
    ad::Parameter* w_cond = nullptr;  // cond_dim x hidden, absent when cond_dim == 0
    ad::Parameter* b_in = nullptr;
    ad::Parameter* w_mid = nullptr;
    ad::Parameter* b_mid = nullptr;
    ad::Parameter* w_out = nullptr;  // hidden x transformed, zero at init
    ad::Parameter* b_out = nullptr;
  };
  struct Block {
    std::vector<int> kept;
    std::vector<int> transformed;
    ad::Matrix select_kept;  // d x |kept|
    ad::Matrix select_tr;    // d x |transformed|
    Net scale;
    Net shift;
    ad::Parameter* bound = nullptr;
  };

  Net make_net(ad::ParameterSet& ps, const std::string& name, int in, int out, std::uint64_t seed) const;
  ad::Var net_tape(ad::Tape& t, const Net& n, ad::Var kept, std::optional<ad::Var> cond, Eigen::Index times) const;
  ad::Matrix net_plain(const Net& n, const ad::Matrix& kept, const ad::Matrix& cond, Eigen::Index times) const;
  void block_st(const Block& b, const ad::Matrix& kept, const ad::Matrix& cond, Eigen::Index times, ad::Matrix& s,
                ad::Matrix& t) const;
  Eigen::Index repeat_factor(Eigen::Index rows, const ad::Matrix& cond) const;

  FlowConfig config_;
  std::string prefix_;
  std::vector<Block> blocks_;
};

/// -d/2 * ln(2 pi).
double standard_normal_log_norm(int dim);

}  // namespace poco::flow
