// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation on a per-pass tape of dense row-major
// matrices. Parameters live outside the tape in a ParameterSet and receive
// accumulated gradients when a tape that references them is run backward.

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace poco::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Lower bound applied to the inputs of log and to denominator magnitudes.
inline constexpr double kGuardFloor = 1e-12;

enum class OpKind : std::uint8_t {
  kConstant,
  kParameter,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatmul,
  kSum,
  kMean,
  kExp,
  kLog,
  kTanh,
  kRelu,
  kSquare,
  kConcat,
  kSlice,
  kBroadcast,
  kReshape,
  kCustom,
};

const char* to_string(OpKind kind) noexcept;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;  // same shape as value once any tape has touched it
};

/// Owns named parameters with stable addresses.
class ParameterSet {
 public:
  Parameter& add(std::string name, Matrix init);
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  void zero_grad();
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const noexcept;

  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid until the tape is reset.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::int32_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  std::int32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr && id_ >= 0; }

 private:
  Tape* tape_ = nullptr;
  std::int32_t id_ = -1;
};

/// Gradient rule for a fused operation: receives the output gradient and the
/// gradient slots of every input (already shaped, to be accumulated into).
using CustomBackward =
    std::function<void(const Matrix& out_grad, std::span<Matrix* const> in_grads)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var constant(double value);
  /// Leaf bound to `p`; backward accumulates into p.grad.
  Var param(Parameter& p);

  Var record(OpKind kind, std::span<const Var> operands);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var matmul(Var a, Var b);
  Var sum(Var a);
  Var sum_cols(Var a);  // R x C -> R x 1
  Var mean(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var tanh(Var a);
  Var relu(Var a);
  Var square(Var a);
  Var concat_cols(std::span<const Var> parts);
  Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
  Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count);
  /// 1x1, 1xC or Rx1 expanded to rows x cols.
  Var broadcast(Var a, Eigen::Index rows, Eigen::Index cols);
  /// Each row repeated `times` consecutively: R x C -> (R*times) x C.
  Var repeat_rows(Var a, Eigen::Index times);
  Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
  Var scale(Var a, double factor);
  Var shift(Var a, double offset);
  Var custom(std::span<const Var> inputs, Matrix value, CustomBackward rule);

  /// Populates gradients of every node reachable from the scalar `root`.
  void backward(Var root);
  /// Drops all recorded nodes. Parameter values are untouched.
  void reset();

  const Matrix& value(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix& grad(std::int32_t id) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].kind; }

 private:
  struct Node {
    OpKind kind = OpKind::kConstant;
    Matrix value;
    Matrix grad;
    std::vector<std::int32_t> inputs;
    Parameter* param = nullptr;
    std::function<void(Tape&, Node&)> rule;
  };

  Var push(OpKind kind, Matrix value, std::vector<std::int32_t> inputs,
           std::function<void(Tape&, Node&)> rule);
  Matrix& grad_slot(std::int32_t id);
  void check_owner(Var v) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Free-function sugar over Tape methods.
inline Var operator+(Var a, Var b) { return a.tape().add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape().sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape().mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape().div(a, b); }
inline Var operator*(Var a, double s) { return a.tape().scale(a, s); }
inline Var operator*(double s, Var a) { return a.tape().scale(a, s); }
inline Var operator+(Var a, double s) { return a.tape().shift(a, s); }
inline Var operator-(Var a, double s) { return a.tape().shift(a, -s); }
inline Var matmul(Var a, Var b) { return a.tape().matmul(a, b); }
inline Var sum(Var a) { return a.tape().sum(a); }
inline Var sum_cols(Var a) { return a.tape().sum_cols(a); }
inline Var mean(Var a) { return a.tape().mean(a); }
inline Var exp(Var a) { return a.tape().exp(a); }
inline Var log(Var a) { return a.tape().log(a); }
inline Var tanh(Var a) { return a.tape().tanh(a); }
inline Var relu(Var a) { return a.tape().relu(a); }
inline Var square(Var a) { return a.tape().square(a); }

Var concat_cols(std::initializer_list<Var> parts);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
Var broadcast(Var a, Eigen::Index rows, Eigen::Index cols);
Var repeat_rows(Var a, Eigen::Index times);
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);

/// lo + relu(x - lo) - relu(x - hi).
Var clamp(Var x, double lo, double hi);
/// Value copy with no gradient path back to `x`.
Var detach(Var x);
/// Keeps freed blocks in the heap instead of returning them to the OS.
/// Tapes allocate and free the same large matrices every step; without this
/// glibc maps fresh pages for each one. Process-wide; a no-op off glibc.
void retain_freed_memory();
/// Elementwise tanh; vectorized, within a few ulp of std::tanh.
Matrix tanh_values(const Matrix& x);
/// x @ W + b with b broadcast over rows.
Var affine(Var x, Var weight, Var bias);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  Matrix m;
  Matrix v;
  std::int64_t steps = 0;
};

/// Adam with bias correction. Moments are keyed by parameter name and each
/// parameter keeps its own step count, so freezing a subset is well defined.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  /// Updates every parameter for which `trainable(name)` holds. Throws,
  /// leaving parameters and moments untouched, if any gradient or updated
  /// value is non-finite.
  void step(ParameterSet& params, const std::function<bool(std::string_view)>& trainable);
  void step(ParameterSet& params);

  const AdamOptions& options() const noexcept { return options_; }
  AdamOptions& options() noexcept { return options_; }
  std::map<std::string, AdamMoments>& moments() noexcept { return moments_; }
  const std::map<std::string, AdamMoments>& moments() const noexcept { return moments_; }

 private:
  AdamOptions options_;
  std::map<std::string, AdamMoments> moments_;
};

/// Single Adam update on one array. Exposed for tests.
void adam_update(Matrix& value, const Matrix& grad, AdamMoments& state, const AdamOptions& opt);

}  // namespace poco::ad

namespace poco::ad {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Entries whose magnitudes are below this are judged on absolute error
  /// scaled by it, so |err| < tol * floor is the near-zero criterion.
  double magnitude_floor = 1e-2;
};

struct GradCheckReport {
  double max_error = 0.0;       // max |a - n| / max(|a|, |n|, floor)
  std::string worst_parameter;
  std::size_t checked = 0;
};

/// Central finite differences over every scalar of every parameter against
/// the tape's analytic gradient. `build` records a scalar loss on the tape.
GradCheckReport check_gradients(ParameterSet& params, const std::function<Var(Tape&)>& build,
                                GradCheckOptions options = {});

}  // namespace poco::ad
