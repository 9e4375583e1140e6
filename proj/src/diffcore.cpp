// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "poco/diffcore.hpp"

#include <algorithm>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace poco::ad {
namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw std::invalid_argument(std::string("shape mismatch in ") + op + ": " + shape_str(a) +
                              " vs " + shape_str(b));
}

void require_same(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
}

}  // namespace

const char* to_string(OpKind kind) noexcept {
  switch (kind) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kTanh: return "tanh";
    case OpKind::kRelu: return "relu";
    case OpKind::kSquare: return "square";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kBroadcast: return "broadcast";
    case OpKind::kReshape: return "reshape";
    case OpKind::kCustom: return "custom";
  }
  return "?";
}

// ------------------------------------------------------------ ParameterSet

Parameter& ParameterSet::add(std::string name, Matrix init) {
  if (index_.count(name) != 0) throw std::invalid_argument("duplicate parameter: " + name);
  index_.emplace(name, params_.size());
  Matrix grad = Matrix::Zero(init.rows(), init.cols());
  params_.push_back(Parameter{std::move(name), std::move(init), std::move(grad)});
  return params_.back();
}

Parameter& ParameterSet::at(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return params_[it->second];
}

const Parameter& ParameterSet::at(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return params_[it->second];
}

bool ParameterSet::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

std::size_t ParameterSet::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

// --------------------------------------------------------------------- Var

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }

// -------------------------------------------------------------------- Tape

Var Tape::push(OpKind kind, Matrix value, std::vector<std::int32_t> inputs,
               std::function<void(Tape&, Node&)> rule) {
  if (consumed_) throw std::logic_error("tape already ran backward; reset before recording");
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.rule = std::move(rule);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

void Tape::check_owner(Var v) const {
  if (&v.tape() != this) throw std::invalid_argument("variable belongs to another tape");
}

Matrix& Tape::grad_slot(std::int32_t id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

const Matrix& Tape::grad(std::int32_t id) const {
  static const Matrix kEmpty;
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.grad.size() == 0 ? kEmpty : n.grad;
}

Var Tape::constant(Matrix value) { return push(OpKind::kConstant, std::move(value), {}, nullptr); }

Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::param(Parameter& p) {
  Var v = push(OpKind::kParameter, p.value, {}, nullptr);
  nodes_.back().param = &p;
  return v;
}

Var Tape::record(OpKind kind, std::span<const Var> ops) {
  auto need = [&](std::size_t n) {
    if (ops.size() != n)
      throw std::invalid_argument(std::string("wrong operand count for ") + to_string(kind));
  };
  switch (kind) {
    case OpKind::kAdd: need(2); return add(ops[0], ops[1]);
    case OpKind::kSub: need(2); return sub(ops[0], ops[1]);
    case OpKind::kMul: need(2); return mul(ops[0], ops[1]);
    case OpKind::kDiv: need(2); return div(ops[0], ops[1]);
    case OpKind::kMatmul: need(2); return matmul(ops[0], ops[1]);
    case OpKind::kSum: need(1); return sum(ops[0]);
    case OpKind::kMean: need(1); return mean(ops[0]);
    case OpKind::kExp: need(1); return exp(ops[0]);
    case OpKind::kLog: need(1); return log(ops[0]);
    case OpKind::kTanh: need(1); return tanh(ops[0]);
    case OpKind::kRelu: need(1); return relu(ops[0]);
    case OpKind::kSquare: need(1); return square(ops[0]);
    case OpKind::kConcat: return concat_cols(ops);
    default:
      throw std::invalid_argument(std::string("record() needs extra arguments for ") + to_string(kind));
  }
}

Var Tape::add(Var a, Var b) {
  check_owner(a);
  check_owner(b);
  require_same("add", a.value(), b.value());
  return push(OpKind::kAdd, a.value() + b.value(), {a.id(), b.id()}, [](Tape& t, Node& n) {
    t.grad_slot(n.inputs[0]) += n.grad;
    t.grad_slot(n.inputs[1]) += n.grad;
  });
}

Var Tape::sub(Var a, Var b) {
  check_owner(a);
  check_owner(b);
  require_same("sub", a.value(), b.value());
  return push(OpKind::kSub, a.value() - b.value(), {a.id(), b.id()}, [](Tape& t, Node& n) {
    t.grad_slot(n.inputs[0]) += n.grad;
    t.grad_slot(n.inputs[1]) -= n.grad;
  });
}

Var Tape::mul(Var a, Var b) {
  check_owner(a);
  check_owner(b);
  require_same("mul", a.value(), b.value());
  return push(OpKind::kMul, a.value().cwiseProduct(b.value()), {a.id(), b.id()},
              [](Tape& t, Node& n) {
                const Matrix& av = t.value(n.inputs[0]);
                const Matrix& bv = t.value(n.inputs[1]);
                t.grad_slot(n.inputs[0]) += n.grad.cwiseProduct(bv);
                t.grad_slot(n.inputs[1]) += n.grad.cwiseProduct(av);
              });
}

Var Tape::div(Var a, Var b) {
  check_owner(a);
  check_owner(b);
  require_same("div", a.value(), b.value());
  // Denominators are pushed away from zero, keeping their sign.
  Matrix den = b.value().unaryExpr([](double x) {
    return std::abs(x) < kGuardFloor ? (x < 0 ? -kGuardFloor : kGuardFloor) : x;
  });
  Matrix out = a.value().cwiseQuotient(den);
  return push(OpKind::kDiv, std::move(out), {a.id(), b.id()}, [](Tape& t, Node& n) {
    const Matrix& bv = t.value(n.inputs[1]);
    const Matrix& av = t.value(n.inputs[0]);
    Matrix ga(bv.rows(), bv.cols());
    Matrix gb(bv.rows(), bv.cols());
    for (Eigen::Index i = 0; i < bv.size(); ++i) {
      const double d = bv.data()[i];
      if (std::abs(d) < kGuardFloor) {
        const double dc = d < 0 ? -kGuardFloor : kGuardFloor;
        ga.data()[i] = n.grad.data()[i] / dc;
        gb.data()[i] = 0.0;
      } else {
        ga.data()[i] = n.grad.data()[i] / d;
        gb.data()[i] = -n.grad.data()[i] * av.data()[i] / (d * d);
      }
    }
    t.grad_slot(n.inputs[0]) += ga;
    t.grad_slot(n.inputs[1]) += gb;
  });
}

Var Tape::matmul(Var a, Var b) {
  check_owner(a);
  check_owner(b);
  if (a.cols() != b.rows()) shape_error("matmul", a.value(), b.value());
  Matrix out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return push(OpKind::kMatmul, std::move(out), {a.id(), b.id()}, [](Tape& t, Node& n) {
    const Matrix& av = t.value(n.inputs[0]);
    const Matrix& bv = t.value(n.inputs[1]);
    t.grad_slot(n.inputs[0]).noalias() += n.grad * bv.transpose();
    t.grad_slot(n.inputs[1]).noalias() += av.transpose() * n.grad;
  });
}

Var Tape::sum(Var a) {
  check_owner(a);
  return push(OpKind::kSum, Matrix::Constant(1, 1, a.value().sum()), {a.id()}, [](Tape& t, Node& n) {
    t.grad_slot(n.inputs[0]).array() += n.grad(0, 0);
  });
}

Var Tape::sum_cols(Var a) {
  check_owner(a);
  Matrix out = a.value().rowwise().sum();
  return push(OpKind::kSum, std::move(out), {a.id()}, [](Tape& t, Node& n) {
    Matrix& g = t.grad_slot(n.inputs[0]);
    g.colwise() += n.grad.col(0);
  });
}

Var Tape::mean(Var a) {
  check_owner(a);
  if (a.value().size() == 0) throw std::invalid_argument("mean of empty array");
  return push(OpKind::kMean, Matrix::Constant(1, 1, a.value().mean()), {a.id()}, [](Tape& t, Node& n) {
    Matrix& g = t.grad_slot(n.inputs[0]);
    g.array() += n.grad(0, 0) / static_cast<double>(g.size());
  });
}

Var Tape::exp(Var a) {
  check_owner(a);
  return push(OpKind::kExp, a.value().array().exp().matrix(), {a.id()}, [](Tape& t, Node& n) {
    t.grad_slot(n.inputs[0]) += n.grad.cwiseProduct(n.value);
  });
}

Var Tape::log(Var a) {
  check_owner(a);
  Matrix out = a.value().unaryExpr([](double x) { return std::log(std::max(x, kGuardFloor)); });
  return push(OpKind::kLog, std::move(out), {a.id()}, [](Tape& t, Node& n) {
    const Matrix& av = t.value(n.inputs[0]);
    Matrix g = av.unaryExpr([](double x) { return x > kGuardFloor ? 1.0 / x : 0.0; });
    t.grad_slot(n.inputs[0]) += n.grad.cwiseProduct(g);
  });
}

void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

Matrix tanh_values(const Matrix& x) {
  // 1 - 2 / (exp(2x) + 1) vectorizes. Near zero the subtraction loses
  // relative precision, so |x| < 1e-2 takes the odd series instead; the
  // patch-up loop is scalar because a vectorized select evaluates both forms.
  Matrix y = (1.0 - 2.0 / ((2.0 * x.array()).exp() + 1.0)).matrix();
  const double* in = x.data();
  double* out = y.data();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = in[i];
    if (std::abs(v) < 1e-2) {
      const double v2 = v * v;
      out[i] = v * (1.0 + v2 * (-1.0 / 3.0 + v2 * (2.0 / 15.0 + v2 * (-17.0 / 315.0))));
    }
  }
  return y;
}

Var Tape::tanh(Var a) {
  check_owner(a);
  return push(OpKind::kTanh, tanh_values(a.value()), {a.id()}, [](Tape& t, Node& n) {
    t.grad_slot(n.inputs[0]).array() += n.grad.array() * (1.0 - n.value.array().square());
  });
}

Var Tape::relu(Var a) {
  check_owner(a);
  return push(OpKind::kRelu, a.value().cwiseMax(0.0), {a.id()}, [](Tape& t, Node& n) {
    const Matrix& av = t.value(n.inputs[0]);
    t.grad_slot(n.inputs[0]).array() += (av.array() > 0.0).select(n.grad.array(), 0.0);
  });
}

Var Tape::square(Var a) {
  check_owner(a);
  return push(OpKind::kSquare, a.value().array().square().matrix(), {a.id()}, [](Tape& t, Node& n) {
    t.grad_slot(n.inputs[0]).array() += 2.0 * n.grad.array() * t.value(n.inputs[0]).array();
  });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat of zero operands");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<std::int32_t> ids;
  for (const Var& p : parts) {
    check_owner(p);
    if (p.rows() != rows) shape_error("concat", parts[0].value(), p.value());
    cols += p.cols();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return push(OpKind::kConcat, std::move(out), std::move(ids), [](Tape& t, Node& n) {
    Eigen::Index off = 0;
    for (std::int32_t id : n.inputs) {
      const Eigen::Index c = t.value(id).cols();
      t.grad_slot(id) += n.grad.middleCols(off, c);
      off += c;
    }
  });
}

Var Tape::slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  check_owner(a);
  if (begin < 0 || count < 0 || begin + count > a.cols())
    throw std::out_of_range("slice_cols [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                            ") outside " + shape_str(a.value()));
  Matrix out = a.value().middleCols(begin, count);
  return push(OpKind::kSlice, std::move(out), {a.id()}, [begin, count](Tape& t, Node& n) {
    t.grad_slot(n.inputs[0]).middleCols(begin, count) += n.grad;
  });
}

Var Tape::slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  check_owner(a);
  if (begin < 0 || count < 0 || begin + count > a.rows())
    throw std::out_of_range("slice_rows [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                            ") outside " + shape_str(a.value()));
  Matrix out = a.value().middleRows(begin, count);
  return push(OpKind::kSlice, std::move(out), {a.id()}, [begin, count](Tape& t, Node& n) {
    t.grad_slot(n.inputs[0]).middleRows(begin, count) += n.grad;
  });
}

Var Tape::broadcast(Var a, Eigen::Index rows, Eigen::Index cols) {
  check_owner(a);
  const Matrix& v = a.value();
  const bool row_ok = v.rows() == 1 || v.rows() == rows;
  const bool col_ok = v.cols() == 1 || v.cols() == cols;
  if (!row_ok || !col_ok) shape_error("broadcast", v, Matrix(rows, cols));
  Matrix out = v.replicate(rows / v.rows(), cols / v.cols());
  return push(OpKind::kBroadcast, std::move(out), {a.id()}, [](Tape& t, Node& n) {
    Matrix& g = t.grad_slot(n.inputs[0]);
    if (g.rows() == n.grad.rows() && g.cols() == n.grad.cols()) {
      g += n.grad;
    } else if (g.rows() == 1 && g.cols() == 1) {
      g(0, 0) += n.grad.sum();
    } else if (g.rows() == 1) {
      g += n.grad.colwise().sum();
    } else {
      g += n.grad.rowwise().sum();
    }
  });
}

Var Tape::repeat_rows(Var a, Eigen::Index times) {
  check_owner(a);
  if (times < 1) throw std::invalid_argument("repeat_rows needs times >= 1");
  const Matrix& v = a.value();
  Matrix out(v.rows() * times, v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r)
    out.middleRows(r * times, times) = v.row(r).replicate(times, 1);
  return push(OpKind::kBroadcast, std::move(out), {a.id()}, [times](Tape& t, Node& n) {
    Matrix& g = t.grad_slot(n.inputs[0]);
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      g.row(r) += n.grad.middleRows(r * times, times).colwise().sum();
  });
}

Var Tape::reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  check_owner(a);
  if (rows * cols != a.value().size()) shape_error("reshape", a.value(), Matrix(rows, cols));
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return push(OpKind::kReshape, std::move(out), {a.id()}, [](Tape& t, Node& n) {
    Matrix& g = t.grad_slot(n.inputs[0]);
    g += Eigen::Map<const Matrix>(n.grad.data(), g.rows(), g.cols());
  });
}

Var Tape::scale(Var a, double factor) {
  check_owner(a);
  return push(OpKind::kMul, a.value() * factor, {a.id()}, [factor](Tape& t, Node& n) {
    t.grad_slot(n.inputs[0]) += n.grad * factor;
  });
}

Var Tape::shift(Var a, double offset) {
  check_owner(a);
  return push(OpKind::kAdd, (a.value().array() + offset).matrix(), {a.id()}, [](Tape& t, Node& n) {
    t.grad_slot(n.inputs[0]) += n.grad;
  });
}

Var Tape::custom(std::span<const Var> inputs, Matrix value, CustomBackward rule) {
  std::vector<std::int32_t> ids;
  for (const Var& v : inputs) {
    check_owner(v);
    ids.push_back(v.id());
  }
  return push(OpKind::kCustom, std::move(value), std::move(ids),
              [rule = std::move(rule)](Tape& t, Node& n) {
                std::vector<Matrix*> slots;
                slots.reserve(n.inputs.size());
                for (std::int32_t id : n.inputs) slots.push_back(&t.grad_slot(id));
                rule(n.grad, slots);
              });
}

void Tape::backward(Var root) {
  check_owner(root);
  if (consumed_) throw std::logic_error("backward called twice without reset");
  if (root.value().size() != 1)
    throw std::invalid_argument("backward root must be scalar, got " + shape_str(root.value()));
  consumed_ = true;
  for (auto& n : nodes_) n.grad.resize(0, 0);
  grad_slot(root.id()).setConstant(1.0);
  for (std::int32_t id = root.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) continue;  // unreachable from root
    if (n.rule) n.rule(*this, n);
    if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols())
        p.grad.setZero(p.value.rows(), p.value.cols());
      p.grad += n.grad;
    }
  }
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

// ------------------------------------------------------------------ sugar

Var concat_cols(std::initializer_list<Var> parts) {
  std::vector<Var> v(parts);
  return v.front().tape().concat_cols(v);
}
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) { return a.tape().slice_cols(a, begin, count); }
Var broadcast(Var a, Eigen::Index rows, Eigen::Index cols) { return a.tape().broadcast(a, rows, cols); }
Var repeat_rows(Var a, Eigen::Index times) { return a.tape().repeat_rows(a, times); }
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) { return a.tape().reshape(a, rows, cols); }

Var clamp(Var x, double lo, double hi) {
  Tape& t = x.tape();
  return t.sub(t.shift(t.relu(t.shift(x, -lo)), lo), t.relu(t.shift(x, -hi)));
}

Var detach(Var x) { return x.tape().constant(x.value()); }

Var affine(Var x, Var weight, Var bias) {
  if (x.cols() != weight.rows()) shape_error("affine", x.value(), weight.value());
  if (bias.rows() != 1 || bias.cols() != weight.cols()) shape_error("affine bias", bias.value(), weight.value());
  // Fused so the R x C product is materialized once on the forward pass.
  Matrix y(x.rows(), weight.cols());
  y.noalias() = x.value() * weight.value();
  y.rowwise() += bias.value().row(0);
  const Var in[] = {x, weight, bias};
  return x.tape().custom(in, std::move(y), [x, weight](const Matrix& g, std::span<Matrix* const> grads) {
    grads[0]->noalias() += g * weight.value().transpose();
    grads[1]->noalias() += x.value().transpose() * g;
    *grads[2] += g.colwise().sum();
  });
}

// -------------------------------------------------------------------- Adam

namespace {

// New moments and value for one parameter, not yet committed.
struct AdamProposal {
  Matrix value;
  AdamMoments moments;
};

AdamProposal adam_propose(const Matrix& value, const Matrix& grad, const AdamMoments& s, const AdamOptions& opt) {
  AdamProposal p{value, s};
  AdamMoments& m = p.moments;
  if (m.m.rows() != value.rows() || m.m.cols() != value.cols()) {
    m.m = Matrix::Zero(value.rows(), value.cols());
    m.v = Matrix::Zero(value.rows(), value.cols());
    m.steps = 0;
  }
  m.steps += 1;
  m.m = opt.beta1 * m.m + (1.0 - opt.beta1) * grad;
  m.v = opt.beta2 * m.v + (1.0 - opt.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(m.steps));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(m.steps));
  p.value.array() -= opt.lr * (m.m.array() / c1) / ((m.v.array() / c2).sqrt() + opt.eps);
  return p;
}

}  // namespace

void adam_update(Matrix& value, const Matrix& grad, AdamMoments& s, const AdamOptions& opt) {
  AdamProposal p = adam_propose(value, grad, s, opt);
  value = std::move(p.value);
  s = std::move(p.moments);
}

void Adam::step(ParameterSet& params, const std::function<bool(std::string_view)>& trainable) {
  if (!(options_.lr > 0.0)) throw std::invalid_argument("Adam learning rate must be positive");
  std::vector<std::pair<Parameter*, AdamProposal>> staged;
  for (auto& p : params) {
    if (!trainable(p.name)) continue;
    if (!p.grad.allFinite()) throw std::runtime_error("non-finite gradient in parameter " + p.name);
    auto it = moments_.find(p.name);
    AdamProposal prop = adam_propose(p.value, p.grad, it == moments_.end() ? AdamMoments{} : it->second, options_);
    if (!prop.value.allFinite() || !prop.moments.v.allFinite())
      throw std::runtime_error("non-finite update in parameter " + p.name);
    staged.emplace_back(&p, std::move(prop));
  }
  // All-or-nothing: nothing is written unless every update is finite.
  for (auto& [p, prop] : staged) {
    p->value = std::move(prop.value);
    moments_[p->name] = std::move(prop.moments);
  }
}

void Adam::step(ParameterSet& params) {
  step(params, [](std::string_view) { return true; });
}

}  // namespace poco::ad

namespace poco::ad {

GradCheckReport check_gradients(ParameterSet& params, const std::function<Var(Tape&)>& build,
                                GradCheckOptions options) {
  params.zero_grad();
  {
    Tape tape;
    Var root = build(tape);
    tape.backward(root);
  }
  auto eval = [&]() {
    Tape tape;
    return build(tape).value()(0, 0);
  };
  GradCheckReport report;
  for (auto& p : params) {
    const Matrix analytic = p.grad;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& x = p.value.data()[i];
      const double saved = x;
      x = saved + options.eps;
      const double up = eval();
      x = saved - options.eps;
      const double down = eval();
      x = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = analytic.data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.magnitude_floor});
      const double err = std::abs(a - numeric) / denom;
      ++report.checked;
      if (err > report.max_error || !std::isfinite(err)) {
        report.max_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
        report.worst_parameter = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace poco::ad
