#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "m3/tensor.hpp"

namespace m3 {

enum class OpKind {
  constant,
  parameter,
  matmul,
  add,
  multiply,
  concat,
  scale,
  relu,
  sigmoid,
  tanh,
  softmax,
  gather,
  reduce_sum,
  transpose,
  // Composite kernels used by the encoders and the loss.
  slice_cols,
  causal_softmax,
  causal_unfold,
  gru_sequence,
  sampled_softmax_loss,
};

const char* op_name(OpKind kind) noexcept;

template <class Real>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <class Real>
class Var {
 public:
  Var() = default;
  Var(Tape<Real>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Real>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const BasicTensor<Real>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<Real>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records executed operations in order. backward() replays them in exact
// reverse order. Gradients of parameter nodes land directly in
// Parameter::gradient, so parameters that never appear stay untouched.
template <class Real>
class Tape {
 public:
  using TensorT = BasicTensor<Real>;
  using VarT = Var<Real>;
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  VarT constant(TensorT value);
  VarT parameter(Parameter<Real>& param);

  VarT record(OpKind kind, TensorT value, std::vector<std::size_t> inputs,
              BackwardFn backward);

  const TensorT& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  OpKind kind(std::size_t id) const { return nodes_[id].kind; }
  std::span<const std::size_t> inputs(std::size_t id) const {
    return nodes_[id].inputs;
  }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient buffer of a node, zero-initialised on first access.
  TensorT& grad(std::size_t id);

  void backward(const VarT& loss);

 private:
  struct Node {
    OpKind kind = OpKind::constant;
    TensorT value;
    Parameter<Real>* param = nullptr;
    TensorT grad;
    bool grad_live = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<Real>*, std::size_t> param_nodes_;
};

template <class Real>
const BasicTensor<Real>& Var<Real>::value() const {
  return tape_->value(id_);
}

// ---------------------------------------------------------------------------
// Primitive operations. Each validates shapes and finiteness of its operands
// and records itself on the operands' tape.

template <class Real> Var<Real> matmul(const Var<Real>& a, const Var<Real>& b);
// add/multiply broadcast 2-D operands along axes of extent 1.
template <class Real> Var<Real> add(const Var<Real>& a, const Var<Real>& b);
template <class Real> Var<Real> multiply(const Var<Real>& a, const Var<Real>& b);
template <class Real> Var<Real> concat(std::span<const Var<Real>> parts);
template <class Real> Var<Real> scale(const Var<Real>& a, double factor);
template <class Real> Var<Real> relu(const Var<Real>& a);
template <class Real> Var<Real> sigmoid(const Var<Real>& a);
template <class Real> Var<Real> tanh(const Var<Real>& a);
template <class Real> Var<Real> softmax(const Var<Real>& a);
template <class Real>
Var<Real> gather(const Var<Real>& table, std::span<const std::size_t> indices);
template <class Real> Var<Real> reduce_sum(const Var<Real>& a);
template <class Real> Var<Real> transpose(const Var<Real>& a);

template <class Real>
Var<Real> slice_cols(const Var<Real>& a, std::size_t begin, std::size_t count);

// Row i is normalised over columns 0..i only; the rest of the row is zero.
template <class Real> Var<Real> causal_softmax(const Var<Real>& a);

// (T x C) -> (T x width*C). Block k of row t holds row t-(width-1)+k of the
// input, zero where that index falls before the start of the sequence.
template <class Real>
Var<Real> causal_unfold(const Var<Real>& a, std::size_t width);

template <class Real>
struct GruWeights {
  Var<Real> w_xr, w_xu, w_xc;
  Var<Real> w_hr, w_hu, w_hc;
  Var<Real> b_r, b_u, b_c;
};

// Runs a GRU from a zero initial state over the rows of `x` and returns all
// hidden states (T x hidden).
//   r = sig(x Wxr + h Whr + br), u = sig(x Wxu + h Whu + bu)
//   c = tanh(x Wxc + (r*h) Whc + bc), h' = (1-u)*h + u*c
template <class Real>
Var<Real> gru_sequence(const Var<Real>& x, const GruWeights<Real>& w);

struct SampledTarget {
  std::size_t row = 0;
  std::size_t label = 0;
  std::vector<std::size_t> negatives;
};

// Sum over targets of weight * -log softmax(z_row . table[candidates])[label]
// where candidates = {label} + negatives.
template <class Real>
Var<Real> sampled_softmax_loss(const Var<Real>& z, const Var<Real>& table,
                               std::span<const SampledTarget> targets,
                               double label_weight);

// Generic dispatch over the primitive kinds.
struct OpAttrs {
  double factor = 1.0;
  std::vector<std::size_t> indices;
  std::size_t begin = 0;
  std::size_t count = 0;
  std::size_t width = 1;
};

template <class Real>
Var<Real> apply(OpKind kind, std::span<const Var<Real>> operands,
                const OpAttrs& attrs = {});

}  // namespace m3
