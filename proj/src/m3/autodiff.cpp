#include "m3/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "m3/error.hpp"

namespace m3 {

const char* op_name(OpKind kind) noexcept {
  switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::parameter: return "parameter";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::multiply: return "multiply";
    case OpKind::concat: return "concat-last-axis";
    case OpKind::scale: return "scale";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::softmax: return "softmax-last-axis";
    case OpKind::gather: return "embedding-gather";
    case OpKind::reduce_sum: return "reduce-sum";
    case OpKind::transpose: return "transpose";
    case OpKind::slice_cols: return "slice-cols";
    case OpKind::causal_softmax: return "causal-softmax";
    case OpKind::causal_unfold: return "causal-unfold";
    case OpKind::gru_sequence: return "gru-sequence";
    case OpKind::sampled_softmax_loss: return "sampled-softmax-loss";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Tape

template <class Real>
Var<Real> Tape<Real>::constant(TensorT value) {
  Node node;
  node.kind = OpKind::constant;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return VarT(this, nodes_.size() - 1);
}

template <class Real>
Var<Real> Tape<Real>::parameter(Parameter<Real>& param) {
  if (auto it = param_nodes_.find(&param); it != param_nodes_.end()) {
    return VarT(this, it->second);
  }
  Node node;
  node.kind = OpKind::parameter;
  node.param = &param;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  param_nodes_.emplace(&param, nodes_.size() - 1);
  return VarT(this, nodes_.size() - 1);
}

template <class Real>
Var<Real> Tape<Real>::record(OpKind kind, TensorT value,
                             std::vector<std::size_t> inputs,
                             BackwardFn backward) {
  Node node;
  node.kind = kind;
  node.value = std::move(value);
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                   [&](std::size_t i) { return nodes_[i].requires_grad; });
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return VarT(this, nodes_.size() - 1);
}

template <class Real>
const BasicTensor<Real>& Tape<Real>::value(std::size_t id) const {
  const Node& node = nodes_[id];
  return node.param ? node.param->value : node.value;
}

template <class Real>
BasicTensor<Real>& Tape<Real>::grad(std::size_t id) {
  Node& node = nodes_[id];
  if (node.param) {
    node.grad_live = true;
    return node.param->gradient;
  }
  if (!node.grad_live) {
    node.grad = TensorT(node.value.shape());
    node.grad_live = true;
  }
  return node.grad;
}

template <class Real>
void Tape<Real>::backward(const VarT& loss) {
  if (loss.tape() != this) {
    fail(ErrorCode::invalid_argument, "backward: loss belongs to another tape");
  }
  const std::size_t root = loss.id();
  if (value(root).size() != 1) {
    fail(ErrorCode::shape_mismatch,
         "backward: loss must be scalar, got shape " + shape_string(value(root).shape()));
  }
  if (!nodes_[root].requires_grad) return;
  grad(root)[0] += Real(1);
  for (std::size_t i = root + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.backward && node.grad_live) node.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

// C (m x n) += A (m x k) * B (k x n)
template <class Real>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a,
             const Real* b, Real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* ci = c + i * n;
    const Real* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = ai[p];
      if (aip == Real(0)) continue;
      const Real* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C (m x n) += A (m x k) * B^T, B stored (n x k)
template <class Real>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const Real* a,
             const Real* b, Real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* ai = a + i * k;
    Real* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const Real* bj = b + j * k;
      Real acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// C (m x n) += A^T * B, A stored (k x m), B stored (k x n)
template <class Real>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Real* a,
             const Real* b, Real* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const Real* ap = a + p * m;
    const Real* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const Real api = ap[i];
      if (api == Real(0)) continue;
      Real* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

template <class Real>
Real sigmoid_scalar(Real x) {
  if (x >= 0) {
    const Real e = std::exp(-x);
    return Real(1) / (Real(1) + e);
  }
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

template <class Real>
Tape<Real>& same_tape(OpKind kind, std::initializer_list<const Var<Real>*> vars) {
  Tape<Real>* tape = nullptr;
  for (const Var<Real>* v : vars) {
    if (!v->valid()) {
      fail(ErrorCode::invalid_argument, std::string(op_name(kind)) + ": unbound operand");
    }
    if (tape && v->tape() != tape) {
      fail(ErrorCode::invalid_argument,
           std::string(op_name(kind)) + ": operands live on different tapes");
    }
    tape = v->tape();
  }
  return *tape;
}

template <class Real>
void require_finite(OpKind kind, const BasicTensor<Real>& t) {
  if (!t.all_finite()) {
    fail(ErrorCode::non_finite, std::string(op_name(kind)) + ": non-finite operand");
  }
}

[[noreturn]] void shape_error(OpKind kind, const Shape& a, const Shape& b) {
  fail(ErrorCode::shape_mismatch, std::string(op_name(kind)) + ": shape mismatch " +
                                      shape_string(a) + " vs " + shape_string(b));
}

[[noreturn]] void shape_error(OpKind kind, const Shape& a, const std::string& what) {
  fail(ErrorCode::shape_mismatch,
       std::string(op_name(kind)) + ": " + what + ", got " + shape_string(a));
}

struct Extents2 {
  std::size_t rows, cols;
};

Extents2 view2(const Shape& s) {
  if (s.size() == 1) return {1, s[0]};
  std::size_t rows = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  return {rows, s.back()};
}

// Broadcast plan for binary elementwise ops over the 2-D view.
struct Broadcast {
  Extents2 a, b, out;
  Shape shape;
};

Broadcast plan_broadcast(OpKind kind, const Shape& sa, const Shape& sb) {
  if (sa == sb) {
    const auto e = view2(sa);
    return {e, e, e, sa};
  }
  if (sa.size() > 2 || sb.size() > 2) shape_error(kind, sa, sb);
  const Extents2 a = view2(sa), b = view2(sb);
  auto merge = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    shape_error(kind, sa, sb);
  };
  const Extents2 out{merge(a.rows, b.rows), merge(a.cols, b.cols)};
  Shape shape;
  if (sa.size() == 1 && sb.size() == 1) {
    shape = {out.cols};
  } else {
    shape = {out.rows, out.cols};
  }
  return {a, b, out, shape};
}

inline std::size_t bidx(const Extents2& e, std::size_t r, std::size_t c) {
  return (e.rows == 1 ? 0 : r) * e.cols + (e.cols == 1 ? 0 : c);
}

template <class Real>
void accumulate(BasicTensor<Real>& into, const BasicTensor<Real>& from) {
  Real* dst = into.data();
  const Real* src = from.data();
  for (std::size_t i = 0; i < into.size(); ++i) dst[i] += src[i];
}

// Reduce a broadcast gradient back to the operand extents.
template <class Real>
void accumulate_reduced(BasicTensor<Real>& into, const Extents2& target,
                        const BasicTensor<Real>& g, const Extents2& out) {
  if (target.rows == out.rows && target.cols == out.cols) {
    accumulate(into, g);
    return;
  }
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t c = 0; c < out.cols; ++c) {
      into[bidx(target, r, c)] += g[r * out.cols + c];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Primitive ops

template <class Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
  constexpr OpKind kind = OpKind::matmul;
  Tape<Real>& tape = same_tape(kind, {&a, &b});
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
    shape_error(kind, av.shape(), bv.shape());
  }
  require_finite(kind, av);
  require_finite(kind, bv);
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  BasicTensor<Real> out({m, n});
  gemm_nn(m, k, n, av.data(), bv.data(), out.data());
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(kind, std::move(out), {ia, ib},
                     [ia, ib, m, k, n](Tape<Real>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       if (t.requires_grad(ia)) {
                         gemm_nt(m, n, k, g.data(), t.value(ib).data(), t.grad(ia).data());
                       }
                       if (t.requires_grad(ib)) {
                         gemm_tn(k, m, n, t.value(ia).data(), g.data(), t.grad(ib).data());
                       }
                     });
}

template <class Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  constexpr OpKind kind = OpKind::add;
  Tape<Real>& tape = same_tape(kind, {&a, &b});
  const auto& av = a.value();
  const auto& bv = b.value();
  const Broadcast plan = plan_broadcast(kind, av.shape(), bv.shape());
  require_finite(kind, av);
  require_finite(kind, bv);
  BasicTensor<Real> out(plan.shape);
  for (std::size_t r = 0; r < plan.out.rows; ++r) {
    for (std::size_t c = 0; c < plan.out.cols; ++c) {
      out[r * plan.out.cols + c] = av[bidx(plan.a, r, c)] + bv[bidx(plan.b, r, c)];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(kind, std::move(out), {ia, ib},
                     [ia, ib, plan](Tape<Real>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       if (t.requires_grad(ia)) accumulate_reduced(t.grad(ia), plan.a, g, plan.out);
                       if (t.requires_grad(ib)) accumulate_reduced(t.grad(ib), plan.b, g, plan.out);
                     });
}

template <class Real>
Var<Real> multiply(const Var<Real>& a, const Var<Real>& b) {
  constexpr OpKind kind = OpKind::multiply;
  Tape<Real>& tape = same_tape(kind, {&a, &b});
  const auto& av = a.value();
  const auto& bv = b.value();
  const Broadcast plan = plan_broadcast(kind, av.shape(), bv.shape());
  require_finite(kind, av);
  require_finite(kind, bv);
  BasicTensor<Real> out(plan.shape);
  for (std::size_t r = 0; r < plan.out.rows; ++r) {
    for (std::size_t c = 0; c < plan.out.cols; ++c) {
      out[r * plan.out.cols + c] = av[bidx(plan.a, r, c)] * bv[bidx(plan.b, r, c)];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(
      kind, std::move(out), {ia, ib}, [ia, ib, plan](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& av = t.value(ia);
        const auto& bv = t.value(ib);
        const bool ga = t.requires_grad(ia), gb = t.requires_grad(ib);
        BasicTensor<Real>* da = ga ? &t.grad(ia) : nullptr;
        BasicTensor<Real>* db = gb ? &t.grad(ib) : nullptr;
        for (std::size_t r = 0; r < plan.out.rows; ++r) {
          for (std::size_t c = 0; c < plan.out.cols; ++c) {
            const Real gv = g[r * plan.out.cols + c];
            const std::size_t xa = bidx(plan.a, r, c), xb = bidx(plan.b, r, c);
            if (da) (*da)[xa] += gv * bv[xb];
            if (db) (*db)[xb] += gv * av[xa];
          }
        }
      });
}

template <class Real>
Var<Real> concat(std::span<const Var<Real>> parts) {
  constexpr OpKind kind = OpKind::concat;
  if (parts.empty()) fail(ErrorCode::invalid_argument, "concat-last-axis: no operands");
  Tape<Real>& tape = same_tape(kind, {&parts[0]});
  const auto& first = parts[0].value();
  const std::size_t rows = first.rows();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    same_tape(kind, {&parts[0], &p});
    const auto& v = p.value();
    if (v.rank() != first.rank() || v.rows() != rows) shape_error(kind, first.shape(), v.shape());
    if (v.rank() > 2) shape_error(kind, v.shape(), "operands must be rank 1 or 2");
    require_finite(kind, v);
    widths.push_back(v.cols());
    ids.push_back(p.id());
    total += v.cols();
  }
  Shape shape = first.rank() == 1 ? Shape{total} : Shape{rows, total};
  BasicTensor<Real> out(shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  auto inputs = ids;
  return tape.record(kind, std::move(out), std::move(inputs),
                     [ids, widths, rows, total](Tape<Real>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         if (t.requires_grad(ids[k])) {
                           auto& d = t.grad(ids[k]);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const Real* src = g.data() + r * total + offset;
                             Real* dst = d.data() + r * widths[k];
                             for (std::size_t c = 0; c < widths[k]; ++c) dst[c] += src[c];
                           }
                         }
                         offset += widths[k];
                       }
                     });
}

template <class Real>
Var<Real> scale(const Var<Real>& a, double factor) {
  constexpr OpKind kind = OpKind::scale;
  Tape<Real>& tape = same_tape(kind, {&a});
  const auto& av = a.value();
  require_finite(kind, av);
  if (!std::isfinite(factor)) fail(ErrorCode::non_finite, "scale: non-finite factor");
  BasicTensor<Real> out = av;
  const Real f = static_cast<Real>(factor);
  for (auto& v : out.values()) v *= f;
  const std::size_t ia = a.id();
  return tape.record(kind, std::move(out), {ia}, [ia, f](Tape<Real>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += f * g[i];
  });
}

namespace {

// Elementwise op whose derivative is a function of the output value.
template <class Real, class Forward, class DerivFromOutput>
Var<Real> unary(OpKind kind, const Var<Real>& a, Forward fwd, DerivFromOutput deriv) {
  Tape<Real>& tape = same_tape(kind, {&a});
  const auto& av = a.value();
  require_finite(kind, av);
  BasicTensor<Real> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ia = a.id();
  return tape.record(kind, std::move(out), {ia}, [ia, deriv](Tape<Real>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * deriv(y[i]);
  });
}

}  // namespace

template <class Real>
Var<Real> relu(const Var<Real>& a) {
  return unary<Real>(
      OpKind::relu, a, [](Real x) { return x > 0 ? x : Real(0); },
      [](Real y) { return y > 0 ? Real(1) : Real(0); });
}

template <class Real>
Var<Real> sigmoid(const Var<Real>& a) {
  return unary<Real>(
      OpKind::sigmoid, a, [](Real x) { return sigmoid_scalar(x); },
      [](Real y) { return y * (Real(1) - y); });
}

template <class Real>
Var<Real> tanh(const Var<Real>& a) {
  return unary<Real>(
      OpKind::tanh, a, [](Real x) { return std::tanh(x); },
      [](Real y) { return Real(1) - y * y; });
}

namespace {

template <class Real>
void softmax_row(const Real* in, Real* out, std::size_t n) {
  Real mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  Real sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    sum += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
}

// dIn_j += p_j (dOut_j - sum_k p_k dOut_k) over the first n entries.
template <class Real>
void softmax_row_backward(const Real* p, const Real* g, Real* d, std::size_t n) {
  Real dot = 0;
  for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
  for (std::size_t j = 0; j < n; ++j) d[j] += p[j] * (g[j] - dot);
}

}  // namespace

template <class Real>
Var<Real> softmax(const Var<Real>& a) {
  constexpr OpKind kind = OpKind::softmax;
  Tape<Real>& tape = same_tape(kind, {&a});
  const auto& av = a.value();
  require_finite(kind, av);
  const std::size_t rows = av.rows(), cols = av.cols();
  BasicTensor<Real> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    softmax_row(av.data() + r * cols, out.data() + r * cols, cols);
  }
  const std::size_t ia = a.id();
  return tape.record(kind, std::move(out), {ia},
                     [ia, rows, cols](Tape<Real>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       const auto& p = t.value(self);
                       auto& d = t.grad(ia);
                       for (std::size_t r = 0; r < rows; ++r) {
                         softmax_row_backward(p.data() + r * cols, g.data() + r * cols,
                                              d.data() + r * cols, cols);
                       }
                     });
}

template <class Real>
Var<Real> gather(const Var<Real>& table, std::span<const std::size_t> indices) {
  constexpr OpKind kind = OpKind::gather;
  Tape<Real>& tape = same_tape(kind, {&table});
  const auto& tv = table.value();
  if (tv.rank() != 2) shape_error(kind, tv.shape(), "table must be rank 2");
  if (indices.empty()) fail(ErrorCode::invalid_argument, "embedding-gather: no indices");
  const std::size_t n_rows = tv.shape()[0], dim = tv.shape()[1];
  BasicTensor<Real> out({indices.size(), dim});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n_rows) {
      fail(ErrorCode::invalid_argument, "embedding-gather: index " + std::to_string(indices[i]) +
                                            " out of range for table " + shape_string(tv.shape()));
    }
    const auto src = tv.row(indices[i]);
    if (!all_finite(src)) require_finite(kind, tv);
    std::copy(src.begin(), src.end(), out.data() + i * dim);
  }
  const std::size_t it = table.id();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return tape.record(kind, std::move(out), {it},
                     [it, idx = std::move(idx), dim](Tape<Real>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       auto& d = t.grad(it);
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         Real* dst = d.data() + idx[i] * dim;
                         const Real* src = g.data() + i * dim;
                         for (std::size_t c = 0; c < dim; ++c) dst[c] += src[c];
                       }
                     });
}

template <class Real>
Var<Real> reduce_sum(const Var<Real>& a) {
  constexpr OpKind kind = OpKind::reduce_sum;
  Tape<Real>& tape = same_tape(kind, {&a});
  const auto& av = a.value();
  require_finite(kind, av);
  Real sum = 0;
  for (Real v : av.values()) sum += v;
  const std::size_t ia = a.id();
  return tape.record(kind, BasicTensor<Real>::scalar(sum), {ia},
                     [ia](Tape<Real>& t, std::size_t self) {
                       const Real g = t.grad(self)[0];
                       auto& d = t.grad(ia);
                       for (auto& v : d.values()) v += g;
                     });
}

template <class Real>
Var<Real> transpose(const Var<Real>& a) {
  constexpr OpKind kind = OpKind::transpose;
  Tape<Real>& tape = same_tape(kind, {&a});
  const auto& av = a.value();
  if (av.rank() != 2) shape_error(kind, av.shape(), "operand must be rank 2");
  require_finite(kind, av);
  const std::size_t m = av.shape()[0], n = av.shape()[1];
  BasicTensor<Real> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  const std::size_t ia = a.id();
  return tape.record(kind, std::move(out), {ia}, [ia, m, n](Tape<Real>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) d[i * n + j] += g[j * m + i];
  });
}

template <class Real>
Var<Real> slice_cols(const Var<Real>& a, std::size_t begin, std::size_t count) {
  constexpr OpKind kind = OpKind::slice_cols;
  Tape<Real>& tape = same_tape(kind, {&a});
  const auto& av = a.value();
  if (av.rank() > 2 || count == 0 || begin + count > av.cols()) {
    shape_error(kind, av.shape(),
                "columns [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                    ") out of range");
  }
  require_finite(kind, av);
  const std::size_t rows = av.rows(), cols = av.cols();
  BasicTensor<Real> out(av.rank() == 1 ? Shape{count} : Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * cols + begin, count, out.data() + r * count);
  }
  const std::size_t ia = a.id();
  return tape.record(kind, std::move(out), {ia},
                     [ia, rows, cols, begin, count](Tape<Real>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       auto& d = t.grad(ia);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < count; ++c)
                           d[r * cols + begin + c] += g[r * count + c];
                     });
}

template <class Real>
Var<Real> causal_softmax(const Var<Real>& a) {
  constexpr OpKind kind = OpKind::causal_softmax;
  Tape<Real>& tape = same_tape(kind, {&a});
  const auto& av = a.value();
  if (av.rank() != 2 || av.shape()[0] != av.shape()[1]) {
    shape_error(kind, av.shape(), "operand must be square");
  }
  require_finite(kind, av);
  const std::size_t n = av.shape()[0];
  BasicTensor<Real> out({n, n});
  for (std::size_t r = 0; r < n; ++r) softmax_row(av.data() + r * n, out.data() + r * n, r + 1);
  const std::size_t ia = a.id();
  return tape.record(kind, std::move(out), {ia}, [ia, n](Tape<Real>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& p = t.value(self);
    auto& d = t.grad(ia);
    for (std::size_t r = 0; r < n; ++r) {
      softmax_row_backward(p.data() + r * n, g.data() + r * n, d.data() + r * n, r + 1);
    }
  });
}

template <class Real>
Var<Real> causal_unfold(const Var<Real>& a, std::size_t width) {
  constexpr OpKind kind = OpKind::causal_unfold;
  Tape<Real>& tape = same_tape(kind, {&a});
  const auto& av = a.value();
  if (av.rank() != 2) shape_error(kind, av.shape(), "operand must be rank 2");
  if (width == 0) fail(ErrorCode::invalid_argument, "causal-unfold: width must be positive");
  require_finite(kind, av);
  const std::size_t steps = av.shape()[0], ch = av.shape()[1];
  BasicTensor<Real> out({steps, width * ch});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t k = 0; k < width; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) -
                                 static_cast<std::ptrdiff_t>(width - 1);
      if (src < 0) continue;
      std::copy_n(av.data() + static_cast<std::size_t>(src) * ch, ch,
                  out.data() + t * width * ch + k * ch);
    }
  }
  const std::size_t ia = a.id();
  return tape.record(kind, std::move(out), {ia},
                     [ia, steps, ch, width](Tape<Real>& tp, std::size_t self) {
                       const auto& g = tp.grad(self);
                       auto& d = tp.grad(ia);
                       for (std::size_t t = 0; t < steps; ++t) {
                         for (std::size_t k = 0; k < width; ++k) {
                           const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) -
                                                      static_cast<std::ptrdiff_t>(width - 1);
                           if (src < 0) continue;
                           Real* dst = d.data() + static_cast<std::size_t>(src) * ch;
                           const Real* gs = g.data() + t * width * ch + k * ch;
                           for (std::size_t c = 0; c < ch; ++c) dst[c] += gs[c];
                         }
                       }
                     });
}

template <class Real>
Var<Real> gru_sequence(const Var<Real>& x, const GruWeights<Real>& w) {
  constexpr OpKind kind = OpKind::gru_sequence;
  Tape<Real>& tape = same_tape(kind, {&x, &w.w_xr, &w.w_xu, &w.w_xc, &w.w_hr, &w.w_hu,
                                      &w.w_hc, &w.b_r, &w.b_u, &w.b_c});
  const auto& xv = x.value();
  if (xv.rank() != 2) shape_error(kind, xv.shape(), "input must be rank 2");
  const std::size_t steps = xv.shape()[0], din = xv.shape()[1];
  const std::size_t hid = w.w_hr.value().rank() == 2 ? w.w_hr.value().shape()[0] : 0;
  const Shape wx{din, hid}, wh{hid, hid}, bs{hid};
  for (const Var<Real>* v : {&w.w_xr, &w.w_xu, &w.w_xc}) {
    if (v->shape() != wx) shape_error(kind, xv.shape(), v->shape());
  }
  for (const Var<Real>* v : {&w.w_hr, &w.w_hu, &w.w_hc}) {
    if (v->shape() != wh) shape_error(kind, wh, v->shape());
  }
  for (const Var<Real>* v : {&w.b_r, &w.b_u, &w.b_c}) {
    if (v->shape() != bs) shape_error(kind, bs, v->shape());
  }
  require_finite(kind, xv);
  for (const Var<Real>* v : {&w.w_xr, &w.w_xu, &w.w_xc, &w.w_hr, &w.w_hu, &w.w_hc, &w.b_r,
                             &w.b_u, &w.b_c}) {
    require_finite(kind, v->value());
  }

  // Input projections for all steps at once.
  BasicTensor<Real> ar({steps, hid}), au({steps, hid}), ac({steps, hid});
  gemm_nn(steps, din, hid, xv.data(), w.w_xr.value().data(), ar.data());
  gemm_nn(steps, din, hid, xv.data(), w.w_xu.value().data(), au.data());
  gemm_nn(steps, din, hid, xv.data(), w.w_xc.value().data(), ac.data());

  BasicTensor<Real> hprev({steps, hid}), rr({steps, hid}), uu({steps, hid}), cc({steps, hid});
  BasicTensor<Real> out({steps, hid});
  std::vector<Real> h(hid, Real(0)), rh(hid), tmp(hid);
  const Real* whr = w.w_hr.value().data();
  const Real* whu = w.w_hu.value().data();
  const Real* whc = w.w_hc.value().data();
  const Real* br = w.b_r.value().data();
  const Real* bu = w.b_u.value().data();
  const Real* bc = w.b_c.value().data();
  for (std::size_t t = 0; t < steps; ++t) {
    Real* hp = hprev.data() + t * hid;
    std::copy(h.begin(), h.end(), hp);
    Real* ra = ar.data() + t * hid;
    Real* ua = au.data() + t * hid;
    Real* ca = ac.data() + t * hid;
    gemm_nn(1, hid, hid, h.data(), whr, ra);
    gemm_nn(1, hid, hid, h.data(), whu, ua);
    Real* r = rr.data() + t * hid;
    Real* u = uu.data() + t * hid;
    for (std::size_t j = 0; j < hid; ++j) {
      r[j] = sigmoid_scalar(ra[j] + br[j]);
      u[j] = sigmoid_scalar(ua[j] + bu[j]);
      rh[j] = r[j] * h[j];
    }
    gemm_nn(1, hid, hid, rh.data(), whc, ca);
    Real* c = cc.data() + t * hid;
    Real* o = out.data() + t * hid;
    for (std::size_t j = 0; j < hid; ++j) {
      c[j] = std::tanh(ca[j] + bc[j]);
      h[j] = (Real(1) - u[j]) * h[j] + u[j] * c[j];
      o[j] = h[j];
    }
  }

  std::vector<std::size_t> ids{x.id(),      w.w_xr.id(), w.w_xu.id(), w.w_xc.id(),
                               w.w_hr.id(), w.w_hu.id(), w.w_hc.id(), w.b_r.id(),
                               w.b_u.id(),  w.b_c.id()};
  auto inputs = ids;
  return tape.record(
      kind, std::move(out), std::move(inputs),
      [ids, steps, din, hid, hprev = std::move(hprev), rr = std::move(rr),
       uu = std::move(uu), cc = std::move(cc)](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Real* whr = t.value(ids[4]).data();
        const Real* whu = t.value(ids[5]).data();
        const Real* whc = t.value(ids[6]).data();
        BasicTensor<Real> dar({steps, hid}), dau({steps, hid}), dac({steps, hid});
        BasicTensor<Real> rhs({steps, hid});
        std::vector<Real> dh(hid, Real(0)), dnext(hid), drh(hid);
        for (std::size_t s = steps; s-- > 0;) {
          const Real* hp = hprev.data() + s * hid;
          const Real* r = rr.data() + s * hid;
          const Real* u = uu.data() + s * hid;
          const Real* c = cc.data() + s * hid;
          Real* dr_a = dar.data() + s * hid;
          Real* du_a = dau.data() + s * hid;
          Real* dc_a = dac.data() + s * hid;
          for (std::size_t j = 0; j < hid; ++j) {
            dh[j] += g[s * hid + j];
            dnext[j] = dh[j] * (Real(1) - u[j]);
            dc_a[j] = dh[j] * u[j] * (Real(1) - c[j] * c[j]);
            du_a[j] = dh[j] * (c[j] - hp[j]) * u[j] * (Real(1) - u[j]);
            rhs[s * hid + j] = r[j] * hp[j];
          }
          std::fill(drh.begin(), drh.end(), Real(0));
          gemm_nt(1, hid, hid, dc_a, whc, drh.data());
          for (std::size_t j = 0; j < hid; ++j) {
            dnext[j] += drh[j] * r[j];
            dr_a[j] = drh[j] * hp[j] * r[j] * (Real(1) - r[j]);
          }
          gemm_nt(1, hid, hid, du_a, whu, dnext.data());
          gemm_nt(1, hid, hid, dr_a, whr, dnext.data());
          std::swap(dh, dnext);
        }
        const auto& xv = t.value(ids[0]);
        if (t.requires_grad(ids[0])) {
          auto& dx = t.grad(ids[0]);
          gemm_nt(steps, hid, din, dar.data(), t.value(ids[1]).data(), dx.data());
          gemm_nt(steps, hid, din, dau.data(), t.value(ids[2]).data(), dx.data());
          gemm_nt(steps, hid, din, dac.data(), t.value(ids[3]).data(), dx.data());
        }
        const BasicTensor<Real>* gate_grads[3] = {&dar, &dau, &dac};
        for (int k = 0; k < 3; ++k) {
          if (t.requires_grad(ids[1 + k])) {
            gemm_tn(din, steps, hid, xv.data(), gate_grads[k]->data(), t.grad(ids[1 + k]).data());
          }
        }
        if (t.requires_grad(ids[4]))
          gemm_tn(hid, steps, hid, hprev.data(), dar.data(), t.grad(ids[4]).data());
        if (t.requires_grad(ids[5]))
          gemm_tn(hid, steps, hid, hprev.data(), dau.data(), t.grad(ids[5]).data());
        if (t.requires_grad(ids[6]))
          gemm_tn(hid, steps, hid, rhs.data(), dac.data(), t.grad(ids[6]).data());
        for (int k = 0; k < 3; ++k) {
          if (!t.requires_grad(ids[7 + k])) continue;
          auto& db = t.grad(ids[7 + k]);
          for (std::size_t s = 0; s < steps; ++s)
            for (std::size_t j = 0; j < hid; ++j) db[j] += (*gate_grads[k])[s * hid + j];
        }
      });
}

template <class Real>
Var<Real> sampled_softmax_loss(const Var<Real>& z, const Var<Real>& table,
                               std::span<const SampledTarget> targets, double label_weight) {
  constexpr OpKind kind = OpKind::sampled_softmax_loss;
  Tape<Real>& tape = same_tape(kind, {&z, &table});
  const auto& zv = z.value();
  const auto& qv = table.value();
  if (zv.rank() != 2 || qv.rank() != 2 || zv.shape()[1] != qv.shape()[1]) {
    shape_error(kind, zv.shape(), qv.shape());
  }
  require_finite(kind, zv);
  const std::size_t dim = zv.shape()[1], n_items = qv.shape()[0];

  // probabilities per target over {label} + negatives, label first.
  std::vector<std::vector<Real>> probs(targets.size());
  Real total = 0;
  std::vector<Real> logits;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const SampledTarget& tg = targets[k];
    if (tg.row >= zv.shape()[0]) {
      fail(ErrorCode::invalid_argument, "sampled-softmax-loss: row out of range");
    }
    const std::size_t n_cand = tg.negatives.size() + 1;
    logits.assign(n_cand, Real(0));
    const Real* zr = zv.data() + tg.row * dim;
    for (std::size_t j = 0; j < n_cand; ++j) {
      const std::size_t item = j == 0 ? tg.label : tg.negatives[j - 1];
      if (item >= n_items) {
        fail(ErrorCode::invalid_argument,
             "sampled-softmax-loss: item " + std::to_string(item) + " out of range");
      }
      if (j > 0 && item == tg.label) {
        fail(ErrorCode::invalid_argument, "sampled-softmax-loss: label " +
                                              std::to_string(tg.label) +
                                              " appears among the negatives");
      }
      const Real* q = qv.data() + item * dim;
      if (!all_finite(std::span<const Real>(q, dim))) require_finite(kind, qv);
      Real acc = 0;
      for (std::size_t c = 0; c < dim; ++c) acc += zr[c] * q[c];
      logits[j] = acc;
    }
    Real mx = *std::max_element(logits.begin(), logits.end());
    Real sum = 0;
    for (Real l : logits) sum += std::exp(l - mx);
    total += static_cast<Real>(label_weight) * (std::log(sum) + mx - logits[0]);
    auto& p = probs[k];
    p.resize(n_cand);
    for (std::size_t j = 0; j < n_cand; ++j) p[j] = std::exp(logits[j] - mx) / sum;
  }

  const std::size_t iz = z.id(), iq = table.id();
  std::vector<SampledTarget> tg(targets.begin(), targets.end());
  const Real w = static_cast<Real>(label_weight);
  return tape.record(
      kind, BasicTensor<Real>::scalar(total), {iz, iq},
      [iz, iq, dim, w, tg = std::move(tg), probs = std::move(probs)](Tape<Real>& t,
                                                                     std::size_t self) {
        const Real g = t.grad(self)[0] * w;
        const auto& zv = t.value(iz);
        const auto& qv = t.value(iq);
        BasicTensor<Real>* dz = t.requires_grad(iz) ? &t.grad(iz) : nullptr;
        BasicTensor<Real>* dq = t.requires_grad(iq) ? &t.grad(iq) : nullptr;
        for (std::size_t k = 0; k < tg.size(); ++k) {
          const auto& p = probs[k];
          const Real* zr = zv.data() + tg[k].row * dim;
          for (std::size_t j = 0; j < p.size(); ++j) {
            const std::size_t item = j == 0 ? tg[k].label : tg[k].negatives[j - 1];
            const Real coef = g * (p[j] - (j == 0 ? Real(1) : Real(0)));
            const Real* q = qv.data() + item * dim;
            if (dz) {
              Real* dzr = dz->data() + tg[k].row * dim;
              for (std::size_t c = 0; c < dim; ++c) dzr[c] += coef * q[c];
            }
            if (dq) {
              Real* dqr = dq->data() + item * dim;
              for (std::size_t c = 0; c < dim; ++c) dqr[c] += coef * zr[c];
            }
          }
        }
      });
}

template <class Real>
Var<Real> apply(OpKind kind, std::span<const Var<Real>> operands, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (operands.size() != n) {
      fail(ErrorCode::invalid_argument, std::string(op_name(kind)) + ": expected " +
                                            std::to_string(n) + " operands, got " +
                                            std::to_string(operands.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: need(2); return matmul(operands[0], operands[1]);
    case OpKind::add: need(2); return add(operands[0], operands[1]);
    case OpKind::multiply: need(2); return multiply(operands[0], operands[1]);
    case OpKind::concat: return concat(operands);
    case OpKind::scale: need(1); return scale(operands[0], attrs.factor);
    case OpKind::relu: need(1); return relu(operands[0]);
    case OpKind::sigmoid: need(1); return sigmoid(operands[0]);
    case OpKind::tanh: need(1); return tanh(operands[0]);
    case OpKind::softmax: need(1); return softmax(operands[0]);
    case OpKind::gather: need(1); return gather<Real>(operands[0], attrs.indices);
    case OpKind::reduce_sum: need(1); return reduce_sum(operands[0]);
    case OpKind::transpose: need(1); return transpose(operands[0]);
    case OpKind::slice_cols: need(1); return slice_cols(operands[0], attrs.begin, attrs.count);
    case OpKind::causal_softmax: need(1); return causal_softmax(operands[0]);
    case OpKind::causal_unfold: need(1); return causal_unfold(operands[0], attrs.width);
    case OpKind::gru_sequence:
      need(10);
      return gru_sequence(operands[0],
                          GruWeights<Real>{operands[1], operands[2], operands[3], operands[4],
                                           operands[5], operands[6], operands[7], operands[8],
                                           operands[9]});
    default: break;
  }
  fail(ErrorCode::invalid_argument, std::string(op_name(kind)) + ": not dispatchable by apply");
}

#define M3_INSTANTIATE_AUTODIFF(Real)                                                      \
  template class Tape<Real>;                                                               \
  template class Var<Real>;                                                                \
  template Var<Real> matmul(const Var<Real>&, const Var<Real>&);                           \
  template Var<Real> add(const Var<Real>&, const Var<Real>&);                              \
  template Var<Real> multiply(const Var<Real>&, const Var<Real>&);                         \
  template Var<Real> concat(std::span<const Var<Real>>);                                   \
  template Var<Real> scale(const Var<Real>&, double);                                      \
  template Var<Real> relu(const Var<Real>&);                                               \
  template Var<Real> sigmoid(const Var<Real>&);                                            \
  template Var<Real> tanh(const Var<Real>&);                                               \
  template Var<Real> softmax(const Var<Real>&);                                            \
  template Var<Real> gather(const Var<Real>&, std::span<const std::size_t>);               \
  template Var<Real> reduce_sum(const Var<Real>&);                                         \
  template Var<Real> transpose(const Var<Real>&);                                          \
  template Var<Real> slice_cols(const Var<Real>&, std::size_t, std::size_t);               \
  template Var<Real> causal_softmax(const Var<Real>&);                                     \
  template Var<Real> causal_unfold(const Var<Real>&, std::size_t);                         \
  template Var<Real> gru_sequence(const Var<Real>&, const GruWeights<Real>&);              \
  template Var<Real> sampled_softmax_loss(const Var<Real>&, const Var<Real>&,              \
                                          std::span<const SampledTarget>, double);         \
  template Var<Real> apply(OpKind, std::span<const Var<Real>>, const OpAttrs&);

M3_INSTANTIATE_AUTODIFF(double)
M3_INSTANTIATE_AUTODIFF(float)

#undef M3_INSTANTIATE_AUTODIFF

}  // namespace m3
