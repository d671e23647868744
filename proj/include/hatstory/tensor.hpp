#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hatstory/config.hpp"
#include "hatstory/errors.hpp"

HATSTORY_BEGIN

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

class Tape;
class Tensor;

namespace detail {

#ifdef HATSTORY_NO_FINITE_CHECKS
inline constexpr bool kCheckFinite = false;
#else
inline constexpr bool kCheckFinite = true;
#endif

struct Node {
  Shape shape;
  std::vector<Real> value;
  // Empty means "no gradient held"; a populated buffer always matches value.
  std::vector<Real> grad;
  bool requires_grad = false;
  const Tape* tape = nullptr;  // set when produced by a recorded operation
};

using NodePtr = std::shared_ptr<Node>;

// Gradient buffer of an input node, allocated on first use. Returns an empty
// span when the node does not take part in differentiation.
inline std::span<Real> grad_of(Node& n) {
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

inline void check_finite(std::span<const Real> values, const char* what) {
  if constexpr (kCheckFinite) {
    for (Real v : values) {
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + what);
    }
  }
}

}  // namespace detail

/// Dense row-major tensor of Real values. Copies share the underlying storage, so
/// a Tensor behaves as a handle to an immutable value; only leaf parameters are
/// ever updated in place (by the optimizer or the gradient checker).
class Tensor {
 public:
  Tensor() : Tensor(Shape{1}, std::vector<Real>{0.0}) {}

  Tensor(Shape shape, std::vector<Real> values) : node_(std::make_shared<detail::Node>()) {
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                           shape_string(shape));
    }
    detail::check_finite(values, "tensor construction");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor full(Shape shape, Real v) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, v));
  }

  static Tensor scalar(Real v) { return Tensor(Shape{}, {v}); }

  static Tensor vector(std::vector<Real> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<Real>> rows) {
    const std::size_t m = rows.size();
    const std::size_t q = m ? rows.begin()->size() : 0;
    std::vector<Real> values;
    values.reserve(m * q);
    for (const auto& r : rows) {
      if (r.size() != q) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor(Shape{m, q}, std::move(values));
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<const Real> data() const { return node_->value; }

  // In-place access for leaves; refused for values produced by recorded ops.
  std::span<Real> mutable_data() {
    if (node_->tape != nullptr) throw StateError("cannot mutate a tensor recorded on a tape");
    return node_->value;
  }

  Real item() const {
    if (numel() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_string(shape()));
    return node_->value[0];
  }

  Real operator[](std::size_t i) const { return node_->value.at(i); }

  Real at(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw DimensionError("at(i, j) requires a matrix, got " + shape_string(shape()));
    if (i >= dim(0) || j >= dim(1)) throw IndexError("matrix index out of range");
    return node_->value[i * dim(1) + j];
  }

  bool requires_grad() const { return node_->requires_grad; }

  Tensor& set_requires_grad(bool on = true) {
    if (node_->tape != nullptr) throw StateError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  void clear_grad() { node_->grad.clear(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  // Independent leaf holding the same values.
  Tensor clone() const {
    Tensor t(shape(), node_->value);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const detail::NodePtr& node() const { return node_; }

 private:
  friend Tensor detail_wrap(detail::NodePtr);
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  detail::NodePtr node_;
};

inline Tensor detail_wrap(detail::NodePtr node) { return Tensor(std::move(node)); }

/// Define-by-run record of differentiable operations. Operations executed while
/// a Tape::Scope is active, and that touch at least one tensor requiring
/// gradients, append a backward closure here. A tape is replayed exactly once.
class Tape {
 public:
  using Backward = std::function<void(const detail::Node& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(current_ref()) { current_ref() = &tape; }
    ~Scope() { current_ref() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  // Disables recording for its lifetime (inference inside a training step).
  class Suspend {
   public:
    Suspend() : previous_(current_ref()) { current_ref() = nullptr; }
    ~Suspend() { current_ref() = previous_; }
    Suspend(const Suspend&) = delete;
    Suspend& operator=(const Suspend&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active() { return current_ref(); }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  void record(const detail::NodePtr& out, Backward fn) {
    if (consumed_) throw StateError("cannot record on a tape that was already replayed");
    out->tape = this;
    out->requires_grad = true;
    entries_.push_back({out, std::move(fn)});
  }

  /// Accumulates d(root)/d(leaf) into every leaf that requires gradients.
  void backward(const Tensor& root) {
    if (consumed_) throw StateError("backward already ran on this tape; record a new forward pass");
    if (root.numel() != 1) throw ContractError("backward root must be a scalar, got " + shape_string(root.shape()));
    if (root.node()->tape != this) throw ContractError("backward root was not recorded on this tape");
    consumed_ = true;
    root.node()->grad.assign(1, 1.0);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->out->grad.empty()) it->fn(*it->out);
    }
    entries_.clear();
  }

 private:
  struct Entry {
    detail::NodePtr out;
    Backward fn;
  };

  static Tape*& current_ref() {
    thread_local Tape* current = nullptr;
    return current;
  }

  std::vector<Entry> entries_;
  bool consumed_ = false;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline Tensor make_result(Shape shape, std::vector<Real> values, const char* op) {
  check_finite(values, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return detail_wrap(std::move(node));
}

// Records `fn` when a tape is active and `differentiable` holds.
inline void maybe_record(const Tensor& out, bool differentiable, Tape::Backward fn) {
  if (!differentiable) return;
  if (Tape* tape = Tape::active()) tape->record(out.node(), std::move(fn));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  std::vector<Real> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  Tensor y = make_result(x.shape(), std::move(out), op);
  maybe_record(y, x.requires_grad(), [xn = x.node(), deriv](const Node& o) {
    auto gx = grad_of(*xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * deriv(xn->value[i], o.value[i]);
  });
  return y;
}

enum class BinaryOp { kAdd, kSub, kMul, kDiv };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryOp op, const char* name) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && !a_scalar && a.shape() != b.shape();
  if (!a_scalar && !b_scalar) require_same_shape(a, b, name);
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  const auto av = a.data();
  const auto bv = b.data();
  auto lhs = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto rhs = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (op) {
      case BinaryOp::kAdd: out[i] = lhs(i) + rhs(i); break;
      case BinaryOp::kSub: out[i] = lhs(i) - rhs(i); break;
      case BinaryOp::kMul: out[i] = lhs(i) * rhs(i); break;
      case BinaryOp::kDiv:
        if (rhs(i) == 0.0) throw NumericError(std::string(name) + ": division by zero");
        out[i] = lhs(i) / rhs(i);
        break;
    }
  }
  Tensor y = make_result(shape, std::move(out), name);
  maybe_record(y, any_requires_grad({&a, &b}), [an = a.node(), bn = b.node(), op, a_scalar, b_scalar, n](const Node& o) {
    auto ga = grad_of(*an);
    auto gb = grad_of(*bn);
    const auto& av = an->value;
    const auto& bv = bn->value;
    for (std::size_t i = 0; i < n; ++i) {
      const Real g = o.grad[i];
      const Real x = a_scalar ? av[0] : av[i];
      const Real z = b_scalar ? bv[0] : bv[i];
      Real da = 0.0;
      Real db = 0.0;
      switch (op) {
        case BinaryOp::kAdd: da = g; db = g; break;
        case BinaryOp::kSub: da = g; db = -g; break;
        case BinaryOp::kMul: da = g * z; db = g * x; break;
        case BinaryOp::kDiv: da = g / z; db = -g * x / (z * z); break;
      }
      if (!ga.empty()) ga[a_scalar ? 0 : i] += da;
      if (!gb.empty()) gb[b_scalar ? 0 : i] += db;
    }
  });
  return y;
}

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* op) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisView {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations. Binary operations need equal shapes unless one side
// holds a single element.

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::kAdd, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::kSub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::kMul, "mul"); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::kDiv, "div"); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, Real s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator+(Real s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(const Tensor& a, Real s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator-(Real s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(const Tensor& a, Real s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator*(Real s, const Tensor& a) { return mul(Tensor::scalar(s), a); }

inline Tensor neg(const Tensor& x) {
  return detail::unary(x, "neg", [](Real v) { return -v; }, [](Real, Real) { return -1.0; });
}

inline Tensor operator-(const Tensor& x) { return neg(x); }

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, "sigmoid",
      [](Real v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](Real, Real y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(x, "tanh", [](Real v) { return std::tanh(v); }, [](Real, Real y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, "relu", [](Real v) { return v > 0.0 ? v : 0.0; }, [](Real v, Real) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor log(const Tensor& x) {
  for (Real v : x.data()) {
    if (!(v > 0.0)) throw NumericError("log: argument " + std::to_string(v) + " outside (0, inf)");
  }
  return detail::unary(x, "log", [](Real v) { return std::log(v); }, [](Real v, Real) { return 1.0 / v; });
}

inline Tensor exp(const Tensor& x) {
  for (Real v : x.data()) {
    if (v > 709.0) throw NumericError("exp: argument " + std::to_string(v) + " overflows");
  }
  return detail::unary(x, "exp", [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

// ---------------------------------------------------------------------------
// Linear algebra and structure.

/// Matrix product. `a` may be a matrix [m x p] or a row vector [p]; `b` is [p x q].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool vec = a.rank() == 1;
  if ((a.rank() != 1 && a.rank() != 2) || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t m = vec ? 1 : a.dim(0);
  const std::size_t p = b.dim(0);
  const std::size_t q = b.dim(1);
  std::vector<Real> out(m * q, 0.0);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < p; ++l) {
      const Real x = av[i * p + l];
      if (x == 0.0) continue;
      for (std::size_t j = 0; j < q; ++j) out[i * q + j] += x * bv[l * q + j];
    }
  }
  Tensor y = detail::make_result(vec ? Shape{q} : Shape{m, q}, std::move(out), "matmul");
  detail::maybe_record(y, detail::any_requires_grad({&a, &b}), [an = a.node(), bn = b.node(), m, p, q](const detail::Node& o) {
    auto ga = detail::grad_of(*an);
    auto gb = detail::grad_of(*bn);
    const auto& av = an->value;
    const auto& bv = bn->value;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t l = 0; l < p; ++l) {
        Real acc = 0.0;
        for (std::size_t j = 0; j < q; ++j) {
          const Real g = o.grad[i * q + j];
          acc += g * bv[l * q + j];
          if (!gb.empty()) gb[l * q + j] += av[i * p + l] * g;
        }
        if (!ga.empty()) ga[i * p + l] += acc;
      }
    }
  });
  return y;
}

/// Adds bias [q] to every row of `m` [r x q]; for a vector `m` this is plain addition.
inline Tensor add_bias(const Tensor& m, const Tensor& bias) {
  if (m.rank() == 1) return add(m, bias);
  if (m.rank() != 2 || bias.rank() != 1 || bias.dim(0) != m.dim(1)) {
    throw DimensionError("add_bias: incompatible shapes " + shape_string(m.shape()) + " and " +
                         shape_string(bias.shape()));
  }
  const std::size_t r = m.dim(0);
  const std::size_t q = m.dim(1);
  std::vector<Real> out(m.data().begin(), m.data().end());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < q; ++j) out[i * q + j] += bias[j];
  }
  Tensor y = detail::make_result(m.shape(), std::move(out), "add_bias");
  detail::maybe_record(y, detail::any_requires_grad({&m, &bias}), [mn = m.node(), bn = bias.node(), r, q](const detail::Node& o) {
    auto gm = detail::grad_of(*mn);
    auto gb = detail::grad_of(*bn);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < q; ++j) {
        if (!gm.empty()) gm[i * q + j] += o.grad[i * q + j];
        if (!gb.empty()) gb[j] += o.grad[i * q + j];
      }
    }
  });
  return y;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  Tensor y = detail::make_result(std::move(shape), std::vector<Real>(x.data().begin(), x.data().end()), "reshape");
  detail::maybe_record(y, x.requires_grad(), [xn = x.node()](const detail::Node& o) {
    auto gx = detail::grad_of(*xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
  });
  return y;
}

/// Concatenation along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, long axis = 0) {
  if (parts.empty()) throw ContractError("concat: no tensors given");
  const Shape& first = parts.front().shape();
  const std::size_t ax = detail::normalize_axis(axis, first.size(), "concat");
  Shape shape = first;
  shape[ax] = 0;
  for (const Tensor& t : parts) {
    bool ok = t.rank() == first.size();
    for (std::size_t d = 0; ok && d < first.size(); ++d) ok = d == ax || t.dim(d) == first[d];
    if (!ok) {
      throw DimensionError("concat: " + shape_string(t.shape()) + " does not match " + shape_string(first) +
                           " off axis " + std::to_string(ax));
    }
    shape[ax] += t.dim(ax);
  }
  const auto view = detail::axis_view(shape, ax);
  std::vector<Real> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& t : parts) {
    offsets.push_back(off);
    const std::size_t ext = t.dim(ax);
    const auto v = t.data();
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t e = 0; e < ext; ++e) {
        for (std::size_t i = 0; i < view.inner; ++i) {
          out[(o * view.extent + off + e) * view.inner + i] = v[(o * ext + e) * view.inner + i];
        }
      }
    }
    off += ext;
  }
  Tensor y = detail::make_result(shape, std::move(out), "concat");
  bool differentiable = false;
  std::vector<detail::NodePtr> nodes;
  for (const Tensor& t : parts) {
    differentiable = differentiable || t.requires_grad();
    nodes.push_back(t.node());
  }
  detail::maybe_record(y, differentiable, [nodes, offsets, view, ax](const detail::Node& o) {
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      auto g = detail::grad_of(*nodes[p]);
      if (g.empty()) continue;
      const std::size_t ext = nodes[p]->shape[ax];
      for (std::size_t oo = 0; oo < view.outer; ++oo) {
        for (std::size_t e = 0; e < ext; ++e) {
          for (std::size_t i = 0; i < view.inner; ++i) {
            g[(oo * ext + e) * view.inner + i] += o.grad[(oo * view.extent + offsets[p] + e) * view.inner + i];
          }
        }
      }
    }
  });
  return y;
}

/// Stacks equally shaped tensors along a new leading axis.
inline Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("stack: no tensors given");
  std::vector<Tensor> lifted;
  lifted.reserve(parts.size());
  for (const Tensor& t : parts) {
    detail::require_same_shape(parts.front(), t, "stack");
    Shape s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    lifted.push_back(reshape(t, s));
  }
  return concat(lifted, 0);
}

/// Sub-tensor at index `i` along the leading axis. The gradient scatters into
/// that slice only.
inline Tensor row(const Tensor& m, std::size_t i) {
  if (m.rank() < 2) throw DimensionError("row: expected rank >= 2, got " + shape_string(m.shape()));
  if (i >= m.dim(0)) {
    throw IndexError("row: index " + std::to_string(i) + " out of range for " + shape_string(m.shape()));
  }
  const Shape shape(m.shape().begin() + 1, m.shape().end());
  const std::size_t w = shape_numel(shape);
  const auto v = m.data();
  Tensor y = detail::make_result(shape, std::vector<Real>(v.begin() + i * w, v.begin() + (i + 1) * w), "row");
  detail::maybe_record(y, m.requires_grad(), [mn = m.node(), i, w](const detail::Node& o) {
    auto g = detail::grad_of(*mn);
    for (std::size_t j = 0; j < w; ++j) g[i * w + j] += o.grad[j];
  });
  return y;
}

/// Single element at flat index `i`, as a scalar.
inline Tensor pick(const Tensor& x, std::size_t i) {
  if (i >= x.numel()) {
    throw IndexError("pick: index " + std::to_string(i) + " out of range for " + shape_string(x.shape()));
  }
  Tensor y = detail::make_result(Shape{}, {x[i]}, "pick");
  detail::maybe_record(y, x.requires_grad(), [xn = x.node(), i](const detail::Node& o) {
    detail::grad_of(*xn)[i] += o.grad[0];
  });
  return y;
}

/// [d] -> [n x d], each row a copy of `v`.
inline Tensor repeat_rows(const Tensor& v, std::size_t n) {
  if (v.rank() != 1) throw DimensionError("repeat_rows: expected a vector, got " + shape_string(v.shape()));
  if (n == 0) throw DimensionError("repeat_rows: zero repetitions");
  const std::size_t d = v.numel();
  std::vector<Real> out;
  out.reserve(n * d);
  for (std::size_t r = 0; r < n; ++r) out.insert(out.end(), v.data().begin(), v.data().end());
  Tensor y = detail::make_result(Shape{n, d}, std::move(out), "repeat_rows");
  detail::maybe_record(y, v.requires_grad(), [vn = v.node(), n, d](const detail::Node& o) {
    auto g = detail::grad_of(*vn);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j];
    }
  });
  return y;
}

inline Tensor sum(const Tensor& x) {
  Real s = 0.0;
  for (Real v : x.data()) s += v;
  Tensor y = detail::make_result(Shape{}, {s}, "sum");
  detail::maybe_record(y, x.requires_grad(), [xn = x.node()](const detail::Node& o) {
    auto g = detail::grad_of(*xn);
    for (Real& gi : g) gi += o.grad[0];
  });
  return y;
}

inline Tensor mean(const Tensor& x) { return sum(x) * (1.0 / static_cast<Real>(x.numel())); }

/// Sum of equally shaped tensors, accumulated left to right.
inline Tensor add_n(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("add_n: no tensors given");
  std::vector<Real> out(parts.front().numel(), 0.0);
  bool differentiable = false;
  std::vector<detail::NodePtr> nodes;
  for (const Tensor& t : parts) {
    detail::require_same_shape(parts.front(), t, "add_n");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += t[i];
    differentiable = differentiable || t.requires_grad();
    nodes.push_back(t.node());
  }
  Tensor y = detail::make_result(parts.front().shape(), std::move(out), "add_n");
  detail::maybe_record(y, differentiable, [nodes](const detail::Node& o) {
    for (const auto& n : nodes) {
      auto g = detail::grad_of(*n);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Normalization.

/// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& x, long axis = -1) {
  if (x.rank() == 0) throw DimensionError("softmax: scalar input has no axis");
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "softmax");
  const auto view = detail::axis_view(x.shape(), ax);
  const auto v = x.data();
  std::vector<Real> out(v.size());
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t i = 0; i < view.inner; ++i) {
      auto at = [&](std::size_t e) { return (o * view.extent + e) * view.inner + i; };
      Real mx = v[at(0)];
      for (std::size_t e = 1; e < view.extent; ++e) mx = std::max(mx, v[at(e)]);
      Real z = 0.0;
      for (std::size_t e = 0; e < view.extent; ++e) z += (out[at(e)] = std::exp(v[at(e)] - mx));
      for (std::size_t e = 0; e < view.extent; ++e) out[at(e)] /= z;
    }
  }
  Tensor y = detail::make_result(x.shape(), std::move(out), "softmax");
  detail::maybe_record(y, x.requires_grad(), [xn = x.node(), view](const detail::Node& o) {
    auto g = detail::grad_of(*xn);
    for (std::size_t oo = 0; oo < view.outer; ++oo) {
      for (std::size_t i = 0; i < view.inner; ++i) {
        auto at = [&](std::size_t e) { return (oo * view.extent + e) * view.inner + i; };
        Real dot = 0.0;
        for (std::size_t e = 0; e < view.extent; ++e) dot += o.grad[at(e)] * o.value[at(e)];
        for (std::size_t e = 0; e < view.extent; ++e) g[at(e)] += o.value[at(e)] * (o.grad[at(e)] - dot);
      }
    }
  });
  return y;
}

/// log(softmax(x)) along `axis`, computed without forming the probabilities.
inline Tensor log_softmax(const Tensor& x, long axis = -1) {
  if (x.rank() == 0) throw DimensionError("log_softmax: scalar input has no axis");
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "log_softmax");
  const auto view = detail::axis_view(x.shape(), ax);
  const auto v = x.data();
  std::vector<Real> out(v.size());
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t i = 0; i < view.inner; ++i) {
      auto at = [&](std::size_t e) { return (o * view.extent + e) * view.inner + i; };
      Real mx = v[at(0)];
      for (std::size_t e = 1; e < view.extent; ++e) mx = std::max(mx, v[at(e)]);
      Real z = 0.0;
      for (std::size_t e = 0; e < view.extent; ++e) z += std::exp(v[at(e)] - mx);
      const Real lz = mx + std::log(z);
      for (std::size_t e = 0; e < view.extent; ++e) out[at(e)] = v[at(e)] - lz;
    }
  }
  Tensor y = detail::make_result(x.shape(), std::move(out), "log_softmax");
  detail::maybe_record(y, x.requires_grad(), [xn = x.node(), view](const detail::Node& o) {
    auto g = detail::grad_of(*xn);
    for (std::size_t oo = 0; oo < view.outer; ++oo) {
      for (std::size_t i = 0; i < view.inner; ++i) {
        auto at = [&](std::size_t e) { return (oo * view.extent + e) * view.inner + i; };
        Real total = 0.0;
        for (std::size_t e = 0; e < view.extent; ++e) total += o.grad[at(e)];
        for (std::size_t e = 0; e < view.extent; ++e) g[at(e)] += o.grad[at(e)] - std::exp(o.value[at(e)]) * total;
      }
    }
  });
  return y;
}

HATSTORY_END
