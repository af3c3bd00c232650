#pragma once

// Reverse-mode differentiation over dense Tensors.
//
// Operations execute eagerly and record themselves on a Tape; the tape is the
// DAG (node ids are a topological order by construction). backward() walks it
// in reverse and returns gradients for every named leaf that requires them.
//
// Broadcasting is limited to scalar-with-tensor (add, sub, mul) and the
// explicit row-vector ops add_row / scale_shift / scale_rows.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "connex/tensor.hpp"

// The message is only built on failure.
#define CONNEX_REQUIRE(ok, op, what) \
  do {                               \
    if (!(ok)) ::connex::ad::detail::shape_fail(op, what); \
  } while (0)

namespace connex::ad {

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const {
    if (!tape_) throw StateError("var: not bound to a tape");
    return *tape_;
  }
  std::size_t id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(std::string name, Tensor value, bool requires_grad = true) {
    if (!value.all_finite()) throw NumericError("leaf '" + name + "': non-finite value");
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.name = std::move(name);
    node.op = "leaf";
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) {
    Node node;
    node.value = std::move(value);
    node.op = "constant";
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  /// The backward callable is only stored (and type-erased) when some parent
  /// requires a gradient.
  template <class F>
  Var record(const char* op, Tensor value, std::initializer_list<Var> parents, F&& backward) {
    return record_impl(op, std::move(value), parents.begin(), parents.end(), std::forward<F>(backward));
  }

  template <class F>
  Var record(const char* op, Tensor value, const std::vector<Var>& parents, F&& backward) {
    return record_impl(op, std::move(value), parents.data(), parents.data() + parents.size(),
                       std::forward<F>(backward));
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(const Var& v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient slot of a node, or nullptr when no gradient flows into it.
  Tensor* grad_slot(const Var& v) {
    Node& node = nodes_[v.id()];
    if (!node.requires_grad) return nullptr;
    if (!node.grad) node.grad.emplace(node.value.shape(), 0.0);
    return &*node.grad;
  }

  /// Adjoint of any node after backward(); zeros if nothing reached it.
  Tensor grad(const Var& v) const {
    const Node& node = nodes_.at(v.id());
    if (node.grad) return *node.grad;
    return Tensor(node.value.shape(), 0.0);
  }

  /// Reverse sweep from a scalar root. Returns gradients for every named leaf
  /// that requires them (zero tensors for leaves the root does not depend on).
  std::map<std::string, Tensor> backward(const Var& root) {
    if (!root.valid() || &root.tape() != this || root.id() >= nodes_.size())
      throw StateError("backward: root was not produced by a forward pass on this tape");
    if (nodes_[root.id()].value.size() != 1)
      throw ShapeError("backward: root must be scalar, got " +
                       shape_str(nodes_[root.id()].value.shape()));
    for (Node& node : nodes_) node.grad.reset();
    if (nodes_[root.id()].requires_grad) {
      Tensor* seed = grad_slot(root);
      (*seed)[0] = 1.0;
      for (std::size_t id = root.id() + 1; id-- > 0;) {
        Node& node = nodes_[id];
        if (!node.grad || !node.backward) continue;
        // Callbacks only touch parent slots (lower ids); nodes_ never grows here.
        node.backward(*this, *node.grad);
      }
    }
    std::map<std::string, Tensor> grads;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      const Node& node = nodes_[id];
      if (node.op == std::string_view("leaf") && node.requires_grad)
        grads[node.name] = node.grad ? *node.grad : Tensor(node.value.shape(), 0.0);
    }
    return grads;
  }

 private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    bool requires_grad = false;
    std::string name;
    const char* op = "";
    BackwardFn backward;
  };

  template <class F>
  Var record_impl(const char* op, Tensor value, const Var* first, const Var* last, F&& backward) {
    if (!value.all_finite())
      throw NumericError(std::string(op) + ": non-finite result");
    Node node;
    node.value = std::move(value);
    node.op = op;
    for (const Var* p = first; p != last; ++p) {
      if (&p->tape() != this) throw StateError(std::string(op) + ": operands on different tapes");
      node.requires_grad = node.requires_grad || nodes_[p->id()].requires_grad;
    }
    if (node.requires_grad) node.backward = BackwardFn(std::forward<F>(backward));
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape().value(id_); }

namespace detail {

[[noreturn]] inline void shape_fail(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

inline bool is_scalar(const Tensor& t) { return t.rank() == 0; }

// Axis decomposition: index = (outer * n + i) * inner + r
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.n = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

// C[n×m] += op(A) · op(B), where op(A) is n×k and op(B) is k×m; ta/tb mean
// A is stored k×n / B is stored m×k.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t n,
                     std::size_t k, std::size_t m, bool ta, bool tb) {
  if (tb) {
    for (std::size_t i = 0; i < n; ++i) {
      double* crow = c + i * m;
      for (std::size_t j = 0; j < m; ++j) {
        const double* brow = b + j * k;
        double acc = 0.0;
        if (ta) {
          for (std::size_t p = 0; p < k; ++p) acc += a[p * n + i] * brow[p];
        } else {
          const double* arow = a + i * k;
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        }
        crow[j] += acc;
      }
    }
    return;
  }
  if (ta) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = a + p * n;
      const double* brow = b + p * m;
      for (std::size_t i = 0; i < n; ++i) {
        const double av = arow[i];
        if (av == 0.0) continue;
        double* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
    return;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

inline void add_into(Tensor* dst, const Tensor& src, double scale = 1.0) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += scale * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  CONNEX_REQUIRE(A.rank() == 2 && B.rank() == 2, "matmul", "operands must be rank 2, got " +
                  shape_str(A.shape()) + " and " + shape_str(B.shape()));
  const std::size_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  CONNEX_REQUIRE(B.dim(0) == k, "matmul", "inner extents differ: " + shape_str(A.shape()) +
                  " x " + shape_str(B.shape()));
  Tensor C({n, m});
  detail::gemm_acc(A.values().data(), B.values().data(), C.values().data(), n, k, m, false, false);
  return a.tape().record("matmul", std::move(C), {a, b}, [a, b, n, k, m](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_slot(a))
      detail::gemm_acc(g.values().data(), b.value().values().data(), ga->values().data(), n, m, k,
                       false, true);
    if (Tensor* gb = t.grad_slot(b))
      detail::gemm_acc(a.value().values().data(), g.values().data(), gb->values().data(), k, n, m,
                       true, false);
  });
}

/// Batched matmul over the leading axis: [B,n,k] x [B,k,m] -> [B,n,m].
inline Var bmm(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  CONNEX_REQUIRE(A.rank() == 3 && B.rank() == 3, "bmm", "operands must be rank 3");
  const std::size_t batch = A.dim(0), n = A.dim(1), k = A.dim(2), m = B.dim(2);
  CONNEX_REQUIRE(B.dim(0) == batch && B.dim(1) == k, "bmm",
                  "shape mismatch " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Tensor C({batch, n, m});
  for (std::size_t s = 0; s < batch; ++s)
    detail::gemm_acc(A.values().data() + s * n * k, B.values().data() + s * k * m,
                     C.values().data() + s * n * m, n, k, m, false, false);
  return a.tape().record("bmm", std::move(C), {a, b}, [a, b, batch, n, k, m](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_slot(a);
    Tensor* gb = t.grad_slot(b);
    for (std::size_t s = 0; s < batch; ++s) {
      const double* gs = g.values().data() + s * n * m;
      if (ga)
        detail::gemm_acc(gs, b.value().values().data() + s * k * m, ga->values().data() + s * n * k,
                         n, m, k, false, true);
      if (gb)
        detail::gemm_acc(a.value().values().data() + s * n * k, gs, gb->values().data() + s * k * m,
                         k, n, m, true, false);
    }
  });
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
inline Var transpose(const Var& a) {
  const Tensor& A = a.value();
  CONNEX_REQUIRE(A.rank() == 2 || A.rank() == 3, "transpose", "rank must be 2 or 3");
  const std::size_t batch = A.rank() == 3 ? A.dim(0) : 1;
  const std::size_t r = A.dim(A.rank() - 2), c = A.dim(A.rank() - 1);
  Shape out_shape = A.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Tensor out(out_shape);
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[s * r * c + j * r + i] = A[s * r * c + i * c + j];
  return a.tape().record("transpose", std::move(out), {a}, [a, batch, r, c](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_slot(a);
    for (std::size_t s = 0; s < batch; ++s)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)[s * r * c + i * c + j] += g[s * r * c + j * r + i];
  });
}

// ---------------------------------------------------------------- elementwise

namespace detail {

enum class Binary { Add, Sub, Mul };

inline Var binary(const char* op, Binary kind, const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const bool a_scalar = is_scalar(A) && !is_scalar(B);
  const bool b_scalar = is_scalar(B) && !is_scalar(A);
  CONNEX_REQUIRE(A.shape() == B.shape() || a_scalar || b_scalar, op,
          "shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  const Shape& shape = a_scalar ? B.shape() : A.shape();
  Tensor out(shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = A[a_scalar ? 0 : i];
    const double y = B[b_scalar ? 0 : i];
    out[i] = kind == Binary::Add ? x + y : kind == Binary::Sub ? x - y : x * y;
  }
  return a.tape().record(op, std::move(out), {a, b},
                         [a, b, kind, a_scalar, b_scalar](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_slot(a);
    Tensor* gb = t.grad_slot(b);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t ia = a_scalar ? 0 : i;
      const std::size_t ib = b_scalar ? 0 : i;
      switch (kind) {
        case Binary::Add:
          if (ga) (*ga)[ia] += g[i];
          if (gb) (*gb)[ib] += g[i];
          break;
        case Binary::Sub:
          if (ga) (*ga)[ia] += g[i];
          if (gb) (*gb)[ib] -= g[i];
          break;
        case Binary::Mul:
          if (ga) (*ga)[ia] += g[i] * B[ib];
          if (gb) (*gb)[ib] += g[i] * A[ia];
          break;
      }
    }
  });
}

template <typename F, typename D>
Var unary(const char* op, const Var& x, F f, D df) {
  Tensor out = map(x.value(), f);
  return x.tape().record(op, std::move(out), {x}, [x, df](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_slot(x);
    const Tensor& X = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * df(X[i]);
  });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) { return detail::binary("add", detail::Binary::Add, a, b); }
inline Var sub(const Var& a, const Var& b) { return detail::binary("subtract", detail::Binary::Sub, a, b); }
inline Var mul(const Var& a, const Var& b) { return detail::binary("multiply", detail::Binary::Mul, a, b); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

inline Var scale(const Var& x, double c) {
  return detail::unary("scale", x, [c](double v) { return c * v; }, [c](double) { return c; });
}

/// x[..., n] + bias[n]
inline Var add_row(const Var& x, const Var& bias) {
  const Tensor& X = x.value();
  const Tensor& B = bias.value();
  CONNEX_REQUIRE(X.rank() >= 1 && B.rank() == 1 && B.dim(0) == X.dim(X.rank() - 1), "add_row",
                  "bias " + shape_str(B.shape()) + " does not match rows of " + shape_str(X.shape()));
  const std::size_t n = B.dim(0);
  Tensor out = X;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i % n];
  return x.tape().record("add_row", std::move(out), {x, bias}, [x, bias, n](Tape& t, const Tensor& g) {
    detail::add_into(t.grad_slot(x), g);
    if (Tensor* gb = t.grad_slot(bias))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % n] += g[i];
  });
}

/// x[..., n] * gamma[n] + beta[n]  (layer-norm affine terms)
inline Var scale_shift(const Var& x, const Var& gamma, const Var& beta) {
  const Tensor& X = x.value();
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  const std::size_t n = X.dim(X.rank() - 1);
  CONNEX_REQUIRE(G.rank() == 1 && G.dim(0) == n && B.shape() == G.shape(), "scale_shift",
                  "affine terms do not match last axis of " + shape_str(X.shape()));
  Tensor out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] * G[i % n] + B[i % n];
  return x.tape().record("scale_shift", std::move(out), {x, gamma, beta},
                         [x, gamma, beta, n](Tape& t, const Tensor& g) {
    const Tensor& X = x.value();
    const Tensor& G = gamma.value();
    Tensor* gx = t.grad_slot(x);
    Tensor* gg = t.grad_slot(gamma);
    Tensor* gbeta = t.grad_slot(beta);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gx) (*gx)[i] += g[i] * G[i % n];
      if (gg) (*gg)[i % n] += g[i] * X[i];
      if (gbeta) (*gbeta)[i % n] += g[i];
    }
  });
}

/// Scales row r of x[N, C] by w[r].
inline Var scale_rows(const Var& x, const Var& w) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  CONNEX_REQUIRE(X.rank() == 2 && W.rank() == 1 && W.dim(0) == X.dim(0), "scale_rows",
                  "weights " + shape_str(W.shape()) + " do not match rows of " + shape_str(X.shape()));
  const std::size_t c = X.dim(1);
  Tensor out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] * W[i / c];
  return x.tape().record("scale_rows", std::move(out), {x, w}, [x, w, c](Tape& t, const Tensor& g) {
    const Tensor& X = x.value();
    const Tensor& W = w.value();
    Tensor* gx = t.grad_slot(x);
    Tensor* gw = t.grad_slot(w);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gx) (*gx)[i] += g[i] * W[i / c];
      if (gw) (*gw)[i / c] += g[i] * X[i];
    }
  });
}

inline double sigmoid_value(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
  return detail::unary("sigmoid", x, sigmoid_value, [](double v) {
    const double s = sigmoid_value(v);
    return s * (1.0 - s);
  });
}

inline Var relu(const Var& x) {
  return detail::unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
                       [](double v) { return v > 0 ? 1.0 : 0.0; });
}

/// log(1 + e^x), computed without overflow.
inline Var softplus(const Var& x) {
  return detail::unary("softplus", x,
                       [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
                       sigmoid_value);
}

// GELU, tanh approximation:
//   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu_value(double v) {
  return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
}

inline Var gelu(const Var& x) {
  return detail::unary("gelu", x, gelu_value, [](double v) {
    const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
  });
}

// ---------------------------------------------------------------- structural

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record("reshape", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    detail::add_into(t.grad_slot(x), g);
  });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  CONNEX_REQUIRE(!parts.empty(), "concat", "no operands");
  const Shape& first = parts.front().shape();
  CONNEX_REQUIRE(axis < first.size(), "concat", "axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    CONNEX_REQUIRE(ok, "concat", "operand " + shape_str(s) + " incompatible with " + shape_str(first) +
                    " on axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
  }
  Tensor out(out_shape);
  const auto so = detail::split_axis(out_shape, axis);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    const Tensor& P = p.value();
    const std::size_t n = P.dim(axis);
    for (std::size_t o = 0; o < so.outer; ++o)
      std::copy_n(P.values().data() + o * n * so.inner, n * so.inner,
                  out.values().data() + (o * so.n + off) * so.inner);
    off += n;
  }
  return parts.front().tape().record("concat", std::move(out), parts,
                                     [parts, offsets, so, axis](Tape& t, const Tensor& g) {
    for (std::size_t idx = 0; idx < parts.size(); ++idx) {
      Tensor* gp = t.grad_slot(parts[idx]);
      if (!gp) continue;
      const std::size_t n = parts[idx].dim(axis);
      for (std::size_t o = 0; o < so.outer; ++o)
        for (std::size_t r = 0; r < n * so.inner; ++r)
          gp->values()[o * n * so.inner + r] += g[(o * so.n + offsets[idx]) * so.inner + r];
    }
  });
}

/// x[..., begin:end, ...] along `axis`.
inline Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& shape = x.shape();
  CONNEX_REQUIRE(axis < shape.size() && begin < end && end <= shape[axis], "slice",
                  "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis " +
                  std::to_string(axis) + " of " + shape_str(shape));
  Shape out_shape = shape;
  out_shape[axis] = end - begin;
  const auto s = detail::split_axis(shape, axis);
  const std::size_t n = end - begin;
  Tensor out(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(x.value().values().data() + (o * s.n + begin) * s.inner, n * s.inner,
                out.values().data() + o * n * s.inner);
  return x.tape().record("slice", std::move(out), {x}, [x, s, n, begin](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_slot(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t r = 0; r < n * s.inner; ++r)
        gx->values()[(o * s.n + begin) * s.inner + r] += g[o * n * s.inner + r];
  });
}

/// Mean over one axis; the axis is removed from the shape.
inline Var mean(const Var& x, std::size_t axis) {
  const Shape& shape = x.shape();
  CONNEX_REQUIRE(axis < shape.size(), "mean", "axis out of range for " + shape_str(shape));
  const auto s = detail::split_axis(shape, axis);
  Shape out_shape = shape;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape);
  const Tensor& X = x.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.n; ++i)
      for (std::size_t r = 0; r < s.inner; ++r) out[o * s.inner + r] += X[(o * s.n + i) * s.inner + r];
  for (double& v : out.values()) v /= static_cast<double>(s.n);
  return x.tape().record("mean", std::move(out), {x}, [x, s](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_slot(x);
    const double inv = 1.0 / static_cast<double>(s.n);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t r = 0; r < s.inner; ++r) (*gx)[(o * s.n + i) * s.inner + r] += g[o * s.inner + r] * inv;
  });
}

inline Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  return x.tape().record("sum", Tensor::scalar(total), {x}, [x](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_slot(x);
    for (double& v : gx->values()) v += g[0];
  });
}

inline Var mean_all(const Var& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

/// out[index[r], :] = x[r, :] rows picked from x; works for rank 1 and 2.
inline Var gather_rows(const Var& x, std::vector<std::size_t> index) {
  const Tensor& X = x.value();
  CONNEX_REQUIRE(X.rank() == 1 || X.rank() == 2, "gather_rows", "rank must be 1 or 2");
  CONNEX_REQUIRE(!index.empty(), "gather_rows", "empty index");
  const std::size_t rows = X.dim(0);
  const std::size_t c = X.rank() == 2 ? X.dim(1) : 1;
  Shape out_shape = X.shape();
  out_shape[0] = index.size();
  Tensor out(out_shape);
  for (std::size_t e = 0; e < index.size(); ++e) {
    if (index[e] >= rows) throw ShapeError("gather_rows: index out of range");
    std::copy_n(X.values().data() + index[e] * c, c, out.values().data() + e * c);
  }
  return x.tape().record("gather_rows", std::move(out), {x},
                         [x, index = std::move(index), c](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_slot(x);
    for (std::size_t e = 0; e < index.size(); ++e)
      for (std::size_t j = 0; j < c; ++j) (*gx)[index[e] * c + j] += g[e * c + j];
  });
}

/// out[index[r], :] += x[r, :] over an output with `rows` rows (edge -> node aggregation).
inline Var scatter_sum(const Var& x, std::vector<std::size_t> index, std::size_t rows) {
  const Tensor& X = x.value();
  CONNEX_REQUIRE(X.rank() == 1 || X.rank() == 2, "scatter_sum", "rank must be 1 or 2");
  CONNEX_REQUIRE(index.size() == X.dim(0), "scatter_sum",
                  "index length " + std::to_string(index.size()) + " != rows of " + shape_str(X.shape()));
  const std::size_t c = X.rank() == 2 ? X.dim(1) : 1;
  Shape out_shape = X.shape();
  out_shape[0] = rows;
  Tensor out(out_shape);
  for (std::size_t e = 0; e < index.size(); ++e) {
    if (index[e] >= rows) throw ShapeError("scatter_sum: index out of range");
    for (std::size_t j = 0; j < c; ++j) out[index[e] * c + j] += X[e * c + j];
  }
  return x.tape().record("scatter_sum", std::move(out), {x},
                         [x, index = std::move(index), c](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_slot(x);
    for (std::size_t e = 0; e < index.size(); ++e)
      for (std::size_t j = 0; j < c; ++j) (*gx)[e * c + j] += g[index[e] * c + j];
  });
}

// ---------------------------------------------------------------- normalisation

inline Var softmax(const Var& x) {
  const Tensor& X = x.value();
  CONNEX_REQUIRE(X.rank() >= 1, "softmax", "needs rank >= 1");
  const std::size_t n = X.dim(X.rank() - 1);
  const std::size_t rows = X.size() / n;
  Tensor out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = X.values().data() + r * n;
    double* o = out.values().data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  Tensor y = out;
  return x.tape().record("softmax", std::move(out), {x}, [x, y = std::move(y), n, rows](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_slot(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) (*gx)[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalises each row over the last axis to zero mean and unit variance (no affine).
inline Var layer_norm(const Var& x) {
  const Tensor& X = x.value();
  CONNEX_REQUIRE(X.rank() >= 1, "layer_norm", "needs rank >= 1");
  const std::size_t n = X.dim(X.rank() - 1);
  const std::size_t rows = X.size() / n;
  Tensor out(X.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = X.values().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (in[j] - mu) * inv_std[r];
  }
  Tensor y = out;
  return x.tape().record("layer_norm", std::move(out), {x},
                         [x, y = std::move(y), inv_std = std::move(inv_std), n, rows](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_slot(x);
    const double dn = static_cast<double>(n);
    for (std::size_t r = 0; r < rows; ++r) {
      double gm = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        gm += g[r * n + j];
        gy += g[r * n + j] * y[r * n + j];
      }
      gm /= dn;
      gy /= dn;
      for (std::size_t j = 0; j < n; ++j)
        (*gx)[r * n + j] += inv_std[r] * (g[r * n + j] - gm - y[r * n + j] * gy);
    }
  });
}

/// Inverted dropout: zeroes with probability p and rescales survivors by 1/(1-p).
/// Identity when !train or p == 0.
template <typename Rng>
Var dropout(const Var& x, double p, bool train, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1), got " + std::to_string(p));
  if (!train || p == 0.0) return x;
  Tensor keep(x.shape());
  std::bernoulli_distribution survive(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  for (double& k : keep.values()) k = survive(rng) ? s : 0.0;
  return mul(x, x.tape().constant(std::move(keep)));
}

// ---------------------------------------------------------------- loss

/// Weighted mean cross-entropy of logits[N,K] against target distributions
/// targets[N,K] (one-hot for hard labels). Rows with weight 0 contribute
/// nothing; the mean divides by the total weight.
inline Var cross_entropy(const Var& logits, const Tensor& targets, const Tensor& weights) {
  const Tensor& Z = logits.value();
  CONNEX_REQUIRE(Z.rank() == 2 && targets.shape() == Z.shape(), "cross_entropy",
                  "targets " + shape_str(targets.shape()) + " vs logits " + shape_str(Z.shape()));
  const std::size_t rows = Z.dim(0), k = Z.dim(1);
  CONNEX_REQUIRE(weights.rank() == 1 && weights.dim(0) == rows, "cross_entropy",
                  "weights must be a vector of length " + std::to_string(rows));
  double wsum = 0.0;
  for (double w : weights.values()) wsum += w;
  Tensor prob(Z.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = Z.values().data() + r * k;
    const double mx = *std::max_element(z, z + k);
    double se = 0.0;
    for (std::size_t j = 0; j < k; ++j) se += std::exp(z[j] - mx);
    const double lse = mx + std::log(se);
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      prob[r * k + j] = std::exp(z[j] - lse);
      row -= targets[r * k + j] * (z[j] - lse);
    }
    if (wsum > 0) loss += weights[r] * row / wsum;
  }
  return logits.tape().record("cross_entropy", Tensor::scalar(loss), {logits},
                              [logits, targets, weights, prob = std::move(prob), rows, k, wsum](
                                  Tape& t, const Tensor& g) {
    if (wsum <= 0) return;
    Tensor* gz = t.grad_slot(logits);
    for (std::size_t r = 0; r < rows; ++r) {
      double tsum = 0.0;
      for (std::size_t j = 0; j < k; ++j) tsum += targets[r * k + j];
      const double w = g[0] * weights[r] / wsum;
      for (std::size_t j = 0; j < k; ++j) (*gz)[r * k + j] += w * (prob[r * k + j] * tsum - targets[r * k + j]);
    }
  });
}

/// One-hot targets for integer class labels.
inline Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
  Tensor out({labels.size(), classes});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes)
      throw ShapeError("one_hot: label out of range");
    out.at(r, static_cast<std::size_t>(labels[r])) = 1.0;
  }
  return out;
}

}  // namespace connex::ad
