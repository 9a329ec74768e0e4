#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "act/errors.hpp"
#include "act/rng.hpp"

namespace act {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
};

// Shared handle to a dense row-major tensor. Value buffers are written once
// at creation; grad buffers accumulate across backward passes until cleared.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static TensorT filled(Shape shape, T fill, bool requires_grad = false) {
    TensorT t;
    t.p_ = std::make_shared<TensorImpl<T>>();
    t.p_->shape = std::move(shape);
    validate_shape(t.p_->shape);
    t.p_->value.assign(static_cast<size_t>(shape_numel(t.p_->shape)), fill);
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static TensorT from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    TensorT t;
    t.p_ = std::make_shared<TensorImpl<T>>();
    t.p_->shape = std::move(shape);
    validate_shape(t.p_->shape);
    if (static_cast<int64_t>(data.size()) != shape_numel(t.p_->shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(t.p_->shape));
    }
    t.p_->value = std::move(data);
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  int64_t rank() const { return static_cast<int64_t>(p_->shape.size()); }
  int64_t dim(int64_t i) const { return p_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(p_->value.size()); }

  std::vector<T>& v() const { return p_->value; }
  T item() const {
    if (numel() != 1) {
      throw ArgumentError("item() on tensor of shape " + shape_str(shape()));
    }
    return p_->value[0];
  }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool rg) { p_->requires_grad = rg; }

  bool has_grad() const { return !p_->grad.empty(); }
  std::vector<T>& g() const {
    if (p_->grad.empty()) p_->grad.assign(p_->value.size(), T(0));
    return p_->grad;
  }
  void clear_grad() { p_->grad.clear(); }

  bool same_impl(const TensorT& o) const { return p_ == o.p_; }

 private:
  static void validate_shape(const Shape& s) {
    for (int64_t d : s) {
      if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
    }
    if (s.empty()) throw ShapeError("empty shape");
  }

  std::shared_ptr<TensorImpl<T>> p_;
};

namespace detail {

// Lane decomposition for reductions/softmax along one axis.
struct AxisSpan {
  int64_t outer, n, inner;
};

inline AxisSpan axis_span(const Shape& shape, int64_t axis) {
  if (axis < 0 || axis >= static_cast<int64_t>(shape.size())) {
    throw ArgumentError("axis " + std::to_string(axis) + " out of range for shape " +
                        shape_str(shape));
  }
  AxisSpan s{1, shape[static_cast<size_t>(axis)], 1};
  for (int64_t i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
inline T gelu_tanh(T x) {
  const T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T c = static_cast<T>(0.044715);
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::tanh(k * (x + c * x * x * x)));
}

template <typename T>
inline T gelu_tanh_grad(T x) {
  const T k = static_cast<T>(0.7978845608028654);
  const T c = static_cast<T>(0.044715);
  const T u = k * (x + c * x * x * x);
  const T th = std::tanh(u);
  const T sech2 = static_cast<T>(1) - th * th;
  return static_cast<T>(0.5) * (static_cast<T>(1) + th) +
         static_cast<T>(0.5) * x * sech2 * k * (static_cast<T>(1) + static_cast<T>(3) * c * x * x);
}

}  // namespace detail

// Reverse-mode tape. Operations validate shapes eagerly, compute forward
// values immediately, and record a backward closure when any input requires
// gradients. backward() clears the grads of every tensor this tape produced
// (leaves keep accumulating until the caller clears them) and then replays
// the closures in reverse insertion order.
template <typename T>
class TapeT {
 public:
  using Tensor = TensorT<T>;

  int64_t num_nodes() const { return static_cast<int64_t>(nodes_.size()); }

  void clear() { nodes_.clear(); }

  void backward(Tensor loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ArgumentError("backward requires a scalar loss");
    }
    for (auto& n : nodes_) n.out.clear_grad();
    loss.g()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->back) it->back();
    }
  }

  // ---- binary elementwise ----

  Tensor add(Tensor a, Tensor b) {
    check_same_shape("add", a, b);
    Tensor out = make_like(a, a.requires_grad() || b.requires_grad());
    const auto& av = a.v();
    const auto& bv = b.v();
    auto& ov = out.v();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (out.requires_grad()) {
      record(out, [a, b, out]() {
        const auto& og = out.g();
        if (a.requires_grad()) {
          auto& ag = a.g();
          for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
        }
        if (b.requires_grad()) {
          auto& bg = b.g();
          for (size_t i = 0; i < og.size(); ++i) bg[i] += og[i];
        }
      });
    }
    return out;
  }

  Tensor sub(Tensor a, Tensor b) {
    check_same_shape("sub", a, b);
    Tensor out = make_like(a, a.requires_grad() || b.requires_grad());
    const auto& av = a.v();
    const auto& bv = b.v();
    auto& ov = out.v();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (out.requires_grad()) {
      record(out, [a, b, out]() {
        const auto& og = out.g();
        if (a.requires_grad()) {
          auto& ag = a.g();
          for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
        }
        if (b.requires_grad()) {
          auto& bg = b.g();
          for (size_t i = 0; i < og.size(); ++i) bg[i] -= og[i];
        }
      });
    }
    return out;
  }

  Tensor mul(Tensor a, Tensor b) {
    check_same_shape("mul", a, b);
    Tensor out = make_like(a, a.requires_grad() || b.requires_grad());
    const auto& av = a.v();
    const auto& bv = b.v();
    auto& ov = out.v();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (out.requires_grad()) {
      record(out, [a, b, out]() {
        const auto& og = out.g();
        if (a.requires_grad()) {
          auto& ag = a.g();
          const auto& bv2 = b.v();
          for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i] * bv2[i];
        }
        if (b.requires_grad()) {
          auto& bg = b.g();
          const auto& av2 = a.v();
          for (size_t i = 0; i < og.size(); ++i) bg[i] += og[i] * av2[i];
        }
      });
    }
    return out;
  }

  Tensor div(Tensor a, Tensor b) {
    check_same_shape("div", a, b);
    Tensor out = make_like(a, a.requires_grad() || b.requires_grad());
    const auto& av = a.v();
    const auto& bv = b.v();
    auto& ov = out.v();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
    if (out.requires_grad()) {
      record(out, [a, b, out]() {
        const auto& og = out.g();
        const auto& av2 = a.v();
        const auto& bv2 = b.v();
        if (a.requires_grad()) {
          auto& ag = a.g();
          for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i] / bv2[i];
        }
        if (b.requires_grad()) {
          auto& bg = b.g();
          for (size_t i = 0; i < og.size(); ++i)
            bg[i] -= og[i] * av2[i] / (bv2[i] * bv2[i]);
        }
      });
    }
    return out;
  }

  // x [rows x n] + bias [n], broadcast over rows
  Tensor add_bias(Tensor x, Tensor bias) {
    if (bias.rank() != 1 || bias.dim(0) != x.dim(x.rank() - 1)) {
      throw ShapeError("add_bias: bias " + shape_str(bias.shape()) +
                       " does not match last extent of " + shape_str(x.shape()));
    }
    const int64_t n = bias.dim(0);
    const int64_t rows = x.numel() / n;
    Tensor out = make_like(x, x.requires_grad() || bias.requires_grad());
    const auto& xv = x.v();
    const auto& bv = bias.v();
    auto& ov = out.v();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < n; ++j) ov[r * n + j] = xv[r * n + j] + bv[j];
    if (out.requires_grad()) {
      record(out, [x, bias, out, rows, n]() {
        const auto& og = out.g();
        if (x.requires_grad()) {
          auto& xg = x.g();
          for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
        }
        if (bias.requires_grad()) {
          auto& bg = bias.g();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < n; ++j) bg[j] += og[r * n + j];
        }
      });
    }
    return out;
  }

  // ---- scalar-constant ops ----

  Tensor scale(Tensor x, T c) {
    Tensor out = make_like(x, x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
    if (out.requires_grad()) {
      record(out, [x, out, c]() {
        const auto& og = out.g();
        auto& xg = x.g();
        for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i] * c;
      });
    }
    return out;
  }

  Tensor add_scalar(Tensor x, T c) {
    Tensor out = make_like(x, x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + c;
    if (out.requires_grad()) {
      record(out, [x, out]() {
        const auto& og = out.g();
        auto& xg = x.g();
        for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
      });
    }
    return out;
  }

  // ---- unary elementwise ----

  Tensor relu(Tensor x) {
    Tensor out = make_like(x, x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
    if (out.requires_grad()) {
      record(out, [x, out]() {
        const auto& og = out.g();
        const auto& xv2 = x.v();
        auto& xg = x.g();
        for (size_t i = 0; i < og.size(); ++i)
          if (xv2[i] > T(0)) xg[i] += og[i];
      });
    }
    return out;
  }

  Tensor gelu(Tensor x) {
    Tensor out = make_like(x, x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = detail::gelu_tanh(xv[i]);
    if (out.requires_grad()) {
      record(out, [x, out]() {
        const auto& og = out.g();
        const auto& xv2 = x.v();
        auto& xg = x.g();
        for (size_t i = 0; i < og.size(); ++i)
          xg[i] += og[i] * detail::gelu_tanh_grad(xv2[i]);
      });
    }
    return out;
  }

  Tensor exp(Tensor x) {
    Tensor out = make_like(x, x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(xv[i]);
    if (out.requires_grad()) {
      record(out, [x, out]() {
        const auto& og = out.g();
        const auto& ov2 = out.v();
        auto& xg = x.g();
        for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i] * ov2[i];
      });
    }
    return out;
  }

  Tensor log(Tensor x) {
    Tensor out = make_like(x, x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(xv[i]);
    if (out.requires_grad()) {
      record(out, [x, out]() {
        const auto& og = out.g();
        const auto& xv2 = x.v();
        auto& xg = x.g();
        for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i] / xv2[i];
      });
    }
    return out;
  }

  Tensor sqrt(Tensor x) {
    Tensor out = make_like(x, x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::sqrt(xv[i]);
    if (out.requires_grad()) {
      record(out, [x, out]() {
        const auto& og = out.g();
        const auto& ov2 = out.v();
        auto& xg = x.g();
        for (size_t i = 0; i < og.size(); ++i)
          xg[i] += og[i] * T(0.5) / ov2[i];
      });
    }
    return out;
  }

  // Inverted dropout; active only when training. Mask is drawn once at
  // forward time so backward reuses the same pattern.
  Tensor dropout(Tensor x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw ArgumentError("dropout probability must be in [0,1)");
    if (!training || p == 0.0) return x;
    Tensor out = make_like(x, x.requires_grad());
    auto mask = std::make_shared<std::vector<uint8_t>>(x.v().size());
    const T inv_keep = static_cast<T>(1.0 / (1.0 - p));
    const auto& xv = x.v();
    auto& ov = out.v();
    for (size_t i = 0; i < ov.size(); ++i) {
      const bool keep = rng.uniform() >= p;
      (*mask)[i] = keep;
      ov[i] = keep ? xv[i] * inv_keep : T(0);
    }
    if (out.requires_grad()) {
      record(out, [x, out, mask, inv_keep]() {
        const auto& og = out.g();
        auto& xg = x.g();
        for (size_t i = 0; i < og.size(); ++i)
          if ((*mask)[i]) xg[i] += og[i] * inv_keep;
      });
    }
    return out;
  }

  // ---- linear algebra ----

  Tensor matmul(Tensor a, Tensor b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
      throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    }
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make({m, n}, a.requires_grad() || b.requires_grad());
    const T* av = a.v().data();
    const T* bv = b.v().data();
    T* ov = out.v().data();
    for (int64_t i = 0; i < m; ++i) {
      T* orow = ov + i * n;
      const T* arow = av + i * k;
      for (int64_t kk = 0; kk < k; ++kk) {
        const T aik = arow[kk];
        const T* brow = bv + kk * n;
        for (int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
      }
    }
    if (out.requires_grad()) {
      record(out, [a, b, out, m, k, n]() {
        const T* og = out.g().data();
        if (a.requires_grad()) {
          T* ag = a.g().data();
          const T* bv2 = b.v().data();
          for (int64_t i = 0; i < m; ++i) {
            const T* grow = og + i * n;
            T* arow = ag + i * k;
            for (int64_t kk = 0; kk < k; ++kk) {
              const T* brow = bv2 + kk * n;
              T acc = T(0);
              for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              arow[kk] += acc;
            }
          }
        }
        if (b.requires_grad()) {
          T* bg = b.g().data();
          const T* av2 = a.v().data();
          for (int64_t i = 0; i < m; ++i) {
            const T* grow = og + i * n;
            const T* arow = av2 + i * k;
            for (int64_t kk = 0; kk < k; ++kk) {
              const T aik = arow[kk];
              T* brow = bg + kk * n;
              for (int64_t j = 0; j < n; ++j) brow[j] += aik * grow[j];
            }
          }
        }
      });
    }
    return out;
  }

  Tensor transpose(Tensor x) {
    if (x.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(x.shape()));
    const int64_t m = x.dim(0), n = x.dim(1);
    Tensor out = make({n, m}, x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) ov[j * m + i] = xv[i * n + j];
    if (out.requires_grad()) {
      record(out, [x, out, m, n]() {
        const auto& og = out.g();
        auto& xg = x.g();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) xg[i * n + j] += og[j * m + i];
      });
    }
    return out;
  }

  // ---- structure ----

  Tensor reshape(Tensor x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
      throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                       shape_str(shape));
    }
    Tensor out = make(std::move(shape), x.requires_grad());
    out.v() = x.v();
    if (out.requires_grad()) {
      record(out, [x, out]() {
        const auto& og = out.g();
        auto& xg = x.g();
        for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
      });
    }
    return out;
  }

  Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
    if (parts.empty()) throw ArgumentError("concat of zero tensors");
    const Shape& s0 = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int64_t>(s0.size())) {
      throw ArgumentError("concat axis out of range");
    }
    Shape out_shape = s0;
    bool rg = false;
    int64_t total_axis = 0;
    for (const auto& p : parts) {
      if (p.rank() != parts[0].rank()) throw ShapeError("concat: rank mismatch");
      for (int64_t d = 0; d < p.rank(); ++d) {
        if (d != axis && p.dim(d) != s0[static_cast<size_t>(d)]) {
          throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                           shape_str(s0));
        }
      }
      total_axis += p.dim(axis);
      rg = rg || p.requires_grad();
    }
    out_shape[static_cast<size_t>(axis)] = total_axis;
    Tensor out = make(out_shape, rg);
    const auto span = detail::axis_span(out_shape, axis);
    auto& ov = out.v();
    auto offsets = std::make_shared<std::vector<int64_t>>();
    int64_t off = 0;
    for (const auto& p : parts) {
      offsets->push_back(off);
      const int64_t pn = p.dim(axis);
      const auto& pv = p.v();
      for (int64_t o = 0; o < span.outer; ++o) {
        const T* src = pv.data() + o * pn * span.inner;
        T* dst = ov.data() + (o * span.n + off) * span.inner;
        std::copy(src, src + pn * span.inner, dst);
      }
      off += pn;
    }
    if (rg) {
      auto parts_copy = std::make_shared<std::vector<Tensor>>(parts);
      record(out, [parts_copy, offsets, out, span, axis]() {
        const auto& og = out.g();
        for (size_t pi = 0; pi < parts_copy->size(); ++pi) {
          Tensor& p = (*parts_copy)[pi];
          if (!p.requires_grad()) continue;
          const int64_t pn = p.dim(axis);
          const int64_t off2 = (*offsets)[pi];
          auto& pg = p.g();
          for (int64_t o = 0; o < span.outer; ++o) {
            const T* src = og.data() + (o * span.n + off2) * span.inner;
            T* dst = pg.data() + o * pn * span.inner;
            for (int64_t i = 0; i < pn * span.inner; ++i) dst[i] += src[i];
          }
        }
      });
    }
    return out;
  }

  Tensor slice(Tensor x, int64_t axis, int64_t start, int64_t len) {
    const auto span = detail::axis_span(x.shape(), axis);
    if (start < 0 || len <= 0 || start + len > span.n) {
      throw ArgumentError("slice [" + std::to_string(start) + "," +
                          std::to_string(start + len) + ") out of range for axis extent " +
                          std::to_string(span.n));
    }
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out = make(out_shape, x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (int64_t o = 0; o < span.outer; ++o) {
      const T* src = xv.data() + (o * span.n + start) * span.inner;
      T* dst = ov.data() + o * len * span.inner;
      std::copy(src, src + len * span.inner, dst);
    }
    if (out.requires_grad()) {
      record(out, [x, out, span, start, len]() {
        const auto& og = out.g();
        auto& xg = x.g();
        for (int64_t o = 0; o < span.outer; ++o) {
          const T* src = og.data() + o * len * span.inner;
          T* dst = xg.data() + (o * span.n + start) * span.inner;
          for (int64_t i = 0; i < len * span.inner; ++i) dst[i] += src[i];
        }
      });
    }
    return out;
  }

  Tensor gather_rows(Tensor x, std::vector<int64_t> indices) {
    if (x.rank() < 1) throw ShapeError("gather_rows expects rank >= 1");
    const int64_t rows = x.dim(0);
    const int64_t inner = x.numel() / rows;
    for (int64_t idx : indices) {
      if (idx < 0 || idx >= rows) {
        throw ArgumentError("gather_rows index " + std::to_string(idx) +
                            " out of range [0," + std::to_string(rows) + ")");
      }
    }
    Shape out_shape = x.shape();
    out_shape[0] = static_cast<int64_t>(indices.size());
    if (indices.empty()) throw ArgumentError("gather_rows with empty index list");
    Tensor out = make(out_shape, x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (size_t r = 0; r < indices.size(); ++r) {
      std::copy(xv.data() + indices[r] * inner, xv.data() + (indices[r] + 1) * inner,
                ov.data() + static_cast<int64_t>(r) * inner);
    }
    if (out.requires_grad()) {
      auto idx = std::make_shared<std::vector<int64_t>>(std::move(indices));
      record(out, [x, out, idx, inner]() {
        const auto& og = out.g();
        auto& xg = x.g();
        for (size_t r = 0; r < idx->size(); ++r) {
          const T* src = og.data() + static_cast<int64_t>(r) * inner;
          T* dst = xg.data() + (*idx)[r] * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
      });
    }
    return out;
  }

  // ---- reductions ----

  // Gradient is routed to the first maximizing element of each lane.
  Tensor max_over_axis(Tensor x, int64_t axis, std::vector<int64_t>* argmax_out = nullptr) {
    const auto span = detail::axis_span(x.shape(), axis);
    Shape out_shape = reduced_shape(x.shape(), axis);
    Tensor out = make(out_shape, x.requires_grad());
    auto argmax = std::make_shared<std::vector<int64_t>>(
        static_cast<size_t>(span.outer * span.inner));
    const auto& xv = x.v();
    auto& ov = out.v();
    for (int64_t o = 0; o < span.outer; ++o) {
      for (int64_t in = 0; in < span.inner; ++in) {
        const T* base = xv.data() + o * span.n * span.inner + in;
        T best = base[0];
        int64_t best_i = 0;
        for (int64_t i = 1; i < span.n; ++i) {
          const T v = base[i * span.inner];
          if (v > best) {
            best = v;
            best_i = i;
          }
        }
        ov[o * span.inner + in] = best;
        (*argmax)[static_cast<size_t>(o * span.inner + in)] = best_i;
      }
    }
    if (argmax_out) *argmax_out = *argmax;
    if (out.requires_grad()) {
      record(out, [x, out, argmax, span]() {
        const auto& og = out.g();
        auto& xg = x.g();
        for (int64_t o = 0; o < span.outer; ++o)
          for (int64_t in = 0; in < span.inner; ++in) {
            const int64_t i = (*argmax)[static_cast<size_t>(o * span.inner + in)];
            xg[o * span.n * span.inner + i * span.inner + in] += og[o * span.inner + in];
          }
      });
    }
    return out;
  }

  Tensor sum_over_axis(Tensor x, int64_t axis) {
    const auto span = detail::axis_span(x.shape(), axis);
    Tensor out = make(reduced_shape(x.shape(), axis), x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (int64_t o = 0; o < span.outer; ++o)
      for (int64_t i = 0; i < span.n; ++i)
        for (int64_t in = 0; in < span.inner; ++in)
          ov[o * span.inner + in] += xv[o * span.n * span.inner + i * span.inner + in];
    if (out.requires_grad()) {
      record(out, [x, out, span]() {
        const auto& og = out.g();
        auto& xg = x.g();
        for (int64_t o = 0; o < span.outer; ++o)
          for (int64_t i = 0; i < span.n; ++i)
            for (int64_t in = 0; in < span.inner; ++in)
              xg[o * span.n * span.inner + i * span.inner + in] += og[o * span.inner + in];
      });
    }
    return out;
  }

  Tensor mean_over_axis(Tensor x, int64_t axis) {
    const int64_t n = x.shape()[static_cast<size_t>(axis)];
    return scale(sum_over_axis(x, axis), T(1) / static_cast<T>(n));
  }

  Tensor sum_all(Tensor x) {
    Tensor out = make({1}, x.requires_grad());
    const auto& xv = x.v();
    T acc = T(0);
    for (T v : xv) acc += v;
    out.v()[0] = acc;
    if (out.requires_grad()) {
      record(out, [x, out]() {
        const T g = out.g()[0];
        auto& xg = x.g();
        for (size_t i = 0; i < xg.size(); ++i) xg[i] += g;
      });
    }
    return out;
  }

  Tensor mean_all(Tensor x) { return scale(sum_all(x), T(1) / static_cast<T>(x.numel())); }

  // ---- normalization ----

  Tensor softmax(Tensor x, int64_t axis) {
    const auto span = detail::axis_span(x.shape(), axis);
    Tensor out = make(x.shape(), x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (int64_t o = 0; o < span.outer; ++o)
      for (int64_t in = 0; in < span.inner; ++in) {
        const int64_t base = o * span.n * span.inner + in;
        T mx = xv[base];
        for (int64_t i = 1; i < span.n; ++i)
          mx = std::max(mx, xv[base + i * span.inner]);
        T z = T(0);
        for (int64_t i = 0; i < span.n; ++i) {
          const T e = std::exp(xv[base + i * span.inner] - mx);
          ov[base + i * span.inner] = e;
          z += e;
        }
        const T inv = T(1) / z;
        for (int64_t i = 0; i < span.n; ++i) ov[base + i * span.inner] *= inv;
      }
    if (out.requires_grad()) {
      record(out, [x, out, span]() {
        const auto& og = out.g();
        const auto& ov2 = out.v();
        auto& xg = x.g();
        for (int64_t o = 0; o < span.outer; ++o)
          for (int64_t in = 0; in < span.inner; ++in) {
            const int64_t base = o * span.n * span.inner + in;
            T dot = T(0);
            for (int64_t i = 0; i < span.n; ++i)
              dot += og[base + i * span.inner] * ov2[base + i * span.inner];
            for (int64_t i = 0; i < span.n; ++i)
              xg[base + i * span.inner] +=
                  ov2[base + i * span.inner] * (og[base + i * span.inner] - dot);
          }
      });
    }
    return out;
  }

  Tensor log_softmax(Tensor x, int64_t axis) {
    const auto span = detail::axis_span(x.shape(), axis);
    Tensor out = make(x.shape(), x.requires_grad());
    const auto& xv = x.v();
    auto& ov = out.v();
    for (int64_t o = 0; o < span.outer; ++o)
      for (int64_t in = 0; in < span.inner; ++in) {
        const int64_t base = o * span.n * span.inner + in;
        T mx = xv[base];
        for (int64_t i = 1; i < span.n; ++i)
          mx = std::max(mx, xv[base + i * span.inner]);
        T z = T(0);
        for (int64_t i = 0; i < span.n; ++i) z += std::exp(xv[base + i * span.inner] - mx);
        const T lz = std::log(z) + mx;
        for (int64_t i = 0; i < span.n; ++i)
          ov[base + i * span.inner] = xv[base + i * span.inner] - lz;
      }
    if (out.requires_grad()) {
      record(out, [x, out, span]() {
        const auto& og = out.g();
        const auto& ov2 = out.v();
        auto& xg = x.g();
        for (int64_t o = 0; o < span.outer; ++o)
          for (int64_t in = 0; in < span.inner; ++in) {
            const int64_t base = o * span.n * span.inner + in;
            T gsum = T(0);
            for (int64_t i = 0; i < span.n; ++i) gsum += og[base + i * span.inner];
            for (int64_t i = 0; i < span.n; ++i)
              xg[base + i * span.inner] +=
                  og[base + i * span.inner] - std::exp(ov2[base + i * span.inner]) * gsum;
          }
      });
    }
    return out;
  }

  static constexpr T kLayerNormEps = static_cast<T>(1e-5);

  // Normalizes over the last axis, then applies gain/bias.
  Tensor layer_norm(Tensor x, Tensor gain, Tensor bias, T eps = kLayerNormEps) {
    const int64_t c = x.dim(x.rank() - 1);
    if (gain.rank() != 1 || gain.dim(0) != c || bias.rank() != 1 || bias.dim(0) != c) {
      throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                       shape_str(bias.shape()) + " do not match last extent of " +
                       shape_str(x.shape()));
    }
    const int64_t rows = x.numel() / c;
    const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    Tensor out = make(x.shape(), rg);
    auto xhat = std::make_shared<std::vector<T>>(x.v().size());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    const auto& xv = x.v();
    const auto& gv = gain.v();
    const auto& bv = bias.v();
    auto& ov = out.v();
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = xv.data() + r * c;
      T mean = T(0);
      for (int64_t j = 0; j < c; ++j) mean += row[j];
      mean /= static_cast<T>(c);
      T var = T(0);
      for (int64_t j = 0; j < c; ++j) {
        const T d = row[j] - mean;
        var += d * d;
      }
      var /= static_cast<T>(c);
      const T istd = T(1) / std::sqrt(var + eps);
      (*inv_std)[static_cast<size_t>(r)] = istd;
      for (int64_t j = 0; j < c; ++j) {
        const T h = (row[j] - mean) * istd;
        (*xhat)[static_cast<size_t>(r * c + j)] = h;
        ov[r * c + j] = h * gv[j] + bv[j];
      }
    }
    if (rg) {
      record(out, [x, gain, bias, out, xhat, inv_std, rows, c]() {
        const auto& og = out.g();
        const auto& gv2 = gain.v();
        if (bias.requires_grad()) {
          auto& bg = bias.g();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < c; ++j) bg[j] += og[r * c + j];
        }
        if (gain.requires_grad()) {
          auto& gg = gain.g();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < c; ++j)
              gg[j] += og[r * c + j] * (*xhat)[static_cast<size_t>(r * c + j)];
        }
        if (x.requires_grad()) {
          auto& xg = x.g();
          for (int64_t r = 0; r < rows; ++r) {
            T mean_dh = T(0), mean_dh_h = T(0);
            for (int64_t j = 0; j < c; ++j) {
              const T dh = og[r * c + j] * gv2[j];
              mean_dh += dh;
              mean_dh_h += dh * (*xhat)[static_cast<size_t>(r * c + j)];
            }
            mean_dh /= static_cast<T>(c);
            mean_dh_h /= static_cast<T>(c);
            const T istd = (*inv_std)[static_cast<size_t>(r)];
            for (int64_t j = 0; j < c; ++j) {
              const T dh = og[r * c + j] * gv2[j];
              const T h = (*xhat)[static_cast<size_t>(r * c + j)];
              xg[r * c + j] += istd * (dh - mean_dh - h * mean_dh_h);
            }
          }
        }
      });
    }
    return out;
  }

  // Row-wise cosine similarity between a and a constant target b, both
  // [N, C]. The guarded denominator |a||b|(1+1e-6) + 1e-12 keeps every output
  // strictly inside (-1, 1), so 1 - cos stays inside (0, 2); accumulation
  // runs in double regardless of T so float rounding cannot break the bound.
  Tensor cosine_rows(Tensor a, Tensor b) {
    check_same_shape("cosine_rows", a, b);
    if (a.rank() != 2) throw ShapeError("cosine_rows expects rank 2");
    if (b.requires_grad()) {
      throw ArgumentError("cosine_rows treats the second argument as a constant target");
    }
    const int64_t n = a.dim(0), c = a.dim(1);
    Tensor out = make({n}, a.requires_grad());
    const auto& av = a.v();
    const auto& bv = b.v();
    auto& ov = out.v();
    auto rows = std::make_shared<std::vector<std::array<double, 3>>>(
        static_cast<size_t>(n));  // dot, |a|, |b| per row
    for (int64_t r = 0; r < n; ++r) {
      double dot = 0, na2 = 0, nb2 = 0;
      for (int64_t j = 0; j < c; ++j) {
        const double x = static_cast<double>(av[r * c + j]);
        const double y = static_cast<double>(bv[r * c + j]);
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
      }
      const double na = std::sqrt(na2), nb = std::sqrt(nb2);
      (*rows)[static_cast<size_t>(r)] = {dot, na, nb};
      ov[r] = static_cast<T>(dot / (na * nb * (1.0 + 1e-6) + 1e-12));
    }
    if (out.requires_grad()) {
      record(out, [a, b, out, rows, n, c]() {
        const auto& og = out.g();
        const auto& av2 = a.v();
        const auto& bv2 = b.v();
        auto& ag = a.g();
        for (int64_t r = 0; r < n; ++r) {
          const auto [dot, na, nb] = (*rows)[static_cast<size_t>(r)];
          if (na == 0.0) continue;  // flat zero row: treat as constant 0 cosine
          const double denom = na * nb * (1.0 + 1e-6) + 1e-12;
          const double g = static_cast<double>(og[r]);
          const double coef = dot * nb * (1.0 + 1e-6) / (na * denom * denom);
          for (int64_t j = 0; j < c; ++j) {
            ag[r * c + j] += static_cast<T>(
                g * (static_cast<double>(bv2[r * c + j]) / denom -
                     coef * static_cast<double>(av2[r * c + j])));
          }
        }
      });
    }
    return out;
  }

  // Forward emits exact one-hot rows (argmax over the last axis); backward
  // passes gradients through to the soft input unchanged.
  Tensor straight_through_onehot(Tensor soft) {
    const int64_t axis = soft.rank() - 1;
    const auto span = detail::axis_span(soft.shape(), axis);
    Tensor out = make(soft.shape(), soft.requires_grad());
    const auto& sv = soft.v();
    auto& ov = out.v();
    for (int64_t o = 0; o < span.outer; ++o) {
      const T* row = sv.data() + o * span.n;
      int64_t best = 0;
      for (int64_t i = 1; i < span.n; ++i)
        if (row[i] > row[best]) best = i;
      ov[o * span.n + best] = T(1);
    }
    if (out.requires_grad()) {
      record(out, [soft, out]() {
        const auto& og = out.g();
        auto& sg = soft.g();
        for (size_t i = 0; i < og.size(); ++i) sg[i] += og[i];
      });
    }
    return out;
  }

 private:
  struct Node {
    TensorT<T> out;
    std::function<void()> back;
  };

  static Shape reduced_shape(const Shape& s, int64_t axis) {
    Shape out;
    for (int64_t i = 0; i < static_cast<int64_t>(s.size()); ++i)
      if (i != axis) out.push_back(s[static_cast<size_t>(i)]);
    if (out.empty()) out.push_back(1);
    return out;
  }

  static void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
    }
  }

  Tensor make(Shape shape, bool rg) {
    Tensor t = Tensor::zeros(std::move(shape));
    t.set_requires_grad(rg);
    return t;
  }

  Tensor make_like(const Tensor& x, bool rg) { return make(x.shape(), rg); }

  void record(Tensor out, std::function<void()> fn) {
    nodes_.push_back(Node{std::move(out), std::move(fn)});
  }

  std::vector<Node> nodes_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

// ---- plain init helpers (not recorded) ----

template <typename T>
void fill_normal(TensorT<T>& t, Rng& rng, double stddev, double mean = 0.0) {
  for (auto& v : t.v()) v = static_cast<T>(mean + stddev * rng.normal());
}

template <typename T>
void fill_uniform(TensorT<T>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.v()) v = static_cast<T>(rng.uniform(lo, hi));
}

// Glorot/Xavier uniform for a [fan_in x fan_out] matrix.
template <typename T>
void fill_xavier(TensorT<T>& t, Rng& rng) {
  if (t.rank() != 2) throw ShapeError("xavier init expects rank 2");
  const double limit = std::sqrt(6.0 / static_cast<double>(t.dim(0) + t.dim(1)));
  fill_uniform(t, rng, -limit, limit);
}

}  // namespace act
