#pragma once

// Reverse-mode differentiation over the handful of tensor operations the
// generator and loss network are built from.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "spyr/blas.hpp"
#include "spyr/error.hpp"
#include "spyr/tensor.hpp"

namespace spyr {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a value in the computation graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  /// For optimizers and loaders only: leaves are the one mutable cell in the graph.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }
  /// Accumulated gradient; zeros when nothing reached this value.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Var<T> make_op(Tensor<T> value, std::initializer_list<Var<T>> parents, std::function<void(Node<T>&)> backward) {
  require(value.all_finite(), "non_finite", "operation produced a non-finite value");
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& p : parents) node->parents.push_back(p.node_ptr());
      node->backward = std::move(backward);
    }
  }
  return Var<T>(std::move(node));
}

template <typename T>
bool wants(const Node<T>& n, std::size_t i) {
  return n.parents[i] && n.parents[i]->requires_grad;
}

}  // namespace detail

/// Runs reverse accumulation from a scalar. Leaf gradients accumulate across calls.
template <typename T>
void backward(const Var<T>& loss) {
  require(loss.defined() && loss.value().size() == 1, "shape",
          "backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->backward) continue;
    if (n->grad.empty()) continue;
    n->backward(*n);
    n->grad = Tensor<T>();
  }
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "shape", "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (detail::wants(n, k)) {
        auto& g = n.parents[k]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "shape", "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    if (detail::wants(n, 0)) {
      auto& g = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants(n, 1)) {
      auto& g = n.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "shape", "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (detail::wants(n, 0)) {
      auto& g = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (detail::wants(n, 1)) {
      auto& g = n.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return detail::make_op<T>(std::move(out), {a}, [s](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
  });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= v;
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& n) {
    const auto& x = n.parents[0]->value;
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * x[i] * n.grad[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& n) {
    const auto& x = n.parents[0]->value;
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T(0)) g[i] += n.grad[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) {
    if (v >= T(0)) {
      v = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      v = e / (T(1) + e);
    }
  }
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = n.value[i];
      g[i] += n.grad[i] * y * (T(1) - y);
    }
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  return detail::make_op<T>(Tensor<T>::scalar(s), {a}, [](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    const T d = n.grad[0];
    for (auto& v : g.data()) v += d;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Mean squared difference over all elements.
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  return mean(square(sub(a, b)));
}

// ---------------------------------------------------------------- convolution

namespace detail {

struct ConvGeom {
  std::size_t n, cin, h, w, cout, k, stride, pad, ho, wo;
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * plane;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.w)) ? T(0) : src[iw];
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* dx) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * plane;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          T* dst = dx + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
          const T* src = row + oh * g.wo;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            if (iw >= 0 && iw < static_cast<long>(g.w)) dst[iw] += src[ow];
          }
        }
      }
}

// Stride-1 convolutions run as k*k GEMMs over shifted views of a zero-padded
// copy of the input. Each padded channel occupies `chan` = Hp*Wp + k slots so
// views that run past the last row stay inside their own channel; the extra
// Wp - Wo "wide" output columns are discarded (forward) or zero (backward).
template <typename T>
struct PaddedPlanes {
  std::size_t hp, wp, chan;
  std::vector<T> buf;

  PaddedPlanes(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t pad, std::size_t k)
      : hp(h + 2 * pad), wp(w + 2 * pad), chan(hp * wp + k), buf(c * chan, T(0)) {
    if (!x) return;
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t i = 0; i < h; ++i)
        std::copy(x + (ci * h + i) * w, x + (ci * h + i + 1) * w, buf.data() + ci * chan + (i + pad) * wp + pad);
  }
};

// Kernel reordered to k*k blocks of Cout x Cin.
template <typename T>
std::vector<T> kernel_by_tap(const T* w, const ConvGeom& g) {
  const std::size_t kk = g.k * g.k;
  std::vector<T> out(kk * g.cout * g.cin);
  for (std::size_t co = 0; co < g.cout; ++co)
    for (std::size_t ci = 0; ci < g.cin; ++ci)
      for (std::size_t t = 0; t < kk; ++t) out[(t * g.cout + co) * g.cin + ci] = w[(co * g.cin + ci) * kk + t];
  return out;
}

template <typename T>
void conv_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, const ConvGeom& g, Tensor<T>& out) {
  const std::size_t in_sz = g.cin * g.h * g.w;
  const std::size_t out_plane = g.ho * g.wo;
  const int cout = static_cast<int>(g.cout), cin = static_cast<int>(g.cin);
  if (g.stride == 1) {
    const auto taps = kernel_by_tap(w.data().data(), g);
    for (std::size_t n = 0; n < g.n; ++n) {
      PaddedPlanes<T> xp(x.data().data() + n * in_sz, g.cin, g.h, g.w, g.pad, g.k);
      const std::size_t q = g.ho * xp.wp;
      std::vector<T> wide(g.cout * q, T(0));
      for (std::size_t ki = 0; ki < g.k; ++ki)
        for (std::size_t kj = 0; kj < g.k; ++kj) {
          const std::size_t t = ki * g.k + kj;
          blas::gemm(false, false, cout, static_cast<int>(q), cin, T(1), taps.data() + t * g.cout * g.cin, cin,
                     xp.buf.data() + ki * xp.wp + kj, static_cast<int>(xp.chan), T(1), wide.data(), static_cast<int>(q));
        }
      T* o = out.data().data() + n * g.cout * out_plane;
      for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t oh = 0; oh < g.ho; ++oh)
          std::copy_n(wide.data() + co * q + oh * xp.wp, g.wo, o + co * out_plane + oh * g.wo);
    }
  } else {
    const std::size_t rows = g.cin * g.k * g.k;
    std::vector<T> col(rows * out_plane);
    for (std::size_t n = 0; n < g.n; ++n) {
      im2col(x.data().data() + n * in_sz, g, col.data());
      blas::gemm(false, false, cout, static_cast<int>(out_plane), static_cast<int>(rows), T(1), w.data().data(),
                 static_cast<int>(rows), col.data(), static_cast<int>(out_plane), T(0),
                 out.data().data() + n * g.cout * out_plane, static_cast<int>(out_plane));
    }
  }
  if (bias) {
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t co = 0; co < g.cout; ++co) {
        T* o = out.data().data() + (n * g.cout + co) * out_plane;
        const T b = (*bias)[co];
        for (std::size_t i = 0; i < out_plane; ++i) o[i] += b;
      }
  }
}

template <typename T>
void conv_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, const ConvGeom& g, Tensor<T>* dx,
                   Tensor<T>* dw, Tensor<T>* db) {
  const std::size_t in_sz = g.cin * g.h * g.w;
  const std::size_t out_plane = g.ho * g.wo;
  const std::size_t kk = g.k * g.k;
  const int cout = static_cast<int>(g.cout), cin = static_cast<int>(g.cin);

  if (db) {
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t co = 0; co < g.cout; ++co) {
        const T* d = dy.data().data() + (n * g.cout + co) * out_plane;
        T s = 0;
        for (std::size_t i = 0; i < out_plane; ++i) s += d[i];
        (*db)[co] += s;
      }
  }
  if (!dx && !dw) return;

  if (g.stride == 1) {
    const auto taps = kernel_by_tap(w.data().data(), g);
    std::vector<T> tmp(g.cout * g.cin);
    for (std::size_t n = 0; n < g.n; ++n) {
      PaddedPlanes<T> xp(dw ? x.data().data() + n * in_sz : nullptr, g.cin, g.h, g.w, g.pad, g.k);
      const std::size_t q = g.ho * xp.wp;
      std::vector<T> wide(g.cout * q, T(0));
      const T* d = dy.data().data() + n * g.cout * out_plane;
      for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t oh = 0; oh < g.ho; ++oh)
          std::copy_n(d + co * out_plane + oh * g.wo, g.wo, wide.data() + co * q + oh * xp.wp);

      if (dw) {
        for (std::size_t ki = 0; ki < g.k; ++ki)
          for (std::size_t kj = 0; kj < g.k; ++kj) {
            const std::size_t t = ki * g.k + kj;
            blas::gemm(false, true, cout, cin, static_cast<int>(q), T(1), wide.data(), static_cast<int>(q),
                       xp.buf.data() + ki * xp.wp + kj, static_cast<int>(xp.chan), T(0), tmp.data(), cin);
            for (std::size_t co = 0; co < g.cout; ++co)
              for (std::size_t ci = 0; ci < g.cin; ++ci) (*dw)[(co * g.cin + ci) * kk + t] += tmp[co * g.cin + ci];
          }
      }
      if (dx) {
        PaddedPlanes<T> dxp(nullptr, g.cin, g.h, g.w, g.pad, g.k);
        for (std::size_t ki = 0; ki < g.k; ++ki)
          for (std::size_t kj = 0; kj < g.k; ++kj) {
            const std::size_t t = ki * g.k + kj;
            blas::gemm(true, false, cin, static_cast<int>(q), cout, T(1), taps.data() + t * g.cout * g.cin, cin,
                       wide.data(), static_cast<int>(q), T(1), dxp.buf.data() + ki * xp.wp + kj,
                       static_cast<int>(dxp.chan));
          }
        T* dst = dx->data().data() + n * in_sz;
        for (std::size_t ci = 0; ci < g.cin; ++ci)
          for (std::size_t i = 0; i < g.h; ++i) {
            const T* src = dxp.buf.data() + ci * dxp.chan + (i + g.pad) * dxp.wp + g.pad;
            T* row = dst + (ci * g.h + i) * g.w;
            for (std::size_t j = 0; j < g.w; ++j) row[j] += src[j];
          }
      }
    }
    return;
  }

  const std::size_t rows = g.cin * kk;
  std::vector<T> col(rows * out_plane);
  std::vector<T> dcol(dx ? rows * out_plane : 0);
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* d = dy.data().data() + n * g.cout * out_plane;
    if (dw) {
      im2col(x.data().data() + n * in_sz, g, col.data());
      blas::gemm(false, true, cout, static_cast<int>(rows), static_cast<int>(out_plane), T(1), d,
                 static_cast<int>(out_plane), col.data(), static_cast<int>(out_plane), T(1), dw->data().data(),
                 static_cast<int>(rows));
    }
    if (dx) {
      blas::gemm(true, false, static_cast<int>(rows), static_cast<int>(out_plane), cout, T(1), w.data().data(),
                 static_cast<int>(rows), d, static_cast<int>(out_plane), T(0), dcol.data(), static_cast<int>(out_plane));
      col2im(dcol.data(), g, dx->data().data() + n * in_sz);
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. `bias` may be an undefined Var.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride, std::size_t padding) {
  const auto& x = input.value();
  const auto& w = kernel.value();
  require(x.rank() == 4, "shape", "conv2d input must be N x C x H x W, got " + shape_str(x.shape()));
  require(w.rank() == 4 && w.dim(2) == w.dim(3), "shape", "conv2d kernel must be Cout x Cin x k x k");
  require(stride >= 1, "shape", "conv2d stride must be positive");
  require(x.dim(1) == w.dim(1), "shape",
          "conv2d channel mismatch: input has " + std::to_string(x.dim(1)) + ", kernel expects " +
              std::to_string(w.dim(1)));
  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, padding, 0, 0};
  const long span_h = static_cast<long>(g.h + 2 * g.pad) - static_cast<long>(g.k);
  const long span_w = static_cast<long>(g.w + 2 * g.pad) - static_cast<long>(g.k);
  require(span_h >= 0 && span_w >= 0, "shape", "conv2d output size would be non-positive");
  g.ho = static_cast<std::size_t>(span_h) / stride + 1;
  g.wo = static_cast<std::size_t>(span_w) / stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.value().size() == g.cout, "shape", "conv2d bias length must equal Cout");

  Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  detail::conv_forward(x, w, has_bias ? &bias.value() : nullptr, g, out);

  auto back = [g, has_bias](Node<T>& n) {
    const auto& xv = n.parents[0]->value;
    const auto& wv = n.parents[1]->value;
    Tensor<T>* dx = detail::wants(n, 0) ? &n.parents[0]->grad_buffer() : nullptr;
    Tensor<T>* dw = detail::wants(n, 1) ? &n.parents[1]->grad_buffer() : nullptr;
    Tensor<T>* db = (has_bias && detail::wants(n, 2)) ? &n.parents[2]->grad_buffer() : nullptr;
    detail::conv_backward(xv, wv, n.grad, g, dx, dw, db);
  };
  if (has_bias) return detail::make_op<T>(std::move(out), {input, kernel, bias}, back);
  return detail::make_op<T>(std::move(out), {input, kernel}, back);
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, std::size_t stride, std::size_t padding) {
  return conv2d(input, kernel, Var<T>(), stride, padding);
}

// ---------------------------------------------------------------- resampling

namespace detail {

struct LerpAxis {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

// Half-pixel-centre (align_corners = false) sampling positions.
inline LerpAxis lerp_axis(std::size_t in, std::size_t out) {
  LerpAxis a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    a.lo[i] = lo;
    a.hi[i] = std::min(lo + 1, in - 1);
    a.frac[i] = src - static_cast<double>(lo);
  }
  return a;
}

}  // namespace detail

/// Bilinear resize of the two trailing dimensions.
template <typename T>
Var<T> resize_bilinear(const Var<T>& input, std::size_t out_h, std::size_t out_w) {
  const auto& x = input.value();
  require(x.rank() == 4, "shape", "resize_bilinear input must be N x C x H x W");
  require(out_h >= 1 && out_w >= 1, "shape", "resize_bilinear target size must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == h && out_w == w) {
    return detail::make_op<T>(Tensor<T>(x), {input}, [](Node<T>& n) {
      auto& g = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
  }
  auto ay = detail::lerp_axis(h, out_h);
  auto ax = detail::lerp_axis(w, out_w);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), out_h, out_w});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data().data() + p * h * w;
    T* dst = out.data().data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T fy = static_cast<T>(ay.frac[i]);
      const T* r0 = src + ay.lo[i] * w;
      const T* r1 = src + ay.hi[i] * w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const T fx = static_cast<T>(ax.frac[j]);
        const T top = (T(1) - fx) * r0[ax.lo[j]] + fx * r0[ax.hi[j]];
        const T bot = (T(1) - fx) * r1[ax.lo[j]] + fx * r1[ax.hi[j]];
        dst[i * out_w + j] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  return detail::make_op<T>(std::move(out), {input}, [ay, ax, planes, h, w, out_h, out_w](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < planes; ++p) {
      T* dst = g.data().data() + p * h * w;
      const T* d = n.grad.data().data() + p * out_h * out_w;
      for (std::size_t i = 0; i < out_h; ++i) {
        const T fy = static_cast<T>(ay.frac[i]);
        T* r0 = dst + ay.lo[i] * w;
        T* r1 = dst + ay.hi[i] * w;
        for (std::size_t j = 0; j < out_w; ++j) {
          const T fx = static_cast<T>(ax.frac[j]);
          const T v = d[i * out_w + j];
          r0[ax.lo[j]] += (T(1) - fy) * (T(1) - fx) * v;
          r0[ax.hi[j]] += (T(1) - fy) * fx * v;
          r1[ax.lo[j]] += fy * (T(1) - fx) * v;
          r1[ax.hi[j]] += fy * fx * v;
        }
      }
    }
  });
}

// ---------------------------------------------------------------- normalization

/// Per-sample, per-channel normalization over the spatial dimensions.
template <typename T>
Var<T> instance_norm(const Var<T>& input, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  const auto& x = input.value();
  require(x.rank() == 4, "shape", "instance_norm input must be N x C x H x W");
  const std::size_t n = x.dim(0), c = x.dim(1), m = x.dim(2) * x.dim(3);
  require(gain.value().size() == c && bias.value().size() == c, "shape",
          "instance_norm gain/bias length must equal channel count " + std::to_string(c));
  require(eps > T(0), "range", "instance_norm eps must be positive");

  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(n * c);
  for (std::size_t s = 0; s < n * c; ++s) {
    const T* src = x.data().data() + s * m;
    double mu = 0;
    for (std::size_t i = 0; i < m; ++i) mu += src[i];
    mu /= static_cast<double>(m);
    double var = 0;
    for (std::size_t i = 0; i < m; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(m);
    const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*inv_std)[s] = is;
    const T gch = gain.value()[s % c], bch = bias.value()[s % c];
    T* xh = xhat->data() + s * m;
    T* dst = out.data().data() + s * m;
    for (std::size_t i = 0; i < m; ++i) {
      xh[i] = (src[i] - static_cast<T>(mu)) * is;
      dst[i] = gch * xh[i] + bch;
    }
  }
  return detail::make_op<T>(std::move(out), {input, gain, bias}, [xhat, inv_std, n, c, m](Node<T>& nd) {
    const auto& gv = nd.parents[1]->value;
    Tensor<T>* dx = detail::wants(nd, 0) ? &nd.parents[0]->grad_buffer() : nullptr;
    Tensor<T>* dg = detail::wants(nd, 1) ? &nd.parents[1]->grad_buffer() : nullptr;
    Tensor<T>* db = detail::wants(nd, 2) ? &nd.parents[2]->grad_buffer() : nullptr;
    for (std::size_t s = 0; s < n * c; ++s) {
      const T* d = nd.grad.data().data() + s * m;
      const T* xh = xhat->data() + s * m;
      T sd = 0, sdx = 0;
      for (std::size_t i = 0; i < m; ++i) {
        sd += d[i];
        sdx += d[i] * xh[i];
      }
      if (dg) (*dg)[s % c] += sdx;
      if (db) (*db)[s % c] += sd;
      if (dx) {
        const T gch = gv[s % c];
        const T k = gch * (*inv_std)[s] / static_cast<T>(m);
        T* dst = dx->data().data() + s * m;
        for (std::size_t i = 0; i < m; ++i)
          dst[i] += k * (static_cast<T>(m) * d[i] - sd - xh[i] * sdx);
      }
    }
  });
}

// ---------------------------------------------------------------- texture statistics

/// Per-sample Gram matrix F F^T / (H W) of an N x C x H x W map; result N x C x C.
template <typename T>
Var<T> gram(const Var<T>& features) {
  const auto& f = features.value();
  require(f.rank() == 4, "shape", "gram input must be N x C x H x W, got " + shape_str(f.shape()));
  const std::size_t n = f.dim(0), c = f.dim(1), m = f.dim(2) * f.dim(3);
  const T inv = T(1) / static_cast<T>(m);
  Tensor<T> out(Shape{n, c, c});
  for (std::size_t s = 0; s < n; ++s) {
    const T* fs = f.data().data() + s * c * m;
    T* g = out.data().data() + s * c * c;
    blas::gemm(false, true, static_cast<int>(c), static_cast<int>(c), static_cast<int>(m), inv, fs,
               static_cast<int>(m), fs, static_cast<int>(m), T(0), g, static_cast<int>(c));
    // Exact symmetry regardless of the BLAS kernel's accumulation order.
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = i + 1; j < c; ++j) g[j * c + i] = g[i * c + j];
  }
  return detail::make_op<T>(std::move(out), {features}, [n, c, m, inv](Node<T>& nd) {
    const auto& fv = nd.parents[0]->value;
    auto& df = nd.parents[0]->grad_buffer();
    std::vector<T> sym(c * c);
    for (std::size_t s = 0; s < n; ++s) {
      const T* dg = nd.grad.data().data() + s * c * c;
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) sym[i * c + j] = dg[i * c + j] + dg[j * c + i];
      blas::gemm(false, false, static_cast<int>(c), static_cast<int>(m), static_cast<int>(c), inv, sym.data(),
                 static_cast<int>(c), fv.data().data() + s * c * m, static_cast<int>(m), T(1),
                 df.data().data() + s * c * m, static_cast<int>(m));
    }
  });
}

/// Squared-difference total variation, summed over channels and normalized by
/// H*W per sample, averaged over the batch.
template <typename T>
Var<T> tv_loss(const Var<T>& image) {
  const auto& x = image.value();
  require(x.rank() == 4, "shape", "tv_loss input must be N x C x H x W");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h * w >= 2, "shape", "tv_loss needs at least two pixels");
  const T norm = T(1) / static_cast<T>(n * h * w);
  T total = 0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* s = x.data().data() + p * h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        if (j + 1 < w) total += (s[i * w + j + 1] - s[i * w + j]) * (s[i * w + j + 1] - s[i * w + j]);
        if (i + 1 < h) total += (s[(i + 1) * w + j] - s[i * w + j]) * (s[(i + 1) * w + j] - s[i * w + j]);
      }
  }
  return detail::make_op<T>(Tensor<T>::scalar(total * norm), {image}, [n, c, h, w, norm](Node<T>& nd) {
    const auto& xv = nd.parents[0]->value;
    auto& g = nd.parents[0]->grad_buffer();
    const T k = T(2) * norm * nd.grad[0];
    for (std::size_t p = 0; p < n * c; ++p) {
      const T* s = xv.data().data() + p * h * w;
      T* d = g.data().data() + p * h * w;
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          if (j + 1 < w) {
            const T diff = k * (s[i * w + j + 1] - s[i * w + j]);
            d[i * w + j + 1] += diff;
            d[i * w + j] -= diff;
          }
          if (i + 1 < h) {
            const T diff = k * (s[(i + 1) * w + j] - s[i * w + j]);
            d[(i + 1) * w + j] += diff;
            d[i * w + j] -= diff;
          }
        }
    }
  });
}

}  // namespace spyr
