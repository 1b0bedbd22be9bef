#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "smfnet/core/tensor.hpp"

namespace smfnet {

/// Reverse-mode autodiff over Tensor<T>. Graphs are built define-by-run;
/// disabling GradMode (inference) records no parents and frees
/// intermediates as soon as their refcount drops.
namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  bool prev_;
};
inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <class T>
struct VarNode {
  Tensor<T> val;
  Tensor<T> grad;  // allocated on demand
  bool requires_grad = false;
  bool is_leaf = false;
  std::vector<std::shared_ptr<VarNode>> parents;
  std::function<void(VarNode&)> backfn;  // scatters node.grad into parents

  Tensor<T>& ensure_grad() {
    if (grad.empty()) grad = Tensor<T>::zeros(val.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<VarNode<T>> n) : n_(std::move(n)) {}

  static Var leaf(Tensor<T> t, bool requires_grad = false) {
    auto n = std::make_shared<VarNode<T>>();
    n->val = std::move(t);
    n->requires_grad = requires_grad;
    n->is_leaf = true;
    return Var(std::move(n));
  }
  static Var constant(Tensor<T> t) { return leaf(std::move(t), false); }
  static Var scalar(T v) { return constant(Tensor<T>::scalar(v)); }

  bool defined() const { return n_ != nullptr; }
  const Tensor<T>& val() const { return n_->val; }
  Tensor<T>& val() { return n_->val; }
  Tensor<T>& grad() { return n_->ensure_grad(); }
  bool has_grad() const { return !n_->grad.empty(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  const std::vector<int>& shape() const { return n_->val.shape(); }
  long long numel() const { return n_->val.numel(); }
  T item() const { return n_->val[0]; }
  std::shared_ptr<VarNode<T>> node() const { return n_; }

  void zero_grad() { n_->grad = Tensor<T>(); }

 private:
  std::shared_ptr<VarNode<T>> n_;
};

// ---------------------------------------------------------------------------
// Graph construction helper
// ---------------------------------------------------------------------------

template <class T>
Var<T> make_op(Tensor<T> val, std::vector<Var<T>> parents,
               std::function<void(VarNode<T>&)> backfn) {
  auto n = std::make_shared<VarNode<T>>();
  n->val = std::move(val);
  if (grad_enabled()) {
    bool any = false;
    for (auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (auto& p : parents) n->parents.push_back(p.node());
      n->backfn = std::move(backfn);
    }
  }
  return Var<T>(std::move(n));
}

template <class T>
void backward(const Var<T>& root) {
  check(root.numel() == 1, "backward: root must be scalar");
  // Topological order by iterative DFS.
  std::vector<VarNode<T>*> order;
  std::unordered_set<VarNode<T>*> seen;
  std::vector<std::pair<VarNode<T>*, std::size_t>> stack;
  stack.push_back({root.node().get(), 0});
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      VarNode<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    VarNode<T>* n = *it;
    if (n->backfn && !n->grad.empty()) n->backfn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class T, class F, class B>
Var<T> unary_op(const Var<T>& x, F f, B dfdx) {
  Tensor<T> out = x.val();
  for (auto& v : out.vec()) v = f(v);
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, dfdx](VarNode<T>& n) {
    auto& g = xn->ensure_grad();
    const auto& xin = xn->val;
    for (long long i = 0; i < xin.numel(); ++i) g[i] += n.grad[i] * dfdx(xin[i], n.val[i]);
  });
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + a.val().shape_str() + " vs " + b.val().shape_str());
  Tensor<T> out = a.val();
  for (long long i = 0; i < out.numel(); ++i) out[i] += b.val()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](VarNode<T>& n) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (long long i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (long long i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  });
}

template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor<T> out = a.val();
  for (long long i = 0; i < out.numel(); ++i) out[i] -= b.val()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](VarNode<T>& n) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (long long i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (long long i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor<T> out = a.val();
  for (long long i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](VarNode<T>& n) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (long long i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bn->val[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (long long i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * an->val[i];
    }
  });
}

template <class T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) {
  check(a.shape() == b.shape(), "div: shape mismatch");
  Tensor<T> out = a.val();
  for (long long i = 0; i < out.numel(); ++i) out[i] /= b.val()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](VarNode<T>& n) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (long long i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / bn->val[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (long long i = 0; i < g.numel(); ++i)
        g[i] -= n.grad[i] * an->val[i] / (bn->val[i] * bn->val[i]);
    }
  });
}

template <class T>
Var<T> neg(const Var<T>& x) {
  return unary_op(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}
template <class T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return unary_op(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}
template <class T>
Var<T> mul_scalar(const Var<T>& x, T c) {
  return unary_op(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}
template <class T>
Var<T> exp_v(const Var<T>& x) {
  return unary_op(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
template <class T>
Var<T> tanh_v(const Var<T>& x) {
  return unary_op(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}
template <class T>
Var<T> sigmoid_v(const Var<T>& x) {
  return unary_op(x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
                  [](T, T y) { return y * (T(1) - y); });
}
template <class T>
Var<T> abs_v(const Var<T>& x) {
  return unary_op(x, [](T v) { return std::abs(v); },
                  [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}
template <class T>
Var<T> sqrt_v(const Var<T>& x, T eps = T(0)) {
  return unary_op(x, [eps](T v) { return std::sqrt(v + eps); },
                  [](T, T y) { return T(0.5) / y; });
}
template <class T>
Var<T> square_v(const Var<T>& x) {
  return unary_op(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}
template <class T>
Var<T> gelu_v(const Var<T>& x) {
  const T inv_sqrt2 = T(0.7071067811865475);
  const T inv_sqrt2pi = T(0.3989422804014327);
  return unary_op(
      x, [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [=](T v, T) {
        T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

/// Smooth clamp c*tanh(x/c); keeps exp() arguments inside [-c, c].
template <class T>
Var<T> soft_clamp(const Var<T>& x, T c) {
  return unary_op(x, [c](T v) { return c * std::tanh(v / c); },
                  [c](T v, T) {
                    T t = std::tanh(v / c);
                    return T(1) - t * t;
                  });
}

template <class T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  check(a.shape() == b.shape(), "maximum: shape mismatch");
  Tensor<T> out = a.val();
  for (long long i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], b.val()[i]);
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](VarNode<T>& n) {
    for (long long i = 0; i < n.grad.numel(); ++i) {
      bool a_wins = an->val[i] >= bn->val[i];
      if (an->requires_grad && a_wins) an->ensure_grad()[i] += n.grad[i];
      if (bn->requires_grad && !a_wins) bn->ensure_grad()[i] += n.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions, reshape, slicing
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum_all(const Var<T>& x) {
  T s = T(0);
  for (long long i = 0; i < x.numel(); ++i) s += x.val()[i];
  auto xn = x.node();
  return make_op<T>(Tensor<T>::scalar(s), {x}, [xn](VarNode<T>& n) {
    auto& g = xn->ensure_grad();
    for (long long i = 0; i < g.numel(); ++i) g[i] += n.grad[0];
  });
}

template <class T>
Var<T> mean_all(const Var<T>& x) {
  return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Var<T> reshape(const Var<T>& x, std::vector<int> shape) {
  Tensor<T> out = x.val().reshaped(shape);
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn](VarNode<T>& n) {
    auto& g = xn->ensure_grad();
    for (long long i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

/// Concatenate along the channel axis of (B,C,H,W) tensors.
template <class T>
Var<T> concat_c(const std::vector<Var<T>>& xs) {
  check(!xs.empty(), "concat_c: empty input");
  int B = xs[0].shape()[0], H = xs[0].shape()[2], W = xs[0].shape()[3];
  int C = 0;
  for (auto& x : xs) {
    check(x.shape()[0] == B && x.shape()[2] == H && x.shape()[3] == W, "concat_c: shape mismatch");
    C += x.shape()[1];
  }
  Tensor<T> out({B, C, H, W});
  long long plane = static_cast<long long>(H) * W;
  for (int b = 0; b < B; ++b) {
    long long coff = 0;
    for (auto& x : xs) {
      int ci = x.shape()[1];
      const T* src = x.val().data() + static_cast<long long>(b) * ci * plane;
      T* dst = out.data() + (static_cast<long long>(b) * C + coff) * plane;
      std::copy(src, src + static_cast<long long>(ci) * plane, dst);
      coff += ci;
    }
  }
  std::vector<std::shared_ptr<VarNode<T>>> nodes;
  for (auto& x : xs) nodes.push_back(x.node());
  return make_op<T>(std::move(out), xs, [nodes, B, C, plane](VarNode<T>& n) {
    for (int b = 0; b < B; ++b) {
      long long coff = 0;
      for (auto& xn : nodes) {
        int ci = xn->val.shape()[1];
        if (xn->requires_grad) {
          auto& g = xn->ensure_grad();
          T* dst = g.data() + static_cast<long long>(b) * ci * plane;
          const T* src = n.grad.data() + (static_cast<long long>(b) * C + coff) * plane;
          for (long long i = 0; i < static_cast<long long>(ci) * plane; ++i) dst[i] += src[i];
        }
        coff += ci;
      }
    }
  });
}

/// Channel slice [c0, c1) of a (B,C,H,W) tensor.
template <class T>
Var<T> slice_c(const Var<T>& x, int c0, int c1) {
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  check(0 <= c0 && c0 < c1 && c1 <= C, "slice_c: bad channel range");
  int Cs = c1 - c0;
  long long plane = static_cast<long long>(H) * W;
  Tensor<T> out({B, Cs, H, W});
  for (int b = 0; b < B; ++b) {
    const T* src = x.val().data() + (static_cast<long long>(b) * C + c0) * plane;
    T* dst = out.data() + static_cast<long long>(b) * Cs * plane;
    std::copy(src, src + static_cast<long long>(Cs) * plane, dst);
  }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, B, C, c0, Cs, plane](VarNode<T>& n) {
    auto& g = xn->ensure_grad();
    for (int b = 0; b < B; ++b) {
      T* dst = g.data() + (static_cast<long long>(b) * C + c0) * plane;
      const T* src = n.grad.data() + static_cast<long long>(b) * Cs * plane;
      for (long long i = 0; i < static_cast<long long>(Cs) * plane; ++i) dst[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial ops: padding, cropping, pooling, resampling
// ---------------------------------------------------------------------------

/// Crop borders of a (B,C,H,W) tensor.
template <class T>
Var<T> crop_hw(const Var<T>& x, int top, int bottom, int left, int right) {
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  int Ho = H - top - bottom, Wo = W - left - right;
  check(Ho > 0 && Wo > 0, "crop_hw: crop exceeds size");
  Tensor<T> out({B, C, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < Ho; ++h)
        for (int w = 0; w < Wo; ++w) out.at(b, c, h, w) = x.val().at(b, c, h + top, w + left);
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, B, C, Ho, Wo, top, left](VarNode<T>& n) {
    auto& g = xn->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < Ho; ++h)
          for (int w = 0; w < Wo; ++w) g.at(b, c, h + top, w + left) += n.grad.at(b, c, h, w);
  });
}

inline int reflect_index(int i, int n) {
  // Reflection without edge repetition: -1 -> 1, n -> n-2.
  if (n == 1) return 0;
  int period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}

template <class T>
Var<T> pad_reflect(const Var<T>& x, int top, int bottom, int left, int right) {
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  int Ho = H + top + bottom, Wo = W + left + right;
  Tensor<T> out({B, C, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < Ho; ++h) {
        int hs = reflect_index(h - top, H);
        for (int w = 0; w < Wo; ++w) out.at(b, c, h, w) = x.val().at(b, c, hs, reflect_index(w - left, W));
      }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, B, C, H, W, Ho, Wo, top, left](VarNode<T>& n) {
    auto& g = xn->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < Ho; ++h) {
          int hs = reflect_index(h - top, H);
          for (int w = 0; w < Wo; ++w)
            g.at(b, c, hs, reflect_index(w - left, W)) += n.grad.at(b, c, h, w);
        }
  });
}

/// Average pooling with kernel = stride = k (exact tiling required).
template <class T>
Var<T> avg_pool(const Var<T>& x, int k) {
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  check(H % k == 0 && W % k == 0, "avg_pool: dims not divisible by kernel");
  int Ho = H / k, Wo = W / k;
  Tensor<T> out({B, C, Ho, Wo});
  T inv = T(1) / static_cast<T>(k * k);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < Ho; ++h)
        for (int w = 0; w < Wo; ++w) {
          T s = T(0);
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) s += x.val().at(b, c, h * k + i, w * k + j);
          out.at(b, c, h, w) = s * inv;
        }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, B, C, Ho, Wo, k, inv](VarNode<T>& n) {
    auto& g = xn->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < Ho; ++h)
          for (int w = 0; w < Wo; ++w) {
            T gv = n.grad.at(b, c, h, w) * inv;
            for (int i = 0; i < k; ++i)
              for (int j = 0; j < k; ++j) g.at(b, c, h * k + i, w * k + j) += gv;
          }
  });
}

template <class T>
Var<T> upsample_nearest(const Var<T>& x, int f) {
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  Tensor<T> out({B, C, H * f, W * f});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H * f; ++h)
        for (int w = 0; w < W * f; ++w) out.at(b, c, h, w) = x.val().at(b, c, h / f, w / f);
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, B, C, H, W, f](VarNode<T>& n) {
    auto& g = xn->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H * f; ++h)
          for (int w = 0; w < W * f; ++w) g.at(b, c, h / f, w / f) += n.grad.at(b, c, h, w);
  });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + Eigen GEMM)
// ---------------------------------------------------------------------------

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

namespace detail {

template <class T>
void im2col(const T* img, int C, int H, int W, int k, int pad, T* col) {
  // col is (C*k*k) x (H*W); zero padding.
  long long plane = static_cast<long long>(H) * W;
  long long row = 0;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj, ++row) {
        T* dst = col + row * plane;
        const T* src = img + static_cast<long long>(c) * plane;
        for (int h = 0; h < H; ++h) {
          int hs = h + ki - pad;
          if (hs < 0 || hs >= H) {
            std::fill(dst + static_cast<long long>(h) * W, dst + static_cast<long long>(h + 1) * W, T(0));
            continue;
          }
          for (int w = 0; w < W; ++w) {
            int ws = w + kj - pad;
            dst[static_cast<long long>(h) * W + w] =
                (ws < 0 || ws >= W) ? T(0) : src[static_cast<long long>(hs) * W + ws];
          }
        }
      }
}

template <class T>
void col2im_acc(const T* col, int C, int H, int W, int k, int pad, T* img) {
  long long plane = static_cast<long long>(H) * W;
  long long row = 0;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj, ++row) {
        const T* src = col + row * plane;
        T* dst = img + static_cast<long long>(c) * plane;
        for (int h = 0; h < H; ++h) {
          int hs = h + ki - pad;
          if (hs < 0 || hs >= H) continue;
          for (int w = 0; w < W; ++w) {
            int ws = w + kj - pad;
            if (ws >= 0 && ws < W) dst[static_cast<long long>(hs) * W + ws] += src[static_cast<long long>(h) * W + w];
          }
        }
      }
}

}  // namespace detail

/// Same-size 2-D convolution, odd kernel, zero padding k/2, grouped.
/// w: (Cout, Cin/groups, k, k), b: (Cout) or undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int groups = 1) {
  int B = x.shape()[0], Cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  int Cout = w.shape()[0], Cg = w.shape()[1], k = w.shape()[2];
  check(w.shape()[3] == k && k % 2 == 1, "conv2d: kernel must be square odd");
  check(Cin % groups == 0 && Cout % groups == 0 && Cg == Cin / groups,
        "conv2d: group/channel mismatch");
  if (b.defined()) check(b.shape() == std::vector<int>{Cout}, "conv2d: bias shape");
  int pad = k / 2;
  long long plane = static_cast<long long>(H) * W;
  int cog = Cout / groups;
  long long colrows = static_cast<long long>(Cg) * k * k;

  Tensor<T> out({B, Cout, H, W});
  std::vector<T> col(static_cast<std::size_t>(colrows * plane));
  for (int bi = 0; bi < B; ++bi)
    for (int g = 0; g < groups; ++g) {
      const T* img = x.val().data() + (static_cast<long long>(bi) * Cin + static_cast<long long>(g) * Cg) * plane;
      detail::im2col(img, Cg, H, W, k, pad, col.data());
      ECMap<T> Wm(w.val().data() + static_cast<long long>(g) * cog * colrows, cog, colrows);
      ECMap<T> Cm(col.data(), colrows, plane);
      EMap<T> Om(out.data() + (static_cast<long long>(bi) * Cout + static_cast<long long>(g) * cog) * plane, cog, plane);
      Om.noalias() = Wm * Cm;
    }
  if (b.defined())
    for (int bi = 0; bi < B; ++bi)
      for (int c = 0; c < Cout; ++c) {
        T bv = b.val()[c];
        T* dst = out.data() + (static_cast<long long>(bi) * Cout + c) * plane;
        for (long long i = 0; i < plane; ++i) dst[i] += bv;
      }

  auto xn = x.node(), wn = w.node();
  auto bnode = b.defined() ? b.node() : nullptr;
  std::vector<Var<T>> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return make_op<T>(std::move(out), parents,
                    [xn, wn, bnode, B, Cin, Cout, Cg, cog, H, W, k, pad, plane, colrows, groups](VarNode<T>& n) {
    std::vector<T> col(static_cast<std::size_t>(colrows * plane));
    std::vector<T> dcol(static_cast<std::size_t>(colrows * plane));
    for (int bi = 0; bi < B; ++bi)
      for (int g = 0; g < groups; ++g) {
        ECMap<T> Gm(n.grad.data() + (static_cast<long long>(bi) * Cout + static_cast<long long>(g) * cog) * plane, cog, plane);
        if (wn->requires_grad) {
          const T* img = xn->val.data() + (static_cast<long long>(bi) * Cin + static_cast<long long>(g) * Cg) * plane;
          detail::im2col(img, Cg, H, W, k, pad, col.data());
          ECMap<T> Cm(col.data(), colrows, plane);
          EMap<T> dWm(wn->ensure_grad().data() + static_cast<long long>(g) * cog * colrows, cog, colrows);
          dWm.noalias() += Gm * Cm.transpose();
        }
        if (xn->requires_grad) {
          ECMap<T> Wm(wn->val.data() + static_cast<long long>(g) * cog * colrows, cog, colrows);
          EMap<T> dCm(dcol.data(), colrows, plane);
          dCm.noalias() = Wm.transpose() * Gm;
          T* dimg = xn->ensure_grad().data() + (static_cast<long long>(bi) * Cin + static_cast<long long>(g) * Cg) * plane;
          detail::col2im_acc(dcol.data(), Cg, H, W, k, pad, dimg);
        }
      }
    if (bnode && bnode->requires_grad) {
      auto& gb = bnode->ensure_grad();
      for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < Cout; ++c) {
          const T* src = n.grad.data() + (static_cast<long long>(bi) * Cout + c) * plane;
          T s = T(0);
          for (long long i = 0; i < plane; ++i) s += src[i];
          gb[c] += s;
        }
    }
  });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int groups = 1) {
  return conv2d(x, w, Var<T>(), groups);
}

// ---------------------------------------------------------------------------
// Batched matrix ops for channel attention: tensors shaped (B, heads, M, N)
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  int B = a.shape()[0], Hh = a.shape()[1], M = a.shape()[2], K = a.shape()[3];
  check(b.shape()[0] == B && b.shape()[1] == Hh && b.shape()[2] == K, "matmul: shape mismatch");
  int N = b.shape()[3];
  Tensor<T> out({B, Hh, M, N});
  long long as = static_cast<long long>(M) * K, bs = static_cast<long long>(K) * N,
            os = static_cast<long long>(M) * N;
  for (long long i = 0; i < static_cast<long long>(B) * Hh; ++i) {
    ECMap<T> Am(a.val().data() + i * as, M, K);
    ECMap<T> Bm(b.val().data() + i * bs, K, N);
    EMap<T> Om(out.data() + i * os, M, N);
    Om.noalias() = Am * Bm;
  }
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn, B, Hh, M, K, N, as, bs, os](VarNode<T>& n) {
    for (long long i = 0; i < static_cast<long long>(B) * Hh; ++i) {
      ECMap<T> Gm(n.grad.data() + i * os, M, N);
      if (an->requires_grad) {
        ECMap<T> Bm(bn->val.data() + i * bs, K, N);
        EMap<T> dA(an->ensure_grad().data() + i * as, M, K);
        dA.noalias() += Gm * Bm.transpose();
      }
      if (bn->requires_grad) {
        ECMap<T> Am(an->val.data() + i * as, M, K);
        EMap<T> dB(bn->ensure_grad().data() + i * bs, K, N);
        dB.noalias() += Am.transpose() * Gm;
      }
    }
  });
}

template <class T>
Var<T> transpose_last2(const Var<T>& x) {
  int B = x.shape()[0], Hh = x.shape()[1], M = x.shape()[2], N = x.shape()[3];
  Tensor<T> out({B, Hh, N, M});
  for (long long i = 0; i < static_cast<long long>(B) * Hh; ++i) {
    ECMap<T> Xm(x.val().data() + i * M * N, M, N);
    EMap<T> Om(out.data() + i * M * N, N, M);
    Om = Xm.transpose();
  }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, B, Hh, M, N](VarNode<T>& n) {
    auto& g = xn->ensure_grad();
    for (long long i = 0; i < static_cast<long long>(B) * Hh; ++i) {
      ECMap<T> Gm(n.grad.data() + i * M * N, N, M);
      EMap<T> dX(g.data() + i * M * N, M, N);
      dX += Gm.transpose();
    }
  });
}

/// Softmax over the last axis of a (B, heads, M, N) tensor.
template <class T>
Var<T> softmax_last(const Var<T>& x) {
  int N = x.shape().back();
  long long rows = x.numel() / N;
  Tensor<T> out = x.val();
  for (long long r = 0; r < rows; ++r) {
    T* p = out.data() + r * N;
    T mx = *std::max_element(p, p + N);
    T s = T(0);
    for (int j = 0; j < N; ++j) {
      p[j] = std::exp(p[j] - mx);
      s += p[j];
    }
    for (int j = 0; j < N; ++j) p[j] /= s;
  }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, rows, N](VarNode<T>& n) {
    auto& g = xn->ensure_grad();
    for (long long r = 0; r < rows; ++r) {
      const T* y = n.val.data() + r * N;
      const T* gy = n.grad.data() + r * N;
      T dot = T(0);
      for (int j = 0; j < N; ++j) dot += y[j] * gy[j];
      T* gx = g.data() + r * N;
      for (int j = 0; j < N; ++j) gx[j] += y[j] * (gy[j] - dot);
    }
  });
}

/// L2-normalize rows along the last axis.
template <class T>
Var<T> l2_normalize_last(const Var<T>& x, T eps = T(1e-8)) {
  int N = x.shape().back();
  long long rows = x.numel() / N;
  Tensor<T> out = x.val();
  Tensor<T> norms({static_cast<int>(rows)});
  for (long long r = 0; r < rows; ++r) {
    T* p = out.data() + r * N;
    T s = T(0);
    for (int j = 0; j < N; ++j) s += p[j] * p[j];
    T nm = std::sqrt(s) + eps;
    norms[r] = nm;
    for (int j = 0; j < N; ++j) p[j] /= nm;
  }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, rows, N, norms](VarNode<T>& n) {
    auto& g = xn->ensure_grad();
    for (long long r = 0; r < rows; ++r) {
      const T* y = n.val.data() + r * N;
      const T* gy = n.grad.data() + r * N;
      T dot = T(0);
      for (int j = 0; j < N; ++j) dot += y[j] * gy[j];
      T* gx = g.data() + r * N;
      T nm = norms[r];
      for (int j = 0; j < N; ++j) gx[j] += (gy[j] - y[j] * dot) / nm;
    }
  });
}

/// Multiply (B, heads, M, N) scores by a per-head scalar t (shape {heads}).
template <class T>
Var<T> scale_per_head(const Var<T>& x, const Var<T>& t) {
  int B = x.shape()[0], Hh = x.shape()[1];
  check(t.shape() == std::vector<int>{Hh}, "scale_per_head: temperature shape");
  long long hs = x.numel() / (static_cast<long long>(B) * Hh);
  Tensor<T> out = x.val();
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < Hh; ++h) {
      T* p = out.data() + (static_cast<long long>(b) * Hh + h) * hs;
      for (long long i = 0; i < hs; ++i) p[i] *= t.val()[h];
    }
  auto xn = x.node(), tn = t.node();
  return make_op<T>(std::move(out), {x, t}, [xn, tn, B, Hh, hs](VarNode<T>& n) {
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < Hh; ++h) {
        const T* gy = n.grad.data() + (static_cast<long long>(b) * Hh + h) * hs;
        if (xn->requires_grad) {
          T* gx = xn->ensure_grad().data() + (static_cast<long long>(b) * Hh + h) * hs;
          T tv = tn->val[h];
          for (long long i = 0; i < hs; ++i) gx[i] += gy[i] * tv;
        }
        if (tn->requires_grad) {
          const T* xv = xn->val.data() + (static_cast<long long>(b) * Hh + h) * hs;
          T s = T(0);
          for (long long i = 0; i < hs; ++i) s += gy[i] * xv[i];
          tn->ensure_grad()[h] += s;
        }
      }
  });
}

/// Per-pixel layer norm across channels with learnable per-channel affine.
template <class T>
Var<T> layernorm_c(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6)) {
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  check(gamma.shape() == std::vector<int>{C} && beta.shape() == std::vector<int>{C},
        "layernorm_c: affine shape");
  long long plane = static_cast<long long>(H) * W;
  Tensor<T> out({B, C, H, W});
  Tensor<T> xhat({B, C, H, W});
  Tensor<T> istd({B, 1, H, W});
  for (int b = 0; b < B; ++b)
    for (long long p = 0; p < plane; ++p) {
      T mu = T(0);
      for (int c = 0; c < C; ++c) mu += x.val().data()[(static_cast<long long>(b) * C + c) * plane + p];
      mu /= C;
      T var = T(0);
      for (int c = 0; c < C; ++c) {
        T d = x.val().data()[(static_cast<long long>(b) * C + c) * plane + p] - mu;
        var += d * d;
      }
      var /= C;
      T is = T(1) / std::sqrt(var + eps);
      istd.data()[static_cast<long long>(b) * plane + p] = is;
      for (int c = 0; c < C; ++c) {
        long long idx = (static_cast<long long>(b) * C + c) * plane + p;
        T xh = (x.val().data()[idx] - mu) * is;
        xhat.data()[idx] = xh;
        out.data()[idx] = xh * gamma.val()[c] + beta.val()[c];
      }
    }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_op<T>(std::move(out), {x, gamma, beta},
                    [xn, gn, bn, B, C, plane, xhat, istd](VarNode<T>& n) {
    for (int b = 0; b < B; ++b)
      for (long long p = 0; p < plane; ++p) {
        T is = istd.data()[static_cast<long long>(b) * plane + p];
        T sum_g = T(0), sum_gx = T(0);
        for (int c = 0; c < C; ++c) {
          long long idx = (static_cast<long long>(b) * C + c) * plane + p;
          T gh = n.grad.data()[idx] * gn->val[c];
          sum_g += gh;
          sum_gx += gh * xhat.data()[idx];
        }
        for (int c = 0; c < C; ++c) {
          long long idx = (static_cast<long long>(b) * C + c) * plane + p;
          T gh = n.grad.data()[idx] * gn->val[c];
          if (xn->requires_grad)
            xn->ensure_grad().data()[idx] +=
                is * (gh - (sum_g + xhat.data()[idx] * sum_gx) / C);
          if (gn->requires_grad) gn->ensure_grad()[c] += n.grad.data()[idx] * xhat.data()[idx];
          if (bn->requires_grad) bn->ensure_grad()[c] += n.grad.data()[idx];
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Pearson correlation (per batch item, averaged), with zero-variance -> 0
// ---------------------------------------------------------------------------

template <class T>
Var<T> pearson_cc(const Var<T>& a, const Var<T>& b, T eps = T(1e-10)) {
  check(a.shape() == b.shape(), "pearson_cc: shape mismatch");
  int B = a.shape().empty() ? 1 : a.shape()[0];
  long long n = a.numel() / B;
  Tensor<T> ac = a.val(), bc = b.val();
  std::vector<T> sa(B), sb(B), sab(B), cc(B);
  for (int bi = 0; bi < B; ++bi) {
    T* ap = ac.data() + static_cast<long long>(bi) * n;
    T* bp = bc.data() + static_cast<long long>(bi) * n;
    T ma = T(0), mb = T(0);
    for (long long i = 0; i < n; ++i) { ma += ap[i]; mb += bp[i]; }
    ma /= n; mb /= n;
    T va = T(0), vb = T(0), vab = T(0);
    for (long long i = 0; i < n; ++i) {
      ap[i] -= ma; bp[i] -= mb;
      va += ap[i] * ap[i];
      vb += bp[i] * bp[i];
      vab += ap[i] * bp[i];
    }
    sa[bi] = va; sb[bi] = vb; sab[bi] = vab;
    cc[bi] = (va < eps || vb < eps) ? T(0) : vab / (std::sqrt(va) * std::sqrt(vb));
  }
  T mean_cc = std::accumulate(cc.begin(), cc.end(), T(0)) / B;
  auto an = a.node(), bn = b.node();
  return make_op<T>(Tensor<T>::scalar(mean_cc), {a, b},
                    [an, bn, B, n, ac, bc, sa, sb, sab, cc, eps](VarNode<T>& n_) {
    T g = n_.grad[0] / B;
    for (int bi = 0; bi < B; ++bi) {
      if (sa[bi] < eps || sb[bi] < eps) continue;
      T denom = std::sqrt(sa[bi]) * std::sqrt(sb[bi]);
      const T* ap = ac.data() + static_cast<long long>(bi) * n;
      const T* bp = bc.data() + static_cast<long long>(bi) * n;
      if (an->requires_grad) {
        T* ga = an->ensure_grad().data() + static_cast<long long>(bi) * n;
        for (long long i = 0; i < n; ++i) ga[i] += g * (bp[i] / denom - cc[bi] * ap[i] / sa[bi]);
      }
      if (bn->requires_grad) {
        T* gb = bn->ensure_grad().data() + static_cast<long long>(bi) * n;
        for (long long i = 0; i < n; ++i) gb[i] += g * (ap[i] / denom - cc[bi] * bp[i] / sb[bi]);
      }
    }
  });
}

}  // namespace smfnet
