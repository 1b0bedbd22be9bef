#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "smfnet/core/autodiff.hpp"

namespace smfnet {

template <class T>
using NamedParams = std::vector<std::pair<std::string, Var<T>>>;

template <class T>
Var<T> make_param(std::vector<int> shape, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> d(-scale, scale);
  Tensor<T> t(shape);
  for (auto& v : t.vec()) v = static_cast<T>(d(rng));
  return Var<T>::leaf(std::move(t), true);
}

template <class T>
Var<T> make_zero_param(std::vector<int> shape) {
  return Var<T>::leaf(Tensor<T>::zeros(std::move(shape)), true);
}

/// Convolution layer, same-size output, odd kernel.
template <class T>
struct Conv2d {
  Var<T> w, b;
  int groups = 1;
  bool has_bias = true;

  Conv2d() = default;
  Conv2d(int cin, int cout, int k, std::mt19937_64& rng, int groups_ = 1, bool bias = true,
         bool zero_init = false)
      : groups(groups_), has_bias(bias) {
    int fan_in = (cin / groups_) * k * k;
    double scale = std::sqrt(1.0 / fan_in);
    w = zero_init ? make_zero_param<T>({cout, cin / groups_, k, k})
                  : make_param<T>({cout, cin / groups_, k, k}, rng, scale);
    if (bias) b = make_zero_param<T>({cout});
  }

  Var<T> operator()(const Var<T>& x) const {
    return has_bias ? conv2d(x, w, b, groups) : conv2d(x, w, groups);
  }

  void params(const std::string& p, NamedParams<T>& out) {
    out.push_back({p + ".w", w});
    if (has_bias) out.push_back({p + ".b", b});
  }
};

template <class T>
struct LayerNormC {
  Var<T> gamma, beta;
  LayerNormC() = default;
  explicit LayerNormC(int c) {
    gamma = Var<T>::leaf(Tensor<T>::full({c}, T(1)), true);
    beta = make_zero_param<T>({c});
  }
  Var<T> operator()(const Var<T>& x) const { return layernorm_c(x, gamma, beta); }
  void params(const std::string& p, NamedParams<T>& out) {
    out.push_back({p + ".gamma", gamma});
    out.push_back({p + ".beta", beta});
  }
};

/// Reshape (B,C,H,W) -> (B,heads,C/heads,H*W) for channel attention.
template <class T>
Var<T> to_heads(const Var<T>& x, int heads) {
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  check(C % heads == 0, "to_heads: channels not divisible by heads");
  return reshape(x, {B, heads, C / heads, H * W});
}

template <class T>
Var<T> from_heads(const Var<T>& x, int H, int W) {
  int B = x.shape()[0], heads = x.shape()[1], c = x.shape()[2];
  return reshape(x, {B, heads * c, H, W});
}

/// Transposed (channel-covariance) attention core: attn = softmax(T * q k^t)
/// over the contracted channel axis, out = attn v. q,k,v: (B,C,H,W).
template <class T>
Var<T> channel_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& temp,
                         int heads) {
  int H = q.shape()[2], W = q.shape()[3];
  auto qh = l2_normalize_last(to_heads(q, heads));
  auto kh = l2_normalize_last(to_heads(k, heads));
  auto vh = to_heads(v, heads);
  auto scores = scale_per_head(matmul(qh, transpose_last2(kh)), temp);
  auto attn = softmax_last(scores);  // rows sum to 1 over contracted channels
  return from_heads(matmul(attn, vh), H, W);
}

/// Multi-Dconv head transposed attention (self-attention over channels).
template <class T>
struct MDTA {
  LayerNormC<T> ln;
  Conv2d<T> qkv_p, qkv_d, out_p;
  Var<T> temp;
  int heads = 8;

  MDTA() = default;
  MDTA(int c, int heads_, std::mt19937_64& rng) : heads(heads_) {
    ln = LayerNormC<T>(c);
    qkv_p = Conv2d<T>(c, 3 * c, 1, rng);
    qkv_d = Conv2d<T>(3 * c, 3 * c, 3, rng, 3 * c);
    out_p = Conv2d<T>(c, c, 1, rng);
    temp = Var<T>::leaf(Tensor<T>::full({heads_}, T(1)), true);
  }

  Var<T> operator()(const Var<T>& x) const {
    int c = x.shape()[1];
    auto qkv = qkv_d(qkv_p(ln(x)));
    auto q = slice_c(qkv, 0, c), k = slice_c(qkv, c, 2 * c), v = slice_c(qkv, 2 * c, 3 * c);
    return out_p(channel_attention(q, k, v, temp, heads));
  }

  void params(const std::string& p, NamedParams<T>& out) {
    ln.params(p + ".ln", out);
    qkv_p.params(p + ".qkv_p", out);
    qkv_d.params(p + ".qkv_d", out);
    out_p.params(p + ".out_p", out);
    out.push_back({p + ".temp", temp});
  }
};

/// Locally-enhanced feed forward: pointwise expand, depthwise 3x3, project.
template <class T>
struct LeFF {
  LayerNormC<T> ln;
  Conv2d<T> expand, dw, project;

  LeFF() = default;
  LeFF(int c, int ratio, std::mt19937_64& rng) {
    ln = LayerNormC<T>(c);
    expand = Conv2d<T>(c, c * ratio, 1, rng);
    dw = Conv2d<T>(c * ratio, c * ratio, 3, rng, c * ratio);
    project = Conv2d<T>(c * ratio, c, 1, rng);
  }

  Var<T> operator()(const Var<T>& x) const { return project(gelu_v(dw(gelu_v(expand(ln(x)))))); }

  void params(const std::string& p, NamedParams<T>& out) {
    ln.params(p + ".ln", out);
    expand.params(p + ".expand", out);
    dw.params(p + ".dw", out);
    project.params(p + ".project", out);
  }
};

/// MDTA + LeFF transformer block with residual connections.
template <class T>
struct TransformerBlock {
  MDTA<T> attn;
  LeFF<T> ffn;

  TransformerBlock() = default;
  TransformerBlock(int c, int heads, int ffn_ratio, std::mt19937_64& rng)
      : attn(c, heads, rng), ffn(c, ffn_ratio, rng) {}

  Var<T> operator()(const Var<T>& x) const {
    auto y = x + attn(x);
    return y + ffn(y);
  }

  void params(const std::string& p, NamedParams<T>& out) {
    attn.params(p + ".attn", out);
    ffn.params(p + ".ffn", out);
  }
};

/// Bottleneck residual block psi: pointwise reduce, depthwise 3x3, pointwise
/// expand. Final layer zero-initialized so coupling starts at identity.
template <class T>
struct BRB {
  Conv2d<T> reduce, dw, expand;

  BRB() = default;
  BRB(int c_in, int c_out, int hidden, std::mt19937_64& rng) {
    reduce = Conv2d<T>(c_in, hidden, 1, rng);
    dw = Conv2d<T>(hidden, hidden, 3, rng, hidden);
    expand = Conv2d<T>(hidden, c_out, 1, rng, 1, true, /*zero_init=*/true);
  }

  Var<T> operator()(const Var<T>& x) const { return expand(gelu_v(dw(gelu_v(reduce(x))))); }

  void params(const std::string& p, NamedParams<T>& out) {
    reduce.params(p + ".reduce", out);
    dw.params(p + ".dw", out);
    expand.params(p + ".expand", out);
  }
};

/// Per-channel Sobel gradient magnitude |g_x| + |g_y| (fixed kernels).
template <class T>
Var<T> sobel_magnitude(const Var<T>& x) {
  int C = x.shape()[1];
  static const T kx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  static const T ky[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  Tensor<T> wx({C, 1, 3, 3}), wy({C, 1, 3, 3});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < 9; ++i) {
      wx[c * 9 + i] = kx[i];
      wy[c * 9 + i] = ky[i];
    }
  auto gx = conv2d(x, Var<T>::constant(std::move(wx)), C);
  auto gy = conv2d(x, Var<T>::constant(std::move(wy)), C);
  return abs_v(gx) + abs_v(gy);
}

}  // namespace smfnet
