#pragma once

#include <array>

#include "smfnet/core/nn.hpp"

namespace smfnet {

struct CaiConfig {
  int total_channels = 64;   // beta
  int split_point = 32;      // alpha
  int heads = 8;
  double exp_clamp = 5.0;
  int dense_layers = 3;
  int dense_growth = 32;
  bool cross_attention = true;  // false -> plain INN block (AE1)

  void validate() const {
    check(split_point > 0 && split_point < total_channels, "CaiConfig: need 0 < alpha < beta");
    check(split_point % heads == 0 && (total_channels - split_point) % heads == 0,
          "CaiConfig: heads must divide both branch widths");
    check(exp_clamp > 0, "CaiConfig: exp_clamp must be positive");
  }
};

struct BfeConfig {
  int channels = 64;
  int blocks_per_residual_group = 2;
  int groups = 2;
  int ffn_expansion = 2;
  int heads = 8;
  bool residual = true;  // false -> stacked transformers only (AE2)
};

/// Shallow feature extraction: DConv(I1 O C K3) followed by one
/// transformer block (Table I encoder head).
template <class T>
struct Sfe {
  Conv2d<T> dconv;
  TransformerBlock<T> block;
  int channels = 64;

  Sfe() = default;
  Sfe(int c, int heads, int ffn_ratio, std::mt19937_64& rng) : channels(c) {
    dconv = Conv2d<T>(1, c, 3, rng);
    block = TransformerBlock<T>(c, heads, ffn_ratio, rng);
  }

  Var<T> operator()(const Var<T>& img) const {
    check(img.shape()[1] == 1, "sfe_forward: expects single-channel input");
    return block(dconv(img));
  }

  void params(const std::string& p, NamedParams<T>& out) {
    dconv.params(p + ".dconv", out);
    block.params(p + ".block", out);
  }
};

/// Gradient + residual dense stem: PConv(Dense(x)) + PConv(sobel(x)).
template <class T>
struct DenseStem {
  std::vector<Conv2d<T>> dense;
  Conv2d<T> fuse_dense, fuse_grad;
  int channels = 64;

  DenseStem() = default;
  DenseStem(int c, int layers, int growth, std::mt19937_64& rng) : channels(c) {
    int in = c;
    for (int i = 0; i < layers; ++i) {
      dense.emplace_back(in, growth, 3, rng);
      in += growth;
    }
    fuse_dense = Conv2d<T>(in, c, 1, rng);
    fuse_grad = Conv2d<T>(c, c, 1, rng);
  }

  Var<T> operator()(const Var<T>& x) const {
    std::vector<Var<T>> feats = {x};
    Var<T> cur = x;
    for (auto& conv : dense) {
      feats.push_back(gelu_v(conv(cur)));
      cur = concat_c(feats);
    }
    return fuse_dense(cur) + fuse_grad(sobel_magnitude(x));
  }

  void params(const std::string& p, NamedParams<T>& out) {
    for (std::size_t i = 0; i < dense.size(); ++i)
      dense[i].params(p + ".dense" + std::to_string(i), out);
    fuse_dense.params(p + ".fuse_dense", out);
    fuse_grad.params(p + ".fuse_grad", out);
  }
};

/// One cross-attention branch: LN -> pointwise -> depthwise -> q,k,v.
template <class T>
struct QkvProj {
  LayerNormC<T> ln;
  Conv2d<T> pconv, dconv;

  QkvProj() = default;
  QkvProj(int c, std::mt19937_64& rng) {
    ln = LayerNormC<T>(c);
    pconv = Conv2d<T>(c, 3 * c, 1, rng);
    dconv = Conv2d<T>(3 * c, 3 * c, 3, rng, 3 * c);
  }

  // Returns {q, k, v}, each with the branch channel count.
  std::array<Var<T>, 3> operator()(const Var<T>& x) const {
    int c = x.shape()[1];
    auto qkv = dconv(pconv(ln(x)));
    return {slice_c(qkv, 0, c), slice_c(qkv, c, 2 * c), slice_c(qkv, 2 * c, 3 * c)};
  }

  void params(const std::string& p, NamedParams<T>& out) {
    ln.params(p + ".ln", out);
    pconv.params(p + ".pconv", out);
    dconv.params(p + ".dconv", out);
  }
};

/// Affine invertible coupling with closed-form inverse:
///   u  = psi1(f2);  f1' = f1 * exp(clamp(u)) + u;  f2' = f2 + psi2(f1')
template <class T>
struct InvertibleCoupling {
  BRB<T> psi1, psi2;
  double exp_clamp = 5.0;

  InvertibleCoupling() = default;
  InvertibleCoupling(int c1, int c2, int hidden, double clamp, std::mt19937_64& rng)
      : exp_clamp(clamp) {
    psi1 = BRB<T>(c2, c1, hidden, rng);
    psi2 = BRB<T>(c1, c2, hidden, rng);
  }

  std::pair<Var<T>, Var<T>> couple(const Var<T>& f1, const Var<T>& f2) const {
    auto u = psi1(f2);
    auto f1p = f1 * exp_v(soft_clamp(u, T(exp_clamp))) + u;
    auto f2p = f2 + psi2(f1p);
    return {f1p, f2p};
  }

  std::pair<Var<T>, Var<T>> uncouple(const Var<T>& f1p, const Var<T>& f2p) const {
    check(f1p.shape()[0] == f2p.shape()[0] && f1p.shape()[2] == f2p.shape()[2] &&
              f1p.shape()[3] == f2p.shape()[3],
          "uncouple: shape mismatch");
    auto f2 = f2p - psi2(f1p);
    auto u = psi1(f2);
    auto f1 = (f1p - u) / exp_v(soft_clamp(u, T(exp_clamp)));
    return {f1, f2};
  }

  void params(const std::string& p, NamedParams<T>& out) {
    psi1.params(p + ".psi1", out);
    psi2.params(p + ".psi2", out);
  }
};

/// Cross Attention and Invertible block (detail branch).
template <class T>
struct Cai {
  CaiConfig cfg;
  DenseStem<T> stem;
  QkvProj<T> proj1, proj2;
  Var<T> temp1, temp2;  // per-head temperatures
  InvertibleCoupling<T> coupling;

  Cai() = default;
  Cai(const CaiConfig& c, std::mt19937_64& rng) : cfg(c) {
    cfg.validate();
    int a = cfg.split_point, b = cfg.total_channels;
    stem = DenseStem<T>(b, cfg.dense_layers, cfg.dense_growth, rng);
    if (cfg.cross_attention) {
      proj1 = QkvProj<T>(a, rng);
      proj2 = QkvProj<T>(b - a, rng);
      temp1 = Var<T>::leaf(Tensor<T>::full({cfg.heads}, T(1)), true);
      temp2 = Var<T>::leaf(Tensor<T>::full({cfg.heads}, T(1)), true);
    }
    int hidden = std::max(8, a / 2);
    coupling = InvertibleCoupling<T>(a, b - a, hidden, cfg.exp_clamp, rng);
  }

  Var<T> operator()(const Var<T>& phi_s) const {
    check(phi_s.shape()[1] == cfg.total_channels, "cai_forward: channel mismatch");
    auto in = stem(phi_s);
    auto x1 = slice_c(in, 0, cfg.split_point);
    auto x2 = slice_c(in, cfg.split_point, cfg.total_channels);
    Var<T> f1 = x1, f2 = x2;
    if (cfg.cross_attention) {
      auto [q1, k1, v1] = proj1(x1);
      auto [q2, k2, v2] = proj2(x2);
      f1 = x1 + channel_attention(q2, k1, v1, temp1, cfg.heads);
      f2 = x2 + channel_attention(q1, k2, v2, temp2, cfg.heads);
    }
    auto [f1p, f2p] = coupling.couple(f1, f2);
    return concat_c<T>({f1p, f2p});
  }

  void params(const std::string& p, NamedParams<T>& out) {
    stem.params(p + ".stem", out);
    if (cfg.cross_attention) {
      proj1.params(p + ".proj1", out);
      proj2.params(p + ".proj2", out);
      out.push_back({p + ".temp1", temp1});
      out.push_back({p + ".temp2", temp2});
    }
    coupling.params(p + ".coupling", out);
  }
};

/// Base feature extraction: residual groups of transformer blocks.
template <class T>
struct Bfe {
  BfeConfig cfg;
  std::vector<TransformerBlock<T>> blocks;  // groups * blocks_per_group
  std::vector<Conv2d<T>> group_convs;

  Bfe() = default;
  Bfe(const BfeConfig& c, std::mt19937_64& rng) : cfg(c) {
    for (int g = 0; g < cfg.groups; ++g) {
      for (int i = 0; i < cfg.blocks_per_residual_group; ++i)
        blocks.emplace_back(cfg.channels, cfg.heads, cfg.ffn_expansion, rng);
      if (cfg.residual) group_convs.emplace_back(cfg.channels, cfg.channels, 3, rng);
    }
  }

  Var<T> operator()(const Var<T>& phi_s) const {
    Var<T> x = phi_s;
    int bi = 0;
    for (int g = 0; g < cfg.groups; ++g) {
      Var<T> y = x;
      for (int i = 0; i < cfg.blocks_per_residual_group; ++i) y = blocks[bi++](y);
      x = cfg.residual ? group_convs[g](y) + x : y;
    }
    return x;
  }

  void params(const std::string& p, NamedParams<T>& out) {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].params(p + ".block" + std::to_string(i), out);
    for (std::size_t i = 0; i < group_convs.size(); ++i)
      group_convs[i].params(p + ".conv" + std::to_string(i), out);
  }
};

}  // namespace smfnet
