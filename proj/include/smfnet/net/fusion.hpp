#pragma once

#include "smfnet/core/nn.hpp"

namespace smfnet {

enum class AggregateMode { Add, Concat };

/// Multiply a (B,C,H,W) tensor by a learnable scalar (shape {1}).
template <class T>
Var<T> scale_by_scalar(const Var<T>& x, const Var<T>& s) {
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  auto flat = reshape(x, {B, 1, C, H * W});
  return reshape(scale_per_head(flat, s), {B, C, H, W});
}

struct DetailFusionConfig {
  int channels = 64;
  int layers = 2;
  double exp_clamp = 5.0;
};

/// Detail fusion layers: per layer, with shared psi and learnable scale a,
///   out1 = (x1 - psi(x2)) * exp(-a psi(x2)),  out2 symmetric.
/// Half roles alternate between layers; the last two layers' outputs are
/// concatenated and projected back to the stream width.
template <class T>
struct DetailFusion {
  DetailFusionConfig cfg;
  std::vector<BRB<T>> psi;     // one per layer, shared between halves
  std::vector<Var<T>> scale;   // learnable a per layer, init 1
  Conv2d<T> project;

  DetailFusion() = default;
  DetailFusion(const DetailFusionConfig& c, std::mt19937_64& rng) : cfg(c) {
    check(cfg.layers >= 1, "DetailFusion: need at least 1 layer");
    int ch = cfg.channels;
    for (int i = 0; i < cfg.layers; ++i) {
      psi.emplace_back(ch, ch, std::max(8, ch / 2), rng);
      scale.push_back(Var<T>::leaf(Tensor<T>::full({1}, T(1)), true));
    }
    int tail = std::min(2, cfg.layers);
    project = Conv2d<T>(2 * ch * tail, ch, 1, rng);
  }

  Var<T> operator()(const Var<T>& detail_v, const Var<T>& detail_i) const {
    check(detail_v.shape() == detail_i.shape(), "detail_fusion: shape mismatch");
    Var<T> x1 = detail_v, x2 = detail_i;
    std::vector<Var<T>> layer_outs;
    for (int i = 0; i < cfg.layers; ++i) {
      auto p2 = psi[i](x2);
      auto p1 = psi[i](x1);
      auto e2 = exp_v(soft_clamp(neg(scale_by_scalar(p2, scale[i])), T(cfg.exp_clamp)));
      auto e1 = exp_v(soft_clamp(neg(scale_by_scalar(p1, scale[i])), T(cfg.exp_clamp)));
      auto out1 = (x1 - p2) * e2;
      auto out2 = (x2 - p1) * e1;
      layer_outs.push_back(concat_c<T>({out1, out2}));
      // Alternate the half roles for the next layer.
      x1 = out2;
      x2 = out1;
    }
    int tail = std::min(2, cfg.layers);
    std::vector<Var<T>> last(layer_outs.end() - tail, layer_outs.end());
    return project(concat_c(last));
  }

  void params(const std::string& p, NamedParams<T>& out) {
    for (int i = 0; i < cfg.layers; ++i) {
      psi[i].params(p + ".psi" + std::to_string(i), out);
      out.push_back({p + ".scale" + std::to_string(i), scale[i]});
    }
    project.params(p + ".project", out);
  }
};

/// Base fusion: sum the two streams, then one MDTA+LeFF transformer block.
template <class T>
struct BaseFusion {
  TransformerBlock<T> block;

  BaseFusion() = default;
  BaseFusion(int c, int heads, int ffn_ratio, std::mt19937_64& rng)
      : block(c, heads, ffn_ratio, rng) {}

  Var<T> operator()(const Var<T>& base_v, const Var<T>& base_i) const {
    check(base_v.shape() == base_i.shape(), "base_fusion: shape mismatch");
    return block(base_v + base_i);
  }

  void params(const std::string& p, NamedParams<T>& out) { block.params(p + ".block", out); }
};

/// Graph fusion: channel concat, pointwise projection (Conv I2C OC K1).
template <class T>
struct GraphFusion {
  Conv2d<T> project;

  GraphFusion() = default;
  GraphFusion(int c, std::mt19937_64& rng) { project = Conv2d<T>(2 * c, c, 1, rng); }

  Var<T> operator()(const Var<T>& graph_v, const Var<T>& graph_i) const {
    check(graph_v.shape() == graph_i.shape(), "graph_fusion: shape mismatch");
    return project(concat_c<T>({graph_v, graph_i}));
  }

  void params(const std::string& p, NamedParams<T>& out) { project.params(p + ".project", out); }
};

/// Separable conv used by the decoder tail (depthwise 3x3 + pointwise).
template <class T>
struct SepConv {
  Conv2d<T> dw, pw;

  SepConv() = default;
  SepConv(int cin, int cout, std::mt19937_64& rng) {
    dw = Conv2d<T>(cin, cin, 3, rng, cin);
    pw = Conv2d<T>(cin, cout, 1, rng);
  }
  Var<T> operator()(const Var<T>& x) const { return pw(dw(x)); }
  void params(const std::string& p, NamedParams<T>& out) {
    dw.params(p + ".dw", out);
    pw.params(p + ".pw", out);
  }
};

/// Decoder: aggregate the streams (addition by default; concatenation keeps
/// an input projection whose width shows up in checkpoint manifests), then
/// transformer -> three separable convs -> sigmoid, emitting one channel.
template <class T>
struct Decoder {
  AggregateMode mode = AggregateMode::Add;
  int streams = 3;
  Conv2d<T> in_proj;  // only in concat mode
  TransformerBlock<T> block;
  SepConv<T> conv1, conv2, conv3;

  Decoder() = default;
  Decoder(int c, int heads, int ffn_ratio, AggregateMode mode_, int streams_, std::mt19937_64& rng)
      : mode(mode_), streams(streams_) {
    if (mode == AggregateMode::Concat) in_proj = Conv2d<T>(streams * c, c, 1, rng);
    block = TransformerBlock<T>(c, heads, ffn_ratio, rng);
    conv1 = SepConv<T>(c, c, rng);
    conv2 = SepConv<T>(c, c, rng);
    conv3 = SepConv<T>(c, 1, rng);
  }

  Var<T> operator()(const std::vector<Var<T>>& triplet) const {
    check(static_cast<int>(triplet.size()) == streams, "decode: wrong stream count");
    Var<T> x;
    if (mode == AggregateMode::Add) {
      x = triplet[0];
      for (std::size_t i = 1; i < triplet.size(); ++i) x = x + triplet[i];
    } else {
      x = in_proj(concat_c(triplet));
    }
    x = block(x);
    x = gelu_v(conv1(x));
    x = gelu_v(conv2(x));
    return sigmoid_v(conv3(x));
  }

  void params(const std::string& p, NamedParams<T>& out) {
    if (mode == AggregateMode::Concat) in_proj.params(p + ".in_proj", out);
    block.params(p + ".block", out);
    conv1.params(p + ".conv1", out);
    conv2.params(p + ".conv2", out);
    conv3.params(p + ".conv3", out);
  }
};

}  // namespace smfnet
