#pragma once

#include "smfnet/imaging.hpp"
#include "smfnet/net/encoder.hpp"
#include "smfnet/net/fusion.hpp"
#include "smfnet/net/graph.hpp"

namespace smfnet {

struct ModelConfig {
  int channels = 64;
  int heads = 8;
  int ffn_expansion = 2;
  CaiConfig cai;
  BfeConfig bfe;
  GrConfig gr;
  DetailFusionConfig detail_fusion;
  bool use_graph = true;                       // AE3 off
  AggregateMode aggregate = AggregateMode::Add;  // AE4 concat
  bool swap_fusion_layers = false;             // AE5

  static ModelConfig defaults(int channels = 64, int heads = 8) {
    ModelConfig m;
    m.channels = channels;
    m.heads = heads;
    m.cai.total_channels = channels;
    m.cai.split_point = channels / 2;
    m.cai.heads = heads;
    m.cai.dense_growth = std::max(4, channels / 2);
    m.bfe.channels = channels;
    m.bfe.heads = heads;
    m.bfe.ffn_expansion = m.ffn_expansion;
    m.gr.node_channels = channels;
    m.detail_fusion.channels = channels;
    return m;
  }

  /// Smallest spatial multiple every forward pass needs.
  int size_multiple() const { return use_graph ? gr.max_factor() : 2; }
  int stream_count() const { return use_graph ? 3 : 2; }
};

/// Per-modality feature triplet (detail, base, graph).
template <class T>
struct FeatureTriplet {
  Var<T> detail, base, graph;
};

/// The full three-branch encoder / fusion / decoder network. The two
/// modality streams share every encoder parameter.
template <class T>
struct SmfNet {
  ModelConfig cfg;
  Sfe<T> sfe;
  Cai<T> cai;
  Bfe<T> bfe;
  GraphReasoning<T> gr;
  bool with_fusion = false;
  DetailFusion<T> fuse_detail;
  BaseFusion<T> fuse_base;
  GraphFusion<T> fuse_graph;
  Decoder<T> decoder;

  SmfNet() = default;
  SmfNet(const ModelConfig& c, std::uint64_t seed, bool fusion_layers) : cfg(c), with_fusion(fusion_layers) {
    std::mt19937_64 rng(seed);
    sfe = Sfe<T>(cfg.channels, cfg.heads, cfg.ffn_expansion, rng);
    cai = Cai<T>(cfg.cai, rng);
    bfe = Bfe<T>(cfg.bfe, rng);
    if (cfg.use_graph) gr = GraphReasoning<T>(cfg.gr, rng);
    if (with_fusion) {
      fuse_detail = DetailFusion<T>(cfg.detail_fusion, rng);
      fuse_base = BaseFusion<T>(cfg.channels, cfg.heads, cfg.ffn_expansion, rng);
      if (cfg.use_graph) fuse_graph = GraphFusion<T>(cfg.channels, rng);
    }
    decoder = Decoder<T>(cfg.channels, cfg.heads, cfg.ffn_expansion, cfg.aggregate,
                         cfg.stream_count(), rng);
  }

  /// Encodes the (visible luminance, infrared) pair into two triplets.
  std::pair<FeatureTriplet<T>, FeatureTriplet<T>> encode(const Var<T>& vis_y,
                                                         const Var<T>& ir) const {
    auto sv = sfe(vis_y);
    auto si = sfe(ir);
    FeatureTriplet<T> tv, ti;
    tv.detail = cai(sv);
    ti.detail = cai(si);
    tv.base = bfe(sv);
    ti.base = bfe(si);
    if (cfg.use_graph) std::tie(tv.graph, ti.graph) = gr(sv, si);
    return {tv, ti};
  }

  std::vector<Var<T>> streams_of(const FeatureTriplet<T>& t) const {
    std::vector<Var<T>> s = {t.detail, t.base};
    if (cfg.use_graph) s.push_back(t.graph);
    return s;
  }

  /// Stage-I reconstruction of one modality from its own triplet.
  Var<T> decode_recon(const FeatureTriplet<T>& t) const { return decoder(streams_of(t)); }

  /// Stage-II fused triplet via the fusion layers.
  FeatureTriplet<T> fuse_features(const FeatureTriplet<T>& tv, const FeatureTriplet<T>& ti) const {
    check(with_fusion, "fuse_features: fusion layers missing (stage-I model)");
    FeatureTriplet<T> f;
    if (!cfg.swap_fusion_layers) {
      f.detail = fuse_detail(tv.detail, ti.detail);
      f.base = fuse_base(tv.base, ti.base);
    } else {  // AE5: exchange the detail and base fusion layers
      f.detail = fuse_base(tv.detail, ti.detail);
      f.base = fuse_detail(tv.base, ti.base);
    }
    if (cfg.use_graph) f.graph = fuse_graph(tv.graph, ti.graph);
    return f;
  }

  /// Full stage-II forward: fused luminance in (0,1).
  Var<T> fuse_forward(const Var<T>& vis_y, const Var<T>& ir) const {
    auto [tv, ti] = encode(vis_y, ir);
    return decoder(streams_of(fuse_features(tv, ti)));
  }

  NamedParams<T> named_params() {
    NamedParams<T> out;
    sfe.params("sfe", out);
    cai.params("cai", out);
    bfe.params("bfe", out);
    if (cfg.use_graph) gr.params("gr", out);
    if (with_fusion) {
      fuse_detail.params("fuse_detail", out);
      fuse_base.params("fuse_base", out);
      if (cfg.use_graph) fuse_graph.params("fuse_graph", out);
    }
    decoder.params("decoder", out);
    return out;
  }
};

/// Inference: pad to the network multiple, fuse luminance, restore the
/// visible chroma, crop back to the original size.
template <class T>
Image<T> fuse_pair(const SmfNet<T>& model, const Image<T>& ir, const Image<T>& vis) {
  check(model.with_fusion, "fuse_pair: fusion layers missing (stage-I checkpoint)");
  check(ir.channels == Channels::GRAY1, "fuse_pair: infrared must be single-channel");
  check(ir.height() == vis.height() && ir.width() == vis.width(),
        "fuse_pair: source images must share dimensions");
  NoGradGuard ng;
  Image<T> vis_ycc;
  Image<T> vis_y;
  vis_y.channels = Channels::GRAY1;
  bool has_chroma = vis.channels != Channels::GRAY1;
  if (has_chroma) {
    vis_ycc = vis.channels == Channels::RGB3 ? rgb_to_ycbcr(vis) : vis;
    int B = vis.batch(), H = vis.height(), W = vis.width();
    vis_y.data = Tensor<T>({B, 1, H, W});
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) vis_y.data.at(b, 0, h, w) = vis_ycc.data.at(b, 0, h, w);
  } else {
    vis_y = vis;
  }

  int m = model.cfg.size_multiple(), oh = 0, ow = 0;
  auto ir_p = pad_to_multiple(ir, m, oh, ow);
  auto vis_p = pad_to_multiple(vis_y, m, oh, ow);
  auto fused_y = model.fuse_forward(Var<T>::constant(vis_p.data), Var<T>::constant(ir_p.data));

  Image<T> out;
  out.channels = Channels::YCBCR3;
  int B = ir.batch();
  out.data = Tensor<T>({B, 3, oh, ow});
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < oh; ++h)
      for (int w = 0; w < ow; ++w) {
        out.data.at(b, 0, h, w) = fused_y.val().at(b, 0, h, w);
        out.data.at(b, 1, h, w) = has_chroma ? vis_ycc.data.at(b, 1, h, w) : T(0.5);
        out.data.at(b, 2, h, w) = has_chroma ? vis_ycc.data.at(b, 2, h, w) : T(0.5);
      }
  auto rgb = ycbcr_to_rgb(out);
  for (auto& v : rgb.data.vec()) v = std::clamp(v, T(0), T(1));
  return rgb;
}

}  // namespace smfnet
