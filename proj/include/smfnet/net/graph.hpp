#pragma once

#include <utility>

#include "smfnet/core/nn.hpp"

namespace smfnet {

struct GrConfig {
  int scales = 3;          // n: nodes per modality
  int message_rounds = 1;  // T_mp
  int node_channels = 64;
  int gru_kernel = 3;

  void validate() const {
    check(scales >= 2, "GrConfig: need at least 2 scales");
    check(message_rounds >= 1, "GrConfig: need at least 1 round");
  }
  int pool_factor(int i) const { return 1 << (i + 1); }  // {2, 4, 8, ...}
  int common_factor() const { return pool_factor((scales - 1) / 2); }
  int max_factor() const { return pool_factor(scales - 1); }
};

/// Ordered directed edges: intra-modality across scales plus inter-modality
/// at equal scale, both directions. Node ids: [0,n) visible, [n,2n) infrared.
inline std::vector<std::pair<int, int>> graph_adjacency(int n) {
  std::vector<std::pair<int, int>> edges;
  for (int m = 0; m < 2; ++m)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j) edges.push_back({m * n + i, m * n + j});
  for (int i = 0; i < n; ++i) {
    edges.push_back({i, n + i});
    edges.push_back({n + i, i});
  }
  return edges;
}

template <class T>
struct GraphBundle {
  std::vector<Var<T>> nodes;                  // 2n, common reduced resolution
  std::vector<std::pair<int, int>> adjacency;  // ordered (k, l)
  std::vector<Var<T>> edges;                  // aligned with adjacency
};

/// Graph reasoning branch (multi-scale nodes, directed edges, gated
/// messages, convolutional GRU update, per-modality readout).
template <class T>
struct GraphReasoning {
  GrConfig cfg;
  std::vector<Conv2d<T>> node_convs;  // one per scale, shared across modalities
  Conv2d<T> edge_conv;                // linear, shared across edges
  Conv2d<T> gru_z, gru_r, gru_h;
  Conv2d<T> readout;                  // shared across modalities

  GraphReasoning() = default;
  GraphReasoning(const GrConfig& c, std::mt19937_64& rng) : cfg(c) {
    cfg.validate();
    int ch = cfg.node_channels;
    for (int i = 0; i < cfg.scales; ++i) node_convs.emplace_back(ch, ch, 3, rng);
    edge_conv = Conv2d<T>(ch, ch, 3, rng);
    int k = cfg.gru_kernel;
    gru_z = Conv2d<T>(2 * ch, ch, k, rng);
    gru_r = Conv2d<T>(2 * ch, ch, k, rng);
    gru_h = Conv2d<T>(2 * ch, ch, k, rng);
    readout = Conv2d<T>(cfg.scales * ch, ch, 1, rng);
  }

  /// Pools both modalities to n nodes each at the common resolution and
  /// initializes the directed edges.
  GraphBundle<T> build_nodes(const Var<T>& phi_v, const Var<T>& phi_i) const {
    check(phi_v.shape() == phi_i.shape(), "build_nodes: modality shape mismatch");
    int H = phi_v.shape()[2], W = phi_v.shape()[3];
    int fmax = cfg.max_factor();
    check(H % fmax == 0 && W % fmax == 0,
          "build_nodes: spatial dims must be divisible by " + std::to_string(fmax));
    GraphBundle<T> g;
    int fc = cfg.common_factor();
    for (const Var<T>* phi : {&phi_v, &phi_i}) {
      for (int i = 0; i < cfg.scales; ++i) {
        int f = cfg.pool_factor(i);
        auto node = node_convs[i](avg_pool(*phi, f));
        if (f < fc) node = avg_pool(node, fc / f);
        if (f > fc) node = upsample_nearest(node, f / fc);
        g.nodes.push_back(node);
      }
    }
    g.adjacency = graph_adjacency(cfg.scales);
    refresh_edges(g);
    return g;
  }

  Var<T> edge_embed(const Var<T>& vk, const Var<T>& vl) const {
    check(vk.shape() == vl.shape(), "edge_embed: shape mismatch");
    return edge_conv(vl - vk);
  }

  void refresh_edges(GraphBundle<T>& g) const {
    g.edges.clear();
    for (auto [k, l] : g.adjacency) g.edges.push_back(edge_embed(g.nodes[k], g.nodes[l]));
  }

  /// m_l = sum over in-neighbors k of sigmoid(e_{k,l}) * v_k.
  std::vector<Var<T>> message_pass(const GraphBundle<T>& g) const {
    std::vector<Var<T>> messages(g.nodes.size());
    for (std::size_t e = 0; e < g.adjacency.size(); ++e) {
      auto [k, l] = g.adjacency[e];
      auto m = sigmoid_v(g.edges[e]) * g.nodes[k];
      messages[l] = messages[l].defined() ? messages[l] + m : m;
    }
    return messages;
  }

  /// Convolutional GRU: hidden = previous node value, input = message.
  Var<T> gru_cell(const Var<T>& v, const Var<T>& m) const {
    auto vm = concat_c<T>({v, m});
    auto z = sigmoid_v(gru_z(vm));
    auto r = sigmoid_v(gru_r(vm));
    auto h = tanh_v(gru_h(concat_c<T>({r * v, m})));
    auto one_minus_z = add_scalar(neg(z), T(1));
    return one_minus_z * v + z * h;
  }

  void node_update(GraphBundle<T>& g, const std::vector<Var<T>>& messages) const {
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
      g.nodes[i] = gru_cell(g.nodes[i], messages[i]);
  }

  /// Full branch: build graph, run message-passing rounds, per-modality
  /// readout back to the input resolution.
  std::pair<Var<T>, Var<T>> operator()(const Var<T>& phi_v, const Var<T>& phi_i) const {
    int H = phi_v.shape()[2], W = phi_v.shape()[3];
    auto g = build_nodes(phi_v, phi_i);
    for (int t = 0; t < cfg.message_rounds; ++t) {
      if (t > 0) refresh_edges(g);
      node_update(g, message_pass(g));
    }
    int fc = cfg.common_factor();
    auto merge = [&](int offset) {
      std::vector<Var<T>> ups;
      for (int i = 0; i < cfg.scales; ++i)
        ups.push_back(upsample_nearest(g.nodes[offset + i], fc));
      (void)H; (void)W;
      return readout(concat_c(ups));
    };
    return {merge(0), merge(cfg.scales)};
  }

  void params(const std::string& p, NamedParams<T>& out) {
    for (std::size_t i = 0; i < node_convs.size(); ++i)
      node_convs[i].params(p + ".node_conv" + std::to_string(i), out);
    edge_conv.params(p + ".edge_conv", out);
    gru_z.params(p + ".gru_z", out);
    gru_r.params(p + ".gru_r", out);
    gru_h.params(p + ".gru_h", out);
    readout.params(p + ".readout", out);
  }
};

}  // namespace smfnet
