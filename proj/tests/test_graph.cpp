#include <catch2/catch_amalgamated.hpp>

#include "smfnet/net/graph.hpp"
#include "test_util.hpp"

using namespace smfnet;
using testutil::naive_conv2d;
using testutil::rand_tensor;

namespace {

Tensor<double> sigmoid_t(Tensor<double> x) {
  for (auto& v : x.vec()) v = 1.0 / (1.0 + std::exp(-v));
  return x;
}
Tensor<double> tanh_t(Tensor<double> x) {
  for (auto& v : x.vec()) v = std::tanh(v);
  return x;
}
Tensor<double> concat2(const Tensor<double>& a, const Tensor<double>& b) {
  int B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor<double> out({B, 2 * C, H, W});
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          out.at(bi, c, h, w) = a.at(bi, c, h, w);
          out.at(bi, C + c, h, w) = b.at(bi, c, h, w);
        }
  return out;
}

}  // namespace

TEST_CASE("adjacency matches the closed-form enumeration for n in {2,3,4}") {
  for (int n : {2, 3, 4}) {
    auto edges = graph_adjacency(n);
    // 2 * n*(n-1) intra-modality pairs plus 2n inter-modality links.
    CHECK(static_cast<int>(edges.size()) == 2 * n * (n - 1) + 2 * n);
    int intra = 0, inter = 0;
    for (auto [k, l] : edges) {
      REQUIRE(k != l);
      REQUIRE(k >= 0);
      REQUIRE(l < 2 * n);
      bool same_modality = (k < n) == (l < n);
      if (same_modality) {
        ++intra;
      } else {
        ++inter;
        CHECK(k % n == l % n);  // cross links connect equal scales only
      }
    }
    CHECK(intra == 2 * n * (n - 1));
    CHECK(inter == 2 * n);
    // Directed: every edge has its reverse.
    for (auto [k, l] : edges)
      CHECK(std::find(edges.begin(), edges.end(), std::make_pair(l, k)) != edges.end());
  }
}

TEST_CASE("message passing matches the brute-force loop oracle (n=2)") {
  std::mt19937_64 rng(201);
  GrConfig cfg;
  cfg.scales = 2;
  cfg.node_channels = 4;
  GraphReasoning<double> gr(cfg, rng);

  auto phi_v = Var<double>::constant(rand_tensor({1, 4, 8, 8}, rng));
  auto phi_i = Var<double>::constant(rand_tensor({1, 4, 8, 8}, rng));
  NoGradGuard ng;
  auto g = gr.build_nodes(phi_v, phi_i);
  REQUIRE(g.nodes.size() == 4);
  REQUIRE(g.edges.size() == g.adjacency.size());

  // Oracle edges: Conv(v_l - v_k) with the same shared weights.
  for (std::size_t e = 0; e < g.adjacency.size(); ++e) {
    auto [k, l] = g.adjacency[e];
    Tensor<double> diff = g.nodes[l].val();
    for (long long i = 0; i < diff.numel(); ++i) diff[i] -= g.nodes[k].val()[i];
    auto ref = naive_conv2d(diff, gr.edge_conv.w.val(), gr.edge_conv.b.val());
    for (long long i = 0; i < ref.numel(); ++i)
      REQUIRE(g.edges[e].val()[i] == Catch::Approx(ref[i]).margin(1e-6));
  }

  // Oracle messages: m_l = sum_k sigmoid(e_{k,l}) * v_k.
  auto messages = gr.message_pass(g);
  std::vector<Tensor<double>> ref_msgs(4, Tensor<double>::zeros(g.nodes[0].shape()));
  for (std::size_t e = 0; e < g.adjacency.size(); ++e) {
    auto [k, l] = g.adjacency[e];
    auto gate = sigmoid_t(g.edges[e].val());
    for (long long i = 0; i < gate.numel(); ++i)
      ref_msgs[l][i] += gate[i] * g.nodes[k].val()[i];
  }
  for (int l = 0; l < 4; ++l)
    for (long long i = 0; i < ref_msgs[l].numel(); ++i)
      REQUIRE(messages[l].val()[i] == Catch::Approx(ref_msgs[l][i]).margin(1e-6));

  // Oracle GRU: z=sig(Wz[v,m]), r=sig(Wr[v,m]), h=tanh(Wh[r*v,m]),
  // v' = (1-z)*v + z*h.
  std::vector<Tensor<double>> pre;
  for (auto& node : g.nodes) pre.push_back(node.val());
  gr.node_update(g, messages);
  for (int l = 0; l < 4; ++l) {
    auto vm = concat2(pre[l], ref_msgs[l]);
    auto z = sigmoid_t(naive_conv2d(vm, gr.gru_z.w.val(), gr.gru_z.b.val()));
    auto r = sigmoid_t(naive_conv2d(vm, gr.gru_r.w.val(), gr.gru_r.b.val()));
    Tensor<double> rv = pre[l];
    for (long long i = 0; i < rv.numel(); ++i) rv[i] *= r[i];
    auto h = tanh_t(naive_conv2d(concat2(rv, ref_msgs[l]), gr.gru_h.w.val(), gr.gru_h.b.val()));
    for (long long i = 0; i < h.numel(); ++i) {
      double expect = (1.0 - z[i]) * pre[l][i] + z[i] * h[i];
      REQUIRE(g.nodes[l].val()[i] == Catch::Approx(expect).margin(1e-6));
    }
  }
}

TEST_CASE("graph readout restores the input resolution") {
  std::mt19937_64 rng(202);
  for (int scales : {2, 3}) {
    GrConfig cfg;
    cfg.scales = scales;
    cfg.node_channels = 4;
    GraphReasoning<double> gr(cfg, rng);
    int m = cfg.max_factor();
    auto phi_v = Var<double>::constant(rand_tensor({1, 4, 2 * m, 3 * m}, rng));
    auto phi_i = Var<double>::constant(rand_tensor({1, 4, 2 * m, 3 * m}, rng));
    NoGradGuard ng;
    auto [ov, oi] = gr(phi_v, phi_i);
    CHECK(ov.shape() == phi_v.shape());
    CHECK(oi.shape() == phi_i.shape());
    CHECK(ov.val().all_finite());
  }
}

TEST_CASE("shared weights make the two modality streams symmetric") {
  std::mt19937_64 rng(203);
  GrConfig cfg;
  cfg.scales = 2;
  cfg.node_channels = 4;
  GraphReasoning<double> gr(cfg, rng);
  auto a = Var<double>::constant(rand_tensor({1, 4, 8, 8}, rng));
  auto b = Var<double>::constant(rand_tensor({1, 4, 8, 8}, rng));
  NoGradGuard ng;
  auto [x1, y1] = gr(a, b);
  auto [y2, x2] = gr(b, a);
  for (long long i = 0; i < x1.numel(); ++i) {
    REQUIRE(x1.val()[i] == Catch::Approx(x2.val()[i]).margin(1e-10));
    REQUIRE(y1.val()[i] == Catch::Approx(y2.val()[i]).margin(1e-10));
  }
}

TEST_CASE("indivisible spatial dims are rejected with the required multiple") {
  std::mt19937_64 rng(204);
  GrConfig cfg;
  cfg.scales = 3;  // needs multiples of 8
  cfg.node_channels = 4;
  GraphReasoning<double> gr(cfg, rng);
  auto x = Var<double>::constant(rand_tensor({1, 4, 12, 12}, rng));
  CHECK_THROWS_WITH(gr(x, x), Catch::Matchers::ContainsSubstring("divisible by 8"));
}

TEST_CASE("multiple message rounds refresh edges and stay finite") {
  std::mt19937_64 rng(205);
  GrConfig cfg;
  cfg.scales = 2;
  cfg.node_channels = 4;
  cfg.message_rounds = 3;
  GraphReasoning<double> gr(cfg, rng);
  auto a = Var<double>::constant(rand_tensor({1, 4, 8, 8}, rng));
  auto b = Var<double>::constant(rand_tensor({1, 4, 8, 8}, rng));
  NoGradGuard ng;
  auto [ov, oi] = gr(a, b);
  CHECK(ov.val().all_finite());
  CHECK(oi.val().all_finite());
}
