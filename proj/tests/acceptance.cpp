// Acceptance suite: one pass/fail line per gated criterion, plus a reported
// (non-gated) note on the full-scale benchmark pathway.  Exits nonzero if any
// gated criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "metric_ref.hpp"
#include "smfnet/metrics.hpp"
#include "smfnet/train.hpp"
#include "test_util.hpp"

using namespace smfnet;
using testutil::gradcheck;
using testutil::naive_conv2d;
using testutil::rand_tensor;
using testutil::synth_image;
using testutil::TempDir;

namespace {

int g_failures = 0;

void run(const std::string& id, const std::string& what, const std::function<bool()>& body) {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = false;
  std::string note;
  try {
    ok = body();
  } catch (const std::exception& e) {
    note = std::string("  [") + e.what() + "]";
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("[%s] %s: %s (%.1fs)%s\n", ok ? "PASS" : "FAIL", id.c_str(), what.c_str(), secs,
              note.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Image<double> quantized(Image<double> img) {
  for (auto& v : img.data.vec()) v = std::round(v * 255.0) / 255.0;
  return img;
}

Image<double> make_fused(const Image<double>& ir, const Image<double>& vis) {
  Image<double> f = ir;
  for (long long i = 0; i < f.data.numel(); ++i)
    f.data[i] = std::clamp(0.6 * std::max(ir.data[i], vis.data[i]) + 0.4 * vis.data[i], 0.0, 1.0);
  return quantized(f);
}

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.apply_toy();
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.graph_scales = 2;
  cfg.patch_size = 16;
  cfg.patch_stride = 16;
  return cfg;
}

// --------------------------------------------------------------------------
// 1. Invertible coupling round trip: 100 random draws, sup-norm 1e-5, <10s.
// --------------------------------------------------------------------------
bool coupling_invertibility() {
  auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> d(-0.3, 0.3);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    InvertibleCoupling<double> c(3, 5, 8, 5.0, rng);
    NamedParams<double> ps;
    c.params("c", ps);
    for (auto& [name, p] : ps)
      for (auto& v : p.val().vec()) v = d(rng);
    auto f1 = Var<double>::constant(rand_tensor({1, 3, 6, 6}, rng, -2, 2));
    auto f2 = Var<double>::constant(rand_tensor({1, 5, 6, 6}, rng, -2, 2));
    NoGradGuard ng;
    auto [f1p, f2p] = c.couple(f1, f2);
    auto [r1, r2] = c.uncouple(f1p, f2p);
    for (long long i = 0; i < f1.numel(); ++i)
      worst = std::max(worst, std::abs(r1.val()[i] - f1.val()[i]));
    for (long long i = 0; i < f2.numel(); ++i)
      worst = std::max(worst, std::abs(r2.val()[i] - f2.val()[i]));
  }
  return worst < 1e-5 && elapsed_since(t0) < 10.0;
}

// --------------------------------------------------------------------------
// 2. Loss self-identities over 50 random images, each within 1e-6.
// --------------------------------------------------------------------------
bool loss_identities() {
  std::mt19937_64 rng(12);
  NoGradGuard ng;
  for (int i = 0; i < 50; ++i) {
    auto x = Var<double>::constant(rand_tensor({1, 1, 16, 16}, rng, 0.0, 1.0));
    if (std::abs(ssim_loss(x, x).item()) >= 1e-6) return false;
    if (std::abs(grad_loss(x, x).item()) >= 1e-6) return false;
    if (std::abs(semantic_gram_loss(x, x).item()) >= 1e-6) return false;
    if (std::abs(correlation_coefficient(x, x).item() - 1.0) >= 1e-6) return false;
  }
  return true;
}

// --------------------------------------------------------------------------
// 3. Decomposition losses hit their closed forms for identical features.
// --------------------------------------------------------------------------
bool decomp_closed_forms() {
  std::mt19937_64 rng(13);
  auto f = Var<double>::constant(rand_tensor({1, 4, 8, 8}, rng));
  auto g = Var<double>::constant(rand_tensor({1, 4, 8, 8}, rng));
  auto h = Var<double>::constant(rand_tensor({1, 4, 8, 8}, rng));
  NoGradGuard ng;
  double s1 = decomp_loss_stage1(f, f, g, g).item();
  double s2 = decomp_loss_stage2(f, f, h, h, g, g).item();
  return std::abs(s1 - 1.0 / 2.01) < 1e-6 && std::abs(s2 - 2.0 / 2.01) < 1e-6;
}

// --------------------------------------------------------------------------
// 4. Reverse-mode gradients vs central differences (h=1e-3, rel < 1e-3) for
//    every loss op and the mean-reduced encoder branches on 8x8 miniatures.
// --------------------------------------------------------------------------
bool gradient_checks() {
  std::mt19937_64 rng(14);
  auto leafv = [](Tensor<double> t) { return Var<double>::leaf(std::move(t), true); };
  auto x = leafv(rand_tensor({1, 1, 8, 8}, rng, 0.0, 1.0));
  auto y = leafv(rand_tensor({1, 1, 8, 8}, rng, 0.0, 1.0));
  auto a = leafv(rand_tensor({1, 2, 8, 8}, rng));
  auto b = leafv(rand_tensor({1, 2, 8, 8}, rng));

  std::vector<std::function<Var<double>()>> cases = {
      [&] { return ssim_loss(x, y); },
      [&] { return grad_loss(x, y); },
      [&] { return semantic_gram_loss(x, y); },
      [&] { return correlation_coefficient(a, b); },
      [&] { return decomp_loss_stage1(a, b, x, y); },
      [&] { return decomp_loss_stage2(a, b, x, y, a, b); },
      [&] { return intensity_loss(x, y, mul_scalar(x, 0.5)); },
      [&] { return fusion_grad_loss(x, y, mul_scalar(x, 0.5)); },
  };
  for (auto& build : cases) {
    for (auto* v : {&x, &y, &a, &b}) v->zero_grad();
    if (gradcheck(build, {x, y, a, b}, rng).max_rel >= 1e-3) return false;
  }

  ModelConfig mc = ModelConfig::defaults(8, 2);
  mc.gr.scales = 2;
  SmfNet<double> model(mc, 5, false);
  auto vis = leafv(rand_tensor({1, 1, 8, 8}, rng, 0.0, 1.0));
  auto ir = leafv(rand_tensor({1, 1, 8, 8}, rng, 0.0, 1.0));
  std::vector<std::function<Var<double>()>> branches = {
      [&] { return mean_all(model.cai(model.sfe(vis))); },
      [&] { return mean_all(model.bfe(model.sfe(vis))); },
      [&] {
        auto [gv, gi] = model.gr(model.sfe(vis), model.sfe(ir));
        return mean_all(gv + gi);
      },
  };
  for (auto& build : branches) {
    vis.zero_grad();
    ir.zero_grad();
    if (gradcheck(build, {vis, ir}, rng, 1e-3, 16).max_rel >= 1e-3) return false;
  }
  return true;
}

// --------------------------------------------------------------------------
// 5. Inference shape contract: fused output matches the source dimensions
//    exactly, stays in [0,1], and all three sizes run in under 30s.
// --------------------------------------------------------------------------
bool inference_shapes() {
  auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc = ModelConfig::defaults(8, 2);
  SmfNet<float> model(mc, 21, true);
  for (auto [h, w] : std::vector<std::pair<int, int>>{{128, 128}, {480, 640}, {97, 143}}) {
    auto ir = synth_image<float>(h, w, 1, true);
    auto vis = synth_image<float>(h, w, 2, false);
    auto fused = fuse_pair(model, ir, vis);
    if (fused.height() != h || fused.width() != w) return false;
    for (long long i = 0; i < fused.data.numel(); ++i)
      if (fused.data[i] < 0.0f || fused.data[i] > 1.0f) return false;
  }
  return elapsed_since(t0) < 30.0;
}

// --------------------------------------------------------------------------
// 6. Graph reasoning: brute-force oracles for message passing and the GRU
//    node update on an n=2 toy graph, plus the adjacency enumeration.
// --------------------------------------------------------------------------
bool graph_oracles() {
  for (int n : {2, 3, 4}) {
    auto edges = graph_adjacency(n);
    if (static_cast<int>(edges.size()) != 2 * n * (n - 1) + 2 * n) return false;
    for (auto [k, l] : edges)
      if (k == l || k < 0 || l >= 2 * n) return false;
  }

  std::mt19937_64 rng(16);
  GrConfig cfg;
  cfg.scales = 2;
  cfg.node_channels = 4;
  GraphReasoning<double> gr(cfg, rng);
  auto phi_v = Var<double>::constant(rand_tensor({1, 4, 8, 8}, rng));
  auto phi_i = Var<double>::constant(rand_tensor({1, 4, 8, 8}, rng));
  NoGradGuard ng;
  auto g = gr.build_nodes(phi_v, phi_i);

  auto sigmoid_t = [](Tensor<double> t) {
    for (auto& v : t.vec()) v = 1.0 / (1.0 + std::exp(-v));
    return t;
  };
  auto tanh_t = [](Tensor<double> t) {
    for (auto& v : t.vec()) v = std::tanh(v);
    return t;
  };
  auto concat2 = [](const Tensor<double>& a, const Tensor<double>& b) {
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
  };

  // m_l = sum_k sigmoid(Conv(v_l - v_k)) * v_k over the incoming edges.
  auto messages = gr.message_pass(g);
  std::vector<Tensor<double>> ref_msgs(4, Tensor<double>::zeros(g.nodes[0].shape()));
  for (std::size_t e = 0; e < g.adjacency.size(); ++e) {
    auto [k, l] = g.adjacency[e];
    Tensor<double> diff = g.nodes[l].val();
    for (long long i = 0; i < diff.numel(); ++i) diff[i] -= g.nodes[k].val()[i];
    auto gate = sigmoid_t(naive_conv2d(diff, gr.edge_conv.w.val(), gr.edge_conv.b.val()));
    for (long long i = 0; i < gate.numel(); ++i) ref_msgs[l][i] += gate[i] * g.nodes[k].val()[i];
  }
  for (int l = 0; l < 4; ++l)
    for (long long i = 0; i < ref_msgs[l].numel(); ++i)
      if (std::abs(messages[l].val()[i] - ref_msgs[l][i]) >= 1e-6) return false;

  // Convolutional GRU: z, r from [v, m]; candidate from [r*v, m].
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
      if (std::abs(g.nodes[l].val()[i] - expect) >= 1e-6) return false;
    }
  }
  return true;
}

// --------------------------------------------------------------------------
// 7. Quality metrics: entropy oracles and full agreement with the
//    independent reference implementations on a synthetic triple.
// --------------------------------------------------------------------------
bool metric_agreement() {
  Image<double> c;
  c.channels = Channels::GRAY1;
  c.data = Tensor<double>::full({1, 1, 32, 32}, 0.42);
  if (std::abs(entropy(c)) >= 1e-9) return false;

  Image<double> two = c;
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 32; ++j) {
      two.data.at(0, 0, i, j) = 0.0;
      two.data.at(0, 0, 16 + i, j) = 1.0;
    }
  if (std::abs(entropy(two) - 1.0) >= 1e-9) return false;

  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> d(0, 255);
  Image<double> u;
  u.channels = Channels::GRAY1;
  u.data = Tensor<double>({1, 1, 256, 256});
  for (auto& v : u.data.vec()) v = d(rng) / 255.0;
  double e = entropy(u);
  if (e < 7.95 || e > 8.0) return false;

  auto ir = quantized(synth_image<double>(64, 64, 2, true));
  auto vis = quantized(synth_image<double>(64, 64, 9, false));
  auto fused = make_fused(ir, vis);
  auto rep = evaluate_pair(fused, ir, vis);
  auto gf = ref::from_image(fused), gi = ref::from_image(ir), gv = ref::from_image(vis);
  std::vector<std::pair<double, double>> pairs = {
      {rep.en, ref::entropy(gf)},
      {rep.sd, ref::sd(gf)},
      {rep.sf, ref::sf(gf)},
      {rep.ag, ref::ag(gf)},
      {rep.mi, ref::mi(gf, gi) + ref::mi(gf, gv)},
      {rep.scd, ref::scd(gf, gi, gv)},
      {rep.ssim, ref::ssim01(gf, gi) + ref::ssim01(gf, gv)},
      {rep.vif, ref::vifp(gi, gf) + ref::vifp(gv, gf)},
      {rep.qabf, ref::qabf(gi, gv, gf)},
  };
  for (auto [got, want] : pairs)
    if (std::abs(got - want) >= 1e-4) return false;
  return true;
}

// --------------------------------------------------------------------------
// 8. Stage-I overfit: 8 patches, 200 iterations, reconstruction SSIM of
//    both modalities >= 0.95, in under five minutes.
// --------------------------------------------------------------------------
bool stage1_overfit() {
  auto t0 = std::chrono::steady_clock::now();
  TempDir tmp("accept_s1");
  testutil::write_pair_dataset<float>(tmp.str(), 2, 32, 32);  // 2 images -> 8 patches
  TrainConfig cfg = tiny_train_config();
  cfg.batch_size = 8;
  cfg.lr = 3e-3;
  cfg.epochs_stage1 = 200;  // one batch per epoch
  auto ds = load_pair_dataset<float>(tmp.sub("ir"), tmp.sub("vis"), {16, 16});
  if (ds.size() != 8) return false;
  SmfNet<float> model(cfg.model_config(), cfg.seed, false);
  train_stage1(model, ds, cfg, "", 200);

  NoGradGuard ng;
  double s_vis = 0, s_ir = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto vis = Var<float>::constant(ds.vis[i]);
    auto ir = Var<float>::constant(ds.ir[i]);
    auto [tv, ti] = model.encode(vis, ir);
    s_vis += ssim_value(model.decode_recon(tv), vis).item();
    s_ir += ssim_value(model.decode_recon(ti), ir).item();
  }
  s_vis /= static_cast<double>(ds.size());
  s_ir /= static_cast<double>(ds.size());
  std::printf("       stage-1 reconstruction ssim: vis=%.4f ir=%.4f\n", s_vis, s_ir);
  return s_vis >= 0.95 && s_ir >= 0.95 && elapsed_since(t0) < 300.0;
}

// --------------------------------------------------------------------------
// 9. Stage-II smoke: the total loss falls by at least half within 100
//    iterations, and the fused output's intensity loss does not increase.
// --------------------------------------------------------------------------
bool stage2_smoke() {
  TempDir tmp("accept_s2");
  testutil::write_pair_dataset<float>(tmp.str(), 2, 32, 32);
  TrainConfig cfg = tiny_train_config();
  cfg.batch_size = 4;
  cfg.lr = 3e-3;
  cfg.epochs_stage2 = 50;  // 2 iters/epoch, capped at 100 below
  auto ds = load_pair_dataset<float>(tmp.sub("ir"), tmp.sub("vis"), {16, 16});
  SmfNet<float> model(cfg.model_config(), cfg.seed, true);

  auto toy_intensity = [&] {
    NoGradGuard ng;
    auto vis = Var<float>::constant(ds.vis[0]);
    auto ir = Var<float>::constant(ds.ir[0]);
    return intensity_loss(model.fuse_forward(vis, ir), ir, vis).item();
  };
  double intensity_before = toy_intensity();
  auto res = train_stage2(model, ds, cfg, "", 100);
  double intensity_after = toy_intensity();

  std::size_t n = res.iter_totals.size();
  if (n < 20) return false;
  auto avg = [&](std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += res.iter_totals[i];
    return s / static_cast<double>(to - from);
  };
  double head = avg(0, 10), tail = avg(n - 10, n);
  std::printf("       stage-2 loss: first10=%.4f last10=%.4f intensity %.4f -> %.4f\n", head, tail,
              intensity_before, intensity_after);
  return tail <= 0.5 * head && intensity_after <= intensity_before;
}

// --------------------------------------------------------------------------
// 10. Ablation wiring, verified through checkpoint manifests.
// --------------------------------------------------------------------------
bool ablation_manifests() {
  TempDir tmp("accept_abl");
  testutil::write_pair_dataset<float>(tmp.str(), 1, 16, 16);
  TrainConfig base = tiny_train_config();
  base.batch_size = 1;
  auto ds = load_pair_dataset<float>(tmp.sub("ir"), tmp.sub("vis"), {16, 16});

  auto manifest_for = [&](const std::string& name) {
    TrainConfig cfg = base;
    apply_ablation(cfg, name);
    cfg.validate();
    SmfNet<float> model(cfg.model_config(), cfg.seed, true);
    if (cfg.joint)
      train_joint(model, ds, cfg, "", 1);
    else
      train_stage2(model, ds, cfg, "", 1);
    std::string path = tmp.sub(name + ".ckpt");
    save_stage_checkpoint(path, model, cfg, cfg.joint ? "joint" : "stage2", 1);
    return read_manifest(path);
  };

  auto m3 = manifest_for("AE3");
  for (auto& [k, v] : m3.kv)
    if (k.rfind("param.gr.", 0) == 0 || k.find("fuse_graph") != std::string::npos) return false;

  auto m4 = manifest_for("AE4");
  if (m4.get("param.decoder.in_proj.w") != "8x24x1x1") return false;

  auto m9 = manifest_for("AE9");
  return m9.get("stage") == "joint" && m9.get("config.train.joint") == "true";
}

}  // namespace

int main() {
  run("C1", "invertible coupling round trip (100 draws, sup-norm < 1e-5)", coupling_invertibility);
  run("C2", "loss self-identities over 50 random images (1e-6)", loss_identities);
  run("C3", "decomposition loss closed forms (1e-6)", decomp_closed_forms);
  run("C4", "reverse-mode gradients vs finite differences (rel < 1e-3)", gradient_checks);
  run("C5", "inference shape contract at 128x128 / 480x640 / 97x143", inference_shapes);
  run("C6", "graph message passing and GRU update vs brute-force oracles", graph_oracles);
  run("C7", "quality metrics vs independent references (1e-4)", metric_agreement);
  run("C8", "stage-1 overfit to 8 patches reaches ssim >= 0.95", stage1_overfit);
  run("C9", "stage-2 loss halves within 100 iterations", stage2_smoke);
  run("C10", "ablation variants verified via checkpoint manifests", ablation_manifests);
  std::printf(
      "[SKIP] C11: full-scale benchmark pathway (train-stage1/train-stage2/evaluate on a public "
      "infrared-visible dataset; reference means EN 6.7021, VIF 1.0448, Qabf 0.7097) -- reported, "
      "not gated\n");
  std::printf("%d gated criteria failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
