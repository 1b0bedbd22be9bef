#include <catch2/catch_amalgamated.hpp>

#include "smfnet/net/fusion.hpp"
#include "test_util.hpp"

using namespace smfnet;
using testutil::rand_tensor;

TEST_CASE("detail fusion single layer matches the closed-form expression") {
  std::mt19937_64 rng(301);
  DetailFusionConfig cfg;
  cfg.channels = 4;
  cfg.layers = 1;
  DetailFusion<double> df(cfg, rng);
  // Randomize the zero-initialized closing layer so psi is non-trivial.
  std::uniform_real_distribution<double> d(-0.3, 0.3);
  for (auto& v : df.psi[0].expand.w.val().vec()) v = d(rng);
  df.scale[0].val()[0] = 0.7;

  auto x1 = Var<double>::constant(rand_tensor({1, 4, 6, 6}, rng));
  auto x2 = Var<double>::constant(rand_tensor({1, 4, 6, 6}, rng));
  NoGradGuard ng;
  auto y = df(x1, x2);
  REQUIRE(y.shape() == std::vector<int>{1, 4, 6, 6});

  // Oracle: out1 = (x1 - psi(x2)) * exp(clamp(-a psi(x2))), out2 symmetric;
  // with one layer the projection sees concat(out1, out2).
  auto p2 = df.psi[0](x2).val();
  auto p1 = df.psi[0](x1).val();
  double a = df.scale[0].val()[0], c = cfg.exp_clamp;
  Tensor<double> out1 = x1.val(), out2 = x2.val();
  for (long long i = 0; i < out1.numel(); ++i) {
    out1[i] = (x1.val()[i] - p2[i]) * std::exp(c * std::tanh(-a * p2[i] / c));
    out2[i] = (x2.val()[i] - p1[i]) * std::exp(c * std::tanh(-a * p1[i] / c));
  }
  auto cat = concat_c<double>({Var<double>::constant(out1), Var<double>::constant(out2)});
  auto ref = df.project(cat);
  for (long long i = 0; i < y.numel(); ++i)
    REQUIRE(y.val()[i] == Catch::Approx(ref.val()[i]).margin(1e-10));
}

TEST_CASE("detail fusion handles multiple layers with alternating roles") {
  std::mt19937_64 rng(302);
  DetailFusionConfig cfg;
  cfg.channels = 4;
  cfg.layers = 3;
  DetailFusion<double> df(cfg, rng);
  auto x1 = Var<double>::constant(rand_tensor({2, 4, 6, 6}, rng));
  auto x2 = Var<double>::constant(rand_tensor({2, 4, 6, 6}, rng));
  NoGradGuard ng;
  auto y = df(x1, x2);
  CHECK(y.shape() == std::vector<int>{2, 4, 6, 6});
  CHECK(y.val().all_finite());
}

TEST_CASE("base fusion is symmetric in its inputs") {
  std::mt19937_64 rng(303);
  BaseFusion<double> bf(8, 4, 2, rng);
  auto a = Var<double>::constant(rand_tensor({1, 8, 6, 6}, rng));
  auto b = Var<double>::constant(rand_tensor({1, 8, 6, 6}, rng));
  NoGradGuard ng;
  auto y1 = bf(a, b), y2 = bf(b, a);
  for (long long i = 0; i < y1.numel(); ++i)
    REQUIRE(y1.val()[i] == Catch::Approx(y2.val()[i]).margin(1e-12));
}

TEST_CASE("graph fusion projects the channel concat back to the stream width") {
  std::mt19937_64 rng(304);
  GraphFusion<double> gf(8, rng);
  CHECK(gf.project.w.shape() == std::vector<int>{8, 16, 1, 1});
  auto a = Var<double>::constant(rand_tensor({1, 8, 5, 5}, rng));
  auto b = Var<double>::constant(rand_tensor({1, 8, 5, 5}, rng));
  NoGradGuard ng;
  CHECK(gf(a, b).shape() == std::vector<int>{1, 8, 5, 5});
}

TEST_CASE("decoder emits one sigmoid channel for both aggregation modes") {
  std::mt19937_64 rng(305);
  for (auto mode : {AggregateMode::Add, AggregateMode::Concat}) {
    Decoder<double> dec(8, 4, 2, mode, 3, rng);
    std::vector<Var<double>> streams = {Var<double>::constant(rand_tensor({2, 8, 6, 6}, rng)),
                                        Var<double>::constant(rand_tensor({2, 8, 6, 6}, rng)),
                                        Var<double>::constant(rand_tensor({2, 8, 6, 6}, rng))};
    NoGradGuard ng;
    auto y = dec(streams);
    REQUIRE(y.shape() == std::vector<int>{2, 1, 6, 6});
    for (long long i = 0; i < y.numel(); ++i) {
      REQUIRE(y.val()[i] > 0.0);
      REQUIRE(y.val()[i] < 1.0);
    }
  }
}

TEST_CASE("concat aggregation carries an input projection sized streams*c") {
  std::mt19937_64 rng(306);
  Decoder<double> add_dec(8, 4, 2, AggregateMode::Add, 3, rng);
  Decoder<double> cat_dec(8, 4, 2, AggregateMode::Concat, 3, rng);
  NamedParams<double> pa, pc;
  add_dec.params("decoder", pa);
  cat_dec.params("decoder", pc);
  auto find = [](const NamedParams<double>& ps, const std::string& name) -> const Var<double>* {
    for (auto& [n, v] : ps)
      if (n == name) return &v;
    return nullptr;
  };
  CHECK(find(pa, "decoder.in_proj.w") == nullptr);
  auto* w = find(pc, "decoder.in_proj.w");
  REQUIRE(w != nullptr);
  CHECK(w->shape() == std::vector<int>{8, 24, 1, 1});
}

TEST_CASE("decoder rejects the wrong stream count") {
  std::mt19937_64 rng(307);
  Decoder<double> dec(8, 4, 2, AggregateMode::Add, 3, rng);
  std::vector<Var<double>> two = {Var<double>::constant(rand_tensor({1, 8, 6, 6}, rng)),
                                  Var<double>::constant(rand_tensor({1, 8, 6, 6}, rng))};
  CHECK_THROWS(dec(two));
}

TEST_CASE("add aggregation equals decoding the pre-summed stream") {
  std::mt19937_64 rng(308);
  Decoder<double> dec(8, 4, 2, AggregateMode::Add, 2, rng);
  auto a = Var<double>::constant(rand_tensor({1, 8, 6, 6}, rng));
  auto b = Var<double>::constant(rand_tensor({1, 8, 6, 6}, rng));
  NoGradGuard ng;
  auto y1 = dec({a, b});
  Decoder<double> dec1 = dec;
  dec1.streams = 1;
  auto y2 = dec1({a + b});
  for (long long i = 0; i < y1.numel(); ++i)
    REQUIRE(y1.val()[i] == Catch::Approx(y2.val()[i]).margin(1e-12));
}
