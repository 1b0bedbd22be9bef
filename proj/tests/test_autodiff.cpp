#include <catch2/catch_amalgamated.hpp>

#include "smfnet/core/autodiff.hpp"
#include "smfnet/core/nn.hpp"
#include "smfnet/core/optim.hpp"
#include "test_util.hpp"

using namespace smfnet;
using testutil::gradcheck;
using testutil::naive_conv2d;
using testutil::rand_tensor;

namespace {
Var<double> leafv(Tensor<double> t) { return Var<double>::leaf(std::move(t), true); }
}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
  std::mt19937_64 rng(42);
  auto a = leafv(rand_tensor({2, 3, 4, 4}, rng, 0.2, 1.5));
  auto b = leafv(rand_tensor({2, 3, 4, 4}, rng, 0.2, 1.5));

  auto cases = std::vector<std::pair<const char*, std::function<Var<double>()>>>{
      {"add", [&] { return mean_all(a + b); }},
      {"sub", [&] { return mean_all(a - b); }},
      {"mul", [&] { return mean_all(a * b); }},
      {"div", [&] { return mean_all(a / b); }},
      {"neg", [&] { return mean_all(neg(a)); }},
      {"exp", [&] { return mean_all(exp_v(a)); }},
      {"tanh", [&] { return mean_all(tanh_v(a)); }},
      {"sigmoid", [&] { return mean_all(sigmoid_v(a)); }},
      {"abs", [&] { return mean_all(abs_v(a)); }},
      {"sqrt", [&] { return mean_all(sqrt_v(a, 1e-8)); }},
      {"square", [&] { return mean_all(square_v(a)); }},
      {"gelu", [&] { return mean_all(gelu_v(a)); }},
      {"soft_clamp", [&] { return mean_all(soft_clamp(a, 0.8)); }},
      {"maximum", [&] { return mean_all(maximum(a, b)); }},
      {"add_scalar", [&] { return mean_all(add_scalar(a, 0.7)); }},
      {"mul_scalar", [&] { return mean_all(mul_scalar(a, -1.3)); }},
  };
  for (auto& [name, build] : cases) {
    INFO(name);
    a.zero_grad();
    b.zero_grad();
    auto res = gradcheck(build, {a, b}, rng);
    CHECK(res.max_rel < 1e-3);
  }
}

TEST_CASE("structural op gradients match finite differences") {
  std::mt19937_64 rng(7);
  auto a = leafv(rand_tensor({2, 4, 6, 6}, rng));
  auto b = leafv(rand_tensor({2, 2, 6, 6}, rng));

  auto cases = std::vector<std::pair<const char*, std::function<Var<double>()>>>{
      {"reshape", [&] { return mean_all(square_v(reshape(a, {2, 2, 12, 6}))); }},
      {"concat_slice",
       [&] { return mean_all(square_v(slice_c(concat_c<double>({a, b}), 2, 5))); }},
      {"crop", [&] { return mean_all(square_v(crop_hw(a, 1, 2, 0, 3))); }},
      {"pad_reflect", [&] { return mean_all(square_v(pad_reflect(a, 2, 1, 1, 2))); }},
      {"avg_pool", [&] { return mean_all(square_v(avg_pool(a, 2))); }},
      {"upsample", [&] { return mean_all(square_v(upsample_nearest(a, 2))); }},
      {"sum", [&] { return sum_all(a * a); }},
  };
  for (auto& [name, build] : cases) {
    INFO(name);
    a.zero_grad();
    b.zero_grad();
    auto res = gradcheck(build, {a, b}, rng);
    CHECK(res.max_rel < 1e-3);
  }
}

TEST_CASE("conv2d matches the direct-loop oracle") {
  std::mt19937_64 rng(9);
  for (int groups : {1, 2, 4}) {
    auto x = rand_tensor({2, 4, 5, 7}, rng);
    auto w = rand_tensor({4, 4 / groups, 3, 3}, rng);
    auto b = rand_tensor({4}, rng);
    auto y = conv2d(Var<double>::constant(x), Var<double>::constant(w), Var<double>::constant(b),
                    groups);
    auto ref = naive_conv2d(x, w, b, groups);
    double max_err = 0;
    for (long long i = 0; i < y.numel(); ++i) max_err = std::max(max_err, std::abs(y.val()[i] - ref[i]));
    INFO("groups=" << groups);
    CHECK(max_err < 1e-12);
  }
}

TEST_CASE("conv2d gradients (input, weight, bias, grouped) match finite differences") {
  std::mt19937_64 rng(13);
  auto x = leafv(rand_tensor({1, 4, 5, 5}, rng));
  auto w = leafv(rand_tensor({4, 2, 3, 3}, rng, -0.5, 0.5));
  auto b = leafv(rand_tensor({4}, rng, -0.5, 0.5));
  auto build = [&] { return mean_all(square_v(conv2d(x, w, b, 2))); };
  auto res = gradcheck(build, {x, w, b}, rng);
  CHECK(res.max_rel < 1e-3);
}

TEST_CASE("matmul / transpose / softmax / l2norm / scale gradients") {
  std::mt19937_64 rng(17);
  auto q = leafv(rand_tensor({2, 2, 3, 5}, rng));
  auto k = leafv(rand_tensor({2, 2, 3, 5}, rng));
  auto t = leafv(rand_tensor({2}, rng, 0.5, 1.5));

  auto build = [&] {
    auto scores = scale_per_head(matmul(l2_normalize_last(q), transpose_last2(l2_normalize_last(k))), t);
    return mean_all(square_v(softmax_last(scores)));
  };
  auto res = gradcheck(build, {q, k, t}, rng);
  CHECK(res.max_rel < 1e-3);

  // softmax rows sum to one
  auto sm = softmax_last(Var<double>::constant(rand_tensor({1, 1, 4, 7}, rng, -3, 3)));
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int c = 0; c < 7; ++c) s += sm.val().at(0, 0, r, c);
    CHECK(s == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("layernorm_c normalizes per pixel and its gradients check out") {
  std::mt19937_64 rng(23);
  auto x = leafv(rand_tensor({2, 6, 3, 3}, rng));
  auto g = leafv(Tensor<double>::full({6}, 1.0));
  auto b = leafv(Tensor<double>::zeros({6}));
  auto y = layernorm_c(x, g, b);
  for (int bi = 0; bi < 2; ++bi)
    for (int h = 0; h < 3; ++h)
      for (int w = 0; w < 3; ++w) {
        double mu = 0, var = 0;
        for (int c = 0; c < 6; ++c) mu += y.val().at(bi, c, h, w);
        mu /= 6;
        for (int c = 0; c < 6; ++c) {
          double d = y.val().at(bi, c, h, w) - mu;
          var += d * d;
        }
        CHECK(mu == Catch::Approx(0.0).margin(1e-9));
        CHECK(var / 6 == Catch::Approx(1.0).margin(1e-4));
      }
  auto build = [&] { return mean_all(square_v(layernorm_c(x, g, b))); };
  auto res = gradcheck(build, {x, g, b}, rng);
  CHECK(res.max_rel < 1e-3);
}

TEST_CASE("pearson correlation: value oracle and gradients") {
  std::mt19937_64 rng(29);
  auto a = leafv(rand_tensor({2, 1, 4, 4}, rng));
  auto b = leafv(rand_tensor({2, 1, 4, 4}, rng));

  // Hand-computed per-batch-item mean correlation.
  double expect = 0;
  for (int bi = 0; bi < 2; ++bi) {
    double ma = 0, mb = 0;
    for (int i = 0; i < 16; ++i) {
      ma += a.val()[bi * 16 + i];
      mb += b.val()[bi * 16 + i];
    }
    ma /= 16;
    mb /= 16;
    double va = 0, vb = 0, vab = 0;
    for (int i = 0; i < 16; ++i) {
      double da = a.val()[bi * 16 + i] - ma, db = b.val()[bi * 16 + i] - mb;
      va += da * da;
      vb += db * db;
      vab += da * db;
    }
    expect += vab / std::sqrt(va * vb);
  }
  expect /= 2;
  CHECK(pearson_cc(a, b).item() == Catch::Approx(expect).margin(1e-12));
  CHECK(pearson_cc(a, a).item() == Catch::Approx(1.0).margin(1e-12));

  // Constant input correlates to zero by convention (no variance).
  auto c = Var<double>::constant(Tensor<double>::full({2, 1, 4, 4}, 0.3));
  CHECK(pearson_cc(c, b).item() == Catch::Approx(0.0).margin(1e-12));

  auto build = [&] { return pearson_cc(a, b); };
  auto res = gradcheck(build, {a, b}, rng);
  CHECK(res.max_rel < 1e-3);
}

TEST_CASE("NoGradGuard suppresses graph construction") {
  std::mt19937_64 rng(31);
  auto a = leafv(rand_tensor({1, 1, 2, 2}, rng));
  {
    NoGradGuard ng;
    auto y = mean_all(a * a);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
  }
  auto y = mean_all(a * a);
  CHECK(y.requires_grad());
}

TEST_CASE("backward accumulates through shared subexpressions") {
  auto a = leafv(Tensor<double>::full({1}, 3.0));
  auto s = a * a;       // 9
  auto y = s + s;       // 18, dy/da = 4a = 12
  backward(y);
  CHECK(a.grad()[0] == Catch::Approx(12.0).margin(1e-12));
}

TEST_CASE("Adam shrinks a quadratic and clips huge gradients") {
  auto p = leafv(Tensor<double>::full({4}, 5.0));
  NamedParams<double> params = {{"p", p}};
  Adam<double> opt(params, 0.1, 0.9, 0.999, 1e-8, 1.0);
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    auto loss = sum_all(square_v(p));
    backward(loss);
    // Global norm of the raw gradient far exceeds the clip threshold early on.
    opt.step();
  }
  CHECK(std::abs(p.val()[0]) < 1.0);
  CHECK(opt.steps() == 200);
}
