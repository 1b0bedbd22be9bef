#pragma once

#include <map>
#include <string>

#include "smfnet/core/nn.hpp"

namespace smfnet {

struct LossWeights {
  double alpha1 = 2.0;  // stage-I decomposition weight
  double beta1 = 8.0;   // SSIM weight
  double beta2 = 10.0;  // gradient weight
  double alpha2 = 10.0; // stage-II gradient weight
  double alpha3 = 2.0;  // stage-II decomposition weight
  double delta = 1.01;  // decomposition denominator offset (> 1)

  void validate() const {
    check(delta > 1.0, "LossWeights: delta must exceed 1");
    check(alpha1 >= 0 && beta1 >= 0 && beta2 >= 0 && alpha2 >= 0 && alpha3 >= 0,
          "LossWeights: weights must be non-negative");
  }
};

/// Named scalar terms plus the weighted total.
struct LossReport {
  std::vector<std::pair<std::string, double>> terms;  // (name, raw value)
  std::vector<double> weights;                        // aligned with terms
  double total = 0.0;

  void add(const std::string& name, double value, double weight) {
    terms.push_back({name, value});
    weights.push_back(weight);
  }
  double weighted_sum() const {
    double s = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * terms[i].second;
    return s;
  }
  double term(const std::string& name) const {
    for (auto& [k, v] : terms)
      if (k == name) return v;
    throw std::out_of_range("LossReport: no term " + name);
  }
};

// ---------------------------------------------------------------------------
// Primitive losses
// ---------------------------------------------------------------------------

/// Sobel gradient magnitude with reflect padding: invariant to constant
/// offsets everywhere, including the border.
template <class T>
Var<T> grad_map(const Var<T>& x) {
  return crop_hw(sobel_magnitude(pad_reflect(x, 1, 1, 1, 1)), 1, 1, 1, 1);
}

template <class T>
Tensor<T> gaussian_kernel(int k, T sigma) {
  Tensor<T> w({1, 1, k, k});
  int r = k / 2;
  T sum = T(0);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      T d2 = T((i - r) * (i - r) + (j - r) * (j - r));
      T v = std::exp(-d2 / (2 * sigma * sigma));
      w[i * k + j] = v;
      sum += v;
    }
  for (auto& v : w.vec()) v /= sum;
  return w;
}

/// Differentiable SSIM (gaussian window 11x11, sigma 1.5, range 1); the
/// window shrinks to fit images smaller than the default window.
template <class T>
Var<T> ssim_value(const Var<T>& x, const Var<T>& y, int window = 11, T sigma = T(1.5)) {
  check(x.shape() == y.shape(), "ssim: shape mismatch");
  int H = x.shape()[2], W = x.shape()[3], C = x.shape()[1];
  int k = std::min(window, std::min(H, W));
  if (k % 2 == 0) --k;
  int pad = k / 2;
  Tensor<T> k1 = gaussian_kernel<T>(k, sigma);
  Tensor<T> kc({C, 1, k, k});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < k * k; ++i) kc[c * k * k + i] = k1[i];
  auto g = Var<T>::constant(std::move(kc));
  auto blur = [&](const Var<T>& v) {
    return crop_hw(conv2d(pad_reflect(v, pad, pad, pad, pad), g, C), pad, pad, pad, pad);
  };
  const T c1 = T(0.01 * 0.01), c2 = T(0.03 * 0.03);
  auto mx = blur(x), my = blur(y);
  auto mx2 = mx * mx, my2 = my * my, mxy = mx * my;
  auto sx = blur(x * x) - mx2;
  auto sy = blur(y * y) - my2;
  auto sxy = blur(x * y) - mxy;
  auto num = add_scalar(mul_scalar(mxy, T(2)), c1) * add_scalar(mul_scalar(sxy, T(2)), c2);
  auto den = add_scalar(mx2 + my2, c1) * add_scalar(sx + sy, c2);
  return mean_all(num / den);
}

template <class T>
Var<T> ssim_loss(const Var<T>& x, const Var<T>& y) {
  return add_scalar(neg(ssim_value(x, y)), T(1));
}

/// Mean-reduced L1 between gradient magnitudes.
template <class T>
Var<T> grad_loss(const Var<T>& x, const Var<T>& y) {
  check(x.shape() == y.shape(), "grad_loss: shape mismatch");
  return mean_all(abs_v(grad_map(x) - grad_map(y)));
}

/// Lifts a single-channel image to a fixed 16-channel pyramid (8 box-smoothed
/// slices plus their residual details); multi-channel inputs pass through.
template <class T>
Var<T> gram_lift(const Var<T>& x) {
  if (x.shape()[1] > 1) return x;
  std::vector<Var<T>> chans;
  for (int k : {1, 3, 5, 7, 9, 11, 13, 15}) {
    Var<T> smooth;
    if (k == 1) {
      smooth = x;
    } else {
      Tensor<T> box({1, 1, k, k});
      for (auto& v : box.vec()) v = T(1) / T(k * k);
      int pad = k / 2;
      smooth = crop_hw(conv2d(pad_reflect(x, pad, pad, pad, pad), Var<T>::constant(std::move(box)), 1),
                       pad, pad, pad, pad);
    }
    chans.push_back(smooth);
    chans.push_back(x - smooth);
  }
  return concat_c(chans);
}

/// Normalized Gram matrix f f^t / (C*H*W) per batch item, shape (B,1,C,C).
template <class T>
Var<T> gram_matrix(const Var<T>& x) {
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  auto f = reshape(x, {B, 1, C, H * W});
  return mul_scalar(matmul(f, transpose_last2(f)), T(1) / T(static_cast<long long>(C) * H * W));
}

template <class T>
Var<T> semantic_gram_loss(const Var<T>& x, const Var<T>& y) {
  check(x.shape() == y.shape(), "semantic_gram_loss: shape mismatch");
  int B = x.shape()[0];
  auto d = gram_matrix(gram_lift(x)) - gram_matrix(gram_lift(y));
  return mul_scalar(sqrt_v(sum_all(d * d), T(1e-16)), T(1) / T(B));
}

template <class T>
Var<T> correlation_coefficient(const Var<T>& a, const Var<T>& b) {
  return pearson_cc(a, b);
}

template <class T>
Var<T> decomp_loss_stage1(const Var<T>& dv, const Var<T>& di, const Var<T>& bv, const Var<T>& bi,
                          T delta = T(1.01)) {
  auto cc_d = pearson_cc(dv, di);
  auto cc_b = pearson_cc(bv, bi);
  return square_v(cc_d) / add_scalar(cc_b, delta);
}

template <class T>
Var<T> decomp_loss_stage2(const Var<T>& dv, const Var<T>& di, const Var<T>& gv, const Var<T>& gi,
                          const Var<T>& bv, const Var<T>& bi, T delta = T(1.01)) {
  auto cc_d = pearson_cc(dv, di);
  auto cc_g = pearson_cc(gv, gi);
  auto cc_b = pearson_cc(bv, bi);
  return (square_v(cc_d) + square_v(cc_g)) / add_scalar(cc_b, delta);
}

/// ||F - max(|I|, |V|)||_1, mean-reduced.
template <class T>
Var<T> intensity_loss(const Var<T>& fused, const Var<T>& ir, const Var<T>& vis) {
  check(fused.shape() == ir.shape() && fused.shape() == vis.shape(),
        "intensity_loss: shape mismatch");
  return mean_all(abs_v(fused - maximum(abs_v(ir), abs_v(vis))));
}

/// || |grad F| - max(|grad I|, |grad V|) ||_1, mean-reduced.
template <class T>
Var<T> fusion_grad_loss(const Var<T>& fused, const Var<T>& ir, const Var<T>& vis) {
  return mean_all(abs_v(grad_map(fused) - maximum(grad_map(ir), grad_map(vis))));
}

// ---------------------------------------------------------------------------
// Stage totals
// ---------------------------------------------------------------------------

struct LossOptions {
  bool use_semantic = true;     // AE6 off
  bool stage1_cc_graph = false; // AE8 on
  bool stage2_cc_graph = true;  // AE7 off
};

template <class T>
struct StageLoss {
  Var<T> total;
  LossReport report;
};

/// Stage-I total: L_vi + L_ir + alpha1 * L_decomp.
template <class T>
StageLoss<T> stage1_total(const Var<T>& vis, const Var<T>& vis_hat, const Var<T>& ir,
                          const Var<T>& ir_hat, const Var<T>& dv, const Var<T>& di,
                          const Var<T>& bv, const Var<T>& bi, const Var<T>& gv, const Var<T>& gi,
                          const LossWeights& w, const LossOptions& opt = {}) {
  w.validate();
  StageLoss<T> out;
  auto ssim_v = ssim_loss(vis, vis_hat);
  auto grad_v = grad_loss(vis, vis_hat);
  auto ssim_i = ssim_loss(ir, ir_hat);
  auto grad_i = grad_loss(ir, ir_hat);
  Var<T> decomp = (opt.stage1_cc_graph && gv.defined())
                      ? decomp_loss_stage2(dv, di, gv, gi, bv, bi, T(w.delta))
                      : decomp_loss_stage1(dv, di, bv, bi, T(w.delta));
  auto total = mul_scalar(ssim_v + ssim_i, T(w.beta1)) + mul_scalar(grad_v + grad_i, T(w.beta2)) +
               mul_scalar(decomp, T(w.alpha1));
  out.report.add("ssim_vi", ssim_v.item(), w.beta1);
  out.report.add("grad_vi", grad_v.item(), w.beta2);
  out.report.add("ssim_ir", ssim_i.item(), w.beta1);
  out.report.add("grad_ir", grad_i.item(), w.beta2);
  if (opt.use_semantic) {
    auto sem = semantic_gram_loss(ir, ir_hat);
    total = total + sem;
    out.report.add("semantic_ir", sem.item(), 1.0);
  }
  out.report.add("decomp", decomp.item(), w.alpha1);
  out.total = total;
  out.report.total = total.item();
  return out;
}

/// Stage-II total: L_intensity + alpha2 * L_grad + alpha3 * L_decomp.
template <class T>
StageLoss<T> stage2_total(const Var<T>& fused, const Var<T>& vis, const Var<T>& ir,
                          const Var<T>& dv, const Var<T>& di, const Var<T>& bv, const Var<T>& bi,
                          const Var<T>& gv, const Var<T>& gi, const LossWeights& w,
                          const LossOptions& opt = {}) {
  w.validate();
  StageLoss<T> out;
  auto inten = intensity_loss(fused, ir, vis);
  auto grad = fusion_grad_loss(fused, ir, vis);
  Var<T> decomp = (opt.stage2_cc_graph && gv.defined())
                      ? decomp_loss_stage2(dv, di, gv, gi, bv, bi, T(w.delta))
                      : decomp_loss_stage1(dv, di, bv, bi, T(w.delta));
  auto total = inten + mul_scalar(grad, T(w.alpha2)) + mul_scalar(decomp, T(w.alpha3));
  out.report.add("intensity", inten.item(), 1.0);
  out.report.add("grad", grad.item(), w.alpha2);
  out.report.add("decomp", decomp.item(), w.alpha3);
  out.total = total;
  out.report.total = total.item();
  return out;
}

}  // namespace smfnet
