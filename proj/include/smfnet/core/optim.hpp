#pragma once

#include <cmath>
#include <unordered_map>

#include "smfnet/core/nn.hpp"

namespace smfnet {

/// Adam with optional global gradient-norm clipping.
template <class T>
class Adam {
 public:
  Adam(NamedParams<T> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8, double clip_norm = 0.0)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps),
        clip_(clip_norm) {
    for (auto& [name, p] : params_) {
      state_[p.node().get()] = State{Tensor<T>::zeros(p.shape()), Tensor<T>::zeros(p.shape())};
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    double scale = 1.0;
    if (clip_ > 0.0) {
      double sq = 0.0;
      for (auto& [name, p] : params_) {
        if (!p.has_grad()) continue;
        for (long long i = 0; i < p.numel(); ++i) {
          double g = static_cast<double>(p.grad()[i]);
          sq += g * g;
        }
      }
      double nrm = std::sqrt(sq);
      if (nrm > clip_) scale = clip_ / nrm;
    }
    double bc1 = 1.0 - std::pow(b1_, t_), bc2 = 1.0 - std::pow(b2_, t_);
    for (auto& [name, p] : params_) {
      if (!p.has_grad()) continue;
      auto& st = state_[p.node().get()];
      for (long long i = 0; i < p.numel(); ++i) {
        double g = static_cast<double>(p.grad()[i]) * scale;
        double m = b1_ * st.m[i] + (1.0 - b1_) * g;
        double v = b2_ * st.v[i] + (1.0 - b2_) * g * g;
        st.m[i] = static_cast<T>(m);
        st.v[i] = static_cast<T>(v);
        double mhat = m / bc1, vhat = v / bc2;
        p.val()[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  long long steps() const { return t_; }

 private:
  struct State {
    Tensor<T> m, v;
  };
  NamedParams<T> params_;
  std::unordered_map<VarNode<T>*, State> state_;
  double lr_, b1_, b2_, eps_, clip_;
  long long t_ = 0;
};

}  // namespace smfnet
