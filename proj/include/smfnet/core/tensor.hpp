#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace smfnet {

/// Dense row-major tensor. Most of the code works with 4-D (B,C,H,W)
/// layouts; rank-1 tensors carry scalars and per-channel parameters.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), data_(numel_of(shape_), T(0)) {}
  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::size_t>(numel_of(shape_)) != data_.size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return full({1}, v); }

  template <class Rng>
  static Tensor uniform(std::vector<int> shape, T lo, T hi, Rng& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& x : t.data_) x = static_cast<T>(d(rng));
    return t;
  }

  static long long numel_of(const std::vector<int>& s) {
    long long n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dim");
      n *= d;
    }
    return n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  long long numel() const { return static_cast<long long>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](long long i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](long long i) const { return data_[static_cast<std::size_t>(i)]; }

  // 4-D accessors (B,C,H,W).
  T& at(int b, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(b) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(int b, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(b) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != numel()) throw std::invalid_argument("reshape: numel mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  T max_abs() const {
    T m = T(0);
    for (T v : data_) m = std::max(m, std::abs(v));
    return m;
  }
  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ")";
    return os.str();
  }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace smfnet
