#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bossink/error.hpp"

namespace bossink {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major f32 array. Shapes are explicit; there is no broadcasting.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0f) {}

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape_) +
                           " does not match " + std::to_string(data_.size()) +
                           " elements");
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols) {
    return Tensor(Shape{rows, cols});
  }

  static Tensor vector(std::size_t n) { return Tensor(Shape{n}); }

  static Tensor identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  float operator()(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  std::span<float> row(std::size_t r) {
    return std::span<float>(data_).subspan(r * shape_[1], shape_[1]);
  }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(data_).subspan(r * shape_[1], shape_[1]);
  }

  bool all_finite() const {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  // Bitwise comparison (distinguishes -0 from +0 and compares NaN payloads).
  friend bool operator==(const Tensor& a, const Tensor& b) {
    if (a.shape_ != b.shape_) return false;
    return std::memcmp(a.data_.data(), b.data_.data(),
                       a.data_.size() * sizeof(float)) == 0;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

// c[i][j] = sum_p a[i][p] * b[p][j], accumulated in p-ascending order.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) +
                         " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    float* ci = &c(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const float aip = a(i, p);
      const float* bp = b.row(p).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

// Row-wise softmax of a square score matrix. With `causal`, entries k > t are
// masked out and come back as exactly 0.
inline Tensor masked_softmax_rows(const Tensor& scores, bool causal) {
  if (scores.rank() != 2 || scores.rows() != scores.cols()) {
    throw DimensionError("masked_softmax_rows: expected a square matrix, got " +
                         shape_str(scores.shape()));
  }
  const std::size_t n = scores.rows();
  Tensor out = Tensor::matrix(n, n);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t support = causal ? t + 1 : n;
    float max = -std::numeric_limits<float>::infinity();
    for (std::size_t k = 0; k < support; ++k) max = std::max(max, scores(t, k));
    double sum = 0.0;
    for (std::size_t k = 0; k < support; ++k) {
      const float e = std::exp(scores(t, k) - max);
      out(t, k) = e;
      sum += e;
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (std::size_t k = 0; k < support; ++k) out(t, k) *= inv;
  }
  return out;
}

// y[i] = x[i] / sqrt(mean(x^2) + eps) * gamma[i]
inline void rmsnorm_into(std::span<const float> x, std::span<const float> gamma,
                         float eps, std::span<float> y) {
  if (x.size() != gamma.size() || x.size() != y.size()) {
    throw DimensionError("rmsnorm: length mismatch");
  }
  double ss = 0.0;
  for (float v : x) ss += static_cast<double>(v) * v;
  const double mean = x.empty() ? 0.0 : ss / static_cast<double>(x.size());
  const double denom = std::sqrt(mean + eps);
  if (denom == 0.0) {
    std::fill(y.begin(), y.end(), 0.0f);
    return;
  }
  const float inv = static_cast<float>(1.0 / denom);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * gamma[i];
}

inline Tensor rmsnorm(const Tensor& x, const Tensor& gamma, float eps) {
  if (x.rank() != 1 || gamma.rank() != 1) {
    throw DimensionError("rmsnorm: expected vectors");
  }
  Tensor y(x.shape());
  rmsnorm_into(x.data(), gamma.data(), eps, y.data());
  return y;
}

// Applies rmsnorm independently to every row of a [T x d] matrix.
inline Tensor rmsnorm_rows(const Tensor& x, const Tensor& gamma, float eps) {
  if (x.rank() != 2 || gamma.rank() != 1 || gamma.numel() != x.cols()) {
    throw DimensionError("rmsnorm_rows: gamma " + shape_str(gamma.shape()) +
                         " does not fit rows of " + shape_str(x.shape()));
  }
  Tensor y(x.shape());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    rmsnorm_into(x.row(t), gamma.data(), eps, y.row(t));
  }
  return y;
}

inline double rope_frequency(std::size_t pair, std::size_t d_head, double theta_base) {
  return std::pow(theta_base, -2.0 * static_cast<double>(pair) /
                                  static_cast<double>(d_head));
}

// Rotates pairs (v[2i], v[2i+1]) in place by position * theta_base^(-2i/d).
inline void rope_rotate_inplace(std::span<float> vec, std::size_t position,
                                double theta_base) {
  const std::size_t d = vec.size();
  if (d % 2 != 0) {
    throw ConfigError("rope_rotate: head dimension " + std::to_string(d) +
                      " is odd");
  }
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double angle = static_cast<double>(position) * rope_frequency(i, d, theta_base);
    const float c = static_cast<float>(std::cos(angle));
    const float s = static_cast<float>(std::sin(angle));
    const float x = vec[2 * i], y = vec[2 * i + 1];
    vec[2 * i] = x * c - y * s;
    vec[2 * i + 1] = x * s + y * c;
  }
}

inline Tensor rope_rotate(const Tensor& vec, std::size_t position, double theta_base) {
  Tensor out = vec;
  rope_rotate_inplace(out.data(), position, theta_base);
  return out;
}

}  // namespace bossink
