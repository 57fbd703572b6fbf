/*
 * Copyright 2026 The qexit Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qexit/errors.hpp"

namespace qexit {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major float tensor of rank 1 to 3.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(numel_checked(shape_), 0.0f) {}

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel_checked(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor vector(std::initializer_list<float> v) { return Tensor({v.size()}, std::vector<float>(v)); }

  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<float> d;
    d.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      d.insert(d.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(d));
  }

  static Tensor filled(Shape shape, float v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Last dimension; rows() counts the leading elements.
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const noexcept { return cols() ? data_.size() / cols() : 0; }

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  Tensor row_tensor(std::size_t r) const { return Tensor({cols()}, std::vector<float>(row(r).begin(), row(r).end())); }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  // Bitwise comparison (shape and every float).
  friend bool operator==(const Tensor& a, const Tensor& b) noexcept {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t numel_checked(const Shape& s) {
    if (s.empty() || s.size() > 3) throw DimensionError("tensor rank must be 1..3, got shape " + shape_str(s));
    return shape_numel(s);
  }

  Shape shape_;
  std::vector<float> data_;
};

inline void require_rank(const Tensor& t, std::size_t rank, std::string_view what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

// a[m x k] * b[k x n]; each output element accumulates over k in ascending order.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    float* ci = c.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const float aip = a.at(i, p);
      const float* bp = b.row(p).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

// x[n x in] * w[out x in]^T + bias[out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear input");
  require_rank(w, 2, "linear weight");
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in || bias.size() != out) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) +
                         ", bias " + shape_str(bias.shape()));
  }
  Tensor y({n, out});
  for (std::size_t i = 0; i < n; ++i) {
    const float* xi = x.row(i).data();
    for (std::size_t o = 0; o < out; ++o) {
      const float* wo = w.row(o).data();
      float acc = 0.0f;
      for (std::size_t p = 0; p < in; ++p) acc += xi[p] * wo[p];
      y.at(i, o) = acc + bias[o];
    }
  }
  return y;
}

inline constexpr float kLayerNormEps = 1e-5f;

inline void normalize_row(std::span<const float> in, std::span<float> out, float eps) {
  const std::size_t d = in.size();
  float mean = 0.0f;
  for (float v : in) mean += v;
  mean /= static_cast<float>(d);
  float var = 0.0f;
  for (float v : in) var += (v - mean) * (v - mean);
  var /= static_cast<float>(d);
  const float inv = 1.0f / std::sqrt(var + eps);
  for (std::size_t j = 0; j < d; ++j) out[j] = (in[j] - mean) * inv;
}

// Parameter-free layer norm over the last dimension.
inline Tensor layer_norm(const Tensor& x, float eps = kLayerNormEps) {
  if (!(eps > 0.0f)) throw InputError("layer_norm: eps must be positive");
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) normalize_row(x.row(r), y.row(r), eps);
  return y;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = kLayerNormEps) {
  const std::size_t d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: last dim " + std::to_string(d) + " vs gamma " + shape_str(gamma.shape()) +
                         ", beta " + shape_str(beta.shape()));
  }
  Tensor y = layer_norm(x, eps);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    for (std::size_t j = 0; j < d; ++j) row[j] = gamma[j] * row[j] + beta[j];
  }
  return y;
}

template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

// d/dx of x * Phi(x).
template <typename T>
T gelu_grad_scalar(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846));
  return cdf + x * pdf;
}

// Exact GELU; evaluated in double and rounded once.
inline Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<float>(gelu_scalar(static_cast<double>(x[i])));
  return y;
}

inline void softmax_row(std::span<const float> in, std::span<float> out) {
  const float mx = *std::max_element(in.begin(), in.end());
  float sum = 0.0f;
  for (std::size_t j = 0; j < in.size(); ++j) {
    out[j] = std::exp(in[j] - mx);
    sum += out[j];
  }
  for (float& v : out) v /= sum;
}

inline Tensor softmax(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) softmax_row(x.row(r), y.row(r));
  return y;
}

// softmax(q k^T / sqrt(d_h)) v for a single head.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  require_rank(q, 2, "attention q");
  require_rank(k, 2, "attention k");
  require_rank(v, 2, "attention v");
  const std::size_t n = q.dim(0), dh = q.dim(1);
  if (k.dim(1) != dh || k.dim(0) != v.dim(0)) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()));
  }
  const std::size_t m = k.dim(0), dv = v.dim(1);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor out({n, dv});
  std::vector<float> scores(m), probs(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      float acc = 0.0f;
      for (std::size_t p = 0; p < dh; ++p) acc += q.at(i, p) * k.at(j, p);
      scores[j] = acc * scale;
    }
    softmax_row(scores, probs);
    auto oi = out.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      const float pj = probs[j];
      for (std::size_t c = 0; c < dv; ++c) oi[c] += pj * v.at(j, c);
    }
  }
  return out;
}

// Columns [begin, begin + count) of a rank-2 tensor.
inline Tensor column_slice(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank(x, 2, "column_slice");
  if (begin + count > x.cols()) throw DimensionError("column_slice out of range");
  Tensor y({x.rows(), count});
  for (std::size_t r = 0; r < x.rows(); ++r) std::copy_n(x.row(r).begin() + begin, count, y.row(r).begin());
  return y;
}

inline void add_inplace(Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

inline double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

inline double l2_distance(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = static_cast<double>(a[i]) - b[i];
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

inline double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw UndefinedSimilarityError("cosine similarity with a zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

}  // namespace qexit
