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

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qexit/errors.hpp"
#include "qexit/tensor.hpp"

namespace qexit {

// Symmetric INT8 weight quantization. `lossless` keeps the codes for
// inspection but dequantizes to the original weights, so the INT8 path is
// bitwise identical to FP32.
enum class QuantScheme { per_channel, per_tensor, lossless };

inline constexpr int kQuantMax = 127;

inline std::string to_string(QuantScheme s) {
  switch (s) {
    case QuantScheme::per_channel: return "per-channel";
    case QuantScheme::per_tensor: return "per-tensor";
    case QuantScheme::lossless: return "lossless";
  }
  return "?";
}

inline QuantScheme quant_scheme_from_string(const std::string& s) {
  if (s == "per-channel") return QuantScheme::per_channel;
  if (s == "per-tensor") return QuantScheme::per_tensor;
  if (s == "lossless") return QuantScheme::lossless;
  throw ConfigError("unknown quantization mode '" + s + "'");
}

class QuantizedLinear {
 public:
  QuantizedLinear() = default;

  std::size_t out_features() const noexcept { return out_; }
  std::size_t in_features() const noexcept { return in_; }
  QuantScheme scheme() const noexcept { return scheme_; }

  const std::vector<std::int8_t>& codes() const noexcept { return codes_; }
  // One scale per output channel; per-tensor repeats the shared scale.
  const std::vector<float>& scales() const noexcept { return scales_; }
  const Tensor& bias() const noexcept { return bias_; }
  // Weights the INT8 path multiplies with.
  const Tensor& dequantized() const noexcept { return dequant_; }

  std::int8_t code(std::size_t o, std::size_t i) const { return codes_[o * in_ + i]; }

  friend QuantizedLinear quantize_linear(const Tensor& w, const Tensor& bias, QuantScheme scheme);

 private:
  std::size_t out_ = 0, in_ = 0;
  QuantScheme scheme_ = QuantScheme::per_channel;
  std::vector<std::int8_t> codes_;
  std::vector<float> scales_;
  Tensor bias_;
  Tensor dequant_;
};

namespace detail {

inline float max_abs(std::span<const float> v) {
  float m = 0.0f;
  for (float x : v) m = std::max(m, std::fabs(x));
  return m;
}

// Round half to even under the default floating-point environment.
inline std::int8_t quantize_value(float w, float scale) {
  const double q = std::nearbyint(static_cast<double>(w) / static_cast<double>(scale));
  return static_cast<std::int8_t>(std::clamp(q, -double(kQuantMax), double(kQuantMax)));
}

inline float dequantize_value(std::int8_t q, float scale) {
  return static_cast<float>(static_cast<double>(q) * static_cast<double>(scale));
}

}  // namespace detail

inline QuantizedLinear quantize_linear(const Tensor& w, const Tensor& bias, QuantScheme scheme = QuantScheme::per_channel) {
  require_rank(w, 2, "quantize_linear weight");
  if (w.dim(0) == 0 || w.dim(1) == 0) throw DimensionError("quantize_linear: degenerate weight shape");
  if (bias.size() != w.dim(0)) throw DimensionError("quantize_linear: bias length differs from output channels");
  if (!w.all_finite()) throw InputError("quantize_linear: weight contains NaN or Inf");
  if (!bias.all_finite()) throw InputError("quantize_linear: bias contains NaN or Inf");

  QuantizedLinear ql;
  ql.out_ = w.dim(0);
  ql.in_ = w.dim(1);
  ql.scheme_ = scheme;
  ql.bias_ = bias;
  ql.codes_.resize(w.size());
  ql.scales_.resize(ql.out_);

  const float tensor_max = detail::max_abs(w.values());
  for (std::size_t o = 0; o < ql.out_; ++o) {
    const float m = scheme == QuantScheme::per_tensor ? tensor_max : detail::max_abs(w.row(o));
    ql.scales_[o] = m > 0.0f ? m / static_cast<float>(kQuantMax) : 1.0f;
  }

  ql.dequant_ = Tensor(w.shape());
  for (std::size_t o = 0; o < ql.out_; ++o) {
    for (std::size_t i = 0; i < ql.in_; ++i) {
      const std::size_t idx = o * ql.in_ + i;
      ql.codes_[idx] = detail::quantize_value(w[idx], ql.scales_[o]);
      ql.dequant_[idx] = scheme == QuantScheme::lossless ? w[idx] : detail::dequantize_value(ql.codes_[idx], ql.scales_[o]);
    }
  }
  return ql;
}

inline Tensor dequantize(const QuantizedLinear& ql) { return ql.dequantized(); }

// Activations stay in float; error enters only through weight rounding.
inline Tensor quantized_forward(const Tensor& x, const QuantizedLinear& ql) {
  if (x.rank() != 2 || x.dim(1) != ql.in_features()) {
    throw DimensionError("quantized_forward: input " + shape_str(x.shape()) + " vs in_features " +
                         std::to_string(ql.in_features()));
  }
  return linear(x, ql.dequantized(), ql.bias());
}

inline double quant_mse(const Tensor& w, const QuantizedLinear& ql) {
  const Tensor& deq = ql.dequantized();
  if (w.shape() != deq.shape()) throw DimensionError("quant_mse: weight and quantized shapes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double e = static_cast<double>(w[i]) - deq[i];
    acc += e * e;
  }
  return acc / static_cast<double>(w.size());
}

}  // namespace qexit
