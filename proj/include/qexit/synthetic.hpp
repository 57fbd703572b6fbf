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
#include <random>
#include <string>
#include <vector>

#include "qexit/encoder.hpp"
#include "qexit/errors.hpp"
#include "qexit/exit_heads.hpp"
#include "qexit/quantization.hpp"
#include "qexit/tensor.hpp"

namespace qexit {

// Per-block weight-outlier profile. Outliers sit on a residual channel that
// is identically zero in both paths, so they leave the FP32 function intact
// and only coarsen the INT8 grid of every row they share.
enum class NoiseSchedule { lossless, none, flat, super_linear, spike };

inline std::string to_string(NoiseSchedule s) {
  switch (s) {
    case NoiseSchedule::lossless: return "lossless";
    case NoiseSchedule::none: return "none";
    case NoiseSchedule::flat: return "flat";
    case NoiseSchedule::super_linear: return "super-linear";
    case NoiseSchedule::spike: return "spike";
  }
  return "?";
}

inline NoiseSchedule noise_schedule_from_string(const std::string& s) {
  if (s == "lossless" || s == "flat-zero") return NoiseSchedule::lossless;
  if (s == "none") return NoiseSchedule::none;
  if (s == "flat") return NoiseSchedule::flat;
  if (s == "super-linear") return NoiseSchedule::super_linear;
  if (s == "spike") return NoiseSchedule::spike;
  throw ConfigError("unknown noise schedule '" + s + "'");
}

struct SyntheticSpec {
  ViTConfig vit{4, 32, 16, 2, 2, 16};
  QuantScheme quant = QuantScheme::per_channel;

  NoiseSchedule schedule = NoiseSchedule::super_linear;
  double outlier_base = 0.0;   // flat level (all schedules but lossless/none)
  double outlier_peak = 12.0;  // super-linear: added at the last block
  double outlier_power = 3.0;
  std::size_t spike_layer = 2;  // 1-based
  double spike_outlier = 12.0;

  std::size_t num_classes = 8;
  std::size_t train_samples = 2000;
  std::size_t gate_samples = 1000;
  std::size_t eval_samples = 1000;

  double signal = 0.25;            // per-dimension centroid scale
  double patch_noise_min = 0.5;    // per-sample token noise std, uniform range
  double patch_noise_max = 1.5;
  double confuser_max = 0.45;      // mixing weight toward a second class
  double cls_norm = 0.5;           // per-dimension scale of the [CLS] input

  double qk_std = 0.3;
  double value_gain = 0.6;
  double mlp_gain = 0.3;
  float logit_scale = 100.0f;

  std::uint64_t seed = 0;

  void validate() const {
    vit.validate();
    if (vit.dim < 3) throw ConfigError("synthetic model needs dim >= 3");
    if (vit.hidden() < 2) throw ConfigError("synthetic model needs hidden width >= 2");
    if (num_classes < 2) throw ConfigError("need at least two classes");
    if (schedule == NoiseSchedule::spike && (spike_layer < 1 || spike_layer > vit.num_layers)) {
      throw ConfigError("spike layer outside 1.." + std::to_string(vit.num_layers));
    }
    if (patch_noise_min < 0.0 || patch_noise_max < patch_noise_min) throw ConfigError("bad patch noise range");
    if (confuser_max < 0.0 || confuser_max >= 0.5) throw ConfigError("confuser_max must be in [0, 0.5)");
  }

  // Outlier magnitude injected into block `layer` (1-based); 0 means none.
  double outlier(std::size_t layer) const {
    switch (schedule) {
      case NoiseSchedule::lossless:
      case NoiseSchedule::none: return 0.0;
      case NoiseSchedule::flat: return outlier_base;
      case NoiseSchedule::super_linear: {
        const double t = double(layer - 1) / double(vit.num_layers - 1);
        return outlier_base + outlier_peak * std::pow(t, outlier_power);
      }
      case NoiseSchedule::spike: return layer == spike_layer ? spike_outlier : outlier_base;
    }
    return 0.0;
  }
};

struct LabeledSplit {
  std::vector<Tensor> tokens;  // each [(N+1) x d]
  std::vector<int> labels;

  std::size_t size() const noexcept { return tokens.size(); }
};

struct Dataset {
  LabeledSplit train, gate, eval;
  TextBank bank;
};

struct SyntheticBundle {
  ViTModel model;
  Dataset data;
};

namespace detail {

inline std::vector<std::vector<double>> random_orthogonal(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> q(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : q[i]) v = g(rng);
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < n; ++c) d += q[i][c] * q[j][c];
      for (std::size_t c = 0; c < n; ++c) q[i][c] -= d * q[j][c];
    }
    double nn = 0.0;
    for (double v : q[i]) nn += v * v;
    nn = std::sqrt(nn);
    for (auto& v : q[i]) v /= nn;
  }
  return q;
}

// Zero-mean across dimensions, scaled to norm sqrt(n).
inline std::vector<double> random_direction(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  double mean = 0.0;
  for (auto& x : v) mean += (x = g(rng));
  mean /= double(n);
  double nn = 0.0;
  for (auto& x : v) {
    x -= mean;
    nn += x * x;
  }
  nn = std::sqrt(nn);
  for (auto& x : v) x *= std::sqrt(double(n)) / nn;
  return v;
}

// Snaps every non-zero row to integer multiples of a power-of-two step with
// one +-127 code, so per-channel INT8 reproduces it exactly.
inline void snap_representable(Tensor& w) {
  for (std::size_t r = 0; r < w.rows(); ++r) {
    auto row = w.row(r);
    std::size_t arg = 0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (std::fabs(row[c]) > std::fabs(row[arg])) arg = c;
    }
    const float mx = std::fabs(row[arg]);
    if (mx == 0.0f) continue;
    const float step = std::ldexp(1.0f, static_cast<int>(std::ceil(std::log2(mx / float(kQuantMax)))));
    for (float& v : row) v = std::clamp(std::nearbyint(v / step), -float(kQuantMax), float(kQuantMax)) * step;
    row[arg] = std::copysign(float(kQuantMax) * step, row[arg]);
  }
}

}  // namespace detail

inline ViTModel generate_model(const SyntheticSpec& spec, std::mt19937_64& rng) {
  const ViTConfig& c = spec.vit;
  const std::size_t d = c.dim, live = d - 1, dead = d - 1, hid = c.hidden();
  std::normal_distribution<double> g(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);

  ViTModel m;
  m.config = c;
  auto ln_gamma = [&] {
    Tensor t({d});
    for (std::size_t j = 0; j < live; ++j) t[j] = 1.0f;
    return t;
  };
  for (std::size_t layer = 1; layer <= c.num_layers; ++layer) {
    BlockWeights b;
    b.ln1_gamma = ln_gamma();
    b.ln1_beta = Tensor({d});
    b.ln2_gamma = ln_gamma();
    b.ln2_beta = Tensor({d});

    b.qkv.weight = Tensor({3 * d, d});
    b.qkv.bias = Tensor({3 * d});
    const double qk = spec.qk_std / std::sqrt(double(live));
    for (std::size_t r = 0; r < live; ++r) {
      for (std::size_t col = 0; col < live; ++col) {
        b.qkv.weight.at(r, col) = static_cast<float>(qk * g(rng));
        b.qkv.weight.at(d + r, col) = static_cast<float>(qk * g(rng));
      }
    }
    const auto rot = detail::random_orthogonal(live, rng);
    b.attn_out.weight = Tensor({d, d});
    b.attn_out.bias = Tensor({d});
    for (std::size_t r = 0; r < live; ++r) {
      for (std::size_t col = 0; col < live; ++col) {
        b.qkv.weight.at(2 * d + r, col) = static_cast<float>(spec.value_gain * rot[r][col]);
        b.attn_out.weight.at(col, r) = static_cast<float>(rot[r][col]);
      }
    }

    b.fc1.weight = Tensor({hid, d});
    b.fc1.bias = Tensor({hid});
    b.fc2.weight = Tensor({d, hid});
    b.fc2.bias = Tensor({d});
    // hidden unit 0 stays dead
    for (std::size_t h = 1; h < hid; ++h) {
      for (std::size_t col = 0; col < live; ++col) b.fc1.weight.at(h, col) = static_cast<float>(g(rng) / std::sqrt(double(live)));
    }
    for (std::size_t r = 0; r < live; ++r) {
      for (std::size_t h = 1; h < hid; ++h) {
        b.fc2.weight.at(r, h) = static_cast<float>(spec.mlp_gain * g(rng) / std::sqrt(double(hid - 1)));
      }
    }

    if (spec.schedule == NoiseSchedule::lossless) {
      for (Tensor* w : {&b.qkv.weight, &b.attn_out.weight, &b.fc1.weight, &b.fc2.weight}) detail::snap_representable(*w);
    } else if (const double mag = spec.outlier(layer); mag > 0.0) {
      auto sign = [&] { return static_cast<float>(coin(rng) ? mag : -mag); };
      for (std::size_t r = 0; r < 3 * d; ++r) b.qkv.weight.at(r, dead) = sign();
      for (std::size_t r = 0; r < d; ++r) b.attn_out.weight.at(r, dead) = sign();
      for (std::size_t h = 0; h < hid; ++h) b.fc1.weight.at(h, dead) = sign();
      for (std::size_t r = 0; r < d; ++r) b.fc2.weight.at(r, 0) = sign();
    }
    m.blocks.push_back(std::move(b));
  }
  m.ln_post_gamma = ln_gamma();
  m.ln_post_beta = Tensor({d});
  m.proj = Tensor({c.embed_dim, d});
  for (std::size_t r = 0; r < c.embed_dim; ++r) {
    for (std::size_t col = 0; col < live; ++col) m.proj.at(r, col) = static_cast<float>(g(rng) / std::sqrt(double(live)));
  }
  m.quantize(spec.schedule == NoiseSchedule::lossless ? QuantScheme::per_channel : spec.quant);
  if (spec.quant == QuantScheme::lossless) m.quantize(QuantScheme::lossless);
  return m;
}

// Class centroids and the [CLS] input shared by every split.
struct TaskGeometry {
  std::vector<std::vector<double>> centroids;  // live dims
  std::vector<double> cls;
};

inline TaskGeometry generate_geometry(const SyntheticSpec& spec, std::mt19937_64& rng) {
  const std::size_t live = spec.vit.dim - 1;
  TaskGeometry geo;
  for (std::size_t k = 0; k < spec.num_classes; ++k) geo.centroids.push_back(detail::random_direction(live, rng));
  geo.cls = detail::random_direction(live, rng);
  return geo;
}

// Patch i = signal * ((1-a) mu_y + a mu_y') + sigma * xi_i, with per-sample
// sigma and confuser weight a.
inline LabeledSplit generate_split(const SyntheticSpec& spec, const TaskGeometry& geo, std::size_t count,
                                   std::mt19937_64& rng) {
  const std::size_t d = spec.vit.dim, live = d - 1, n = spec.vit.num_patches;
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> cls_pick(0, static_cast<int>(spec.num_classes) - 1);
  std::uniform_int_distribution<int> other_pick(1, static_cast<int>(spec.num_classes) - 1);
  std::uniform_real_distribution<double> sigma_pick(spec.patch_noise_min, spec.patch_noise_max);
  std::uniform_real_distribution<double> mix_pick(0.0, spec.confuser_max);
  LabeledSplit s;
  for (std::size_t i = 0; i < count; ++i) {
    const int y = cls_pick(rng);
    const int y2 = (y + other_pick(rng)) % static_cast<int>(spec.num_classes);
    const double sigma = sigma_pick(rng);
    const double a = mix_pick(rng);
    Tensor t({n + 1, d});
    for (std::size_t j = 0; j < live; ++j) t.at(0, j) = static_cast<float>(spec.cls_norm * geo.cls[j]);
    for (std::size_t p = 1; p <= n; ++p) {
      for (std::size_t j = 0; j < live; ++j) {
        const double mu = (1.0 - a) * geo.centroids[y][j] + a * geo.centroids[y2][j];
        t.at(p, j) = static_cast<float>(spec.signal * mu + sigma * g(rng));
      }
    }
    s.tokens.push_back(std::move(t));
    s.labels.push_back(y);
  }
  return s;
}

// Text bank rows are the projected, normalized class centroids.
inline TextBank generate_bank(const SyntheticSpec& spec, const TaskGeometry& geo, const ViTModel& model) {
  const std::size_t live = spec.vit.dim - 1, e = spec.vit.embed_dim;
  Tensor raw({spec.num_classes, e});
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    for (std::size_t r = 0; r < e; ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < live; ++j) acc += model.proj.at(r, j) * geo.centroids[k][j];
      raw.at(k, r) = static_cast<float>(acc);
    }
  }
  return TextBank::from_raw(raw, spec.logit_scale);
}

// Deterministic in the seed: model first, then geometry, then splits.
inline SyntheticBundle gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SyntheticBundle b;
  b.model = generate_model(spec, rng);
  const TaskGeometry geo = generate_geometry(spec, rng);
  b.data.bank = generate_bank(spec, geo, b.model);
  b.data.train = generate_split(spec, geo, spec.train_samples, rng);
  b.data.gate = generate_split(spec, geo, spec.gate_samples, rng);
  b.data.eval = generate_split(spec, geo, spec.eval_samples, rng);
  return b;
}

}  // namespace qexit
