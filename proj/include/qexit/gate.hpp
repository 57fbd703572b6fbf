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
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qexit/errors.hpp"
#include "qexit/exit_heads.hpp"
#include "qexit/tensor.hpp"

namespace qexit {

struct GateFeatures {
  double confidence = 0.0;  // top-1 probability
  double margin = 0.0;      // top-1 minus top-2
  double sav = 0.0;         // spatial activation variance of the patch tokens
};

// (1/N) sum_i |z_i - mean|^2 over patch tokens 1..N.
inline double spatial_activation_variance(const Tensor& z) {
  const Tensor mean = patch_mean(z);
  const std::size_t n = z.rows() - 1;
  double acc = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    const double dist = l2_distance(z.row(i), mean.values());
    acc += dist * dist;
  }
  return acc / static_cast<double>(n);
}

// Confidence and margin from a probability vector; SAV left at zero.
inline GateFeatures confidence_margin(const Tensor& probs) {
  if (probs.size() < 2) throw InputError("gate margin needs at least two classes");
  double top1 = -1.0, top2 = -1.0;
  for (float p : probs.values()) {
    if (p > top1) {
      top2 = top1;
      top1 = p;
    } else if (p > top2) {
      top2 = p;
    }
  }
  return {top1, top1 - top2, 0.0};
}

inline GateFeatures extract_features(const Tensor& probs, const Tensor& z) {
  GateFeatures f = confidence_margin(probs);
  f.sav = spatial_activation_variance(z);
  return f;
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// Per-layer gate sigma(w1 c + w2 m + w3 sav' + b), where sav' is SAV
// standardized with gating-split statistics.
struct LayerGate {
  double w1 = 0.0, w2 = 0.0, w3 = 0.0, b = 0.0;
  double sav_mean = 0.0, sav_std = 1.0;
  bool degenerate = false;  // single-class training data; pinned to prior
  std::uint64_t seed = 0;

  double standardized_sav(double sav) const { return (sav - sav_mean) / sav_std; }
  double logit_of(const GateFeatures& f) const { return w1 * f.confidence + w2 * f.margin + w3 * standardized_sav(f.sav) + b; }
};

struct GateParams {
  std::map<std::size_t, LayerGate> layers;

  const LayerGate& at(std::size_t layer) const {
    auto it = layers.find(layer);
    if (it == layers.end()) throw ConfigError("no gate parameters for layer " + std::to_string(layer));
    return it->second;
  }
};

// Saturated logistics are pulled to the nearest representable interior value
// so the score stays strictly inside (0, 1).
inline double gate_score(const GateFeatures& f, const LayerGate& g) {
  return std::clamp(sigmoid(g.logit_of(f)), std::numeric_limits<double>::denorm_min(), std::nextafter(1.0, 0.0));
}
inline double gate_score(const GateFeatures& f, const GateParams& g, std::size_t layer) { return gate_score(f, g.at(layer)); }

// Exit iff confidence strictly exceeds tau.
inline bool heuristic_gate(const GateFeatures& f, double tau) { return f.confidence > tau; }

struct GateSample {
  GateFeatures features;
  bool correct = false;  // label: the exit's prediction was right
};

enum class GateOptimizer { gradient_descent, adam };

struct GateTrainConfig {
  double lr = 1e-2;
  std::size_t epochs = 2000;
  std::uint64_t seed = 0;
  double clip = 50.0;
  bool standardize_sav = true;
  GateOptimizer optimizer = GateOptimizer::adam;
};

// Mean BCE over `samples` for parameters {w1, w2, w3, b}; fills grad if non-null.
inline double gate_bce(const std::array<double, 4>& w, const LayerGate& stats, const std::vector<GateSample>& samples,
                       std::array<double, 4>* grad = nullptr) {
  if (grad) grad->fill(0.0);
  double loss = 0.0;
  for (const auto& s : samples) {
    const std::array<double, 4> x{s.features.confidence, s.features.margin, stats.standardized_sav(s.features.sav), 1.0};
    double z = 0.0;
    for (std::size_t j = 0; j < 4; ++j) z += w[j] * x[j];
    const double y = s.correct ? 1.0 : 0.0;
    // log(1 + e^z) - y z, evaluated stably
    loss += (z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z))) - y * z;
    if (grad) {
      const double g = sigmoid(z) - y;
      for (std::size_t j = 0; j < 4; ++j) (*grad)[j] += g * x[j];
    }
  }
  const double n = static_cast<double>(samples.size());
  if (grad) {
    for (auto& g : *grad) g /= n;
  }
  return loss / n;
}

struct GateTrainResult {
  LayerGate gate;
  std::vector<double> loss_history;  // loss before each epoch's update, then final
};

inline GateTrainResult train_layer_gate(const std::vector<GateSample>& samples, const GateTrainConfig& cfg) {
  if (samples.empty()) throw InputError("train_gate: no samples");
  GateTrainResult res;
  LayerGate& g = res.gate;
  g.seed = cfg.seed;

  if (cfg.standardize_sav) {
    double mean = 0.0;
    for (const auto& s : samples) mean += s.features.sav;
    mean /= static_cast<double>(samples.size());
    double var = 0.0;
    for (const auto& s : samples) var += (s.features.sav - mean) * (s.features.sav - mean);
    var /= static_cast<double>(samples.size());
    g.sav_mean = mean;
    g.sav_std = var > 0.0 ? std::sqrt(var) : 1.0;
  }

  const auto positives = std::count_if(samples.begin(), samples.end(), [](const GateSample& s) { return s.correct; });
  if (positives == 0 || static_cast<std::size_t>(positives) == samples.size()) {
    const double prior = static_cast<double>(positives) / static_cast<double>(samples.size());
    g.degenerate = true;
    g.b = prior >= 1.0 ? cfg.clip : prior <= 0.0 ? -cfg.clip : std::clamp(logit(prior), -cfg.clip, cfg.clip);
    res.loss_history.push_back(gate_bce({g.w1, g.w2, g.w3, g.b}, g, samples));
    return res;
  }

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> init(-0.01, 0.01);
  std::array<double, 4> w{init(rng), init(rng), init(rng), init(rng)};
  std::array<double, 4> m{}, v{}, grad{};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    res.loss_history.push_back(gate_bce(w, g, samples, &grad));
    for (std::size_t j = 0; j < 4; ++j) {
      if (cfg.optimizer == GateOptimizer::adam) {
        m[j] = 0.9 * m[j] + 0.1 * grad[j];
        v[j] = 0.999 * v[j] + 0.001 * grad[j] * grad[j];
        const double mh = m[j] / (1.0 - std::pow(0.9, double(epoch + 1)));
        const double vh = v[j] / (1.0 - std::pow(0.999, double(epoch + 1)));
        w[j] -= cfg.lr * mh / (std::sqrt(vh) + 1e-8);
      } else {
        w[j] -= cfg.lr * grad[j];
      }
      w[j] = std::clamp(w[j], -cfg.clip, cfg.clip);
    }
  }
  res.loss_history.push_back(gate_bce(w, g, samples));
  g.w1 = w[0];
  g.w2 = w[1];
  g.w3 = w[2];
  g.b = w[3];
  return res;
}

// Independent logistic regression per layer.
inline GateParams train_gate(const std::map<std::size_t, std::vector<GateSample>>& by_layer, const GateTrainConfig& cfg) {
  GateParams p;
  for (const auto& [layer, samples] : by_layer) {
    GateTrainConfig c = cfg;
    c.seed = cfg.seed + 7919ULL * layer;
    p.layers[layer] = train_layer_gate(samples, c).gate;
  }
  return p;
}

inline nlohmann::json gate_to_json(const GateParams& p) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [layer, g] : p.layers) {
    j[std::to_string(layer)] = {{"w1", g.w1},           {"w2", g.w2},           {"w3", g.w3},
                                {"b", g.b},             {"sav_mean", g.sav_mean}, {"sav_std", g.sav_std},
                                {"degenerate", g.degenerate}, {"seed", g.seed}};
  }
  return j;
}

inline GateParams gate_from_json(const nlohmann::json& j) {
  GateParams p;
  for (const auto& [key, v] : j.items()) {
    LayerGate g;
    g.w1 = v.at("w1").get<double>();
    g.w2 = v.at("w2").get<double>();
    g.w3 = v.at("w3").get<double>();
    g.b = v.at("b").get<double>();
    g.sav_mean = v.value("sav_mean", 0.0);
    g.sav_std = v.value("sav_std", 1.0);
    g.degenerate = v.value("degenerate", false);
    g.seed = v.value("seed", std::uint64_t{0});
    p.layers[static_cast<std::size_t>(std::stoul(key))] = g;
  }
  return p;
}

}  // namespace qexit
