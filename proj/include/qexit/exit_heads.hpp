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
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "qexit/errors.hpp"
#include "qexit/tensor.hpp"

namespace qexit {

// Unit-norm class embeddings scored by scaled cosine similarity.
struct TextBank {
  Tensor embeddings;  // [K x e]
  float logit_scale = 100.0f;

  std::size_t classes() const noexcept { return embeddings.rows(); }
  std::size_t dim() const noexcept { return embeddings.cols(); }

  void validate() const {
    require_rank(embeddings, 2, "text bank");
    if (!(logit_scale > 0.0f)) throw ConfigError("text bank logit_scale must be positive");
    for (std::size_t k = 0; k < classes(); ++k) {
      const double n = l2_norm(embeddings.row(k));
      if (std::fabs(n - 1.0) > 1e-4) {
        throw InputError("text bank row " + std::to_string(k) + " has norm " + std::to_string(n));
      }
    }
  }

  // Normalizes each row of `raw`.
  static TextBank from_raw(const Tensor& raw, float logit_scale = 100.0f) {
    TextBank b{raw, logit_scale};
    for (std::size_t k = 0; k < b.classes(); ++k) {
      auto r = b.embeddings.row(k);
      const double n = l2_norm(r);
      if (n == 0.0) throw InputError("text bank row " + std::to_string(k) + " is zero");
      for (float& v : r) v = static_cast<float>(v / n);
    }
    return b;
  }
};

enum class FeatureKind { ssa, cls };
enum class Supervision { hard, distill };

inline std::string to_string(FeatureKind f) { return f == FeatureKind::ssa ? "ssa" : "cls"; }
inline std::string to_string(Supervision s) { return s == Supervision::hard ? "hard" : "distill"; }

inline FeatureKind feature_kind_from_string(const std::string& s) {
  if (s == "ssa") return FeatureKind::ssa;
  if (s == "cls") return FeatureKind::cls;
  throw ConfigError("unknown feature kind '" + s + "'");
}

inline Supervision supervision_from_string(const std::string& s) {
  if (s == "hard") return Supervision::hard;
  if (s == "distill") return Supervision::distill;
  throw ConfigError("unknown supervision mode '" + s + "'");
}

// Mean over patch tokens 1..N; the [CLS] row is excluded.
inline Tensor patch_mean(const Tensor& z) {
  require_rank(z, 2, "patch_mean");
  if (z.rows() < 2) throw DimensionError("patch_mean: need at least one patch token");
  const std::size_t n = z.rows() - 1, d = z.cols();
  // Double accumulation keeps the float result independent of token order.
  std::vector<double> acc(d, 0.0);
  for (std::size_t i = 1; i <= n; ++i) {
    const auto r = z.row(i);
    for (std::size_t j = 0; j < d; ++j) acc[j] += r[j];
  }
  Tensor m({d});
  for (std::size_t j = 0; j < d; ++j) m[j] = static_cast<float>(acc[j] / static_cast<double>(n));
  return m;
}

// Optional affine parameters for the aggregate's layer norm; parameter-free
// when empty.
struct FeatureNorm {
  Tensor gamma, beta;
  float eps = kLayerNormEps;

  bool affine() const noexcept { return !gamma.empty(); }

  Tensor apply(const Tensor& v) const {
    const Tensor row = v.reshaped({1, v.size()});
    return (affine() ? layer_norm(row, gamma, beta, eps) : layer_norm(row, eps)).reshaped({v.size()});
  }
};

// Spatio-semantic aggregate: layer norm of the patch-token mean.
inline Tensor ssa_aggregate(const Tensor& z, const FeatureNorm& norm = {}) { return norm.apply(patch_mean(z)); }

inline Tensor cls_feature(const Tensor& z, bool normalize = false, const FeatureNorm& norm = {}) {
  require_rank(z, 2, "cls_feature");
  Tensor c = z.row_tensor(0);
  return normalize ? norm.apply(c) : c;
}

inline Tensor exit_feature(const Tensor& z, FeatureKind kind) {
  return kind == FeatureKind::ssa ? ssa_aggregate(z) : cls_feature(z, true);
}

// Two-layer MLP in -> hidden -> out with GELU; weights row-major [out x in].
template <typename T>
struct MlpParams {
  std::size_t in = 0, hidden = 0, out = 0;
  std::vector<T> w1, b1, w2, b2;

  static MlpParams zeros(std::size_t in, std::size_t hidden, std::size_t out) {
    return {in, hidden, out, std::vector<T>(hidden * in), std::vector<T>(hidden), std::vector<T>(out * hidden),
            std::vector<T>(out)};
  }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
  template <typename Rng>
  static MlpParams init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    auto p = zeros(in, hidden, out);
    std::uniform_real_distribution<double> u1(-1.0 / std::sqrt(double(in)), 1.0 / std::sqrt(double(in)));
    std::uniform_real_distribution<double> u2(-1.0 / std::sqrt(double(hidden)), 1.0 / std::sqrt(double(hidden)));
    for (auto& w : p.w1) w = static_cast<T>(u1(rng));
    for (auto& w : p.w2) w = static_cast<T>(u2(rng));
    return p;
  }

  std::size_t parameter_count() const noexcept { return w1.size() + b1.size() + w2.size() + b2.size(); }

  // Flat view order: w1, b1, w2, b2.
  T& parameter(std::size_t i) {
    if (i < w1.size()) return w1[i];
    i -= w1.size();
    if (i < b1.size()) return b1[i];
    i -= b1.size();
    if (i < w2.size()) return w2[i];
    return b2[i - w2.size()];
  }

  template <typename U>
  MlpParams<U> cast() const {
    auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
    return {in, hidden, out, conv(w1), conv(b1), conv(w2), conv(b2)};
  }
};

template <typename T>
struct MlpActivations {
  std::vector<T> pre, hidden, out;
};

template <typename T>
MlpActivations<T> mlp_forward(const MlpParams<T>& p, std::span<const T> x) {
  MlpActivations<T> a{std::vector<T>(p.hidden), std::vector<T>(p.hidden), std::vector<T>(p.out)};
  for (std::size_t h = 0; h < p.hidden; ++h) {
    T acc = T(0);
    for (std::size_t i = 0; i < p.in; ++i) acc += p.w1[h * p.in + i] * x[i];
    a.pre[h] = acc + p.b1[h];
    a.hidden[h] = gelu_scalar(a.pre[h]);
  }
  for (std::size_t o = 0; o < p.out; ++o) {
    T acc = T(0);
    for (std::size_t h = 0; h < p.hidden; ++h) acc += p.w2[o * p.hidden + h] * a.hidden[h];
    a.out[o] = acc + p.b2[o];
  }
  return a;
}

struct ExitHead {
  std::size_t layer = 0;
  FeatureKind feature = FeatureKind::ssa;
  Supervision supervision = Supervision::hard;
  MlpParams<float> mlp;
};

inline Tensor head_embed(const Tensor& feature, const ExitHead& head) {
  if (feature.size() != head.mlp.in) {
    throw DimensionError("head_forward: feature length " + std::to_string(feature.size()) + " vs head input " +
                         std::to_string(head.mlp.in));
  }
  auto a = mlp_forward<float>(head.mlp, feature.values());
  return Tensor({head.mlp.out}, std::move(a.out));
}

// Softmax over logit_scale * cos(embedding, class) for every class.
inline Tensor bank_probabilities(const Tensor& embedding, const TextBank& bank) {
  if (embedding.size() != bank.dim()) {
    throw DimensionError("embedding length " + std::to_string(embedding.size()) + " vs text bank dim " +
                         std::to_string(bank.dim()));
  }
  const double n = l2_norm(embedding.values());
  if (n == 0.0) throw UndefinedSimilarityError("zero image embedding");
  Tensor logits({bank.classes()});
  for (std::size_t k = 0; k < bank.classes(); ++k) {
    logits[k] = static_cast<float>(bank.logit_scale * dot(embedding.values(), bank.embeddings.row(k)) / n);
  }
  return softmax(logits);
}

inline Tensor head_forward(const Tensor& feature, const ExitHead& head, const TextBank& bank) {
  if (head.mlp.out != bank.dim()) throw DimensionError("exit head output dim differs from text bank dim");
  return bank_probabilities(head_embed(feature, head), bank);
}

inline std::size_t argmax(std::span<const float> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Per-sample loss; accumulates d(loss)/d(params) into *grad when non-null.
// hard: CE(p, y).  distill: (1 - lambda) * CE + lambda * (1 - cos(embed, teacher)).
template <typename T>
T head_loss(const MlpParams<T>& p, std::span<const T> x, std::size_t label, const TextBank& bank,
            std::span<const T> teacher, Supervision mode, T lambda, MlpParams<T>* grad) {
  const auto a = mlp_forward(p, x);
  const std::size_t e = p.out, K = bank.classes();
  T norm2 = T(0);
  for (T v : a.out) norm2 += v * v;
  const T norm = std::sqrt(norm2);
  if (norm == T(0)) throw UndefinedSimilarityError("zero head embedding during training");
  std::vector<T> unit(e);
  for (std::size_t i = 0; i < e; ++i) unit[i] = a.out[i] / norm;

  const T scale = static_cast<T>(bank.logit_scale);
  std::vector<T> logits(K);
  for (std::size_t k = 0; k < K; ++k) {
    T acc = T(0);
    const auto row = bank.embeddings.row(k);
    for (std::size_t i = 0; i < e; ++i) acc += unit[i] * static_cast<T>(row[i]);
    logits[k] = scale * acc;
  }
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum = T(0);
  std::vector<T> prob(K);
  for (std::size_t k = 0; k < K; ++k) sum += (prob[k] = std::exp(logits[k] - mx));
  for (auto& v : prob) v /= sum;
  const T ce = -(logits[label] - mx - std::log(sum));

  const bool distill = mode == Supervision::distill;
  T cos_loss = T(0);
  std::vector<T> t_unit;
  if (distill) {
    if (teacher.size() != e) throw DimensionError("teacher embedding length differs from head output");
    T tn = T(0);
    for (T v : teacher) tn += v * v;
    tn = std::sqrt(tn);
    if (tn == T(0)) throw UndefinedSimilarityError("zero teacher embedding");
    t_unit.resize(e);
    T c = T(0);
    for (std::size_t i = 0; i < e; ++i) {
      t_unit[i] = teacher[i] / tn;
      c += unit[i] * t_unit[i];
    }
    cos_loss = T(1) - c;
  }
  const T loss = distill ? (T(1) - lambda) * ce + lambda * cos_loss : ce;
  if (!grad) return loss;

  // d loss / d unit
  std::vector<T> g_unit(e, T(0));
  const T ce_w = distill ? T(1) - lambda : T(1);
  for (std::size_t k = 0; k < K; ++k) {
    const T gk = ce_w * scale * (prob[k] - (k == label ? T(1) : T(0)));
    const auto row = bank.embeddings.row(k);
    for (std::size_t i = 0; i < e; ++i) g_unit[i] += gk * static_cast<T>(row[i]);
  }
  if (distill) {
    for (std::size_t i = 0; i < e; ++i) g_unit[i] -= lambda * t_unit[i];
  }
  // Through the normalization: (I - u u^T) g / |out|.
  T proj = T(0);
  for (std::size_t i = 0; i < e; ++i) proj += unit[i] * g_unit[i];
  std::vector<T> g_out(e);
  for (std::size_t i = 0; i < e; ++i) g_out[i] = (g_unit[i] - unit[i] * proj) / norm;

  std::vector<T> g_hidden(p.hidden, T(0));
  for (std::size_t o = 0; o < e; ++o) {
    grad->b2[o] += g_out[o];
    for (std::size_t h = 0; h < p.hidden; ++h) {
      grad->w2[o * p.hidden + h] += g_out[o] * a.hidden[h];
      g_hidden[h] += g_out[o] * p.w2[o * p.hidden + h];
    }
  }
  for (std::size_t h = 0; h < p.hidden; ++h) {
    const T g_pre = g_hidden[h] * gelu_grad_scalar(a.pre[h]);
    grad->b1[h] += g_pre;
    for (std::size_t i = 0; i < p.in; ++i) grad->w1[h * p.in + i] += g_pre * x[i];
  }
  return loss;
}

struct HeadTrainConfig {
  Supervision supervision = Supervision::hard;
  double distill_weight = 0.5;  // lambda, distill mode only
  double lr = 5e-4;
  std::size_t epochs = 3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

struct HeadTrainResult {
  ExitHead head;
  std::vector<double> epoch_loss;  // mean per-sample loss
  double train_accuracy = 0.0;
};

// Adam over shuffled minibatches; gradients are summed in sample order.
inline HeadTrainResult train_head(std::size_t layer, FeatureKind kind, const std::vector<Tensor>& features,
                                  const std::vector<int>& labels, const TextBank& bank, const HeadTrainConfig& cfg,
                                  const std::vector<Tensor>* teacher = nullptr, std::size_t hidden = 0) {
  if (features.empty() || features.size() != labels.size()) {
    throw InputError("train_head: features and labels must be non-empty and of equal length");
  }
  if (cfg.supervision == Supervision::distill && (!teacher || teacher->size() != features.size())) {
    throw InputError("train_head: distill mode requires one teacher embedding per sample");
  }
  if (cfg.batch_size == 0) throw ConfigError("train_head: batch_size must be positive");
  const std::size_t d = features.front().size();
  if (hidden == 0) hidden = d;
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= bank.classes()) throw InputError("train_head: label out of range");
  }

  std::mt19937_64 rng(cfg.seed);
  HeadTrainResult res;
  res.head.layer = layer;
  res.head.feature = kind;
  res.head.supervision = cfg.supervision;
  res.head.mlp = MlpParams<float>::init(d, hidden, bank.dim(), rng);
  auto& p = res.head.mlp;

  const std::size_t np = p.parameter_count();
  std::vector<float> m(np, 0.0f), v(np, 0.0f);
  const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f, lr = static_cast<float>(cfg.lr);
  const float lambda = static_cast<float>(cfg.distill_weight);
  std::size_t step = 0;

  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      auto g = MlpParams<float>::zeros(p.in, p.hidden, p.out);
      float batch_loss = 0.0f;
      for (std::size_t s = start; s < end; ++s) {
        const std::size_t i = order[s];
        std::span<const float> t;
        if (cfg.supervision == Supervision::distill) t = (*teacher)[i].values();
        batch_loss += head_loss<float>(p, features[i].values(), static_cast<std::size_t>(labels[i]), bank, t,
                                       cfg.supervision, lambda, &g);
      }
      if (!std::isfinite(batch_loss)) {
        std::ostringstream os;
        os << "exit head for layer " << layer << " diverged: loss " << batch_loss << " at epoch " << epoch
           << ", batch starting " << start << ", lr " << cfg.lr;
        throw DivergenceError(os.str());
      }
      epoch_loss += batch_loss;
      ++step;
      const float inv_n = 1.0f / static_cast<float>(end - start);
      const float c1 = 1.0f - std::pow(b1, static_cast<float>(step));
      const float c2 = 1.0f - std::pow(b2, static_cast<float>(step));
      for (std::size_t j = 0; j < np; ++j) {
        const float gj = g.parameter(j) * inv_n;
        m[j] = b1 * m[j] + (1.0f - b1) * gj;
        v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
        p.parameter(j) -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      }
    }
    res.epoch_loss.push_back(epoch_loss / static_cast<double>(features.size()));
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const Tensor probs = head_forward(features[i], res.head, bank);
    correct += argmax(probs.values()) == static_cast<std::size_t>(labels[i]);
  }
  res.train_accuracy = static_cast<double>(correct) / static_cast<double>(features.size());
  return res;
}

// One head per layer key; seeds are offset by layer so heads differ.
inline std::map<std::size_t, ExitHead> train_heads(const std::map<std::size_t, std::vector<Tensor>>& features_by_layer,
                                                   const std::vector<int>& labels, const TextBank& bank,
                                                   const HeadTrainConfig& cfg, FeatureKind kind,
                                                   const std::vector<Tensor>* teacher = nullptr) {
  std::map<std::size_t, ExitHead> heads;
  for (const auto& [layer, feats] : features_by_layer) {
    HeadTrainConfig c = cfg;
    c.seed = cfg.seed + 1000003ULL * layer;
    heads.emplace(layer, train_head(layer, kind, feats, labels, bank, c, teacher).head);
  }
  return heads;
}

}  // namespace qexit
