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
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qexit/encoder.hpp"
#include "qexit/errors.hpp"
#include "qexit/exit_heads.hpp"
#include "qexit/quantization.hpp"
#include "qexit/tensor.hpp"

namespace qexit {

inline constexpr double kInfiniteInr = std::numeric_limits<double>::infinity();

struct LayerDelta {
  std::size_t layer = 0;  // 1-based block index
  double delta_nat = 0.0;
  double delta_quant = 0.0;
};

inline void check_trace(const DualTrace& t) {
  if (t.fp32.size() < 2 || t.fp32.size() != t.int8.size()) throw InputError("dual trace paths have different depths");
  for (std::size_t l = 0; l < t.fp32.size(); ++l) {
    if (t.fp32[l].shape() != t.int8[l].shape() || t.fp32[l].shape() != t.fp32[0].shape()) {
      throw DimensionError("dual trace layer " + std::to_string(l) + " shape mismatch");
    }
  }
}

// L2 norms over the flattened (N+1) x d tensor.
inline std::vector<LayerDelta> layer_deltas(const DualTrace& t) {
  check_trace(t);
  std::vector<LayerDelta> out;
  for (std::size_t l = 1; l < t.fp32.size(); ++l) {
    out.push_back({l, l2_distance(t.fp32[l].values(), t.fp32[l - 1].values()),
                   l2_distance(t.int8[l].values(), t.fp32[l].values())});
  }
  return out;
}

// `terminal` uses the model's LN_post([CLS]) projection; `ssa_then_terminal`
// is SSA for intermediate layers and the terminal embedding for the last.
enum class DriftFeature { cls, ssa, terminal, ssa_then_terminal };

inline Tensor drift_feature(const Tensor& z, DriftFeature f, const ViTModel* model) {
  switch (f) {
    case DriftFeature::cls: return cls_feature(z);
    case DriftFeature::ssa: return ssa_aggregate(z);
    case DriftFeature::terminal:
    case DriftFeature::ssa_then_terminal:
      if (!model) throw ConfigError("terminal drift feature requires the model");
      return terminal_embedding(z, *model);
  }
  return {};
}

// Cosine between INT8 and FP32 features, indexed by depth (0 = input).
inline std::vector<double> cosine_drift(const DualTrace& t, DriftFeature f, const ViTModel* model = nullptr) {
  check_trace(t);
  std::vector<double> out;
  const std::size_t last = t.depth();
  for (std::size_t l = 0; l <= last; ++l) {
    DriftFeature eff = f;
    if (f == DriftFeature::ssa_then_terminal) eff = l == last ? DriftFeature::terminal : DriftFeature::ssa;
    out.push_back(cosine_similarity(drift_feature(t.int8[l], eff, model).values(),
                                    drift_feature(t.fp32[l], eff, model).values()));
  }
  return out;
}

enum class InrNumerator { fp32, int8 };

// Streaming accumulator for the information-to-noise ratio:
// |E_x z_L|^2 / mean_elements(Var_x eps_L), eps_L = z_int8 - z_fp32.
// Variance is the unbiased per-element sample variance.
class InrAccumulator {
 public:
  explicit InrAccumulator(InrNumerator num = InrNumerator::fp32) : numerator_(num) {}

  void add(const DualTrace& t) {
    check_trace(t);
    if (count_ == 0) {
      depth_ = t.fp32.size();
      elems_ = t.fp32[0].size();
      sum_z_.assign(depth_, std::vector<double>(elems_, 0.0));
      sum_e_ = sum_z_;
      sum_e2_ = sum_z_;
    } else if (t.fp32.size() != depth_ || t.fp32[0].size() != elems_) {
      throw DimensionError("InrAccumulator: trace shape differs from earlier samples");
    }
    for (std::size_t l = 0; l < depth_; ++l) {
      const auto& zf = t.fp32[l];
      const auto& zq = t.int8[l];
      const auto& zn = numerator_ == InrNumerator::fp32 ? zf : zq;
      for (std::size_t i = 0; i < elems_; ++i) {
        const double e = static_cast<double>(zq[i]) - zf[i];
        sum_z_[l][i] += zn[i];
        sum_e_[l][i] += e;
        sum_e2_[l][i] += e * e;
      }
    }
    ++count_;
  }

  std::size_t count() const noexcept { return count_; }

  // Indexed by depth (0 = input); +inf when the residual variance is zero.
  std::vector<double> finish() const {
    if (count_ < 2) throw InputError("INR needs at least 2 samples");
    const double n = static_cast<double>(count_);
    std::vector<double> out(depth_);
    for (std::size_t l = 0; l < depth_; ++l) {
      double signal = 0.0, var = 0.0;
      for (std::size_t i = 0; i < elems_; ++i) {
        const double mz = sum_z_[l][i] / n;
        signal += mz * mz;
        const double me = sum_e_[l][i] / n;
        var += std::max(0.0, (sum_e2_[l][i] - n * me * me) / (n - 1.0));
      }
      var /= static_cast<double>(elems_);
      out[l] = var > 0.0 ? signal / var : kInfiniteInr;
    }
    return out;
  }

 private:
  InrNumerator numerator_;
  std::size_t count_ = 0, depth_ = 0, elems_ = 0;
  std::vector<std::vector<double>> sum_z_, sum_e_, sum_e2_;
};

inline std::vector<double> compute_inr(const std::vector<DualTrace>& traces, InrNumerator num = InrNumerator::fp32) {
  InrAccumulator acc(num);
  for (const auto& t : traces) acc.add(t);
  return acc.finish();
}

struct LayerNoise {
  std::size_t layer = 0;
  double delta_nat = 0.0;
  double delta_quant = 0.0;
  std::optional<double> ratio;  // delta_quant / delta_nat; absent if delta_nat is always 0
  double cosine = 1.0;
  double inr = kInfiniteInr;
  double act_max = 0.0;
  double quant_mse = 0.0;
};

struct NoiseProfile {
  std::vector<LayerNoise> layers;  // blocks 1..L_max
  std::size_t samples = 0;

  const LayerNoise& layer(std::size_t l) const { return layers.at(l - 1); }
};

// Mean squared weight error over all four projections of a block.
inline double block_quant_mse(const BlockWeights& b) {
  double sse = 0.0;
  std::size_t n = 0;
  for (const Projection* p : b.projections()) {
    sse += quant_mse(p->weight, p->quant) * static_cast<double>(p->weight.size());
    n += p->weight.size();
  }
  return sse / static_cast<double>(n);
}

struct ProfileOptions {
  DriftFeature drift = DriftFeature::ssa_then_terminal;
  InrNumerator inr_numerator = InrNumerator::fp32;
};

// Ordered single-threaded reduction; identical input order gives identical output.
class ProfileAccumulator {
 public:
  explicit ProfileAccumulator(const ViTModel& model, ProfileOptions opts = {})
      : model_(model), opts_(opts), inr_(opts.inr_numerator) {
    const std::size_t L = model.config.num_layers;
    sum_nat_.assign(L, 0.0);
    sum_quant_.assign(L, 0.0);
    sum_ratio_.assign(L, 0.0);
    ratio_n_.assign(L, 0);
    sum_cos_.assign(L, 0.0);
    act_max_.assign(L, 0.0);
  }

  void add(const DualTrace& t) {
    const auto deltas = layer_deltas(t);
    if (deltas.size() != model_.config.num_layers) throw DimensionError("trace depth differs from model depth");
    const auto cos = cosine_drift(t, opts_.drift, &model_);
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      sum_nat_[i] += deltas[i].delta_nat;
      sum_quant_[i] += deltas[i].delta_quant;
      if (deltas[i].delta_nat > 0.0) {
        sum_ratio_[i] += deltas[i].delta_quant / deltas[i].delta_nat;
        ++ratio_n_[i];
      }
      sum_cos_[i] += cos[i + 1];
      for (float v : t.int8[i + 1].values()) act_max_[i] = std::max(act_max_[i], static_cast<double>(std::fabs(v)));
    }
    inr_.add(t);
    ++count_;
  }

  NoiseProfile finish() const {
    if (count_ == 0) throw InputError("noise profile over an empty dataset");
    const double n = static_cast<double>(count_);
    std::vector<double> inr(model_.config.num_layers + 1, kInfiniteInr);
    if (count_ >= 2) inr = inr_.finish();
    NoiseProfile p;
    p.samples = count_;
    for (std::size_t i = 0; i < model_.config.num_layers; ++i) {
      LayerNoise ln;
      ln.layer = i + 1;
      ln.delta_nat = sum_nat_[i] / n;
      ln.delta_quant = sum_quant_[i] / n;
      if (ratio_n_[i] > 0) ln.ratio = sum_ratio_[i] / static_cast<double>(ratio_n_[i]);
      ln.cosine = sum_cos_[i] / n;
      ln.inr = inr[i + 1];
      ln.act_max = act_max_[i];
      ln.quant_mse = block_quant_mse(model_.blocks[i]);
      p.layers.push_back(ln);
    }
    return p;
  }

 private:
  const ViTModel& model_;
  ProfileOptions opts_;
  InrAccumulator inr_;
  std::size_t count_ = 0;
  std::vector<double> sum_nat_, sum_quant_, sum_ratio_, sum_cos_, act_max_;
  std::vector<std::size_t> ratio_n_;
};

inline NoiseProfile aggregate_profile(const std::vector<DualTrace>& traces, const ViTModel& model,
                                      ProfileOptions opts = {}) {
  if (traces.empty()) throw InputError("noise profile over an empty dataset");
  ProfileAccumulator acc(model, opts);
  for (const auto& t : traces) acc.add(t);
  return acc.finish();
}

inline std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

inline std::string profile_csv(const NoiseProfile& p) {
  std::ostringstream os;
  os << "layer,delta_nat,delta_quant,ratio,cosine,inr,act_max,quant_mse\n";
  for (const auto& l : p.layers) {
    os << l.layer << ',' << format_number(l.delta_nat) << ',' << format_number(l.delta_quant) << ','
       << (l.ratio ? format_number(*l.ratio) : "") << ',' << format_number(l.cosine) << ',' << format_number(l.inr)
       << ',' << format_number(l.act_max) << ',' << format_number(l.quant_mse) << '\n';
  }
  return os.str();
}

}  // namespace qexit
