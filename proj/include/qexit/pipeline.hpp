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

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qexit/analysis.hpp"
#include "qexit/encoder.hpp"
#include "qexit/exit_heads.hpp"
#include "qexit/gate.hpp"
#include "qexit/noise_profiler.hpp"
#include "qexit/parallel.hpp"
#include "qexit/routing.hpp"
#include "qexit/synthetic.hpp"

namespace qexit {

// Everything the routing experiments need from one pass over a split:
// per-layer exit features of the INT8 path and the terminal answers.
struct SplitCache {
  std::vector<int> labels;
  std::vector<std::vector<Tensor>> ssa;   // [sample][depth 0..L]
  std::vector<std::vector<Tensor>> cls;   // layer-normed [CLS]
  std::vector<std::vector<double>> sav;   // [sample][depth]
  std::vector<Tensor> teacher;            // FP32 terminal embedding
  std::vector<std::size_t> int8_terminal; // INT8 [CLS] + projection zero-shot
  std::vector<std::size_t> fp32_terminal;

  std::size_t size() const noexcept { return labels.size(); }

  const Tensor& feature(std::size_t sample, std::size_t layer, FeatureKind k) const {
    return k == FeatureKind::ssa ? ssa[sample][layer] : cls[sample][layer];
  }
};

inline SplitCache build_cache(const ViTModel& model, const LabeledSplit& split, const TextBank& bank,
                              ProfileAccumulator* profile = nullptr, unsigned threads = 0) {
  const std::size_t n = split.size();
  SplitCache c;
  c.labels = split.labels;
  c.ssa.resize(n);
  c.cls.resize(n);
  c.sav.resize(n);
  c.teacher.resize(n);
  c.int8_terminal.resize(n);
  c.fp32_terminal.resize(n);
  std::vector<DualTrace> traces(profile ? n : 0);
  parallel_for(n, [&](std::size_t i) {
    DualTrace t = run_dual_path(split.tokens[i], model);
    for (const Tensor& z : t.int8) {
      c.ssa[i].push_back(ssa_aggregate(z));
      c.cls[i].push_back(cls_feature(z, true));
      c.sav[i].push_back(spatial_activation_variance(z));
    }
    c.teacher[i] = terminal_embedding(t.fp32.back(), model);
    c.fp32_terminal[i] = argmax(bank_probabilities(c.teacher[i], bank).values());
    c.int8_terminal[i] = argmax(bank_probabilities(terminal_embedding(t.int8.back(), model), bank).values());
    if (profile) traces[i] = std::move(t);
  }, threads);
  if (profile) {
    for (const auto& t : traces) profile->add(t);
  }
  return c;
}

inline std::map<std::size_t, std::vector<Tensor>> layer_features(const SplitCache& c, const std::vector<std::size_t>& layers,
                                                                  FeatureKind kind) {
  std::map<std::size_t, std::vector<Tensor>> out;
  for (std::size_t l : layers) {
    auto& v = out[l];
    for (std::size_t i = 0; i < c.size(); ++i) v.push_back(c.feature(i, l, kind));
  }
  return out;
}

// How full-depth samples are answered.
struct TerminalChoice {
  TerminalPath path = TerminalPath::cls_projection;
  const ExitHead* head = nullptr;
};

inline std::size_t terminal_prediction(const SplitCache& c, std::size_t i, const TerminalChoice& t, const TextBank& bank) {
  if (t.path == TerminalPath::cls_projection) return c.int8_terminal[i];
  if (!t.head) throw ConfigError("terminal head path selected without a head");
  return argmax(head_forward(c.feature(i, t.head->layer, t.head->feature), *t.head, bank).values());
}

inline std::vector<SampleOutcome> build_outcomes(const SplitCache& c, const std::map<std::size_t, ExitHead>& heads,
                                                 const std::vector<std::size_t>& layers, const GateParams* gate,
                                                 const TextBank& bank, const TerminalChoice& held,
                                                 const TerminalChoice& reference) {
  std::vector<SampleOutcome> out(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    SampleOutcome& s = out[i];
    s.sample_id = i;
    s.label = c.labels[i];
    for (std::size_t l : layers) {
      auto it = heads.find(l);
      if (it == heads.end()) throw ConfigError("no exit head for layer " + std::to_string(l));
      const Tensor probs = head_forward(c.feature(i, l, it->second.feature), it->second, bank);
      ExitProbe p;
      p.layer = l;
      p.prediction = argmax(probs.values());
      p.features = confidence_margin(probs);
      p.features.sav = c.sav[i][l];
      if (gate && gate->layers.count(l)) p.score = gate_score(p.features, *gate, l);
      s.probes.push_back(p);
    }
    s.full_prediction = terminal_prediction(c, i, held, bank);
    s.reference_prediction = terminal_prediction(c, i, reference, bank);
  }
  return out;
}

inline std::map<std::size_t, std::vector<GateSample>> gate_samples(const std::vector<SampleOutcome>& outcomes) {
  std::map<std::size_t, std::vector<GateSample>> by_layer;
  for (const auto& s : outcomes) {
    for (const auto& p : s.probes) by_layer[p.layer].push_back({p.features, static_cast<int>(p.prediction) == s.label});
  }
  return by_layer;
}

struct PipelineConfig {
  std::vector<std::size_t> exit_candidates;  // empty: 1..L_max-1
  double kappa = 0.5;
  bool prune = true;
  HeadTrainConfig heads{Supervision::hard, 0.5, 2e-3, 30, 64, 0};
  GateTrainConfig gate;
  GateMode gate_mode = GateMode::learned;
  Supervision supervision = Supervision::distill;
  std::vector<double> grid = threshold_grid();
  ThresholdObjective objective;
  bool include_overhead = false;
  // Full-depth reference used for C_full in the rescue analysis.
  TerminalPath reference = TerminalPath::cls_projection;
  ProfileOptions profile;
  std::uint64_t seed = 0;
  unsigned threads = 0;
};

struct AdaptiveRun {
  RoutingPolicy policy;
  GateParams gate;
  std::vector<SampleOutcome> eval_outcomes;
  std::vector<EvalRecord> records;
  double accuracy = 0.0;
  double flops_saving = 0.0;
};

// Trains and evaluates the early-exit stack on one model and dataset.
// Heads and gates are trained on demand and memoized per configuration.
class Experiment {
 public:
  Experiment(const ViTModel& model, const Dataset& data, PipelineConfig cfg)
      : model_(model), data_(data), cfg_(std::move(cfg)) {
    model_.validate();
    data_.bank.validate();
    if (cfg_.exit_candidates.empty()) {
      for (std::size_t l = 1; l < model_.config.num_layers; ++l) cfg_.exit_candidates.push_back(l);
    }
    cfg_.heads.seed = cfg_.seed;
    cfg_.gate.seed = cfg_.seed + 1;
  }

  const PipelineConfig& config() const noexcept { return cfg_; }
  const ViTModel& model() const noexcept { return model_; }
  const Dataset& data() const noexcept { return data_; }
  std::size_t num_layers() const noexcept { return model_.config.num_layers; }

  // Dual-path pass over every split; the gating split feeds the noise profile.
  void prepare() {
    if (prepared_) return;
    ProfileAccumulator acc(model_, cfg_.profile);
    train_ = build_cache(model_, data_.train, data_.bank, nullptr, cfg_.threads);
    gate_ = build_cache(model_, data_.gate, data_.bank, &acc, cfg_.threads);
    eval_ = build_cache(model_, data_.eval, data_.bank, nullptr, cfg_.threads);
    profile_ = acc.finish();
    std::vector<double> inr(num_layers() + 1, kInfiniteInr);
    for (const auto& l : profile_.layers) inr[l.layer] = l.inr;
    prune_ = cfg_.prune ? prune_or_full_depth(inr, cfg_.exit_candidates, cfg_.kappa, &prune_warning_)
                        : PruneResult{cfg_.exit_candidates, {}, 0.0};
    prepared_ = true;
  }

  const NoiseProfile& profile() { prepare(); return profile_; }
  const PruneResult& pruning() { prepare(); return prune_; }
  const std::string& prune_warning() const noexcept { return prune_warning_; }
  const std::vector<std::size_t>& exit_set() { prepare(); return prune_.exit_set; }
  const SplitCache& train_cache() { prepare(); return train_; }
  const SplitCache& gate_cache() { prepare(); return gate_; }
  const SplitCache& eval_cache() { prepare(); return eval_; }

  FlopsModel flops_model() const {
    FlopsModel fm = FlopsModel::uniform(num_layers(), model_.config.dim, model_.config.embed_dim);
    fm.include_overhead = cfg_.include_overhead;
    return fm;
  }

  // Heads for every candidate layer and the last layer.
  const std::map<std::size_t, ExitHead>& heads(FeatureKind kind, Supervision sup) {
    prepare();
    auto key = std::make_pair(kind, sup);
    auto it = heads_.find(key);
    if (it != heads_.end()) return it->second;
    std::vector<std::size_t> layers = cfg_.exit_candidates;
    layers.push_back(num_layers());
    HeadTrainConfig hc = cfg_.heads;
    hc.supervision = sup;
    const auto feats = layer_features(train_, layers, kind);
    return heads_[key] = train_heads(feats, train_.labels, data_.bank, hc, kind,
                                     sup == Supervision::distill ? &train_.teacher : nullptr);
  }

  void set_heads(FeatureKind kind, Supervision sup, std::map<std::size_t, ExitHead> h) {
    heads_[std::make_pair(kind, sup)] = std::move(h);
  }

  const ExitHead& terminal_head(FeatureKind kind, Supervision sup) {
    const auto& h = heads(kind, sup);
    auto it = h.find(num_layers());
    if (it == h.end()) throw ConfigError("no terminal head for layer " + std::to_string(num_layers()));
    return it->second;
  }

  // Gate trained on the gating split.
  const GateParams& gate(FeatureKind kind, Supervision sup) {
    auto key = std::make_pair(kind, sup);
    auto it = gates_.find(key);
    if (it != gates_.end()) return it->second;
    const auto outcomes = build_outcomes(gate_, heads(kind, sup), cfg_.exit_candidates, nullptr, data_.bank,
                                         held_choice(kind, sup), reference_choice(kind, sup));
    return gates_[key] = train_gate(gate_samples(outcomes), cfg_.gate);
  }

  void set_gate(FeatureKind kind, Supervision sup, GateParams g) { gates_[std::make_pair(kind, sup)] = std::move(g); }

  TerminalChoice held_choice(FeatureKind kind, Supervision sup) { return {TerminalPath::terminal_head, &terminal_head(kind, sup)}; }

  TerminalChoice reference_choice(FeatureKind kind, Supervision sup) {
    if (cfg_.reference == TerminalPath::cls_projection) return {};
    return held_choice(kind, sup);
  }

  std::vector<SampleOutcome> outcomes(const SplitCache& split, FeatureKind kind, Supervision sup, bool with_gate = true) {
    return build_outcomes(split, heads(kind, sup), cfg_.exit_candidates, with_gate ? &gate(kind, sup) : nullptr,
                          data_.bank, held_choice(kind, sup), reference_choice(kind, sup));
  }

  // Thresholds chosen on the gating split, then applied to the eval split.
  AdaptiveRun adaptive(FeatureKind kind, Supervision sup, GateMode mode,
                       std::optional<std::vector<double>> fixed_thresholds = std::nullopt) {
    prepare();
    AdaptiveRun run;
    run.gate = gate(kind, sup);
    RoutingPolicy templ = RoutingPolicy::shared(exit_set(), 1.0, mode);
    if (fixed_thresholds) {
      templ.thresholds = *fixed_thresholds;
      run.policy = templ;
    } else {
      run.policy = optimize_thresholds(outcomes(gate_, kind, sup), templ, cfg_.grid, flops_model(), num_layers(),
                                       cfg_.objective);
    }
    run.eval_outcomes = outcomes(eval_, kind, sup);
    run.records = evaluate_policy(run.eval_outcomes, run.policy, num_layers());
    run.accuracy = accuracy_of(run.records);
    run.flops_saving = flops_saving(exit_layers_of(run.records), flops_model(), run.policy.exit_set);
    return run;
  }

  // Full-depth accuracy on the eval split.
  ModeResult full_depth(const AblationMode& m) {
    prepare();
    ModeResult r;
    r.mode = m;
    r.samples = eval_.size();
    TerminalChoice t;
    if (m.supervision) t = held_choice(m.head, *m.supervision);
    for (std::size_t i = 0; i < eval_.size(); ++i) {
      r.correct += static_cast<int>(terminal_prediction(eval_, i, t, data_.bank)) == eval_.labels[i];
    }
    return r;
  }

  ModeResult run_mode(const AblationMode& m) {
    if (m.routing == RoutingKind::full_depth) return full_depth(m);
    if (!m.supervision) throw ConfigError("adaptive routing needs trained heads");
    const AdaptiveRun run = adaptive(m.head, *m.supervision, cfg_.gate_mode);
    ModeResult r;
    r.mode = m;
    r.samples = run.records.size();
    for (const auto& rec : run.records) r.correct += rec.ee_correct;
    r.flops_saving = run.flops_saving;
    r.policy = run.policy.describe();
    return r;
  }

  FactorialTable factorial(const std::vector<AblationMode>& requested = modes::standard()) {
    static const char* labels[] = {"(i) INT8 baseline", "(ii) SSA-Last (hard)", "(iii) SSA-Last (distilled)",
                                   "(iv) adaptive (hard)", "(v) adaptive (distilled)"};
    const auto standard = modes::standard();
    std::map<AblationMode, ModeResult> results;
    for (const auto& m : requested) {
      ModeResult r = run_mode(m);
      r.label = m.key();
      for (std::size_t i = 0; i < standard.size(); ++i) {
        if (standard[i] == m) r.label = labels[i];
      }
      results[m] = r;
    }
    return factorial_ablation(results, requested);
  }

  // Eval-split Pareto frontier of shared-threshold routing over `grid`.
  std::vector<ParetoPoint> frontier(FeatureKind kind, Supervision sup, GateMode mode, const std::vector<double>& grid) {
    std::vector<ParetoPoint> pts;
    const auto rows = sweep_thresholds(outcomes(eval_cache(), kind, sup), RoutingPolicy::shared(exit_set(), 1.0, mode), grid,
                                       SweepMode::shared, flops_model(), num_layers());
    for (const auto& r : rows) pts.push_back({r.flops_saving, r.accuracy, pts.size()});
    return pareto_frontier(pts);
  }

  // Standalone accuracy of each candidate head on the eval split.
  std::map<std::size_t, double> standalone_accuracy(FeatureKind kind, Supervision sup) {
    std::map<std::size_t, double> acc;
    for (const auto& [layer, head] : heads(kind, sup)) {
      std::size_t correct = 0;
      for (std::size_t i = 0; i < eval_.size(); ++i) {
        correct += static_cast<int>(argmax(head_forward(eval_.feature(i, layer, kind), head, data_.bank).values())) ==
                   eval_.labels[i];
      }
      acc[layer] = double(correct) / double(eval_.size());
    }
    return acc;
  }

 private:
  const ViTModel& model_;
  const Dataset& data_;
  PipelineConfig cfg_;
  bool prepared_ = false;
  SplitCache train_, gate_, eval_;
  NoiseProfile profile_;
  PruneResult prune_;
  std::string prune_warning_;
  std::map<std::pair<FeatureKind, Supervision>, std::map<std::size_t, ExitHead>> heads_;
  std::map<std::pair<FeatureKind, Supervision>, GateParams> gates_;
};

}  // namespace qexit
