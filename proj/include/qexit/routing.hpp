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
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qexit/encoder.hpp"
#include "qexit/errors.hpp"
#include "qexit/exit_heads.hpp"
#include "qexit/gate.hpp"

namespace qexit {

enum class GateMode { learned, heuristic };

inline std::string to_string(GateMode m) { return m == GateMode::learned ? "learned" : "heuristic"; }

inline GateMode gate_mode_from_string(const std::string& s) {
  if (s == "learned") return GateMode::learned;
  if (s == "heuristic") return GateMode::heuristic;
  throw ConfigError("unknown gate mode '" + s + "'");
}

struct RoutingPolicy {
  std::vector<std::size_t> exit_set;  // ascending, 1-based block indices
  std::vector<double> thresholds;     // parallel to exit_set
  GateMode gate_mode = GateMode::learned;

  static RoutingPolicy shared(std::vector<std::size_t> exits, double tau, GateMode mode = GateMode::learned) {
    RoutingPolicy p{std::move(exits), {}, mode};
    p.thresholds.assign(p.exit_set.size(), tau);
    return p;
  }

  void validate(std::size_t num_layers) const {
    if (thresholds.size() != exit_set.size()) throw ConfigError("routing policy: one threshold per exit layer required");
    for (std::size_t i = 0; i < exit_set.size(); ++i) {
      if (exit_set[i] < 1 || exit_set[i] >= num_layers) {
        throw ConfigError("exit layer " + std::to_string(exit_set[i]) + " outside 1.." + std::to_string(num_layers - 1));
      }
      if (i && exit_set[i] <= exit_set[i - 1]) throw ConfigError("exit set must be strictly ascending");
      if (!(thresholds[i] >= 0.0 && thresholds[i] <= 1.0)) throw ConfigError("thresholds must lie in [0, 1]");
    }
  }

  std::string describe() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < exit_set.size(); ++i) os << (i ? ";" : "") << exit_set[i] << ':' << thresholds[i];
    return os.str();
  }
};

// Per-block cost plus optional head/gate overhead for every visited exit.
struct FlopsModel {
  std::vector<double> block_flops;
  double head_flops = 0.0;
  double gate_flops = 0.0;
  bool include_overhead = false;

  static FlopsModel uniform(std::size_t num_layers, std::size_t dim = 1, std::size_t embed_dim = 1) {
    FlopsModel fm;
    fm.block_flops.assign(num_layers, 1.0);
    fm.head_flops = 2.0 * double(dim) * double(dim) + 2.0 * double(dim) * double(embed_dim);
    fm.gate_flops = 8.0;
    return fm;
  }

  // Multiply-accumulate count of one ViT block, as flops (2 per MAC).
  static double block_cost(const ViTConfig& c) {
    const double n = double(c.tokens()), d = double(c.dim), h = double(c.hidden());
    const double proj = n * (3.0 * d * d + d * d + 2.0 * d * h);
    const double attn = 2.0 * n * n * d;
    return 2.0 * (proj + attn);
  }

  static FlopsModel from_config(const ViTConfig& c) {
    FlopsModel fm = uniform(c.num_layers, c.dim, c.embed_dim);
    fm.block_flops.assign(c.num_layers, block_cost(c));
    return fm;
  }

  void validate() const {
    if (block_flops.empty()) throw ConfigError("flops model has no blocks");
    for (double f : block_flops) {
      if (!(f > 0.0)) throw ConfigError("block flops must be positive");
    }
  }

  double full_depth() const {
    double s = 0.0;
    for (double f : block_flops) s += f;
    return s;
  }

  double cost(std::size_t exit_layer, std::size_t visited_exits) const {
    double s = 0.0;
    for (std::size_t b = 0; b < exit_layer && b < block_flops.size(); ++b) s += block_flops[b];
    if (include_overhead) s += double(visited_exits) * (head_flops + gate_flops);
    return s;
  }
};

inline std::size_t visited_exit_count(std::size_t exit_layer, const std::vector<std::size_t>& exit_set) {
  return static_cast<std::size_t>(std::count_if(exit_set.begin(), exit_set.end(), [&](std::size_t l) { return l <= exit_layer; }));
}

// 1 - E[cost to exit] / full-depth cost.
inline double flops_saving(const std::vector<std::size_t>& exit_layers, const FlopsModel& fm,
                           const std::vector<std::size_t>& exit_set = {}) {
  if (exit_layers.empty()) throw InputError("flops_saving over no samples");
  fm.validate();
  double total = 0.0;
  for (std::size_t l : exit_layers) total += fm.cost(l, visited_exit_count(l, exit_set));
  return 1.0 - (total / double(exit_layers.size())) / fm.full_depth();
}

struct PruneResult {
  std::vector<std::size_t> exit_set;
  std::vector<std::size_t> pruned;
  double threshold = 0.0;  // kappa * mean finite INR
};

// Drops candidates with INR(L) < kappa * mean(INR over candidates); +inf
// entries are excluded from the mean. `inr` is indexed by depth. The rule is
// reapplied to the survivors until nothing changes, so the result is a fixed
// point and pruning it again is a no-op.
inline PruneResult prune_pathological(const std::vector<double>& inr, const std::vector<std::size_t>& candidates,
                                      double kappa = 0.5) {
  for (std::size_t l : candidates) {
    if (l >= inr.size()) throw ConfigError("no INR value for candidate layer " + std::to_string(l));
    if (std::isnan(inr[l])) throw InputError("INR for layer " + std::to_string(l) + " is NaN");
  }
  PruneResult r;
  r.exit_set = candidates;
  while (true) {
    double sum = 0.0;
    std::size_t finite = 0;
    for (std::size_t l : r.exit_set) {
      if (std::isfinite(inr[l])) {
        sum += inr[l];
        ++finite;
      }
    }
    r.threshold = finite ? kappa * sum / double(finite) : -std::numeric_limits<double>::infinity();
    std::vector<std::size_t> kept;
    for (std::size_t l : r.exit_set) (inr[l] < r.threshold ? r.pruned : kept).push_back(l);
    if (kept.size() == r.exit_set.size()) break;
    r.exit_set = std::move(kept);
  }
  std::sort(r.pruned.begin(), r.pruned.end());
  if (r.exit_set.empty() && !candidates.empty()) {
    throw EmptyExitSetError("pathological layer pruning removed every exit candidate");
  }
  return r;
}

// Same rule, but an empty result falls back to full depth with a warning.
inline PruneResult prune_or_full_depth(const std::vector<double>& inr, const std::vector<std::size_t>& candidates,
                                       double kappa, std::string* warning = nullptr) {
  try {
    return prune_pathological(inr, candidates, kappa);
  } catch (const EmptyExitSetError& e) {
    if (warning) *warning = std::string(e.what()) + "; falling back to full-depth inference";
    return PruneResult{{}, candidates, 0.0};
  }
}

enum class TerminalPath { cls_projection, terminal_head };

// Everything route_sample needs besides the policy.
struct RoutingContext {
  const ViTModel* model = nullptr;
  const std::map<std::size_t, ExitHead>* heads = nullptr;
  const GateParams* gate = nullptr;
  const TextBank* bank = nullptr;
  TerminalPath terminal = TerminalPath::cls_projection;
  const ExitHead* terminal_head = nullptr;
};

struct ExitProbe {
  std::size_t layer = 0;
  std::size_t prediction = 0;
  GateFeatures features;
  double score = 0.0;  // learned gate score; 0 when no gate is available
};

struct RouteResult {
  std::size_t prediction = 0;
  std::size_t exit_layer = 0;
  std::vector<ExitProbe> visited;
  std::size_t blocks_executed = 0;
};

inline bool exit_fires(const ExitProbe& probe, GateMode mode, double tau) {
  return mode == GateMode::learned ? probe.score > tau : heuristic_gate(probe.features, tau);
}

inline ExitProbe probe_exit(const Tensor& z, std::size_t layer, const RoutingContext& ctx) {
  auto it = ctx.heads->find(layer);
  if (it == ctx.heads->end()) throw ConfigError("no exit head for layer " + std::to_string(layer));
  const Tensor probs = head_forward(exit_feature(z, it->second.feature), it->second, *ctx.bank);
  ExitProbe p;
  p.layer = layer;
  p.prediction = argmax(probs.values());
  p.features = extract_features(probs, z);
  if (ctx.gate && ctx.gate->layers.count(layer)) p.score = gate_score(p.features, *ctx.gate, layer);
  return p;
}

inline std::size_t full_depth_prediction(const Tensor& z, const RoutingContext& ctx) {
  if (ctx.terminal == TerminalPath::terminal_head) {
    if (!ctx.terminal_head) throw ConfigError("terminal head path selected but no terminal head given");
    return argmax(head_forward(exit_feature(z, ctx.terminal_head->feature), *ctx.terminal_head, *ctx.bank).values());
  }
  return argmax(bank_probabilities(terminal_embedding(z, *ctx.model), *ctx.bank).values());
}

// INT8 path, block by block; exits at the first layer whose gate clears its
// threshold. Blocks past the exit are never run.
inline RouteResult route_sample(const Tensor& tokens, const RoutingContext& ctx, const RoutingPolicy& policy) {
  const ViTModel& model = *ctx.model;
  policy.validate(model.config.num_layers);
  if (policy.gate_mode == GateMode::learned && !ctx.gate) throw ConfigError("learned gate mode needs gate parameters");
  check_tokens(tokens, model.config);
  for (std::size_t l : policy.exit_set) {
    if (!ctx.heads || !ctx.heads->count(l)) throw ConfigError("no exit head for layer " + std::to_string(l));
    if (policy.gate_mode == GateMode::learned) (void)ctx.gate->at(l);
  }

  RouteResult r;
  Tensor z = tokens;
  std::size_t next = 0;
  for (std::size_t b = 0; b < model.config.num_layers; ++b) {
    z = forward_block(z, model.blocks[b], Path::int8, model.config.num_heads);
    ++r.blocks_executed;
    const std::size_t layer = b + 1;
    if (next < policy.exit_set.size() && policy.exit_set[next] == layer) {
      r.visited.push_back(probe_exit(z, layer, ctx));
      if (exit_fires(r.visited.back(), policy.gate_mode, policy.thresholds[next])) {
        r.prediction = r.visited.back().prediction;
        r.exit_layer = layer;
        return r;
      }
      ++next;
    }
  }
  r.prediction = full_depth_prediction(z, ctx);
  r.exit_layer = model.config.num_layers;
  return r;
}

// Per-sample outcome at every candidate exit plus the full-depth answer; lets
// threshold sweeps re-route without re-running the backbone.
struct SampleOutcome {
  std::size_t sample_id = 0;
  int label = 0;
  std::vector<ExitProbe> probes;  // ascending layer order
  std::size_t full_prediction = 0;       // answer for samples that run to full depth
  std::size_t reference_prediction = 0;  // full-depth reference for C_full
};

struct EvalRecord {
  std::size_t sample_id = 0;
  std::size_t exit_layer = 0;
  std::size_t prediction = 0;
  bool ee_correct = false;
  bool full_correct = false;
  std::vector<double> gate_scores;  // one per visited exit
};

inline EvalRecord route_outcome(const SampleOutcome& s, const RoutingPolicy& policy, std::size_t num_layers) {
  EvalRecord r;
  r.sample_id = s.sample_id;
  r.full_correct = static_cast<int>(s.reference_prediction) == s.label;
  std::size_t pi = 0;
  for (std::size_t i = 0; i < policy.exit_set.size(); ++i) {
    while (pi < s.probes.size() && s.probes[pi].layer < policy.exit_set[i]) ++pi;
    if (pi == s.probes.size() || s.probes[pi].layer != policy.exit_set[i]) {
      throw ConfigError("sample outcome lacks a probe for exit layer " + std::to_string(policy.exit_set[i]));
    }
    const ExitProbe& p = s.probes[pi];
    r.gate_scores.push_back(policy.gate_mode == GateMode::learned ? p.score : p.features.confidence);
    if (exit_fires(p, policy.gate_mode, policy.thresholds[i])) {
      r.exit_layer = p.layer;
      r.prediction = p.prediction;
      r.ee_correct = static_cast<int>(p.prediction) == s.label;
      return r;
    }
  }
  r.exit_layer = num_layers;
  r.prediction = s.full_prediction;
  r.ee_correct = static_cast<int>(s.full_prediction) == s.label;
  return r;
}

inline std::vector<EvalRecord> evaluate_policy(const std::vector<SampleOutcome>& outcomes, const RoutingPolicy& policy,
                                               std::size_t num_layers) {
  policy.validate(num_layers);
  std::vector<EvalRecord> out;
  out.reserve(outcomes.size());
  for (const auto& s : outcomes) out.push_back(route_outcome(s, policy, num_layers));
  return out;
}

inline double accuracy_of(const std::vector<EvalRecord>& records) {
  if (records.empty()) return 0.0;
  std::size_t c = 0;
  for (const auto& r : records) c += r.ee_correct;
  return double(c) / double(records.size());
}

inline std::vector<std::size_t> exit_layers_of(const std::vector<EvalRecord>& records) {
  std::vector<std::size_t> v;
  v.reserve(records.size());
  for (const auto& r : records) v.push_back(r.exit_layer);
  return v;
}

// 25 points, 0.20 to 0.92 in steps of 0.03.
inline std::vector<double> threshold_grid(std::size_t points = 25, int first_percent = 20, int step_percent = 3) {
  std::vector<double> g;
  for (std::size_t i = 0; i < points; ++i) g.push_back(double(first_percent + step_percent * int(i)) / 100.0);
  return g;
}

enum class SweepMode { shared, per_layer };

struct SweepRow {
  std::vector<double> thresholds;
  double accuracy = 0.0;
  double flops_saving = 0.0;
  std::size_t correct = 0;
  std::size_t samples = 0;
  std::map<std::size_t, double> exit_fractions;  // by exit layer, including L_max
};

inline SweepRow evaluate_row(const std::vector<SampleOutcome>& outcomes, const RoutingPolicy& policy,
                             const FlopsModel& fm, std::size_t num_layers) {
  const auto recs = evaluate_policy(outcomes, policy, num_layers);
  SweepRow row;
  row.thresholds = policy.thresholds;
  row.samples = recs.size();
  for (std::size_t l : policy.exit_set) row.exit_fractions[l] = 0.0;
  row.exit_fractions[num_layers] = 0.0;
  for (const auto& r : recs) {
    row.correct += r.ee_correct;
    row.exit_fractions[r.exit_layer] += 1.0;
  }
  for (auto& [l, f] : row.exit_fractions) f /= double(recs.size());
  row.accuracy = double(row.correct) / double(recs.size());
  row.flops_saving = flops_saving(exit_layers_of(recs), fm, policy.exit_set);
  return row;
}

// Shared mode: one tau for every exit. Per-layer mode: the full Cartesian
// product of the grid over exit layers, last layer varying fastest.
inline std::vector<SweepRow> sweep_thresholds(const std::vector<SampleOutcome>& outcomes, const RoutingPolicy& templ,
                                              const std::vector<double>& grid, SweepMode mode, const FlopsModel& fm,
                                              std::size_t num_layers) {
  std::vector<SweepRow> rows;
  RoutingPolicy p = templ;
  if (mode == SweepMode::shared || p.exit_set.empty()) {
    for (double tau : grid) {
      p.thresholds.assign(p.exit_set.size(), tau);
      rows.push_back(evaluate_row(outcomes, p, fm, num_layers));
    }
    return rows;
  }
  const std::size_t k = p.exit_set.size();
  const double combos = std::pow(double(grid.size()), double(k));
  if (combos > 2e6) throw ConfigError("per-layer sweep too large: " + std::to_string(combos) + " assignments");
  std::vector<std::size_t> idx(k, 0);
  p.thresholds.assign(k, grid.front());
  while (true) {
    for (std::size_t i = 0; i < k; ++i) p.thresholds[i] = grid[idx[i]];
    rows.push_back(evaluate_row(outcomes, p, fm, num_layers));
    std::size_t pos = k;
    while (pos > 0) {
      --pos;
      if (++idx[pos] < grid.size()) break;
      idx[pos] = 0;
      if (pos == 0) return rows;
    }
  }
}

struct ThresholdObjective {
  double min_flops_saving = 0.0;  // budget; rows below it are infeasible
};

inline bool better_row(const SweepRow& a, const SweepRow& b, const ThresholdObjective& obj) {
  const bool fa = a.flops_saving >= obj.min_flops_saving, fb = b.flops_saving >= obj.min_flops_saving;
  if (fa != fb) return fa;
  if (a.correct != b.correct) return a.correct > b.correct;
  return a.flops_saving > b.flops_saving;
}

// Best shared tau first, then each layer's tau over the grid with the others
// held fixed; coordinate passes repeat until nothing improves.
inline RoutingPolicy optimize_thresholds(const std::vector<SampleOutcome>& outcomes, const RoutingPolicy& templ,
                                         const std::vector<double>& grid, const FlopsModel& fm, std::size_t num_layers,
                                         const ThresholdObjective& obj = {}, std::size_t max_passes = 5) {
  RoutingPolicy best = templ;
  if (best.exit_set.empty()) return best;
  auto shared = sweep_thresholds(outcomes, templ, grid, SweepMode::shared, fm, num_layers);
  std::size_t bi = 0;
  for (std::size_t i = 1; i < shared.size(); ++i) {
    if (better_row(shared[i], shared[bi], obj)) bi = i;
  }
  best.thresholds = shared[bi].thresholds;
  SweepRow best_row = shared[bi];
  for (std::size_t pass = 0; pass < max_passes; ++pass) {
    bool improved = false;
    for (std::size_t li = 0; li < best.exit_set.size(); ++li) {
      for (double tau : grid) {
        RoutingPolicy cand = best;
        cand.thresholds[li] = tau;
        SweepRow row = evaluate_row(outcomes, cand, fm, num_layers);
        if (better_row(row, best_row, obj)) {
          best = cand;
          best_row = row;
          improved = true;
        }
      }
    }
    if (!improved) break;
  }
  return best;
}

struct ParetoPoint {
  double flops_saving = 0.0;
  double accuracy = 0.0;
  std::size_t index = 0;  // caller's identifier
};

inline bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
  return a.flops_saving >= b.flops_saving && a.accuracy >= b.accuracy &&
         (a.flops_saving > b.flops_saving || a.accuracy > b.accuracy);
}

// Non-dominated subset sorted by flops saving; exact duplicates are all kept.
inline std::vector<ParetoPoint> pareto_frontier(const std::vector<ParetoPoint>& points) {
  std::vector<ParetoPoint> sorted = points;
  std::stable_sort(sorted.begin(), sorted.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
    if (a.flops_saving != b.flops_saving) return a.flops_saving > b.flops_saving;
    return a.accuracy > b.accuracy;
  });
  std::vector<ParetoPoint> front;
  double best_acc = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& p = sorted[i];
    const bool tie_with_kept = !front.empty() && front.back().flops_saving == p.flops_saving &&
                               front.back().accuracy == p.accuracy;
    if (p.accuracy > best_acc || tie_with_kept) {
      front.push_back(p);
      best_acc = std::max(best_acc, p.accuracy);
    }
  }
  std::reverse(front.begin(), front.end());
  return front;
}

}  // namespace qexit
