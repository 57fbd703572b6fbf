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
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qexit/errors.hpp"
#include "qexit/exit_heads.hpp"
#include "qexit/noise_profiler.hpp"
#include "qexit/routing.hpp"

namespace qexit {

// Counts of (early-exit correct, full-depth correct) outcomes.
struct QuadrantReport {
  std::size_t both_correct = 0;
  std::size_t rescue = 0;  // EE right, full wrong
  std::size_t loss = 0;    // EE wrong, full right
  std::size_t both_incorrect = 0;

  std::size_t total() const noexcept { return both_correct + rescue + loss + both_incorrect; }
  long long net() const noexcept { return static_cast<long long>(rescue) - static_cast<long long>(loss); }
  std::size_t ee_correct() const noexcept { return both_correct + rescue; }
  std::size_t full_correct() const noexcept { return both_correct + loss; }

  double proportion(std::size_t count) const { return double(count) / double(total()); }
  // Fraction; multiply by 100 for percentage points.
  double rescue_margin() const { return double(net()) / double(total()); }
  double ee_accuracy() const { return proportion(ee_correct()); }
  double full_accuracy() const { return proportion(full_correct()); }

  static QuadrantReport from_counts(std::size_t both, std::size_t rescue, std::size_t loss, std::size_t neither) {
    return {both, rescue, loss, neither};
  }
};

inline QuadrantReport four_quadrant(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw InputError("four_quadrant over no records");
  QuadrantReport q;
  for (const auto& r : records) {
    if (r.ee_correct && r.full_correct) ++q.both_correct;
    else if (r.ee_correct) ++q.rescue;
    else if (r.full_correct) ++q.loss;
    else ++q.both_incorrect;
  }
  return q;
}

struct SelectivityReport {
  std::size_t total = 0;
  std::size_t exited = 0, exited_correct = 0;
  std::size_t held = 0, held_correct = 0;

  double exit_fraction() const { return double(exited) / double(total); }
  // Empty groups have no accuracy.
  std::optional<double> exited_accuracy() const {
    return exited ? std::optional<double>(double(exited_correct) / double(exited)) : std::nullopt;
  }
  std::optional<double> held_accuracy() const {
    return held ? std::optional<double>(double(held_correct) / double(held)) : std::nullopt;
  }
  double overall_accuracy() const { return double(exited_correct + held_correct) / double(total); }
};

inline SelectivityReport gate_selectivity(const std::vector<EvalRecord>& records, std::size_t num_layers) {
  if (records.empty()) throw InputError("gate_selectivity over no records");
  SelectivityReport s;
  s.total = records.size();
  for (const auto& r : records) {
    if (r.exit_layer < num_layers) {
      ++s.exited;
      s.exited_correct += r.ee_correct;
    } else {
      ++s.held;
      s.held_correct += r.ee_correct;
    }
  }
  return s;
}

// Fraction of samples per exit layer (full depth included).
inline std::map<std::size_t, double> exit_distribution(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw InputError("exit_distribution over no records");
  std::map<std::size_t, std::size_t> counts;
  for (const auto& r : records) ++counts[r.exit_layer];
  std::map<std::size_t, double> out;
  for (const auto& [l, c] : counts) out[l] = double(c) / double(records.size());
  return out;
}

// Accuracy of frontier `a` against frontier `b` at matched cost: for each
// distinct point of `b`, the best accuracy `a` reaches at the same or a higher
// flops saving. Points of `b` that `a` cannot match are skipped.
struct FrontierComparison {
  struct Point {
    double flops_saving = 0.0;
    double reference_accuracy = 0.0;
    double accuracy = 0.0;
  };
  std::vector<Point> points;

  double mean_gap() const {
    double s = 0.0;
    for (const auto& p : points) s += p.accuracy - p.reference_accuracy;
    return points.empty() ? 0.0 : s / double(points.size());
  }
  double min_gap() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& p : points) m = std::min(m, p.accuracy - p.reference_accuracy);
    return points.empty() ? 0.0 : m;
  }
};

inline FrontierComparison compare_at_matched_flops(const std::vector<ParetoPoint>& a, const std::vector<ParetoPoint>& b) {
  FrontierComparison c;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (i && b[i].flops_saving == b[i - 1].flops_saving && b[i].accuracy == b[i - 1].accuracy) continue;
    std::optional<double> best;
    for (const auto& p : a) {
      if (p.flops_saving >= b[i].flops_saving) best = std::max(best.value_or(p.accuracy), p.accuracy);
    }
    if (best) c.points.push_back({b[i].flops_saving, b[i].accuracy, *best});
  }
  return c;
}

enum class RoutingKind { full_depth, adaptive };

inline std::string to_string(RoutingKind r) { return r == RoutingKind::full_depth ? "full" : "adaptive"; }

// A configuration of the factorial study. `supervision` is empty for the
// untrained terminal path ([CLS] + projection).
struct AblationMode {
  FeatureKind head = FeatureKind::ssa;
  std::optional<Supervision> supervision;
  RoutingKind routing = RoutingKind::full_depth;

  std::string key() const {
    return to_string(head) + "/" + (supervision ? to_string(*supervision) : std::string("none")) + "/" + to_string(routing);
  }

  friend bool operator<(const AblationMode& a, const AblationMode& b) { return a.key() < b.key(); }
  friend bool operator==(const AblationMode& a, const AblationMode& b) { return a.key() == b.key(); }
};

namespace modes {
inline AblationMode baseline() { return {FeatureKind::cls, std::nullopt, RoutingKind::full_depth}; }
inline AblationMode ssa_last_hard() { return {FeatureKind::ssa, Supervision::hard, RoutingKind::full_depth}; }
inline AblationMode ssa_last_distill() { return {FeatureKind::ssa, Supervision::distill, RoutingKind::full_depth}; }
inline AblationMode adaptive_hard() { return {FeatureKind::ssa, Supervision::hard, RoutingKind::adaptive}; }
inline AblationMode adaptive_distill() { return {FeatureKind::ssa, Supervision::distill, RoutingKind::adaptive}; }
inline std::vector<AblationMode> standard() {
  return {baseline(), ssa_last_hard(), ssa_last_distill(), adaptive_hard(), adaptive_distill()};
}
}  // namespace modes

struct ModeResult {
  AblationMode mode;
  std::string label;
  std::size_t correct = 0;
  std::size_t samples = 0;
  double flops_saving = 0.0;
  std::string policy;  // thresholds used, adaptive rows only

  double accuracy() const { return samples ? double(correct) / double(samples) : 0.0; }
};

struct Contrast {
  std::string name;
  std::string minuend, subtrahend;  // mode keys
  long long correct_delta = 0;
  double delta_pp = 0.0;
};

struct FactorialTable {
  std::vector<ModeResult> rows;
  std::vector<Contrast> contrasts;

  const ModeResult& row(const AblationMode& m) const {
    for (const auto& r : rows) {
      if (r.mode == m) return r;
    }
    throw ConfigError("factorial table has no row for mode " + m.key());
  }

  // Accuracy difference a - b in correct-sample counts (exact).
  long long delta_count(const AblationMode& a, const AblationMode& b) const {
    const auto& ra = row(a);
    const auto& rb = row(b);
    if (ra.samples != rb.samples) throw ConfigError("factorial rows evaluated on different sample counts");
    return static_cast<long long>(ra.correct) - static_cast<long long>(rb.correct);
  }
};

// Assembles the requested rows and the pairwise contrasts between them.
inline FactorialTable factorial_ablation(const std::map<AblationMode, ModeResult>& results,
                                         const std::vector<AblationMode>& requested = modes::standard()) {
  FactorialTable t;
  for (const auto& m : requested) {
    auto it = results.find(m);
    if (it == results.end()) throw ConfigError("missing artifacts for ablation mode " + m.key());
    t.rows.push_back(it->second);
  }
  auto add = [&](const std::string& name, const AblationMode& a, const AblationMode& b) {
    if (!results.count(a) || !results.count(b)) return;
    bool have_a = false, have_b = false;
    for (const auto& r : t.rows) {
      have_a |= r.mode == a;
      have_b |= r.mode == b;
    }
    if (!have_a || !have_b) return;
    const long long dc = t.delta_count(a, b);
    t.contrasts.push_back({name, a.key(), b.key(), dc, 100.0 * double(dc) / double(t.row(a).samples)});
  };
  using namespace modes;
  add("architecture", ssa_last_hard(), baseline());
  add("distillation", ssa_last_distill(), ssa_last_hard());
  add("early_exit_hard", adaptive_hard(), ssa_last_hard());
  add("early_exit_distill", adaptive_distill(), ssa_last_distill());
  add("early_exit_without_teacher", adaptive_hard(), baseline());
  add("total", adaptive_distill(), baseline());
  return t;
}

inline nlohmann::json quadrant_json(const QuadrantReport& q) {
  auto cell = [&](std::size_t c) { return nlohmann::json{{"count", c}, {"proportion_pct", 100.0 * q.proportion(c)}}; };
  return {{"both_correct", cell(q.both_correct)},
          {"rescue", cell(q.rescue)},
          {"loss", cell(q.loss)},
          {"both_incorrect", cell(q.both_incorrect)},
          {"net_gain", q.net()},
          {"rescue_margin_pp", 100.0 * q.rescue_margin()},
          {"ee_accuracy_pct", 100.0 * q.ee_accuracy()},
          {"full_accuracy_pct", 100.0 * q.full_accuracy()},
          {"total", q.total()}};
}

inline nlohmann::json selectivity_json(const SelectivityReport& s) {
  auto opt = [](std::optional<double> v) { return v ? nlohmann::json(100.0 * *v) : nlohmann::json(nullptr); };
  return {{"exit_fraction_pct", 100.0 * s.exit_fraction()},
          {"exited_accuracy_pct", opt(s.exited_accuracy())},
          {"held_accuracy_pct", opt(s.held_accuracy())},
          {"overall_accuracy_pct", 100.0 * s.overall_accuracy()},
          {"exited", s.exited},
          {"held", s.held}};
}

inline nlohmann::json factorial_json(const FactorialTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"label", r.label},
                    {"head", to_string(r.mode.head)},
                    {"supervision", r.mode.supervision ? to_string(*r.mode.supervision) : "---"},
                    {"routing", to_string(r.mode.routing)},
                    {"flops_saving_pct", 100.0 * r.flops_saving},
                    {"top1_pct", 100.0 * r.accuracy()},
                    {"correct", r.correct},
                    {"samples", r.samples},
                    {"policy", r.policy}});
  }
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& c : t.contrasts) {
    cs.push_back({{"name", c.name}, {"minuend", c.minuend}, {"subtrahend", c.subtrahend},
                  {"correct_delta", c.correct_delta}, {"delta_pp", c.delta_pp}});
  }
  return {{"rows", rows}, {"contrasts", cs}};
}

inline std::string factorial_csv(const FactorialTable& t) {
  std::ostringstream os;
  os << "label,head,supervision,routing,flops_saving_pct,top1_pct\n";
  for (const auto& r : t.rows) {
    os << r.label << ',' << to_string(r.mode.head) << ',' << (r.mode.supervision ? to_string(*r.mode.supervision) : "---")
       << ',' << to_string(r.mode.routing) << ',' << format_number(100.0 * r.flops_saving) << ','
       << format_number(100.0 * r.accuracy()) << '\n';
  }
  return os.str();
}

}  // namespace qexit
