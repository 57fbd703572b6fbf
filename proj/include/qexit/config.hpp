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
#include <cstdio>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qexit/errors.hpp"
#include "qexit/pipeline.hpp"
#include "qexit/synthetic.hpp"

namespace qexit {

struct GridSpec {
  std::size_t points = 25;
  int first_percent = 20;
  int step_percent = 3;

  std::vector<double> values() const { return threshold_grid(points, first_percent, step_percent); }
};

// Everything a command needs; serialized back out in canonical form so the
// hash identifies a run.
struct RunConfig {
  SyntheticSpec synthetic;
  std::string model_path;    // empty: generate from `synthetic`
  std::string dataset_path;  // empty: generate from `synthetic`
  std::optional<QuantScheme> quant;  // re-quantize a loaded model
  std::vector<std::size_t> exit_candidates;
  double kappa = 0.5;
  bool prune = true;
  GridSpec grid;
  GateMode gate_mode = GateMode::learned;
  Supervision supervision = Supervision::distill;
  FeatureKind feature = FeatureKind::ssa;
  TerminalPath reference = TerminalPath::cls_projection;
  SweepMode sweep = SweepMode::shared;
  std::optional<std::vector<double>> thresholds;  // skip optimization
  double min_flops_saving = 0.0;
  bool include_overhead = false;
  HeadTrainConfig heads{Supervision::hard, 0.5, 2e-3, 30, 64, 0};
  GateTrainConfig gate;
  std::uint64_t seed = 0;
  std::string out = "out";

  void validate() const {
    if (model_path.empty() != dataset_path.empty() && !model_path.empty()) {
      throw ConfigError("a model file needs a dataset file");
    }
    for (const auto* p : {&model_path, &dataset_path}) {
      if (!p->empty() && !std::filesystem::exists(*p)) throw ConfigError("referenced file does not exist: " + *p);
    }
    if (model_path.empty()) synthetic.validate();
    if (!(kappa >= 0.0)) throw ConfigError("kappa must be non-negative");
    if (grid.points == 0) throw ConfigError("threshold grid needs at least one point");
    if (heads.epochs == 0 || heads.batch_size == 0 || !(heads.lr > 0.0)) throw ConfigError("bad head training settings");
    if (heads.distill_weight < 0.0 || heads.distill_weight > 1.0) throw ConfigError("distill_weight must be in [0, 1]");
    if (gate.epochs == 0 || !(gate.lr > 0.0) || !(gate.clip > 0.0)) throw ConfigError("bad gate training settings");
  }

  PipelineConfig pipeline() const {
    PipelineConfig p;
    p.exit_candidates = exit_candidates;
    p.kappa = kappa;
    p.prune = prune;
    p.heads = heads;
    p.gate = gate;
    p.gate_mode = gate_mode;
    p.supervision = supervision;
    p.grid = grid.values();
    p.objective.min_flops_saving = min_flops_saving;
    p.include_overhead = include_overhead;
    p.reference = reference;
    p.seed = seed;
    return p;
  }
};

inline std::string to_string(TerminalPath t) { return t == TerminalPath::cls_projection ? "cls-projection" : "terminal-head"; }

inline TerminalPath terminal_path_from_string(const std::string& s) {
  if (s == "cls-projection") return TerminalPath::cls_projection;
  if (s == "terminal-head") return TerminalPath::terminal_head;
  throw ConfigError("unknown terminal path '" + s + "'");
}

inline std::string to_string(SweepMode m) { return m == SweepMode::shared ? "shared" : "per-layer"; }

inline SweepMode sweep_mode_from_string(const std::string& s) {
  if (s == "shared") return SweepMode::shared;
  if (s == "per-layer") return SweepMode::per_layer;
  throw ConfigError("unknown sweep mode '" + s + "'");
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json synthetic_json(const SyntheticSpec& s) {
  return {{"num_layers", s.vit.num_layers},
          {"dim", s.vit.dim},
          {"num_patches", s.vit.num_patches},
          {"num_heads", s.vit.num_heads},
          {"mlp_ratio", s.vit.mlp_ratio},
          {"embed_dim", s.vit.embed_dim},
          {"quant_scheme", to_string(s.quant)},
          {"schedule", to_string(s.schedule)},
          {"outlier_base", s.outlier_base},
          {"outlier_peak", s.outlier_peak},
          {"outlier_power", s.outlier_power},
          {"spike_layer", s.spike_layer},
          {"spike_outlier", s.spike_outlier},
          {"num_classes", s.num_classes},
          {"train_samples", s.train_samples},
          {"gate_samples", s.gate_samples},
          {"eval_samples", s.eval_samples},
          {"signal", s.signal},
          {"patch_noise_min", s.patch_noise_min},
          {"patch_noise_max", s.patch_noise_max},
          {"confuser_max", s.confuser_max},
          {"cls_norm", s.cls_norm},
          {"qk_std", s.qk_std},
          {"value_gain", s.value_gain},
          {"mlp_gain", s.mlp_gain},
          {"logit_scale", s.logit_scale}};
}

inline SyntheticSpec synthetic_from_json(const nlohmann::json& j, std::uint64_t seed) {
  SyntheticSpec s;
  const nlohmann::json defaults = synthetic_json(s);
  std::set<std::string> known;
  for (const auto& [k, v] : defaults.items()) known.insert(k);
  detail::reject_unknown(j, known, "synthetic");
  detail::read(j, "num_layers", s.vit.num_layers);
  detail::read(j, "dim", s.vit.dim);
  detail::read(j, "num_patches", s.vit.num_patches);
  detail::read(j, "num_heads", s.vit.num_heads);
  detail::read(j, "mlp_ratio", s.vit.mlp_ratio);
  detail::read(j, "embed_dim", s.vit.embed_dim);
  if (j.contains("quant_scheme")) s.quant = quant_scheme_from_string(j.at("quant_scheme").get<std::string>());
  if (j.contains("schedule")) s.schedule = noise_schedule_from_string(j.at("schedule").get<std::string>());
  detail::read(j, "outlier_base", s.outlier_base);
  detail::read(j, "outlier_peak", s.outlier_peak);
  detail::read(j, "outlier_power", s.outlier_power);
  detail::read(j, "spike_layer", s.spike_layer);
  detail::read(j, "spike_outlier", s.spike_outlier);
  detail::read(j, "num_classes", s.num_classes);
  detail::read(j, "train_samples", s.train_samples);
  detail::read(j, "gate_samples", s.gate_samples);
  detail::read(j, "eval_samples", s.eval_samples);
  detail::read(j, "signal", s.signal);
  detail::read(j, "patch_noise_min", s.patch_noise_min);
  detail::read(j, "patch_noise_max", s.patch_noise_max);
  detail::read(j, "confuser_max", s.confuser_max);
  detail::read(j, "cls_norm", s.cls_norm);
  detail::read(j, "qk_std", s.qk_std);
  detail::read(j, "value_gain", s.value_gain);
  detail::read(j, "mlp_gain", s.mlp_gain);
  detail::read(j, "logit_scale", s.logit_scale);
  s.seed = seed;
  return s;
}

// Canonical form: every field present, keys sorted by the JSON library.
inline nlohmann::json config_json(const RunConfig& c) {
  nlohmann::json j;
  if (c.model_path.empty()) {
    j["model"] = {{"synthetic", synthetic_json(c.synthetic)}};
  } else {
    j["model"] = {{"path", c.model_path}};
  }
  if (!c.dataset_path.empty()) j["dataset"] = {{"path", c.dataset_path}};
  if (c.quant) j["quant_scheme"] = to_string(*c.quant);
  j["exit_candidates"] = c.exit_candidates;
  j["kappa"] = c.kappa;
  j["prune"] = c.prune;
  j["grid"] = {{"points", c.grid.points}, {"first_percent", c.grid.first_percent}, {"step_percent", c.grid.step_percent}};
  j["gate_mode"] = to_string(c.gate_mode);
  j["supervision"] = to_string(c.supervision);
  j["feature"] = to_string(c.feature);
  j["reference"] = to_string(c.reference);
  j["sweep"] = to_string(c.sweep);
  if (c.thresholds) j["thresholds"] = *c.thresholds;
  j["min_flops_saving"] = c.min_flops_saving;
  j["include_overhead"] = c.include_overhead;
  j["heads"] = {{"lr", c.heads.lr},
                {"epochs", c.heads.epochs},
                {"batch_size", c.heads.batch_size},
                {"distill_weight", c.heads.distill_weight}};
  j["gate"] = {{"lr", c.gate.lr},
               {"epochs", c.gate.epochs},
               {"clip", c.gate.clip},
               {"standardize_sav", c.gate.standardize_sav},
               {"optimizer", c.gate.optimizer == GateOptimizer::adam ? "adam" : "gradient-descent"}};
  j["seed"] = c.seed;
  j["out"] = c.out;
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"model", "dataset", "quant_scheme", "exit_candidates", "kappa", "prune", "grid", "gate_mode",
                          "supervision", "feature", "reference", "sweep", "thresholds", "min_flops_saving",
                          "include_overhead", "heads", "gate", "seed", "out"},
                         "config");
  RunConfig c;
  detail::read(j, "seed", c.seed);
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m, {"synthetic", "path"}, "model");
    if (m.contains("path")) c.model_path = m.at("path").get<std::string>();
    if (m.contains("synthetic")) c.synthetic = synthetic_from_json(m.at("synthetic"), c.seed);
  }
  if (j.contains("dataset")) {
    detail::reject_unknown(j.at("dataset"), {"path"}, "dataset");
    detail::read(j.at("dataset"), "path", c.dataset_path);
  }
  if (j.contains("quant_scheme")) c.quant = quant_scheme_from_string(j.at("quant_scheme").get<std::string>());
  detail::read(j, "exit_candidates", c.exit_candidates);
  detail::read(j, "kappa", c.kappa);
  detail::read(j, "prune", c.prune);
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    detail::reject_unknown(g, {"points", "first_percent", "step_percent"}, "grid");
    detail::read(g, "points", c.grid.points);
    detail::read(g, "first_percent", c.grid.first_percent);
    detail::read(g, "step_percent", c.grid.step_percent);
  }
  if (j.contains("gate_mode")) c.gate_mode = gate_mode_from_string(j.at("gate_mode").get<std::string>());
  if (j.contains("supervision")) c.supervision = supervision_from_string(j.at("supervision").get<std::string>());
  if (j.contains("feature")) c.feature = feature_kind_from_string(j.at("feature").get<std::string>());
  if (j.contains("reference")) c.reference = terminal_path_from_string(j.at("reference").get<std::string>());
  if (j.contains("sweep")) c.sweep = sweep_mode_from_string(j.at("sweep").get<std::string>());
  if (j.contains("thresholds")) c.thresholds = j.at("thresholds").get<std::vector<double>>();
  detail::read(j, "min_flops_saving", c.min_flops_saving);
  detail::read(j, "include_overhead", c.include_overhead);
  if (j.contains("heads")) {
    const auto& h = j.at("heads");
    detail::reject_unknown(h, {"lr", "epochs", "batch_size", "distill_weight"}, "heads");
    detail::read(h, "lr", c.heads.lr);
    detail::read(h, "epochs", c.heads.epochs);
    detail::read(h, "batch_size", c.heads.batch_size);
    detail::read(h, "distill_weight", c.heads.distill_weight);
  }
  if (j.contains("gate")) {
    const auto& g = j.at("gate");
    detail::reject_unknown(g, {"lr", "epochs", "clip", "standardize_sav", "optimizer"}, "gate");
    detail::read(g, "lr", c.gate.lr);
    detail::read(g, "epochs", c.gate.epochs);
    detail::read(g, "clip", c.gate.clip);
    detail::read(g, "standardize_sav", c.gate.standardize_sav);
    if (g.contains("optimizer")) {
      const std::string o = g.at("optimizer").get<std::string>();
      if (o == "adam") c.gate.optimizer = GateOptimizer::adam;
      else if (o == "gradient-descent") c.gate.optimizer = GateOptimizer::gradient_descent;
      else throw ConfigError("unknown gate optimizer '" + o + "'");
    }
  }
  detail::read(j, "out", c.out);
  c.synthetic.seed = c.seed;
  return c;
}

// Command-line seed wins over the config file; the synthetic spec follows it.
inline void apply_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.synthetic.seed = seed;
}

// FNV-1a 64 over the canonical JSON, excluding the output directory.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = config_json(c);
  j.erase("out");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

}  // namespace qexit
