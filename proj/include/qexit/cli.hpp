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
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qexit/analysis.hpp"
#include "qexit/config.hpp"
#include "qexit/model_io.hpp"
#include "qexit/pipeline.hpp"

namespace qexit {

namespace fs = std::filesystem;

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"generate", "profile", "train-heads", "train-gate",
                                              "sweep",    "evaluate", "analyze"};
  return names;
}

// Exit codes: 0 ok, 1 internal failure, 2 bad configuration, 3 missing or
// unusable input artifact.
enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kInput = 3 };

struct Inputs {
  ViTModel model;
  Dataset data;
};

inline Inputs load_inputs(const RunConfig& c) {
  Inputs in;
  if (c.model_path.empty()) {
    SyntheticSpec spec = c.synthetic;
    if (c.quant) spec.quant = *c.quant;
    SyntheticBundle b = gen_synthetic(spec);
    in.model = std::move(b.model);
    in.data = std::move(b.data);
  } else {
    in.model = model_from_archive(TensorArchive::load(c.model_path), c.quant ? to_string(*c.quant) : "");
  }
  if (!c.dataset_path.empty()) in.data = dataset_from_archive(TensorArchive::load(c.dataset_path));
  if (in.data.bank.dim() != in.model.config.embed_dim) {
    throw DimensionError("text bank dimension " + std::to_string(in.data.bank.dim()) + " does not match embed_dim " +
                         std::to_string(in.model.config.embed_dim));
  }
  return in;
}

class Runner {
 public:
  Runner(RunConfig cfg, std::ostream& log) : cfg_(std::move(cfg)), hash_(config_hash(cfg_)), out_(cfg_.out), log_(log) {
    cfg_.validate();
  }

  const std::string& hash() const noexcept { return hash_; }
  const fs::path& out_dir() const noexcept { return out_; }

  int run(const std::string& command) {
    fs::create_directories(out_);
    if (command == "generate") return generate();
    inputs_ = load_inputs(cfg_);
    experiment_ = std::make_unique<Experiment>(inputs_.model, inputs_.data, cfg_.pipeline());
    if (command == "profile") return profile();
    if (command == "train-heads") return train_heads_cmd();
    if (command == "train-gate") return train_gate_cmd();
    if (command == "sweep") return sweep();
    if (command == "evaluate") return evaluate();
    if (command == "analyze") return analyze();
    throw ConfigError("unknown command '" + command + "'");
  }

  nlohmann::json stamp(const std::string& command) const {
    return {{"command", command}, {"seed", cfg_.seed}, {"config_hash", hash_}, {"config", config_json(cfg_)}};
  }

  std::string csv_stamp(const std::string& command) const {
    return "# command=" + command + " seed=" + std::to_string(cfg_.seed) + " config_hash=" + hash_ + "\n";
  }

 private:
  void write_json(const std::string& name, const nlohmann::json& j) {
    write_text(out_ / name, j.dump(2) + "\n");
    log_ << "wrote " << (out_ / name).string() << "\n";
  }

  void write_csv(const std::string& name, const std::string& command, const std::string& body) {
    write_text(out_ / name, csv_stamp(command) + body);
    log_ << "wrote " << (out_ / name).string() << "\n";
  }

  void save_archive(const std::string& name, TensorArchive a, const std::string& command) {
    a.metadata["seed"] = cfg_.seed;
    a.metadata["config_hash"] = hash_;
    a.metadata["command"] = command;
    a.save(out_ / name);
    log_ << "wrote " << (out_ / name).string() << "\n";
  }

  std::string heads_file() const { return "heads-" + to_string(cfg_.feature) + "-" + to_string(cfg_.supervision) + ".qxa"; }
  std::string gate_file() const { return "gate-" + to_string(cfg_.feature) + "-" + to_string(cfg_.supervision) + ".json"; }

  void load_heads() {
    auto heads = heads_from_archive(TensorArchive::load(out_ / heads_file()));
    std::vector<std::size_t> need = experiment_->config().exit_candidates;
    need.push_back(experiment_->num_layers());
    for (std::size_t l : need) {
      auto it = heads.find(l);
      if (it == heads.end()) throw InputError(heads_file() + " has no head for layer " + std::to_string(l));
      if (it->second.feature != cfg_.feature || it->second.supervision != cfg_.supervision) {
        throw ConfigError(heads_file() + " holds heads of a different feature or supervision");
      }
    }
    experiment_->set_heads(cfg_.feature, cfg_.supervision, std::move(heads));
  }

  void load_gate_file() { experiment_->set_gate(cfg_.feature, cfg_.supervision, load_gate(out_ / gate_file())); }

  int generate() {
    if (!cfg_.model_path.empty()) throw ConfigError("generate needs a synthetic model spec, not a model file");
    SyntheticSpec spec = cfg_.synthetic;
    if (cfg_.quant) spec.quant = *cfg_.quant;
    const SyntheticBundle b = gen_synthetic(spec);
    TensorArchive m = model_archive(b.model);
    m.metadata["synthetic"] = synthetic_json(spec);
    save_archive("model.qxa", std::move(m), "generate");
    save_archive("dataset.qxa", dataset_archive(b.data), "generate");
    nlohmann::json j = stamp("generate");
    j["files"] = {"model.qxa", "dataset.qxa"};
    j["splits"] = {{"train", b.data.train.size()}, {"gate", b.data.gate.size()}, {"eval", b.data.eval.size()}};
    write_json("generate.json", j);
    return kOk;
  }

  int profile() {
    const NoiseProfile& p = experiment_->profile();
    const PruneResult& pr = experiment_->pruning();
    write_csv("profile.csv", "profile", profile_csv(p));
    nlohmann::json j = stamp("profile");
    j["samples"] = p.samples;
    j["split"] = "gate";
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : p.layers) {
      layers.push_back({{"layer", l.layer},
                        {"delta_nat", l.delta_nat},
                        {"delta_quant", l.delta_quant},
                        {"ratio", l.ratio ? nlohmann::json(*l.ratio) : nlohmann::json(nullptr)},
                        {"cosine", l.cosine},
                        {"inr", format_number(l.inr)},
                        {"act_max", l.act_max},
                        {"quant_mse", l.quant_mse}});
    }
    j["layers"] = layers;
    j["exit_candidates"] = experiment_->config().exit_candidates;
    j["exit_set"] = pr.exit_set;
    j["pruned"] = pr.pruned;
    j["prune_threshold"] = pr.threshold;
    j["kappa"] = cfg_.kappa;
    if (!experiment_->prune_warning().empty()) j["warning"] = experiment_->prune_warning();
    write_json("profile.json", j);
    return kOk;
  }

  int train_heads_cmd() {
    const auto& heads = experiment_->heads(cfg_.feature, cfg_.supervision);
    save_archive(heads_file(), heads_archive(heads), "train-heads");
    nlohmann::json j = stamp("train-heads");
    j["feature"] = to_string(cfg_.feature);
    j["supervision"] = to_string(cfg_.supervision);
    j["file"] = heads_file();
    nlohmann::json acc = nlohmann::json::object();
    for (const auto& [l, a] : experiment_->standalone_accuracy(cfg_.feature, cfg_.supervision)) acc[std::to_string(l)] = a;
    j["eval_accuracy_by_layer"] = acc;
    write_json("heads.json", j);
    return kOk;
  }

  int train_gate_cmd() {
    load_heads();
    const GateParams& g = experiment_->gate(cfg_.feature, cfg_.supervision);
    nlohmann::json file = stamp("train-gate");
    file["feature"] = to_string(cfg_.feature);
    file["supervision"] = to_string(cfg_.supervision);
    file["gate"] = gate_to_json(g);
    // Fit on the gating split: share of exits the gate labels correctly at 0.5.
    const auto outcomes = experiment_->outcomes(experiment_->gate_cache(), cfg_.feature, cfg_.supervision);
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> fit;
    for (const auto& s : outcomes) {
      for (const auto& p : s.probes) {
        const bool correct = static_cast<int>(p.prediction) == s.label;
        auto& [hit, n] = fit[p.layer];
        hit += (p.score > 0.5) == correct;
        ++n;
      }
    }
    nlohmann::json fj = nlohmann::json::object();
    for (const auto& [l, hn] : fit) fj[std::to_string(l)] = double(hn.first) / double(hn.second);
    file["gate_split_agreement"] = fj;
    write_json(gate_file(), file);
    return kOk;
  }

  RoutingPolicy policy_template() {
    return RoutingPolicy::shared(experiment_->exit_set(), 1.0, cfg_.gate_mode);
  }

  int sweep() {
    load_heads();
    load_gate_file();
    const auto outcomes = experiment_->outcomes(experiment_->eval_cache(), cfg_.feature, cfg_.supervision);
    const RoutingPolicy templ = policy_template();
    const std::size_t L = experiment_->num_layers();
    const auto rows = sweep_thresholds(outcomes, templ, cfg_.grid.values(), cfg_.sweep, experiment_->flops_model(), L);
    std::ostringstream csv;
    csv << "row,thresholds,accuracy,flops_saving,correct,samples";
    for (std::size_t l : templ.exit_set) csv << ",exit_frac_" << l;
    csv << ",exit_frac_" << L << "\n";
    std::vector<ParetoPoint> points;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      RoutingPolicy p = templ;
      p.thresholds = r.thresholds;
      csv << i << ',' << p.describe() << ',' << format_number(r.accuracy) << ',' << format_number(r.flops_saving) << ','
          << r.correct << ',' << r.samples;
      for (const auto& [l, f] : r.exit_fractions) csv << ',' << format_number(f);
      csv << "\n";
      points.push_back({r.flops_saving, r.accuracy, i});
    }
    write_csv("sweep.csv", "sweep", csv.str());
    std::ostringstream pcsv;
    pcsv << "row,thresholds,flops_saving,accuracy\n";
    for (const auto& p : pareto_frontier(points)) {
      RoutingPolicy pol = templ;
      pol.thresholds = rows[p.index].thresholds;
      pcsv << p.index << ',' << pol.describe() << ',' << format_number(p.flops_saving) << ',' << format_number(p.accuracy)
           << "\n";
    }
    write_csv("pareto.csv", "sweep", pcsv.str());
    return kOk;
  }

  std::optional<std::vector<double>> fixed_thresholds() {
    if (!cfg_.thresholds) return std::nullopt;
    std::vector<double> t = *cfg_.thresholds;
    const std::size_t k = experiment_->exit_set().size();
    if (t.size() == 1) t.assign(k, t.front());
    if (t.size() != k) {
      throw ConfigError("config gives " + std::to_string(t.size()) + " thresholds for " + std::to_string(k) + " exits");
    }
    return t;
  }

  int evaluate() {
    load_heads();
    load_gate_file();
    const AdaptiveRun run = experiment_->adaptive(cfg_.feature, cfg_.supervision, cfg_.gate_mode, fixed_thresholds());
    const std::size_t L = experiment_->num_layers();
    const QuadrantReport q = four_quadrant(run.records);
    nlohmann::json j = stamp("evaluate");
    j["split"] = "eval";
    j["policy"] = run.policy.describe();
    j["exit_set"] = run.policy.exit_set;
    j["thresholds"] = run.policy.thresholds;
    j["gate_mode"] = to_string(run.policy.gate_mode);
    j["accuracy"] = run.accuracy;
    j["flops_saving"] = run.flops_saving;
    j["reference"] = to_string(cfg_.reference);
    j["full_depth_accuracy"] = q.full_accuracy();
    j["terminal_accuracy"] = experiment_->full_depth({cfg_.feature, cfg_.supervision, RoutingKind::full_depth}).accuracy();
    j["quadrants"] = quadrant_json(q);
    j["selectivity"] = selectivity_json(gate_selectivity(run.records, L));
    nlohmann::json dist = nlohmann::json::object();
    for (const auto& [l, f] : exit_distribution(run.records)) dist[std::to_string(l)] = f;
    j["exit_distribution"] = dist;
    write_json("evaluation.json", j);
    std::ostringstream csv;
    csv << "sample,label,exit_layer,prediction,ee_correct,full_correct,gate_scores\n";
    for (std::size_t i = 0; i < run.records.size(); ++i) {
      const auto& r = run.records[i];
      csv << r.sample_id << ',' << run.eval_outcomes[i].label << ',' << r.exit_layer << ',' << r.prediction << ','
          << int(r.ee_correct) << ',' << int(r.full_correct) << ',';
      for (std::size_t k = 0; k < r.gate_scores.size(); ++k) csv << (k ? ";" : "") << format_number(r.gate_scores[k]);
      csv << "\n";
    }
    write_csv("records.csv", "evaluate", csv.str());
    return kOk;
  }

  // Self-contained: trains every head and gate it needs in memory.
  int analyze() {
    const std::size_t L = experiment_->num_layers();
    const FactorialTable table = experiment_->factorial();
    nlohmann::json fj = stamp("analyze");
    fj["factorial"] = factorial_json(table);
    write_json("factorial.json", fj);
    write_csv("factorial.csv", "analyze", factorial_csv(table));

    const AdaptiveRun run = experiment_->adaptive(cfg_.feature, cfg_.supervision, cfg_.gate_mode);
    nlohmann::json rj = stamp("analyze");
    rj["mode"] = to_string(cfg_.feature) + "/" + to_string(cfg_.supervision) + "/adaptive";
    rj["policy"] = run.policy.describe();
    rj["accuracy"] = run.accuracy;
    rj["flops_saving"] = run.flops_saving;
    rj["quadrants"] = quadrant_json(four_quadrant(run.records));
    rj["selectivity"] = selectivity_json(gate_selectivity(run.records, L));
    nlohmann::json dist = nlohmann::json::object();
    for (const auto& [l, f] : exit_distribution(run.records)) dist[std::to_string(l)] = f;
    rj["exit_distribution"] = dist;
    write_json("rescue.json", rj);

    std::ostringstream cs;
    cs << "layer,ssa_accuracy,cls_accuracy\n";
    const auto ssa = experiment_->standalone_accuracy(FeatureKind::ssa, Supervision::hard);
    const auto cls = experiment_->standalone_accuracy(FeatureKind::cls, Supervision::hard);
    for (const auto& [l, a] : ssa) cs << l << ',' << format_number(a) << ',' << format_number(cls.at(l)) << "\n";
    write_csv("feature_ablation.csv", "analyze", cs.str());

    nlohmann::json gj = stamp("analyze");
    for (GateMode m : {GateMode::learned, GateMode::heuristic}) {
      const AdaptiveRun r = m == cfg_.gate_mode ? run : experiment_->adaptive(cfg_.feature, cfg_.supervision, m);
      gj[to_string(m)] = {{"policy", r.policy.describe()}, {"accuracy", r.accuracy}, {"flops_saving", r.flops_saving}};
    }
    // Frontiers over a 0.001-step threshold axis so costs can be matched closely.
    std::vector<double> fine;
    for (int i = 0; i <= 1000; ++i) fine.push_back(i / 1000.0);
    const auto cmp = compare_at_matched_flops(
        experiment_->frontier(cfg_.feature, cfg_.supervision, GateMode::learned, fine),
        experiment_->frontier(cfg_.feature, cfg_.supervision, GateMode::heuristic, fine));
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : cmp.points) {
      pts.push_back({{"flops_saving", p.flops_saving}, {"heuristic_accuracy", p.reference_accuracy},
                     {"learned_accuracy", p.accuracy}});
    }
    gj["matched_flops"] = {{"mean_gap_pp", 100.0 * cmp.mean_gap()}, {"min_gap_pp", 100.0 * cmp.min_gap()}, {"points", pts}};
    write_json("gate_comparison.json", gj);
    return kOk;
  }

  RunConfig cfg_;
  std::string hash_;
  fs::path out_;
  std::ostream& log_;
  Inputs inputs_;
  std::unique_ptr<Experiment> experiment_;
};

// Maps library errors onto exit codes with a one-line diagnostic.
inline int run_command(const RunConfig& cfg, const std::string& command, std::ostream& log = std::cout,
                       std::ostream& err = std::cerr) {
  try {
    Runner r(cfg, log);
    return r.run(command);
  } catch (const MissingArtifactError& e) {
    err << "error: " << e.what() << "\n";
    return kInput;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const EmptyExitSetError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return kInput;
  } catch (const DimensionError& e) {
    err << "input error: " << e.what() << "\n";
    return kInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace qexit
