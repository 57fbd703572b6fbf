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
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qexit/archive.hpp"
#include "qexit/encoder.hpp"
#include "qexit/exit_heads.hpp"
#include "qexit/gate.hpp"
#include "qexit/synthetic.hpp"

namespace qexit {

// Entry names follow "blocks.<i>.<part>.<field>" with i zero-based.

inline nlohmann::json vit_config_json(const ViTConfig& c) {
  return {{"num_layers", c.num_layers}, {"dim", c.dim},         {"num_patches", c.num_patches},
          {"num_heads", c.num_heads},   {"mlp_ratio", c.mlp_ratio}, {"embed_dim", c.embed_dim}};
}

inline ViTConfig vit_config_from_json(const nlohmann::json& j) {
  ViTConfig c;
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.dim = j.at("dim").get<std::size_t>();
  c.num_patches = j.at("num_patches").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.validate();
  return c;
}

namespace detail {

inline void put_projection(TensorArchive& a, const std::string& prefix, const Projection& p) {
  a.put(prefix + ".weight", p.weight);
  a.put(prefix + ".bias", p.bias);
  const QuantizedLinear& q = p.quant;
  if (q.codes().empty()) return;
  a.put_i8(prefix + ".codes", {q.out_features(), q.in_features()}, q.codes());
  a.put(prefix + ".scales", Tensor({q.scales().size()}, q.scales()));
}

// Re-derives the quantized twin and checks it against any stored codes.
inline Projection get_projection(const TensorArchive& a, const std::string& prefix, QuantScheme scheme) {
  Projection p{a.get(prefix + ".weight"), a.get(prefix + ".bias"), {}};
  p.quantize(scheme);
  if (a.contains(prefix + ".codes") && a.get_i8(prefix + ".codes") != p.quant.codes()) {
    throw InputError("archive codes for '" + prefix + "' disagree with its weights");
  }
  return p;
}

}  // namespace detail

inline TensorArchive model_archive(const ViTModel& m) {
  m.validate();
  TensorArchive a;
  a.metadata = {{"kind", "model"}, {"config", vit_config_json(m.config)}, {"quant_scheme", to_string(m.scheme)}};
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const BlockWeights& b = m.blocks[i];
    const std::string p = "blocks." + std::to_string(i);
    a.put(p + ".ln1.gamma", b.ln1_gamma);
    a.put(p + ".ln1.beta", b.ln1_beta);
    detail::put_projection(a, p + ".qkv", b.qkv);
    detail::put_projection(a, p + ".attn_out", b.attn_out);
    a.put(p + ".ln2.gamma", b.ln2_gamma);
    a.put(p + ".ln2.beta", b.ln2_beta);
    detail::put_projection(a, p + ".fc1", b.fc1);
    detail::put_projection(a, p + ".fc2", b.fc2);
  }
  a.put("ln_post.gamma", m.ln_post_gamma);
  a.put("ln_post.beta", m.ln_post_beta);
  a.put("proj", m.proj);
  return a;
}

// `scheme_override` re-quantizes FP32 weights under a different scheme.
inline ViTModel model_from_archive(const TensorArchive& a, const std::string& scheme_override = "") {
  ViTModel m;
  const auto& meta = a.metadata;
  if (!meta.contains("config")) throw InputError("model archive lacks a config in its metadata");
  m.config = vit_config_from_json(meta.at("config"));
  const std::string stored = meta.value("quant_scheme", std::string("per-channel"));
  m.scheme = quant_scheme_from_string(scheme_override.empty() ? stored : scheme_override);
  const bool check_codes = scheme_override.empty() || scheme_override == stored;
  for (std::size_t i = 0; i < m.config.num_layers; ++i) {
    const std::string p = "blocks." + std::to_string(i);
    auto proj = [&](const std::string& name) {
      if (check_codes) return detail::get_projection(a, p + name, m.scheme);
      Projection q{a.get(p + name + ".weight"), a.get(p + name + ".bias"), {}};
      q.quantize(m.scheme);
      return q;
    };
    BlockWeights b;
    b.ln1_gamma = a.get(p + ".ln1.gamma");
    b.ln1_beta = a.get(p + ".ln1.beta");
    b.qkv = proj(".qkv");
    b.attn_out = proj(".attn_out");
    b.ln2_gamma = a.get(p + ".ln2.gamma");
    b.ln2_beta = a.get(p + ".ln2.beta");
    b.fc1 = proj(".fc1");
    b.fc2 = proj(".fc2");
    m.blocks.push_back(std::move(b));
  }
  m.ln_post_gamma = a.get("ln_post.gamma");
  m.ln_post_beta = a.get("ln_post.beta");
  m.proj = a.get("proj");
  m.validate();
  return m;
}

namespace detail {

inline void put_split(TensorArchive& a, const std::string& name, const LabeledSplit& s) {
  if (s.tokens.size() != s.labels.size()) throw InputError("split '" + name + "' has mismatched labels");
  if (s.tokens.empty()) return;
  const Shape& ts = s.tokens.front().shape();
  std::vector<float> flat;
  flat.reserve(s.size() * ts[0] * ts[1]);
  for (const Tensor& t : s.tokens) {
    if (t.shape() != ts) throw DimensionError("split '" + name + "' has ragged token shapes");
    flat.insert(flat.end(), t.values().begin(), t.values().end());
  }
  a.put(name + ".tokens", Tensor({s.size(), ts[0], ts[1]}, std::move(flat)));
  a.put_i32(name + ".labels", {s.size()}, std::vector<std::int32_t>(s.labels.begin(), s.labels.end()));
}

inline LabeledSplit get_split(const TensorArchive& a, const std::string& name) {
  LabeledSplit s;
  if (!a.contains(name + ".tokens")) return s;
  const Tensor stacked = a.get(name + ".tokens");
  require_rank(stacked, 3, name + ".tokens");
  const auto labels = a.get_i32(name + ".labels");
  if (labels.size() != stacked.dim(0)) throw InputError("split '" + name + "' has mismatched labels");
  const std::size_t rows = stacked.dim(1), cols = stacked.dim(2);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto begin = stacked.values().begin() + i * rows * cols;
    s.tokens.emplace_back(Shape{rows, cols}, std::vector<float>(begin, begin + rows * cols));
    s.labels.push_back(labels[i]);
  }
  return s;
}

}  // namespace detail

inline TensorArchive dataset_archive(const Dataset& d) {
  d.bank.validate();
  TensorArchive a;
  a.metadata = {{"kind", "dataset"}, {"logit_scale", d.bank.logit_scale}};
  detail::put_split(a, "train", d.train);
  detail::put_split(a, "gate", d.gate);
  detail::put_split(a, "eval", d.eval);
  a.put("text_bank", d.bank.embeddings);
  return a;
}

inline Dataset dataset_from_archive(const TensorArchive& a) {
  Dataset d;
  d.train = detail::get_split(a, "train");
  d.gate = detail::get_split(a, "gate");
  d.eval = detail::get_split(a, "eval");
  d.bank = TextBank{a.get("text_bank"), a.metadata.value("logit_scale", 100.0f)};
  d.bank.validate();
  for (const auto* s : {&d.train, &d.gate, &d.eval}) {
    for (int y : s->labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= d.bank.classes()) {
        throw InputError("label " + std::to_string(y) + " outside the text bank");
      }
    }
  }
  return d;
}

// Heads are stored as "heads.<layer>.{w1,b1,w2,b2}" with a manifest in the metadata.
inline TensorArchive heads_archive(const std::map<std::size_t, ExitHead>& heads) {
  TensorArchive a;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [layer, h] : heads) {
    const std::string p = "heads." + std::to_string(layer);
    const auto& m = h.mlp;
    a.put(p + ".w1", Tensor({m.hidden, m.in}, m.w1));
    a.put(p + ".b1", Tensor({m.hidden}, m.b1));
    a.put(p + ".w2", Tensor({m.out, m.hidden}, m.w2));
    a.put(p + ".b2", Tensor({m.out}, m.b2));
    manifest.push_back({{"layer", layer}, {"feature", to_string(h.feature)}, {"supervision", to_string(h.supervision)}});
  }
  a.metadata = {{"kind", "heads"}, {"heads", manifest}};
  return a;
}

inline std::map<std::size_t, ExitHead> heads_from_archive(const TensorArchive& a) {
  if (!a.metadata.contains("heads")) throw InputError("heads archive lacks a manifest");
  std::map<std::size_t, ExitHead> heads;
  for (const auto& item : a.metadata.at("heads")) {
    ExitHead h;
    h.layer = item.at("layer").get<std::size_t>();
    h.feature = feature_kind_from_string(item.at("feature").get<std::string>());
    h.supervision = supervision_from_string(item.at("supervision").get<std::string>());
    const std::string p = "heads." + std::to_string(h.layer);
    const Tensor w1 = a.get(p + ".w1"), b1 = a.get(p + ".b1"), w2 = a.get(p + ".w2"), b2 = a.get(p + ".b2");
    require_rank(w1, 2, p + ".w1");
    require_rank(w2, 2, p + ".w2");
    if (b1.size() != w1.dim(0) || w2.dim(1) != w1.dim(0) || b2.size() != w2.dim(0)) {
      throw DimensionError("head '" + p + "' has inconsistent shapes");
    }
    auto vec = [](const Tensor& t) { return std::vector<float>(t.values().begin(), t.values().end()); };
    h.mlp = {w1.dim(1), w1.dim(0), w2.dim(0), vec(w1), vec(b1), vec(w2), vec(b2)};
    if (!heads.emplace(h.layer, std::move(h)).second) throw InputError("duplicate head for layer " + p);
  }
  return heads;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError(path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void save_gate(const std::filesystem::path& path, const GateParams& g) { write_text(path, gate_to_json(g).dump(2) + "\n"); }

// Accepts a bare gate object or one wrapped as {"gate": ...} with run metadata.
inline GateParams load_gate(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw InputError("gate file " + path.string() + " is not valid JSON: " + e.what());
  }
  return gate_from_json(j.contains("gate") ? j.at("gate") : j);
}

}  // namespace qexit
