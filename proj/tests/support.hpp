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
#include <filesystem>
#include <random>
#include <string>

#include "qexit/encoder.hpp"
#include "qexit/tensor.hpp"

namespace qexit::testing {

inline Tensor uniform_tensor(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<float> u(lo, hi);
  for (float& v : t.values()) v = u(rng);
  return t;
}

inline Tensor normal_tensor(Shape shape, std::mt19937_64& rng, float stddev = 1.0f) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> g(0.0f, stddev);
  for (float& v : t.values()) v = g(rng);
  return t;
}

inline Projection random_projection(std::size_t out, std::size_t in, std::mt19937_64& rng, float scale) {
  return {uniform_tensor({out, in}, rng, -scale, scale), uniform_tensor({out}, rng, -0.1f, 0.1f), {}};
}

// Random weights with O(1) activations; quantized under `scheme`.
inline ViTModel random_model(const ViTConfig& c, std::mt19937_64& rng, QuantScheme scheme = QuantScheme::per_channel) {
  ViTModel m;
  m.config = c;
  const float s = 1.0f / static_cast<float>(std::sqrt(double(c.dim)));
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    BlockWeights b;
    b.ln1_gamma = uniform_tensor({c.dim}, rng, 0.8f, 1.2f);
    b.ln1_beta = uniform_tensor({c.dim}, rng, -0.1f, 0.1f);
    b.ln2_gamma = uniform_tensor({c.dim}, rng, 0.8f, 1.2f);
    b.ln2_beta = uniform_tensor({c.dim}, rng, -0.1f, 0.1f);
    b.qkv = random_projection(3 * c.dim, c.dim, rng, s);
    b.attn_out = random_projection(c.dim, c.dim, rng, s);
    b.fc1 = random_projection(c.hidden(), c.dim, rng, s);
    b.fc2 = random_projection(c.dim, c.hidden(), rng, 1.0f / static_cast<float>(std::sqrt(double(c.hidden()))));
    m.blocks.push_back(std::move(b));
  }
  m.ln_post_gamma = Tensor::filled({c.dim}, 1.0f);
  m.ln_post_beta = Tensor({c.dim});
  m.proj = uniform_tensor({c.embed_dim, c.dim}, rng, -s, s);
  m.quantize(scheme);
  return m;
}

// Every projection weight and bias zero: each block is the identity.
inline ViTModel zero_model(const ViTConfig& c) {
  ViTModel m;
  m.config = c;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    BlockWeights b;
    b.ln1_gamma = Tensor::filled({c.dim}, 1.0f);
    b.ln1_beta = Tensor({c.dim});
    b.ln2_gamma = Tensor::filled({c.dim}, 1.0f);
    b.ln2_beta = Tensor({c.dim});
    b.qkv = {Tensor({3 * c.dim, c.dim}), Tensor({3 * c.dim}), {}};
    b.attn_out = {Tensor({c.dim, c.dim}), Tensor({c.dim}), {}};
    b.fc1 = {Tensor({c.hidden(), c.dim}), Tensor({c.hidden()}), {}};
    b.fc2 = {Tensor({c.dim, c.hidden()}), Tensor({c.dim}), {}};
    m.blocks.push_back(std::move(b));
  }
  m.ln_post_gamma = Tensor::filled({c.dim}, 1.0f);
  m.ln_post_beta = Tensor({c.dim});
  m.proj = Tensor({c.embed_dim, c.dim});
  for (std::size_t i = 0; i < std::min(c.embed_dim, c.dim); ++i) m.proj.at(i, i) = 1.0f;
  m.quantize(QuantScheme::per_channel);
  return m;
}

// Fresh empty directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("qexit_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace qexit::testing
