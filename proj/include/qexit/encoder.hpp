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
#include <string>
#include <vector>

#include "qexit/errors.hpp"
#include "qexit/quantization.hpp"
#include "qexit/tensor.hpp"

namespace qexit {

struct ViTConfig {
  std::size_t num_layers = 12;
  std::size_t dim = 768;
  std::size_t num_patches = 196;
  std::size_t num_heads = 12;
  std::size_t mlp_ratio = 4;
  std::size_t embed_dim = 512;

  std::size_t tokens() const noexcept { return num_patches + 1; }
  std::size_t hidden() const noexcept { return dim * mlp_ratio; }
  std::size_t head_dim() const noexcept { return dim / num_heads; }

  void validate() const {
    if (num_heads == 0 || dim == 0 || dim % num_heads != 0) {
      throw ConfigError("dim " + std::to_string(dim) + " not divisible by num_heads " + std::to_string(num_heads));
    }
    if (num_patches < 1) throw ConfigError("num_patches must be >= 1");
    if (num_layers < 2) throw ConfigError("num_layers must be >= 2");
    if (mlp_ratio < 1 || embed_dim < 1) throw ConfigError("mlp_ratio and embed_dim must be >= 1");
  }

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

enum class Path { fp32, int8 };

// FP32 linear layer together with its quantized twin.
struct Projection {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]
  QuantizedLinear quant;

  Tensor forward(const Tensor& x, Path path) const {
    return path == Path::fp32 ? linear(x, weight, bias) : quantized_forward(x, quant);
  }

  void quantize(QuantScheme scheme) { quant = quantize_linear(weight, bias, scheme); }
};

// Pre-norm transformer block: LN -> MHA -> residual, LN -> MLP -> residual.
struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  Projection qkv;       // [3d x d], rows ordered q, k, v
  Projection attn_out;  // [d x d]
  Tensor ln2_gamma, ln2_beta;
  Projection fc1;  // [hidden x d]
  Projection fc2;  // [d x hidden]

  void quantize(QuantScheme scheme) {
    qkv.quantize(scheme);
    attn_out.quantize(scheme);
    fc1.quantize(scheme);
    fc2.quantize(scheme);
  }

  std::vector<const Projection*> projections() const { return {&qkv, &attn_out, &fc1, &fc2}; }
};

struct ViTModel {
  ViTConfig config;
  std::vector<BlockWeights> blocks;
  // Terminal path: layer-normed [CLS] projected into the embedding space.
  Tensor ln_post_gamma, ln_post_beta;
  Tensor proj;  // [embed_dim x dim]
  QuantScheme scheme = QuantScheme::per_channel;

  void quantize(QuantScheme s) {
    scheme = s;
    for (auto& b : blocks) b.quantize(s);
  }

  void validate() const {
    config.validate();
    if (blocks.size() != config.num_layers) {
      throw ConfigError("model has " + std::to_string(blocks.size()) + " blocks, config expects " +
                        std::to_string(config.num_layers));
    }
    const std::size_t d = config.dim, h = config.hidden();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      auto expect = [&](const Tensor& t, const Shape& s, const char* name) {
        if (t.shape() != s) {
          throw ConfigError("block " + std::to_string(i) + " " + name + " has shape " + shape_str(t.shape()) +
                            ", expected " + shape_str(s));
        }
      };
      expect(b.ln1_gamma, {d}, "ln1.gamma");
      expect(b.ln1_beta, {d}, "ln1.beta");
      expect(b.ln2_gamma, {d}, "ln2.gamma");
      expect(b.ln2_beta, {d}, "ln2.beta");
      expect(b.qkv.weight, {3 * d, d}, "qkv.weight");
      expect(b.attn_out.weight, {d, d}, "attn_out.weight");
      expect(b.fc1.weight, {h, d}, "fc1.weight");
      expect(b.fc2.weight, {d, h}, "fc2.weight");
      for (const Projection* p : b.projections()) {
        if (p->quant.dequantized().shape() != p->weight.shape()) {
          throw ConfigError("block " + std::to_string(i) + " quantized twin missing or mis-shaped");
        }
      }
    }
    if (ln_post_gamma.shape() != Shape{d} || ln_post_beta.shape() != Shape{d}) throw ConfigError("ln_post shape");
    if (proj.shape() != Shape{config.embed_dim, d}) throw ConfigError("proj shape " + shape_str(proj.shape()));
  }
};

inline Tensor multi_head_attention(const Tensor& x, const BlockWeights& bw, Path path, std::size_t num_heads) {
  const std::size_t d = x.cols();
  const std::size_t dh = d / num_heads;
  const Tensor qkv = bw.qkv.forward(x, path);
  Tensor merged({x.rows(), d});
  for (std::size_t h = 0; h < num_heads; ++h) {
    const Tensor q = column_slice(qkv, h * dh, dh);
    const Tensor k = column_slice(qkv, d + h * dh, dh);
    const Tensor v = column_slice(qkv, 2 * d + h * dh, dh);
    const Tensor o = attention(q, k, v);
    for (std::size_t r = 0; r < x.rows(); ++r) std::copy(o.row(r).begin(), o.row(r).end(), merged.row(r).begin() + h * dh);
  }
  return bw.attn_out.forward(merged, path);
}

inline Tensor forward_block(const Tensor& z, const BlockWeights& bw, Path path, std::size_t num_heads) {
  if (z.rank() != 2 || z.cols() != bw.ln1_gamma.size()) {
    throw DimensionError("forward_block: activation " + shape_str(z.shape()) + " vs model dim " +
                         std::to_string(bw.ln1_gamma.size()));
  }
  if (num_heads == 0 || z.cols() % num_heads != 0) throw ConfigError("forward_block: bad head count");
  Tensor out = z;
  add_inplace(out, multi_head_attention(layer_norm(out, bw.ln1_gamma, bw.ln1_beta), bw, path, num_heads));
  const Tensor hidden = gelu(bw.fc1.forward(layer_norm(out, bw.ln2_gamma, bw.ln2_beta), path));
  add_inplace(out, bw.fc2.forward(hidden, path));
  return out;
}

inline void check_tokens(const Tensor& tokens, const ViTConfig& cfg) {
  if (tokens.shape() != Shape{cfg.tokens(), cfg.dim}) {
    throw DimensionError("tokens " + shape_str(tokens.shape()) + ", expected " + shape_str({cfg.tokens(), cfg.dim}));
  }
}

// Runs blocks [first, last) (0-based) on z.
inline Tensor run_blocks(Tensor z, const ViTModel& model, Path path, std::size_t first, std::size_t last) {
  for (std::size_t b = first; b < last; ++b) z = forward_block(z, model.blocks[b], path, model.config.num_heads);
  return z;
}

// One entry per depth; index 0 is the input embedding.
inline std::vector<Tensor> run_path(const Tensor& tokens, const ViTModel& model, Path path) {
  if (model.blocks.size() != model.config.num_layers) {
    throw ConfigError("expected " + std::to_string(model.config.num_layers) + " blocks, got " +
                      std::to_string(model.blocks.size()));
  }
  check_tokens(tokens, model.config);
  std::vector<Tensor> zs;
  zs.reserve(model.blocks.size() + 1);
  zs.push_back(tokens);
  for (const auto& b : model.blocks) zs.push_back(forward_block(zs.back(), b, path, model.config.num_heads));
  return zs;
}

struct DualTrace {
  std::vector<Tensor> fp32;
  std::vector<Tensor> int8;

  std::size_t depth() const noexcept { return fp32.empty() ? 0 : fp32.size() - 1; }
};

struct TraceOptions {
  // Capture the last layer after the terminal layer norm instead of post-block.
  bool final_ln_capture = false;
};

inline DualTrace run_dual_path(const Tensor& tokens, const ViTModel& model, const TraceOptions& opts = {}) {
  DualTrace t{run_path(tokens, model, Path::fp32), run_path(tokens, model, Path::int8)};
  if (opts.final_ln_capture) {
    t.fp32.back() = layer_norm(t.fp32.back(), model.ln_post_gamma, model.ln_post_beta);
    t.int8.back() = layer_norm(t.int8.back(), model.ln_post_gamma, model.ln_post_beta);
  }
  return t;
}

// LN_post([CLS]) projected into the shared embedding space.
inline Tensor terminal_embedding(const Tensor& z, const ViTModel& model) {
  const Tensor cls = layer_norm(z.row_tensor(0).reshaped({1, z.cols()}), model.ln_post_gamma, model.ln_post_beta);
  Tensor zero_bias({model.proj.dim(0)});
  return linear(cls, model.proj, zero_bias).reshaped({model.proj.dim(0)});
}

}  // namespace qexit
