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

#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "qexit/encoder.hpp"
#include "support.hpp"

namespace qexit {
namespace {

using testing::random_model;
using testing::uniform_tensor;
using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  }
  return m;
}

Mat ref_layer_norm(const Mat& x, const Tensor& g, const Tensor& b) {
  Mat y = x;
  for (auto& row : y) {
    double mean = 0.0, var = 0.0;
    for (double v : row) mean += v;
    mean /= double(row.size());
    for (double v : row) var += (v - mean) * (v - mean);
    var /= double(row.size());
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - mean) / std::sqrt(var + 1e-5) * g[c] + b[c];
  }
  return y;
}

Mat ref_linear(const Mat& x, const Tensor& w, const Tensor& b) {
  Mat y(x.size(), std::vector<double>(w.dim(0)));
  for (std::size_t n = 0; n < x.size(); ++n) {
    for (std::size_t o = 0; o < w.dim(0); ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < w.dim(1); ++i) acc += x[n][i] * w.at(o, i);
      y[n][o] = acc;
    }
  }
  return y;
}

// Straightforward pre-norm block written independently of the library.
Mat ref_block(const Mat& z, const BlockWeights& bw, std::size_t heads) {
  const std::size_t n = z.size(), d = z[0].size(), dh = d / heads;
  const Mat qkv = ref_linear(ref_layer_norm(z, bw.ln1_gamma, bw.ln1_beta), bw.qkv.weight, bw.qkv.bias);
  Mat merged(n, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300, sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double dotp = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dotp += qkv[i][h * dh + c] * qkv[j][d + h * dh + c];
        s[j] = dotp / std::sqrt(double(dh));
        mx = std::max(mx, s[j]);
      }
      for (auto& v : s) sum += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += s[j] / sum * qkv[j][2 * d + h * dh + c];
        merged[i][h * dh + c] = acc;
      }
    }
  }
  const Mat attn = ref_linear(merged, bw.attn_out.weight, bw.attn_out.bias);
  Mat out = z;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) out[i][c] += attn[i][c];
  }
  Mat hidden = ref_linear(ref_layer_norm(out, bw.ln2_gamma, bw.ln2_beta), bw.fc1.weight, bw.fc1.bias);
  for (auto& row : hidden) {
    for (auto& v : row) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  }
  const Mat mlp = ref_linear(hidden, bw.fc2.weight, bw.fc2.bias);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) out[i][c] += mlp[i][c];
  }
  return out;
}

void expect_close(const Tensor& got, const Mat& want, double tol) {
  for (std::size_t r = 0; r < want.size(); ++r) {
    for (std::size_t c = 0; c < want[r].size(); ++c) EXPECT_NEAR(got.at(r, c), want[r][c], tol) << r << "," << c;
  }
}

TEST(ForwardBlock, ZeroWeightsArePureResidual) {
  const ViTConfig c{2, 8, 3, 2, 2, 4};
  const ViTModel m = testing::zero_model(c);
  std::mt19937_64 rng(1);
  const Tensor z = uniform_tensor({c.tokens(), c.dim}, rng);
  EXPECT_EQ(forward_block(z, m.blocks[0], Path::fp32, c.num_heads), z);
  EXPECT_EQ(forward_block(z, m.blocks[0], Path::int8, c.num_heads), z);
}

TEST(ForwardBlock, TinyBlockMatchesReference) {
  const ViTConfig c{2, 4, 2, 1, 2, 4};
  std::mt19937_64 rng(2);
  const ViTModel m = random_model(c, rng);
  const Tensor z = uniform_tensor({c.tokens(), c.dim}, rng, -2.0f, 2.0f);
  expect_close(forward_block(z, m.blocks[0], Path::fp32, 1), ref_block(to_mat(z), m.blocks[0], 1), 1e-5);
}

TEST(ForwardBlock, MultiHeadMatchesReference) {
  const ViTConfig c{2, 8, 5, 2, 2, 4};
  std::mt19937_64 rng(3);
  const ViTModel m = random_model(c, rng);
  const Tensor z = uniform_tensor({c.tokens(), c.dim}, rng, -2.0f, 2.0f);
  expect_close(forward_block(z, m.blocks[1], Path::fp32, 2), ref_block(to_mat(z), m.blocks[1], 2), 1e-5);
}

TEST(ForwardBlock, Int8PathUsesDequantizedTwins) {
  const ViTConfig c{2, 8, 3, 2, 2, 4};
  std::mt19937_64 rng(4);
  const ViTModel m = random_model(c, rng);
  BlockWeights deq = m.blocks[0];
  for (Projection* p : {&deq.qkv, &deq.attn_out, &deq.fc1, &deq.fc2}) p->weight = p->quant.dequantized();
  const Tensor z = uniform_tensor({c.tokens(), c.dim}, rng);
  expect_close(forward_block(z, m.blocks[0], Path::int8, 2), ref_block(to_mat(z), deq, 2), 1e-5);
}

TEST(ForwardBlock, ShapeMismatchThrows) {
  const ViTConfig c{2, 8, 3, 2, 2, 4};
  std::mt19937_64 rng(5);
  const ViTModel m = random_model(c, rng);
  EXPECT_THROW(forward_block(Tensor({4, 6}), m.blocks[0], Path::fp32, 2), DimensionError);
}

TEST(DualPath, LosslessPathsAgreeBitwise) {
  const ViTConfig c{4, 8, 6, 2, 2, 4};
  std::mt19937_64 rng(6);
  const ViTModel m = random_model(c, rng, QuantScheme::lossless);
  const DualTrace t = run_dual_path(uniform_tensor({c.tokens(), c.dim}, rng), m);
  ASSERT_EQ(t.depth(), 4u);
  for (std::size_t l = 0; l <= 4; ++l) EXPECT_EQ(t.int8[l], t.fp32[l]) << l;
}

TEST(DualPath, TraceShapesAndSharedInput) {
  const ViTConfig c{3, 8, 6, 2, 2, 4};
  std::mt19937_64 rng(7);
  const ViTModel m = random_model(c, rng);
  const Tensor x = uniform_tensor({c.tokens(), c.dim}, rng);
  const DualTrace t = run_dual_path(x, m);
  ASSERT_EQ(t.fp32.size(), 4u);
  ASSERT_EQ(t.int8.size(), 4u);
  EXPECT_EQ(t.fp32[0], x);
  EXPECT_EQ(t.int8[0], x);
  for (std::size_t l = 0; l <= 3; ++l) EXPECT_EQ(t.int8[l].shape(), (Shape{c.tokens(), c.dim}));
}

// Only the second block is quantized lossily: the paths agree through block 1.
TEST(DualPath, ErrorAppearsOnlyFromCorruptedBlockOnward) {
  const ViTConfig c{2, 8, 4, 2, 2, 4};
  std::mt19937_64 rng(8);
  ViTModel m = random_model(c, rng);
  m.blocks[0].quantize(QuantScheme::lossless);
  const DualTrace t = run_dual_path(uniform_tensor({c.tokens(), c.dim}, rng), m);
  EXPECT_EQ(t.int8[1], t.fp32[1]);
  EXPECT_FALSE(t.int8[2] == t.fp32[2]);
}

TEST(DualPath, Deterministic) {
  const ViTConfig c{3, 8, 6, 2, 2, 4};
  std::mt19937_64 rng(9);
  const ViTModel m = random_model(c, rng);
  const Tensor x = uniform_tensor({c.tokens(), c.dim}, rng);
  const DualTrace a = run_dual_path(x, m), b = run_dual_path(x, m);
  for (std::size_t l = 0; l <= 3; ++l) {
    EXPECT_EQ(a.fp32[l], b.fp32[l]);
    EXPECT_EQ(a.int8[l], b.int8[l]);
  }
}

TEST(DualPath, FinalLayerNormCaptureTouchesOnlyLastLayer) {
  const ViTConfig c{2, 8, 3, 2, 2, 4};
  std::mt19937_64 rng(10);
  const ViTModel m = random_model(c, rng);
  const Tensor x = uniform_tensor({c.tokens(), c.dim}, rng);
  const DualTrace a = run_dual_path(x, m), b = run_dual_path(x, m, {true});
  EXPECT_EQ(a.fp32[1], b.fp32[1]);
  EXPECT_EQ(b.fp32[2], layer_norm(a.fp32[2], m.ln_post_gamma, m.ln_post_beta));
}

TEST(DualPath, BlockCountMismatchIsConfigError) {
  const ViTConfig c{3, 8, 3, 2, 2, 4};
  std::mt19937_64 rng(11);
  ViTModel m = random_model(c, rng);
  m.blocks.pop_back();
  EXPECT_THROW(run_dual_path(Tensor({c.tokens(), c.dim}), m), ConfigError);
}

TEST(DualPath, TokenShapeMismatchIsDimensionError) {
  const ViTConfig c{2, 8, 3, 2, 2, 4};
  std::mt19937_64 rng(12);
  const ViTModel m = random_model(c, rng);
  EXPECT_THROW(run_dual_path(Tensor({c.tokens() + 1, c.dim}), m), DimensionError);
}

TEST(ViTConfig, Validation) {
  EXPECT_THROW((ViTConfig{2, 10, 3, 3, 2, 4}).validate(), ConfigError);
  EXPECT_THROW((ViTConfig{1, 8, 3, 2, 2, 4}).validate(), ConfigError);
  EXPECT_THROW((ViTConfig{2, 8, 0, 2, 2, 4}).validate(), ConfigError);
  EXPECT_NO_THROW((ViTConfig{12, 768, 196, 12, 4, 512}).validate());
}

TEST(TerminalEmbedding, ProjectsNormalizedClsToken) {
  const ViTConfig c{2, 8, 3, 2, 2, 4};
  std::mt19937_64 rng(13);
  const ViTModel m = random_model(c, rng);
  const Tensor z = uniform_tensor({c.tokens(), c.dim}, rng);
  const Tensor e = terminal_embedding(z, m);
  const Tensor cls = layer_norm(Tensor({1, c.dim}, std::vector<float>(z.row(0).begin(), z.row(0).end())),
                                m.ln_post_gamma, m.ln_post_beta);
  ASSERT_EQ(e.size(), c.embed_dim);
  for (std::size_t o = 0; o < c.embed_dim; ++o) {
    double acc = 0.0;
    for (std::size_t i = 0; i < c.dim; ++i) acc += double(cls[i]) * m.proj.at(o, i);
    EXPECT_NEAR(e[o], acc, 1e-5);
  }
}

}  // namespace
}  // namespace qexit
