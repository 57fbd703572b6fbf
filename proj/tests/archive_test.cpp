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
#include <cstring>
#include <limits>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "qexit/archive.hpp"
#include "qexit/model_io.hpp"
#include "qexit/synthetic.hpp"
#include "support.hpp"

namespace qexit {
namespace {

using testing::normal_tensor;
using testing::scratch_dir;

std::string bits(const Tensor& t) {
  std::string s(t.size() * 4, '\0');
  std::memcpy(s.data(), t.values().data(), s.size());
  return s;
}

TEST(Archive, GoldenByteLayout) {
  TensorArchive a;
  a.put("a", Tensor::vector({1.0f, -2.0f}));
  a.put_i8("b", {1}, {-1});
  a.put_i32("c", {1}, {258});
  const std::string manifest =
      R"({"entries":[{"dtype":"f32","name":"a","nbytes":8,"offset":0,"shape":[2]},)"
      R"({"dtype":"i8","name":"b","nbytes":1,"offset":8,"shape":[1]},)"
      R"({"dtype":"i32","name":"c","nbytes":4,"offset":9,"shape":[1]}],)"
      R"("format":"qxa","metadata":{},"version":1})";
  std::string want = "QXARCHV1";
  const std::uint64_t h = manifest.size();
  for (int i = 0; i < 8; ++i) want.push_back(static_cast<char>((h >> (8 * i)) & 0xff));
  want += manifest;
  for (unsigned char c : {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0, 0xff, 0x02, 0x01, 0x00, 0x00}) {
    want.push_back(static_cast<char>(c));
  }
  EXPECT_EQ(a.serialize(), want);
}

TEST(Archive, RoundtripIsBitwise) {
  std::mt19937_64 rng(1);
  TensorArchive a;
  Tensor special = Tensor::vector({0.0f, -0.0f, std::numeric_limits<float>::infinity(),
                                   std::numeric_limits<float>::denorm_min(), std::numeric_limits<float>::quiet_NaN()});
  a.put("special", special);
  a.put("m", normal_tensor({3, 5, 2}, rng));
  a.put("empty", Tensor({0}));
  a.put_i8("codes", {2, 2}, {-127, 0, 127, -128});
  a.put_i32("labels", {3}, {0, -7, 2147483647});
  a.metadata = {{"kind", "test"}, {"x", 1.5}};
  const TensorArchive b = TensorArchive::parse(a.serialize());
  EXPECT_EQ(bits(b.get("special")), bits(special));
  EXPECT_EQ(bits(b.get("m")), bits(a.get("m")));
  EXPECT_EQ(b.get("m").shape(), (Shape{3, 5, 2}));
  EXPECT_EQ(b.get("empty").size(), 0u);
  EXPECT_EQ(b.get_i8("codes"), (std::vector<std::int8_t>{-127, 0, 127, -128}));
  EXPECT_EQ(b.get_i32("labels"), (std::vector<std::int32_t>{0, -7, 2147483647}));
  EXPECT_EQ(b.metadata, a.metadata);
  EXPECT_EQ(b.serialize(), a.serialize());
}

TEST(Archive, FileRoundtripAndMissingFile) {
  const auto dir = scratch_dir("archive_file");
  TensorArchive a;
  a.put("x", Tensor::vector({3.25f}));
  a.save(dir / "x.qxa");
  EXPECT_EQ(TensorArchive::load(dir / "x.qxa").serialize(), a.serialize());
  try {
    TensorArchive::load(dir / "absent.qxa");
    FAIL();
  } catch (const MissingArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("absent.qxa"), std::string::npos);
  }
}

TEST(Archive, TypedAccessChecks) {
  TensorArchive a;
  a.put_i8("q", {1}, {3});
  EXPECT_THROW(a.get("q"), InputError);
  EXPECT_THROW(a.get("nope"), InputError);
  EXPECT_THROW(a.put_i8("bad", {2}, {1}), DimensionError);
  a.put("q", Tensor::vector({1.0f}));
  EXPECT_EQ(a.entries().size(), 1u);
  EXPECT_EQ(a.get("q")[0], 1.0f);
}

std::string with_manifest(const std::string& manifest, const std::string& payload) {
  std::string s = "QXARCHV1";
  const std::uint64_t h = manifest.size();
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((h >> (8 * i)) & 0xff));
  return s + manifest + payload;
}

TEST(Archive, RejectsCorruption) {
  TensorArchive a;
  a.put("x", Tensor::vector({1.0f, 2.0f}));
  std::string good = a.serialize();
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(TensorArchive::parse(bad_magic), InputError);
  EXPECT_THROW(TensorArchive::parse(good.substr(0, 10)), InputError);
  EXPECT_THROW(TensorArchive::parse(good.substr(0, good.size() - 1)), InputError);
  std::string huge = good;
  huge[15] = '\x7f';
  EXPECT_THROW(TensorArchive::parse(huge), InputError);
  const std::string payload(8, '\0');
  EXPECT_THROW(TensorArchive::parse(with_manifest("{not json", payload)), InputError);
  EXPECT_THROW(TensorArchive::parse(with_manifest(
                   R"({"entries":[{"dtype":"f32","name":"x","nbytes":4,"offset":0,"shape":[2]}]})", payload)),
               InputError);
  EXPECT_THROW(TensorArchive::parse(with_manifest(
                   R"({"entries":[{"dtype":"f64","name":"x","nbytes":8,"offset":0,"shape":[1]}]})", payload)),
               InputError);
  EXPECT_THROW(TensorArchive::parse(with_manifest(R"({"entries":[{"dtype":"f32","name":"x","nbytes":4,"offset":0,"shape":[1]},)"
                                                  R"({"dtype":"f32","name":"y","nbytes":8,"offset":2,"shape":[2]}]})",
                                                  payload + "xx")),
               InputError);
  EXPECT_THROW(TensorArchive::parse(with_manifest(R"({"entries":[{"dtype":"f32","name":"x","nbytes":4,"offset":0,"shape":[1]},)"
                                                  R"({"dtype":"f32","name":"x","nbytes":4,"offset":4,"shape":[1]}]})",
                                                  payload)),
               InputError);
}

SyntheticSpec small_spec(std::uint64_t seed) {
  SyntheticSpec s;
  s.vit = ViTConfig{3, 12, 5, 2, 2, 6};
  s.num_classes = 4;
  s.train_samples = 8;
  s.gate_samples = 4;
  s.eval_samples = 4;
  s.seed = seed;
  return s;
}

TEST(ModelArchive, RoundtripPreservesWeightsAndQuantization) {
  const auto bundle = gen_synthetic(small_spec(3));
  const TensorArchive a = TensorArchive::parse(model_archive(bundle.model).serialize());
  const ViTModel m = model_from_archive(a);
  EXPECT_EQ(m.config, bundle.model.config);
  EXPECT_EQ(model_archive(m).serialize(), model_archive(bundle.model).serialize());
  const auto& x = bundle.data.eval.tokens[0];
  EXPECT_EQ(bits(terminal_embedding(run_path(x, m, Path::int8).back(), m)),
            bits(terminal_embedding(run_path(x, bundle.model, Path::int8).back(), bundle.model)));
}

TEST(ModelArchive, TamperedCodesRejected) {
  const auto bundle = gen_synthetic(small_spec(4));
  TensorArchive a = model_archive(bundle.model);
  auto codes = a.get_i8("blocks.0.fc1.codes");
  codes[0] = static_cast<std::int8_t>(codes[0] == 5 ? 6 : 5);
  a.put_i8("blocks.0.fc1.codes", a.entry("blocks.0.fc1.codes").shape, codes);
  EXPECT_THROW(model_from_archive(a), InputError);
  EXPECT_NO_THROW(model_from_archive(a, "per-tensor"));
}

TEST(DatasetArchive, Roundtrip) {
  const auto bundle = gen_synthetic(small_spec(5));
  const Dataset d = dataset_from_archive(TensorArchive::parse(dataset_archive(bundle.data).serialize()));
  ASSERT_EQ(d.eval.size(), bundle.data.eval.size());
  for (std::size_t i = 0; i < d.eval.size(); ++i) EXPECT_EQ(bits(d.eval.tokens[i]), bits(bundle.data.eval.tokens[i]));
  EXPECT_EQ(d.train.labels, bundle.data.train.labels);
  EXPECT_EQ(bits(d.bank.embeddings), bits(bundle.data.bank.embeddings));
  EXPECT_EQ(d.bank.logit_scale, bundle.data.bank.logit_scale);
}

TEST(DatasetArchive, LabelsOutsideBankRejected) {
  const auto bundle = gen_synthetic(small_spec(6));
  TensorArchive a = dataset_archive(bundle.data);
  auto labels = a.get_i32("train.labels");
  labels[0] = 99;
  a.put_i32("train.labels", {labels.size()}, labels);
  EXPECT_THROW(dataset_from_archive(a), InputError);
}

TEST(HeadsArchive, Roundtrip) {
  std::mt19937_64 rng(7);
  std::map<std::size_t, ExitHead> heads;
  for (std::size_t l : {1u, 3u}) {
    ExitHead h;
    h.layer = l;
    h.feature = l == 1 ? FeatureKind::cls : FeatureKind::ssa;
    h.supervision = Supervision::distill;
    h.mlp = MlpParams<float>::init(6, 6, 4, rng);
    heads[l] = h;
  }
  const auto back = heads_from_archive(TensorArchive::parse(heads_archive(heads).serialize()));
  ASSERT_EQ(back.size(), 2u);
  for (const auto& [l, h] : heads) {
    const auto& g = back.at(l);
    EXPECT_EQ(g.feature, h.feature);
    EXPECT_EQ(g.supervision, h.supervision);
    EXPECT_EQ(g.mlp.w1, h.mlp.w1);
    EXPECT_EQ(g.mlp.b1, h.mlp.b1);
    EXPECT_EQ(g.mlp.w2, h.mlp.w2);
    EXPECT_EQ(g.mlp.b2, h.mlp.b2);
  }
}

TEST(Generator, SameSeedGivesIdenticalArchiveBytes) {
  const auto a = gen_synthetic(small_spec(8)), b = gen_synthetic(small_spec(8)), c = gen_synthetic(small_spec(9));
  EXPECT_EQ(model_archive(a.model).serialize(), model_archive(b.model).serialize());
  EXPECT_EQ(dataset_archive(a.data).serialize(), dataset_archive(b.data).serialize());
  EXPECT_NE(model_archive(a.model).serialize(), model_archive(c.model).serialize());
}

}  // namespace
}  // namespace qexit
