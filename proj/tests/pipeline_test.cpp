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

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include <gtest/gtest.h>

#include "qexit/pipeline.hpp"
#include "qexit/synthetic.hpp"

namespace qexit {
namespace {

SyntheticSpec small_spec(NoiseSchedule s = NoiseSchedule::super_linear, std::uint64_t seed = 0) {
  SyntheticSpec spec;
  spec.schedule = s;
  spec.train_samples = 400;
  spec.gate_samples = 300;
  spec.eval_samples = 300;
  spec.seed = seed;
  return spec;
}

PipelineConfig quick_config() {
  PipelineConfig pc;
  pc.heads.epochs = 10;
  pc.gate.epochs = 500;
  return pc;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(float)) == 0;
}

TEST(Cache, MatchesDirectComputationAndIsThreadIndependent) {
  const auto b = gen_synthetic(small_spec());
  LabeledSplit split;
  for (std::size_t i = 0; i < 12; ++i) {
    split.tokens.push_back(b.data.eval.tokens[i]);
    split.labels.push_back(b.data.eval.labels[i]);
  }
  const auto one = build_cache(b.model, split, b.data.bank, nullptr, 1);
  const auto four = build_cache(b.model, split, b.data.bank, nullptr, 4);
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto int8 = run_path(split.tokens[i], b.model, Path::int8);
    for (std::size_t l = 0; l <= 4; ++l) {
      EXPECT_TRUE(same_bits(one.ssa[i][l], ssa_aggregate(int8[l])));
      EXPECT_TRUE(same_bits(one.ssa[i][l], four.ssa[i][l]));
      EXPECT_TRUE(same_bits(one.cls[i][l], four.cls[i][l]));
      EXPECT_EQ(one.sav[i][l], spatial_activation_variance(int8[l]));
    }
    EXPECT_EQ(one.int8_terminal[i], argmax(bank_probabilities(terminal_embedding(int8.back(), b.model), b.data.bank).values()));
    EXPECT_EQ(one.fp32_terminal[i], four.fp32_terminal[i]);
    EXPECT_TRUE(same_bits(one.teacher[i], four.teacher[i]));
  }
}

TEST(Experiment, PreparesProfileAndExitSet) {
  const auto b = gen_synthetic(small_spec());
  Experiment ex(b.model, b.data, quick_config());
  EXPECT_EQ(ex.profile().layers.size(), 4u);
  EXPECT_EQ(ex.profile().samples, 300u);
  EXPECT_FALSE(ex.exit_set().empty());
  for (std::size_t l : ex.exit_set()) EXPECT_LT(l, 4u);
  EXPECT_EQ(ex.eval_cache().size(), 300u);
  EXPECT_EQ(ex.config().exit_candidates, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Experiment, UnitThresholdsRunFullDepth) {
  const auto b = gen_synthetic(small_spec());
  Experiment ex(b.model, b.data, quick_config());
  const std::vector<double> ones(ex.exit_set().size(), 1.0);
  const auto run = ex.adaptive(FeatureKind::ssa, Supervision::hard, GateMode::learned, ones);
  EXPECT_EQ(run.flops_saving, 0.0);
  for (const auto& r : run.records) EXPECT_EQ(r.exit_layer, 4u);
  const auto full = ex.full_depth({FeatureKind::ssa, Supervision::hard, RoutingKind::full_depth});
  EXPECT_EQ(run.accuracy, full.accuracy());
}

TEST(Experiment, ThresholdsChosenOnGateSplitAreAppliedToEval) {
  const auto b = gen_synthetic(small_spec());
  Experiment ex(b.model, b.data, quick_config());
  const auto run = ex.adaptive(FeatureKind::ssa, Supervision::hard, GateMode::learned);
  const auto again = ex.adaptive(FeatureKind::ssa, Supervision::hard, GateMode::learned, run.policy.thresholds);
  EXPECT_EQ(again.accuracy, run.accuracy);
  EXPECT_EQ(again.flops_saving, run.flops_saving);
  EXPECT_EQ(run.records.size(), 300u);
}

TEST(Experiment, FactorialHasFiveRowsAndTelescopes) {
  const auto b = gen_synthetic(small_spec());
  Experiment ex(b.model, b.data, quick_config());
  const auto t = ex.factorial();
  ASSERT_EQ(t.rows.size(), 5u);
  EXPECT_EQ(t.rows[0].label, "(i) INT8 baseline");
  using namespace modes;
  EXPECT_EQ(t.delta_count(adaptive_distill(), baseline()),
            t.delta_count(ssa_last_hard(), baseline()) + t.delta_count(ssa_last_distill(), ssa_last_hard()) +
                t.delta_count(adaptive_distill(), ssa_last_distill()));
  EXPECT_EQ(t.row(baseline()).flops_saving, 0.0);
}

// A confidence-only learned gate is the heuristic in disguise: mapping each
// heuristic threshold through the logistic gives identical records.
TEST(Experiment, ConfidenceOnlyGateReproducesHeuristic) {
  const auto b = gen_synthetic(small_spec());
  Experiment ex(b.model, b.data, quick_config());
  GateParams g;
  for (std::size_t l : ex.config().exit_candidates) g.layers[l] = LayerGate{7.0, 0.0, 0.0, -3.0, 0.0, 1.0, false, 0};
  ex.set_gate(FeatureKind::ssa, Supervision::hard, g);
  const auto outcomes = ex.outcomes(ex.eval_cache(), FeatureKind::ssa, Supervision::hard);
  for (double tau : threshold_grid()) {
    const double tau_g = sigmoid(7.0 * tau - 3.0);
    const auto h = evaluate_policy(outcomes, RoutingPolicy::shared(ex.exit_set(), tau, GateMode::heuristic), 4);
    const auto l = evaluate_policy(outcomes, RoutingPolicy::shared(ex.exit_set(), tau_g, GateMode::learned), 4);
    for (std::size_t i = 0; i < h.size(); ++i) {
      // Skip samples sitting exactly on the boundary, where rounding decides.
      bool boundary = false;
      for (const auto& p : outcomes[i].probes) boundary |= std::fabs(p.features.confidence - tau) < 1e-9;
      if (boundary) continue;
      EXPECT_EQ(h[i].exit_layer, l[i].exit_layer);
      EXPECT_EQ(h[i].prediction, l[i].prediction);
    }
  }
}

TEST(Experiment, MatchedFlopsComparisonIsWellFormed) {
  const auto b = gen_synthetic(small_spec());
  Experiment ex(b.model, b.data, quick_config());
  std::vector<double> fine;
  for (int i = 0; i <= 200; ++i) fine.push_back(i / 200.0);
  const auto learned = ex.frontier(FeatureKind::ssa, Supervision::hard, GateMode::learned, fine);
  const auto heuristic = ex.frontier(FeatureKind::ssa, Supervision::hard, GateMode::heuristic, fine);
  ASSERT_FALSE(learned.empty());
  ASSERT_FALSE(heuristic.empty());
  // Against itself every gap is zero.
  const auto self = compare_at_matched_flops(heuristic, heuristic);
  EXPECT_EQ(self.mean_gap(), 0.0);
  EXPECT_EQ(self.min_gap(), 0.0);
  const auto cmp = compare_at_matched_flops(learned, heuristic);
  EXPECT_FALSE(cmp.points.empty());
  EXPECT_LE(cmp.min_gap(), cmp.mean_gap());
}

// The learned gate should be at least as accurate as the confidence heuristic
// at every matched FLOPs saving on the default synthetic benchmark. Known to
// fail by a fraction of a point; kept as a live check.
TEST(Experiment, LearnedGateAtLeastMatchesHeuristicAtMatchedFlops) {
  SyntheticSpec spec;
  const auto b = gen_synthetic(spec);
  Experiment ex(b.model, b.data, PipelineConfig{});
  std::vector<double> fine;
  for (int i = 0; i <= 1000; ++i) fine.push_back(i / 1000.0);
  const auto cmp =
      compare_at_matched_flops(ex.frontier(FeatureKind::ssa, Supervision::hard, GateMode::learned, fine),
                               ex.frontier(FeatureKind::ssa, Supervision::hard, GateMode::heuristic, fine));
  ASSERT_FALSE(cmp.points.empty());
  EXPECT_GE(cmp.min_gap(), 0.0) << "mean gap " << 100.0 * cmp.mean_gap() << " pp over " << cmp.points.size()
                                << " points";
}

TEST(Experiment, LosslessFullDepthMatchesFp32) {
  auto spec = small_spec(NoiseSchedule::lossless);
  spec.train_samples = 100;
  spec.gate_samples = 60;
  spec.eval_samples = 60;
  const auto b = gen_synthetic(spec);
  Experiment ex(b.model, b.data, quick_config());
  const std::vector<double> ones(ex.exit_set().size(), 1.0);
  const auto run = ex.adaptive(FeatureKind::ssa, Supervision::hard, GateMode::learned, ones);
  const ExitHead& head = ex.terminal_head(FeatureKind::ssa, Supervision::hard);
  const auto heads = ex.heads(FeatureKind::ssa, Supervision::hard);
  GateParams gate = ex.gate(FeatureKind::ssa, Supervision::hard);
  for (std::size_t i = 0; i < b.data.eval.size(); ++i) {
    const auto fp32 = run_path(b.data.eval.tokens[i], b.model, Path::fp32);
    EXPECT_EQ(run.records[i].prediction, argmax(head_forward(ssa_aggregate(fp32.back()), head, b.data.bank).values()));
    // The block-by-block router with the projection terminal agrees with the
    // FP32 zero-shot answer.
    const RoutingContext ctx{&b.model, &heads, &gate, &b.data.bank, TerminalPath::cls_projection, nullptr};
    const auto r = route_sample(b.data.eval.tokens[i], ctx, RoutingPolicy{ex.exit_set(), ones, GateMode::learned});
    EXPECT_EQ(r.prediction, ex.eval_cache().fp32_terminal[i]);
    EXPECT_EQ(r.exit_layer, 4u);
  }
}

TEST(Experiment, EmptyExitSetFallsBackToFullDepth) {
  const auto b = gen_synthetic(small_spec());
  PipelineConfig pc = quick_config();
  pc.kappa = 5.0;
  Experiment ex(b.model, b.data, pc);
  EXPECT_TRUE(ex.exit_set().empty());
  EXPECT_NE(ex.prune_warning().find("full-depth"), std::string::npos);
  const auto run = ex.adaptive(FeatureKind::ssa, Supervision::hard, GateMode::learned);
  EXPECT_EQ(run.flops_saving, 0.0);
}

}  // namespace
}  // namespace qexit
