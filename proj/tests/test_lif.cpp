/*
 * Copyright 2026 The SpikeMoE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <limits>

#include "oracles/finite_diff.hpp"
#include "spikemoe/lif.hpp"
#include "test_support.hpp"

namespace sm = spikemoe;
using sm::Array;
using sm::Var;

namespace {

sm::LifStepResult<double> step(double h, double x, const sm::LifParams& p) {
  return sm::lif_step(Var<double>::constant({1}, Array<double>::Constant(1, x)),
                      sm::LifState<double>{Var<double>::constant({1}, Array<double>::Constant(1, h))}, p);
}

sm::LifParams quarter_leak() {
  sm::LifParams p;
  p.beta = 0.25;
  return p;
}

}  // namespace

TEST(LifStep, ZeroInputStaysSilent) {
  auto r = step(0, 0, {});
  EXPECT_EQ(r.u.item(), 0);
  EXPECT_EQ(r.spikes.values().item(), 0);
  EXPECT_EQ(r.state.h.item(), 0);
}

TEST(LifStep, CrossingThresholdResets) {
  auto r = step(0.9, 0.3, quarter_leak());
  EXPECT_DOUBLE_EQ(r.u.item(), 1.2);
  EXPECT_EQ(r.spikes.values().item(), 1);
  EXPECT_EQ(r.state.h.item(), 0);
}

TEST(LifStep, BelowThresholdLeaks) {
  auto r = step(0.4, 0.3, quarter_leak());
  EXPECT_DOUBLE_EQ(r.u.item(), 0.7);
  EXPECT_EQ(r.spikes.values().item(), 0);
  EXPECT_NEAR(r.state.h.item(), 0.175, 1e-15);
}

TEST(LifStep, ExactlyAtThresholdFires) { EXPECT_EQ(step(0.5, 0.5, {}).spikes.values().item(), 1); }

TEST(LifStep, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(sm::lif_step(Var<double>::zeros({2}), sm::LifState<double>::zeros({3}), {}), sm::DimensionError);
}

TEST(LifStep, NonFiniteInputIsNumericError) {
  auto x = Var<double>::constant({2}, Array<double>::Constant(2, std::numeric_limits<double>::quiet_NaN()));
  EXPECT_THROW(sm::lif_step(x, sm::LifState<double>::zeros({2}), {}), sm::NumericError);
  EXPECT_THROW(sm::lif_sequence(sm::reshape(x, {2, 1}), sm::LifParams{}), sm::NumericError);
}

TEST(LifParams, InvalidValuesRejected) {
  sm::LifParams p;
  p.beta = 1.0;
  EXPECT_THROW(p.validate(), sm::ContractError);
  p = {};
  p.v_reset = 2.0;
  EXPECT_THROW(p.validate(), sm::ContractError);
  p = {};
  p.surrogate_width = 0;
  EXPECT_THROW(p.validate(), sm::ContractError);
}

TEST(LifSequence, EmptyTimeAxisIsContractError) {
  EXPECT_THROW(sm::lif_sequence(Var<double>::zeros({0, 3}), sm::LifParams{}), sm::ContractError);
}

TEST(LifSequence, ZeroInputGivesZeroSpikes) {
  EXPECT_EQ(sm::lif_sequence(Var<float>::zeros({4, 2, 3}), sm::LifParams{}).count(), 0);
}

TEST(LifSequence, ConstantThresholdInputFiresEveryStep) {
  auto s = sm::lif_sequence(Var<double>::full({6, 5}, 1.0), sm::LifParams{});
  EXPECT_EQ(s.count(), 30);
}

TEST(SpikeNorm, LargeConstantGivesAllOnes) {
  EXPECT_EQ(sm::spike_norm(Var<float>::full({4, 3, 2}, 7.0f), sm::LifParams{}).count(), 24);
}

TEST(LifSequence, MatchesLoopOracleBitExact) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    sm::LifParams p;
    p.beta = 0.2 + 0.7 * std::uniform_real_distribution<double>(0, 1)(rng);
    p.u_th = 0.3 + std::uniform_real_distribution<double>(0, 1)(rng);
    p.v_reset = trial % 2 ? -0.2 : 0.0;
    auto x = testing_support::random_values<float>({5, 3, 7}, rng, -0.5, 1.5);
    auto s = sm::lif_sequence(x, p);
    auto ref = oracle::lif(oracle::from_var(x), p);
    EXPECT_TRUE(testing_support::bit_equal(s.values().value(), ref.v)) << "trial " << trial;
  }
}

TEST(LifSequence, EqualsFoldedSteps) {
  std::mt19937_64 rng(12);
  auto x = testing_support::random_values<double>({6, 4, 5}, rng, -0.5, 1.5);
  const sm::LifParams p = quarter_leak();
  auto seq = sm::lif_sequence(x, p);
  auto state = sm::LifState<double>::zeros({4, 5});
  for (sm::Index t = 0; t < 6; ++t) {
    const std::vector<sm::Index> at{t};
    auto xt = sm::reshape(sm::index_select(x, 0, std::span<const sm::Index>(at)), {4, 5});
    auto r = sm::lif_step(xt, state, p);
    for (sm::Index i = 0; i < 20; ++i) ASSERT_EQ(r.spikes.values().value()[i], seq.values().value()[t * 20 + i]);
    state = r.state;
  }
}

TEST(LifSequence, OutputIsBinaryOnRandomInput) {
  std::mt19937_64 rng(13);
  auto s = sm::lif_sequence(testing_support::random_values<float>({4, 8, 8}, rng, -3, 3), sm::LifParams{});
  EXPECT_TRUE(sm::is_binary(s.values().value()));
}

TEST(LifSequence, RaisingThresholdNeverAddsSpikes) {
  std::mt19937_64 rng(14);
  auto x = testing_support::random_values<double>({8, 50}, rng, -0.5, 2.0);
  sm::Index prev = std::numeric_limits<sm::Index>::max();
  for (double th : {0.2, 0.5, 0.9, 1.3, 2.0, 3.5}) {
    sm::LifParams p;
    p.u_th = th;
    const sm::Index n = sm::lif_sequence(x, p).count();
    EXPECT_LE(n, prev) << "u_th " << th;
    prev = n;
  }
}

TEST(Surrogate, DerivativeIsSlopeOfStep) {
  for (auto kind : {sm::SurrogateKind::kArctan, sm::SurrogateKind::kRectangular}) {
    sm::LifParams p;
    p.surrogate = kind;
    p.surrogate_width = 0.7;
    for (double x : {-1.3, -0.2, 0.05, 0.31, 2.0}) {
      const double fd = (sm::surrogate_step(p, x + 1e-7) - sm::surrogate_step(p, x - 1e-7)) / 2e-7;
      EXPECT_NEAR(sm::surrogate_derivative(p, x), fd, 1e-6) << x;
    }
  }
}

class ShadowGradient : public ::testing::TestWithParam<double> {};

TEST_P(ShadowGradient, LifStepMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  sm::LifParams p;
  p.surrogate = sm::SurrogateKind::kArctan;
  p.v_reset = GetParam();
  auto x = testing_support::random_parameter<double>({3, 4}, rng, -0.5, 1.5);
  auto h = testing_support::random_parameter<double>({3, 4}, rng, -0.5, 1.0);
  auto w = testing_support::random_values<double>({3, 4}, rng);
  sm::SurrogateForwardScope shadow;
  auto loss = [&] {
    auto r = sm::lif_step(x, sm::LifState<double>{h}, p);
    return sm::add(sm::sum_all(sm::mul(r.spikes.values(), w)), sm::sum_all(sm::mul(r.state.h, r.u)));
  };
  auto res = oracle::check_gradients({x, h}, loss);
  EXPECT_LT(res.worst_error, 1e-3) << res.worst_at;
}

TEST_P(ShadowGradient, LifSequenceMatchesFiniteDifferences) {
  std::mt19937_64 rng(16);
  sm::LifParams p;
  p.surrogate = sm::SurrogateKind::kArctan;
  p.v_reset = GetParam();
  auto x = testing_support::random_parameter<double>({4, 3, 2}, rng, -0.5, 1.5);
  auto w = testing_support::random_values<double>({4, 3, 2}, rng);
  sm::SurrogateForwardScope shadow;
  auto loss = [&] { return sm::sum_all(sm::mul(sm::lif_sequence(x, p).values(), w)); };
  auto res = oracle::check_gradients({x}, loss);
  EXPECT_LT(res.worst_error, 1e-3) << res.worst_at;
}

INSTANTIATE_TEST_SUITE_P(ResetLevels, ShadowGradient, ::testing::Values(0.0, -0.3));
