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

#include "oracles/instrumented_encoder.hpp"
#include "spikemoe/model.hpp"
#include "test_support.hpp"

namespace sm = spikemoe;
using sm::Var;
using testing_support::tiny_config;

namespace {

sm::ModelConfig toy_config() {
  auto cfg = tiny_config();
  cfg.layers = 2;
  cfg.embed_dim = 8;
  cfg.expert_hidden = 16;
  return cfg;
}

void dyadic_prompts(sm::SpikingMoeModel<float>& model, std::mt19937_64& rng) {
  for (auto& layer : model.layers()) {
    testing_support::make_dyadic(layer.moe.prompt.p, rng);
    testing_support::make_dyadic(layer.moe.gate_weight_prompt, rng);
  }
}

sm::OpLedger ledger_of_tokens(sm::SpikingMoeModel<float>& model, const sm::SpikeTensor<float>& s0) {
  sm::NoGradGuard no_grad;
  sm::OpLedger ledger;
  sm::ForwardContext ctx;
  ctx.ledger = &ledger;
  model.forward_tokens(s0, &ctx);
  return ledger;
}

}  // namespace

TEST(EnergyEstimate, LinearForm) {
  sm::OpLedger empty;
  EXPECT_EQ(sm::energy_estimate(empty), 0.0);
  sm::OpLedger ledger;
  ledger.add("x", 0, {.ac = 10});
  EXPECT_DOUBLE_EQ(sm::energy_estimate(ledger, 0.9, 4.6), 9.0);
  ledger.add("y", 1, {.mac = 2});
  EXPECT_DOUBLE_EQ(sm::energy_estimate(ledger, 0.9, 4.6), 9.0 + 9.2);
}

TEST(EnergyEstimate, NegativeCostIsContractError) {
  sm::OpLedger ledger;
  EXPECT_THROW(sm::energy_estimate(ledger, -0.1, 4.6), sm::ContractError);
  EXPECT_THROW(sm::energy_estimate(ledger, 0.9, -1), sm::ContractError);
}

TEST(OpLedger, PrefixTotals) {
  sm::OpLedger l;
  l.add("layer0.sdsa.q", 0, {.ac = 3});
  l.add("layer0.sdsa.q", 1, {.ac = 4});
  l.add("layer0.moe.gate", 0, {.ac = 5});
  l.add("layer10.moe.gate", 0, {.ac = 100});
  EXPECT_EQ(l.prefix_total("layer0").ac, 12u);
  EXPECT_EQ(l.prefix_total("layer0.sdsa").ac, 7u);
  EXPECT_EQ(l.prefix_at("layer0", 1).ac, 4u);
  EXPECT_EQ(l.total().ac, 112u);
}

TEST(Profile, OneSpikeIntoWidthFourLayer) {
  std::mt19937_64 rng(1);
  auto lin = sm::SpikeLinear<float>::create(6, 4, {}, 1.0, rng);
  sm::Array<float> v = sm::Array<float>::Zero(6);
  v[2] = 1;
  sm::OpLedger ledger;
  sm::ForwardContext ctx;
  ctx.ledger = &ledger;
  sm::spike_linear(sm::SpikeTensor<float>(Var<float>::constant({1, 1, 6}, v)), lin, &ctx, "fc");
  EXPECT_EQ(ledger.site_total("fc").ac, 4u);
  EXPECT_EQ(ledger.site_total("fc").mac, 0u);
}

TEST(Profile, SilentInteriorHasNoAccumulates) {
  sm::SpikingMoeModel<float> model(toy_config());
  auto ledger = ledger_of_tokens(model, sm::SpikeTensor<float>::zeros({2, 1, 4, 8}));
  for (const auto& site : sm::interior_sites(ledger)) EXPECT_EQ(ledger.site_total(site).ac, 0u) << site;
}

TEST(Profile, MatchesInstrumentedReferenceOnTwoTokenModel) {
  std::mt19937_64 rng(2);
  std::uint64_t deep_ac = 0;
  for (int trial = 0; trial < 25; ++trial) {
    auto cfg = toy_config();
    cfg.init_seed = static_cast<std::uint64_t>(trial);
    cfg.timesteps = 1 + trial % 3;
    cfg.force_shared = trial % 4 == 3;
    sm::SpikingMoeModel<float> model(cfg);
    dyadic_prompts(model, rng);
    auto s0 = testing_support::random_spikes<float>({cfg.timesteps, 1, 2, 8}, rng, 0.3 + 0.05 * (trial % 6));
    auto ledger = ledger_of_tokens(model, s0);
    auto ref = oracle::instrumented_encoder(model, testing_support::to_seq(s0), 1);
    EXPECT_EQ(ledger.sites(), ref.ledger.sites) << "trial " << trial;
    deep_ac += ledger.prefix_total("layer1.moe").ac;
    auto out = model.forward_tokens(s0);
    EXPECT_TRUE(testing_support::bit_equal(out.block_outputs.back().values().value(), ref.final_spikes.v));
  }
  EXPECT_GT(deep_ac, 0u);  // the comparison is not vacuous
}

TEST(Profile, InteriorIsMacFreeAndBounded) {
  auto cfg = toy_config();
  sm::SpikingMoeModel<float> model(cfg);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = testing_support::random_values<float>({2, 3, 8, 8}, rng, 0, 1);
    auto ledger = sm::profile_forward(model, x);
    for (const auto& site : sm::interior_sites(ledger)) EXPECT_EQ(ledger.site_total(site).mac, 0u) << site;
    for (const auto& [site, steps] : ledger.sites())
      for (const auto& c : steps) EXPECT_LE(c.ac, c.theoretical_ac) << site;
    EXPECT_GT(ledger.site_total("sps.conv").mac, 0u);
    EXPECT_GT(ledger.site_total("head").mac, 0u);
  }
}

TEST(Profile, BatchLedgerIsSumOfSampleLedgers) {
  auto cfg = toy_config();
  sm::SpikingMoeModel<float> model(cfg);
  std::mt19937_64 rng(4);
  auto x = testing_support::random_values<float>({3, 3, 8, 8}, rng, 0, 1);
  auto whole = sm::profile_forward(model, x);
  sm::OpLedger summed;
  for (sm::Index b = 0; b < 3; ++b) {
    const std::vector<sm::Index> at{b};
    summed.merge(sm::profile_forward(model, sm::index_select(x, 0, std::span<const sm::Index>(at))));
  }
  EXPECT_EQ(whole, summed);
}

TEST(Profile, FirstStageAccumulatesGrowWithInputDensity) {
  auto cfg = toy_config();
  sm::SpikingMoeModel<float> model(cfg);
  std::mt19937_64 rng(5);
  // Nested spike sets: each level keeps the previous spikes and adds more.
  std::vector<double> keys(2 * 4 * 8);
  for (auto& k : keys) k = std::uniform_real_distribution<double>(0, 1)(rng);
  std::uint64_t prev = 0;
  for (double density : {0.0, 0.1, 0.3, 0.5, 0.8, 1.0}) {
    sm::Array<float> v(static_cast<sm::Index>(keys.size()));
    for (std::size_t i = 0; i < keys.size(); ++i) v[static_cast<sm::Index>(i)] = keys[i] < density ? 1.0f : 0.0f;
    auto ledger = ledger_of_tokens(model, sm::SpikeTensor<float>(Var<float>::constant({2, 1, 4, 8}, v)));
    std::uint64_t first = 0;
    for (const char* site : {"layer0.sdsa.q", "layer0.sdsa.k", "layer0.sdsa.v", "layer0.sdsa.shortcut"})
      first += ledger.site_total(site).ac;
    EXPECT_GE(first, prev) << density;
    prev = first;
  }
}

TEST(Profile, SpikeDrivenCostBelowDenseEquivalent) {
  auto cfg = toy_config();
  sm::SpikingMoeModel<float> model(cfg);
  std::mt19937_64 rng(6);
  const sm::Index batch = 4;
  auto ledger = sm::profile_forward(model, testing_support::random_values<float>({batch, 3, 8, 8}, rng, 0, 1));
  // Same shapes with every synaptic operation a full-density multiply.
  const double d = static_cast<double>(cfg.embed_dim), h = static_cast<double>(cfg.hidden());
  const double positions = static_cast<double>(cfg.timesteps * batch * 4);
  const double per_layer = positions * (4 * d * d + 2 * d + d * cfg.num_experts + cfg.top_k * 2 * d * h + 2 * d);
  const double dense_mac = cfg.layers * per_layer + positions * d + ledger.site_total("sps.conv").mac +
                           ledger.site_total("head").mac;
  EXPECT_LT(sm::energy_estimate(ledger), 4.6 * dense_mac);
}
