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

#include <cmath>
#include <set>

#include "oracles/finite_diff.hpp"
#include "spikemoe/model.hpp"
#include "spikemoe/train.hpp"
#include "test_support.hpp"

namespace sm = spikemoe;
using sm::Array;
using sm::Var;
using testing_support::tiny_config;

namespace {

void zero_biases(sm::SpikingMoeModel<float>& model) {
  for (auto& p : model.parameters()) {
    if (p.name.ends_with("bias") || p.name.ends_with(".beta")) p.var.mutable_value().setZero();
  }
}

Var<float> random_images(const sm::ModelConfig& cfg, sm::Index batch, std::mt19937_64& rng) {
  return testing_support::random_values<float>({batch, cfg.in_channels, cfg.image_size, cfg.image_size}, rng, 0, 1);
}

}  // namespace

TEST(ModelConfig, InconsistentExtentsRejected) {
  auto cfg = tiny_config();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), sm::ContractError);
  cfg = tiny_config();
  cfg.top_k = 5;
  EXPECT_THROW(cfg.validate(), sm::ContractError);
  cfg = tiny_config();
  cfg.image_size = 10;
  EXPECT_THROW(cfg.validate(), sm::ContractError);
}

TEST(Forward, ZeroInputZeroBiasesGiveZeroLogits) {
  sm::SpikingMoeModel<float> model(tiny_config());
  zero_biases(model);
  auto out = model.forward(Var<float>::zeros({2, 3, 8, 8}));
  EXPECT_TRUE((out.logits.value() == 0).all());
}

TEST(Forward, BlockOutputsAreBinary) {
  auto cfg = tiny_config();
  cfg.layers = 2;
  sm::SpikingMoeModel<float> model(cfg);
  std::mt19937_64 rng(1);
  auto out = model.forward(random_images(cfg, 3, rng));
  ASSERT_EQ(out.block_outputs.size(), 5u);
  for (const auto& s : out.block_outputs) {
    EXPECT_EQ(s.shape(), (sm::Shape{2, 3, 4, 16}));
    EXPECT_TRUE(sm::is_binary(s.values().value()));
  }
}

TEST(Forward, LogitsAreMeanOfStepLogits) {
  auto cfg = tiny_config();
  cfg.timesteps = 4;
  sm::SpikingMoeModel<float> model(cfg);
  std::mt19937_64 rng(2);
  auto out = model.forward(random_images(cfg, 2, rng));
  ASSERT_EQ(out.step_logits.shape(), (sm::Shape{4, 2, 3}));
  for (sm::Index i = 0; i < 6; ++i) {
    double m = 0;
    for (sm::Index t = 0; t < 4; ++t) m += out.step_logits.value()[t * 6 + i];
    EXPECT_NEAR(out.logits.value()[i], m / 4, 1e-6);
  }
}

TEST(Forward, EventInput) {
  auto cfg = tiny_config();
  cfg.input = sm::InputKind::kEvents;
  cfg.in_channels = 2;
  cfg.timesteps = 3;
  sm::SpikingMoeModel<float> model(cfg);
  std::mt19937_64 rng(3);
  auto frames = testing_support::random_spikes<float>({3, 2, 2, 8, 8}, rng, 0.2);
  auto out = model.forward(frames.values());
  EXPECT_EQ(out.logits.shape(), (sm::Shape{2, 3}));
  EXPECT_THROW(model.forward(Var<float>::zeros({2, 2, 8, 8})), sm::DimensionError);
}

TEST(Forward, MismatchedTokensAreContractError) {
  sm::SpikingMoeModel<float> model(tiny_config());
  EXPECT_THROW(model.forward_tokens(sm::SpikeTensor<float>::zeros({2, 1, 4, 8})), sm::ContractError);
}

TEST(Forward, SilentExtraLayerLeavesLogitsUnchanged) {
  auto cfg = tiny_config();
  cfg.shared_expert = false;
  sm::SpikingMoeModel<float> one(cfg);
  cfg.layers = 2;
  sm::SpikingMoeModel<float> two(cfg);
  std::map<std::string, Var<float>> src;
  for (auto& p : one.parameters()) src[p.name] = p.var;
  for (auto& p : two.parameters()) {
    auto it = src.find(p.name);
    if (it != src.end()) p.var.mutable_value() = it->second.value();
    else p.var.mutable_value().setZero();
  }
  std::mt19937_64 rng(4);
  auto x = random_images(cfg, 3, rng);
  auto a = one.forward(x);
  auto b = two.forward(x);
  EXPECT_TRUE((a.logits.value() == b.logits.value()).all());
  EXPECT_TRUE((b.block_outputs[2].values().value() == b.block_outputs[4].values().value()).all());
}

TEST(Loss, TetEqualsMeanLogitAtOneTimestep) {
  auto cfg = tiny_config();
  cfg.timesteps = 1;
  sm::SpikingMoeModel<float> model(cfg);
  std::mt19937_64 rng(5);
  auto out = model.forward(random_images(cfg, 4, rng));
  const std::vector<int> labels{0, 2, 1, 1};
  cfg.loss = sm::LossMode::kMeanLogit;
  const float ce = sm::model_loss(out, labels, cfg).item();
  cfg.loss = sm::LossMode::kTet;
  EXPECT_EQ(sm::model_loss(out, labels, cfg).item(), ce);
}

TEST(Loss, TetIsMeanOfPerStepLosses) {
  auto cfg = tiny_config();
  cfg.timesteps = 3;
  cfg.loss = sm::LossMode::kTet;
  sm::SpikingMoeModel<float> model(cfg);
  std::mt19937_64 rng(6);
  auto out = model.forward(random_images(cfg, 2, rng));
  const std::vector<int> labels{2, 0};
  double expected = out.aux_total.item();
  for (sm::Index t = 0; t < 3; ++t) {
    const std::vector<sm::Index> at{t};
    auto lt = sm::reshape(sm::index_select(out.step_logits, 0, std::span<const sm::Index>(at)), {2, 3});
    expected += sm::smoothed_cross_entropy(lt, std::span<const int>(labels), 0.1f).item() / 3;
  }
  EXPECT_NEAR(sm::model_loss(out, labels, cfg).item(), expected, 1e-5);
}

TEST(Loss, LabelOutOfRange) {
  auto cfg = tiny_config();
  sm::SpikingMoeModel<float> model(cfg);
  auto out = model.forward(Var<float>::zeros({1, 3, 8, 8}));
  const std::vector<int> labels{3};
  EXPECT_THROW(sm::model_loss(out, labels, cfg), sm::ContractError);
}

TEST(Predict, ArgmaxWithLowestIndexTies) {
  Array<float> v(6);
  v << 0.1f, 0.9f, 0.5f, 0.5f, 0.5f, 0.5f;
  auto p = sm::predict(Var<float>::constant({2, 3}, v));
  EXPECT_EQ(p, (std::vector<int>{1, 0}));
}

TEST(Predict, MatchesLoopOracle) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> q(0, 4);  // coarse values create ties
  Array<float> v(50 * 7);
  for (sm::Index i = 0; i < v.size(); ++i) v[i] = static_cast<float>(q(rng));
  auto p = sm::predict(Var<float>::constant({50, 7}, v));
  for (sm::Index r = 0; r < 50; ++r) {
    int best = 0;
    for (int c = 1; c < 7; ++c)
      if (v[r * 7 + c] > v[r * 7 + best]) best = c;
    EXPECT_EQ(p[static_cast<std::size_t>(r)], best);
  }
}

TEST(Parameters, NamesUniqueAndSharedExpertListedOnce) {
  auto cfg = tiny_config();
  cfg.layers = 2;
  sm::SpikingMoeModel<float> model(cfg);
  std::set<std::string> names;
  std::set<const void*> nodes;
  for (auto& p : model.parameters()) {
    EXPECT_TRUE(names.insert(p.name).second) << p.name;
    EXPECT_TRUE(nodes.insert(p.var.node()).second) << p.name;
    EXPECT_EQ(p.decay, p.name.ends_with("weight") || p.name.ends_with("tokens") || p.name.ends_with("prompt_proj"))
        << p.name;
  }
  EXPECT_TRUE(names.count("layer0.moe.prompt"));
  EXPECT_TRUE(names.count("shared_expert.fc1.weight"));
  EXPECT_EQ(model.layers()[0].moe.experts[3].get(), model.layers()[1].moe.experts[3].get());
}

TEST(Gradients, PopulatedFiniteAndZeroForIdleExperts) {
  auto cfg = tiny_config();
  cfg.layers = 2;
  cfg.num_experts = 6;
  sm::SpikingMoeModel<float> model(cfg);
  std::mt19937_64 rng(8);
  sm::ForwardContext ctx;
  ctx.training = true;
  auto out = model.forward(random_images(cfg, 4, rng), &ctx);
  const std::vector<int> labels{0, 1, 2, 0};
  sm::backward(sm::model_loss(out, labels, cfg));
  std::set<std::string> idle;
  for (std::size_t l = 0; l < out.routing.size(); ++l)
    for (std::size_t e = 0; e < out.routing[l].loads.size(); ++e)
      if (out.routing[l].loads[e] == 0) idle.insert("layer" + std::to_string(l) + ".moe.expert" + std::to_string(e) + ".");
  EXPECT_FALSE(idle.empty());
  int populated = 0;
  for (auto& p : model.parameters()) {
    bool is_idle = false;
    for (const auto& prefix : idle) is_idle |= p.name.starts_with(prefix);
    if (is_idle) {
      EXPECT_TRUE(!p.var.has_grad() || (p.var.grad() == 0).all()) << p.name;
      continue;
    }
    ASSERT_TRUE(p.var.has_grad()) << p.name;
    EXPECT_TRUE(p.var.grad().allFinite()) << p.name;
    ++populated;
  }
  EXPECT_GT(populated, 30);
}

TEST(ShadowGradient, FullOneLayerModel) {
  sm::ModelConfig cfg = tiny_config();
  cfg.embed_dim = 8;
  cfg.expert_hidden = 16;
  cfg.lif.surrogate = sm::SurrogateKind::kArctan;
  sm::SpikingMoeModel<double> model(cfg);
  std::mt19937_64 rng(9);
  auto x = testing_support::random_values<double>({2, 3, 8, 8}, rng, 0, 1);
  const std::vector<int> labels{1, 2};
  std::vector<Var<double>> params;
  for (auto& p : model.parameters()) params.push_back(p.var);
  sm::SurrogateForwardScope shadow;
  auto res = oracle::check_gradients(params, [&] { return sm::model_loss(model.forward(x), labels, cfg); }, 1e-6, 6);
  EXPECT_LT(res.worst_error, 1e-3) << res.worst_at;
}

TEST(SharedExpert, OneStepUpdatesEveryLayerIdentically) {
  auto cfg = tiny_config();
  cfg.layers = 2;
  sm::SpikingMoeModel<float> model(cfg);
  auto& shared = *model.shared_expert();
  const Array<float> before = shared.fc1.weight.value();
  std::mt19937_64 rng(10);
  auto out = model.forward(random_images(cfg, 4, rng));
  sm::backward(sm::model_loss(out, std::vector<int>{0, 1, 2, 1}, cfg));
  auto params = model.parameters();
  sm::AdamState<float> state;
  sm::adamw_step(params, state, sm::OptimConfig{}, 1e-2);
  const auto& a = *model.layers()[0].moe.experts[3];
  const auto& b = *model.layers()[1].moe.experts[3];
  EXPECT_FALSE((a.fc1.weight.value() == before).all());
  EXPECT_TRUE((a.fc1.weight.value() == b.fc1.weight.value()).all());
  EXPECT_TRUE((a.w2.value() == b.w2.value()).all());
}
