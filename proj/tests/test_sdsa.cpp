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

#include <algorithm>

#include "oracles/finite_diff.hpp"
#include "spikemoe/sdsa.hpp"
#include "test_support.hpp"

namespace sm = spikemoe;
using sm::Array;
using sm::SpikeTensor;
using sm::Var;
using testing_support::random_spikes;

namespace {

template <typename S>
sm::SdsaLayer<S> make_layer(sm::Index dim, sm::Index heads, std::mt19937_64& rng, double gain = 1.5) {
  sm::LifParams lif;
  auto layer = sm::SdsaLayer<S>::create(dim, heads, lif, gain, rng);
  // Non-zero biases so that bias handling is exercised.
  for (auto* lin : {&layer.q, &layer.k, &layer.v, &layer.out}) {
    for (sm::Index i = 0; i < lin->bias.size(); ++i)
      lin->bias.mutable_value()[i] = static_cast<S>(std::uniform_real_distribution<double>(-0.3, 0.6)(rng));
  }
  return layer;
}

}  // namespace

TEST(SpikeLinear, ZeroSpikesZeroBiasGiveZero) {
  std::mt19937_64 rng(1);
  auto lin = sm::SpikeLinear<float>::create(6, 5, {}, 1.0, rng);
  EXPECT_EQ(sm::spike_linear(SpikeTensor<float>::zeros({3, 2, 6}), lin).count(), 0);
}

TEST(SpikeLinear, IdentityWeightsReproduceOneHot) {
  std::mt19937_64 rng(2);
  sm::LifParams p;
  p.u_th = 0.5;
  auto lin = sm::SpikeLinear<double>::create(4, 4, p, 1.0, rng);
  lin.weight.mutable_value().setZero();
  for (int i = 0; i < 4; ++i) lin.weight.mutable_value()[i * 4 + i] = 1;
  Array<double> one_hot = Array<double>::Zero(3 * 4);
  for (int t = 0; t < 3; ++t) one_hot[t * 4 + 2] = 1;
  SpikeTensor<double> s(Var<double>::constant({3, 1, 4}, one_hot));
  auto out = sm::spike_linear(s, lin);
  EXPECT_TRUE((out.values().value() == one_hot).all());
}

TEST(SpikeLinear, BinaryOnRandomInput) {
  std::mt19937_64 rng(3);
  auto lin = sm::SpikeLinear<float>::create(16, 12, {}, 2.0, rng);
  auto out = sm::spike_linear(random_spikes<float>({4, 3, 16}, rng, 0.5), lin);
  EXPECT_TRUE(sm::is_binary(out.values().value()));
  EXPECT_GT(out.count(), 0);
}

TEST(SpikeLinear, ShapeMismatchIsDimensionError) {
  std::mt19937_64 rng(4);
  auto lin = sm::SpikeLinear<float>::create(6, 5, {}, 1.0, rng);
  EXPECT_THROW(sm::spike_linear(SpikeTensor<float>::zeros({3, 2, 7}), lin), sm::DimensionError);
}

TEST(SpikeMatmul, MatchesAccumulationOracle) {
  std::mt19937_64 rng(5);
  auto w = testing_support::random_parameter<float>({9, 7}, rng);
  auto b = testing_support::random_parameter<float>({7}, rng);
  auto s = random_spikes<float>({3, 4, 9}, rng, 0.4);
  auto got = sm::spike_matmul(s, w, b);
  auto ref = oracle::accumulate(testing_support::to_seq(s), w, b);
  EXPECT_TRUE(testing_support::bit_equal(got.value(), ref.v));
}

TEST(SpikeTensor, NonBinaryValuesRejected) {
  EXPECT_THROW(SpikeTensor<float>(Var<float>::full({2}, 0.5f)), sm::ContractError);
}

TEST(HeadChannelSum, HandExample) {
  Array<float> q(2), k(2);
  q << 1, 1;
  k << 1, 0;
  auto a = sm::head_channel_sum(SpikeTensor<float>(Var<float>::constant({1, 1, 1, 2}, q)),
                                SpikeTensor<float>(Var<float>::constant({1, 1, 1, 2}, k)), 1);
  EXPECT_EQ(a.item(), 1.0f);
}

TEST(HeadChannelSum, BitwiseEqualsArithmetic) {
  std::mt19937_64 rng(6);
  // Wide heads cross 64-bit word boundaries.
  for (sm::Index dim : {16, 96, 200}) {
    const sm::Index heads = dim == 200 ? 5 : 2;
    auto q = random_spikes<float>({2, 3, 5, dim}, rng, 0.5);
    auto k = random_spikes<float>({2, 3, 5, dim}, rng, 0.5);
    auto a = sm::head_channel_sum(q, k, heads);
    const sm::Index hd = dim / heads;
    for (sm::Index r = 0; r < 30; ++r) {
      for (sm::Index h = 0; h < heads; ++h) {
        float ref = 0;
        for (sm::Index c = 0; c < hd; ++c)
          ref += q.values().value()[r * dim + h * hd + c] * k.values().value()[r * dim + h * hd + c];
        ASSERT_EQ(a.value()[r * heads + h], ref);
      }
    }
  }
}

TEST(Sdsa, ZeroQueryGivesZeroOutput) {
  std::mt19937_64 rng(7);
  auto layer = sm::SdsaLayer<float>::create(8, 2, {}, 1.0, rng);
  layer.q.weight.mutable_value().setZero();
  auto out = sm::sdsa(random_spikes<float>({2, 1, 4, 8}, rng, 0.5), layer);
  EXPECT_EQ(out.count(), 0);
}

TEST(Sdsa, NonBinaryInputIsContractError) {
  std::mt19937_64 rng(8);
  auto layer = sm::SdsaLayer<float>::create(8, 2, {}, 1.0, rng);
  auto bad = SpikeTensor<float>::adopt(Var<float>::full({1, 1, 2, 8}, 0.5f));
  EXPECT_THROW(sm::sdsa(bad, layer), sm::ContractError);
}

TEST(Sdsa, HeadsMustDivideDim) {
  std::mt19937_64 rng(9);
  EXPECT_THROW(sm::SdsaLayer<float>::create(10, 3, {}, 1.0, rng), sm::ContractError);
}

TEST(Sdsa, MatchesMaterializedReferenceBitExact) {
  std::mt19937_64 rng(10);
  sm::Index fired = 0, gated = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const sm::Index t = 1 + trial % 2, b = 1 + (trial / 2) % 2, n = 1 + trial % 8;
    const sm::Index heads = 1 + trial % 2;
    const sm::Index d = heads * (4 + 2 * (trial % 3));
    auto layer = make_layer<float>(d, heads, rng);
    auto s = random_spikes<float>({t, b, n, d}, rng, 0.25 + 0.05 * (trial % 7));
    auto got_u = sm::sdsa_membrane(s, layer);
    auto got = sm::sdsa(s, layer);
    auto ref = oracle::sdsa(testing_support::to_seq(s), layer);
    ASSERT_TRUE(testing_support::bit_equal(got_u.value(), ref.membrane.v)) << "trial " << trial;
    auto ref_out = oracle::lif(ref.membrane, layer.out.lif);
    fired += got.count();
    for (float g : ref.g.v) gated += g != 0;
    ASSERT_TRUE(testing_support::bit_equal(got.values().value(), ref_out.v)) << "trial " << trial;
  }
  EXPECT_GT(fired, 0);
  EXPECT_GT(gated, 0);
}

TEST(Sdsa, GraphHasNoTokenByTokenNode) {
  std::mt19937_64 rng(11);
  const sm::Index n = 8;
  auto layer = make_layer<float>(16, 2, rng);
  auto out = sm::sdsa(random_spikes<float>({2, 2, n, 16}, rng, 0.4), layer);
  sm::Index nodes = 0;
  sm::visit_graph<float>(sm::sum_all(out.values()), [&](const sm::Node<float>& node) {
    ++nodes;
    const auto& s = node.shape;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) EXPECT_FALSE(s[i] == n && s[i + 1] == n) << node.op;
    EXPECT_LE(static_cast<sm::Index>(node.value.size()), 2 * 2 * n * 16 + 256) << node.op;
  });
  EXPECT_GT(nodes, 10);
}

TEST(Sdsa, TokenPermutationEquivariance) {
  std::mt19937_64 rng(12);
  auto layer = make_layer<float>(16, 4, rng);
  auto s = random_spikes<float>({3, 1, 6, 16}, rng, 0.4);
  std::vector<sm::Index> perm{3, 0, 5, 1, 4, 2};
  SpikeTensor<float> permuted(sm::index_select(s.values(), 2, std::span<const sm::Index>(perm)));
  auto a = sm::index_select(sm::sdsa(s, layer).values(), 2, std::span<const sm::Index>(perm));
  auto b = sm::sdsa(permuted, layer).values();
  EXPECT_TRUE((a.value() == b.value()).all());
}

TEST(CountSdsaOps, MatchesInstrumentedReference) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    auto layer = make_layer<float>(16, 2, rng);
    auto s = random_spikes<float>({2, 2, 5, 16}, rng, 0.3);
    auto ledger = sm::count_sdsa_ops(s, layer);
    oracle::Ledger ref;
    auto tr = oracle::sdsa(testing_support::to_seq(s), layer, &ref);
    oracle::count_neurons(&ref, "out", tr.membrane);
    EXPECT_EQ(ledger.sites(), ref.sites) << "trial " << trial;
    EXPECT_EQ(ledger.total().mac, 0u);
    for (const auto& [site, steps] : ledger.sites())
      for (const auto& c : steps) EXPECT_LE(c.ac, c.theoretical_ac) << site;
  }
}

TEST(CountSdsaOps, OneSpikeIntoWidthFourLayer) {
  std::mt19937_64 rng(14);
  auto layer = sm::SdsaLayer<float>::create(4, 1, {}, 1.0, rng);
  Array<float> v = Array<float>::Zero(4);
  v[1] = 1;
  auto ledger = sm::count_sdsa_ops(SpikeTensor<float>(Var<float>::constant({1, 1, 1, 4}, v)), layer);
  EXPECT_EQ(ledger.site_total("q").ac, 4u);
  EXPECT_EQ(ledger.site_total("k").ac, 4u);
  EXPECT_EQ(ledger.site_total("v").ac, 4u);
}

TEST(ShadowGradient, SpikeLinear) {
  std::mt19937_64 rng(15);
  sm::LifParams p;
  p.surrogate = sm::SurrogateKind::kArctan;
  auto lin = sm::SpikeLinear<double>::create(8, 8, p, 1.5, rng);
  auto s = random_spikes<double>({2, 1, 4, 8}, rng, 0.5);
  auto w = testing_support::random_values<double>({2, 1, 4, 8}, rng);
  sm::SurrogateForwardScope shadow;
  auto res = oracle::check_gradients({lin.weight, lin.bias},
                                     [&] { return sm::sum_all(sm::mul(sm::spike_linear(s, lin).values(), w)); });
  EXPECT_LT(res.worst_error, 1e-3) << res.worst_at;
}

TEST(ShadowGradient, Sdsa) {
  std::mt19937_64 rng(16);
  sm::LifParams p;
  p.surrogate = sm::SurrogateKind::kArctan;
  auto layer = sm::SdsaLayer<double>::create(8, 2, p, 1.5, rng);
  auto s = random_spikes<double>({2, 1, 4, 8}, rng, 0.5);
  auto w = testing_support::random_values<double>({2, 1, 4, 8}, rng);
  sm::SurrogateForwardScope shadow;
  auto res = oracle::check_gradients(
      {layer.q.weight, layer.q.bias, layer.k.weight, layer.v.weight, layer.out.weight, layer.out.bias},
      [&] { return sm::sum_all(sm::mul(sm::sdsa(s, layer).values(), w)); });
  EXPECT_LT(res.worst_error, 1e-3) << res.worst_at;
}
