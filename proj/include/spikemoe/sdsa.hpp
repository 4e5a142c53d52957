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

// Spike-driven self-attention.
//
// Per head h and token: a = popcount(Q_h AND K_h), g = SN(a), out = g * V_h.
// Everything is per token, so cost and memory are linear in the token count;
// no token-by-token score matrix is ever formed.

#pragma once

#include <random>

#include "spikemoe/linear.hpp"

namespace spikemoe {

template <typename Scalar>
struct SdsaLayer {
  SpikeLinear<Scalar> q;
  SpikeLinear<Scalar> k;
  SpikeLinear<Scalar> v;
  SpikeLinear<Scalar> out;
  LifParams lif_attn;
  Index heads = 1;

  /// Throws ContractError if dim is not divisible by heads.
  static SdsaLayer create(Index dim, Index heads, const LifParams& lif, double gain, std::mt19937_64& rng);
  Index dim() const { return q.in_features(); }
  Index head_dim() const { return dim() / heads; }
};

/// SUM_c(Q * K) within each head's channel slice: (..., D) x2 -> (..., heads).
/// Evaluated with AND + popcount on packed bits.
template <typename Scalar>
Var<Scalar> head_channel_sum(const SpikeTensor<Scalar>& q, const SpikeTensor<Scalar>& k, Index heads);

/// g (..., heads) broadcast over each head's channels, times v (..., D).
template <typename Scalar>
SpikeTensor<Scalar> head_gate(const SpikeTensor<Scalar>& g, const SpikeTensor<Scalar>& v, Index heads);

/// Membrane input of the output projection (before its SN).
template <typename Scalar>
Var<Scalar> sdsa_membrane(const SpikeTensor<Scalar>& s_in, const SdsaLayer<Scalar>& layer,
                          ForwardContext* ctx = nullptr);

/// Full block: SN of sdsa_membrane. Output is binary and shape-preserving.
template <typename Scalar>
SpikeTensor<Scalar> sdsa(const SpikeTensor<Scalar>& s_in, const SdsaLayer<Scalar>& layer,
                         ForwardContext* ctx = nullptr);

/// AC/MAC counts of one sdsa evaluation.
template <typename Scalar>
OpLedger count_sdsa_ops(const SpikeTensor<Scalar>& s_in, const SdsaLayer<Scalar>& layer);

}  // namespace spikemoe
