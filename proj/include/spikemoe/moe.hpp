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

// Spiking mixture-of-experts block with prompt-conditioned spike gating.
//
//   G          = SN(Linear_spike([S; P]))            (T, B, N, K) binary
//   selected_n = top-k over experts of sum_t G[t, n, :]
//   U_n        = (1/k) sum_{e in selected_n} Expert_e(S_n)
//   out        = SN(U + S)                            membrane shortcut
//
// Only selected (token, expert) pairs are evaluated.

#pragma once

#include <memory>
#include <random>
#include <vector>

#include "spikemoe/linear.hpp"

namespace spikemoe {

/// Two-layer spike MLP: SN(s W1 + b1) W2 + b2, returning the real-valued
/// membrane contribution.
template <typename Scalar>
struct ExpertMlp {
  SpikeLinear<Scalar> fc1;
  Var<Scalar> w2;  // (hidden, D)
  Var<Scalar> b2;  // (D)

  static ExpertMlp create(Index dim, Index hidden, const LifParams& lif, double gain, std::mt19937_64& rng);
  Index dim() const { return fc1.in_features(); }
  Index hidden() const { return fc1.out_features(); }
};

template <typename Scalar>
struct SdPrompt {
  Var<Scalar> p;  // (P_len, P_dim)
};

template <typename Scalar>
struct MoeLayer {
  std::vector<std::shared_ptr<ExpertMlp<Scalar>>> experts;
  Index shared_index = -1;  // expert slot backed by the cross-layer expert
  Index k = 2;
  Var<Scalar> gate_weight_tokens;  // (D, K)
  Var<Scalar> gate_weight_prompt;  // (P_len * P_dim, K)
  Var<Scalar> gate_bias;           // (K)
  LifParams gate_lif;
  LifParams out_lif;
  SdPrompt<Scalar> prompt;
  bool force_shared = false;  // shared expert joins every token's selection
  double alpha_aux = 0.1;

  /// `shared` (may be null) occupies the last expert slot.
  static MoeLayer create(Index dim, Index hidden, Index num_experts, Index k, Index prompt_len,
                         const LifParams& lif, double gain, std::mt19937_64& rng,
                         std::shared_ptr<ExpertMlp<Scalar>> shared);
  Index num_experts() const { return static_cast<Index>(experts.size()); }
  Index dim() const { return gate_weight_tokens.dim(0); }
};

template <typename Scalar>
struct RoutingRecord {
  Index num_tokens = 0;
  Index num_experts = 0;
  Index timesteps = 0;
  Index k = 0;
  std::vector<int> selected;          // num_tokens * k, best first
  Var<Scalar> gate_counts;            // (num_tokens, K): sum_t G, tape-linked
  std::vector<std::int64_t> loads;    // c_k
  std::vector<bool> routable;         // experts eligible for balancing
  Index n_routed = 0;

  std::span<const int> selection(Index token) const {
    return {selected.data() + token * k, static_cast<std::size_t>(k)};
  }
};

template <typename Scalar>
struct GateResult {
  SpikeTensor<Scalar> g;
  RoutingRecord<Scalar> record;  // gate_counts populated, nothing selected yet
};

template <typename Scalar>
GateResult<Scalar> gate(const SpikeTensor<Scalar>& s_l, const SdPrompt<Scalar>& prompt, const MoeLayer<Scalar>& layer,
                        ForwardContext* ctx = nullptr);

/// Top-k experts per token by accumulated gate count; ties go to the lower
/// index. `forced_expert` >= 0 is always selected and excluded from balancing.
template <typename Scalar>
RoutingRecord<Scalar> select_topk(const RoutingRecord<Scalar>& record, Index k, Index forced_expert = -1);

template <typename Scalar>
Var<Scalar> expert_forward(const SpikeTensor<Scalar>& s, const ExpertMlp<Scalar>& expert,
                           ForwardContext* ctx = nullptr, std::string_view site = {});

/// L_balance = n_routed * MSE(u, 1/n_routed) over routable experts with
/// u_k = c_k / (sum_j c_j + 1e-8). Value only; loads carry no gradient.
template <typename Scalar>
Scalar balance_loss(const RoutingRecord<Scalar>& record);

/// Normalized entropy of the mean gate firing rate over experts,
/// H(p) / log(n_routed). Differentiable through gate_counts.
template <typename Scalar>
Var<Scalar> importance_loss(const RoutingRecord<Scalar>& record);

/// alpha * (L_balance - L_importance).
template <typename Scalar>
Var<Scalar> aux_loss(const RoutingRecord<Scalar>& record, double alpha);

template <typename Scalar>
struct MoeOutput {
  SpikeTensor<Scalar> out;
  RoutingRecord<Scalar> record;
  Var<Scalar> aux;
};

template <typename Scalar>
MoeOutput<Scalar> moe_forward(const SpikeTensor<Scalar>& s_l, const MoeLayer<Scalar>& layer,
                              ForwardContext* ctx = nullptr);

/// Entropy (nats) of a load vector normalized to a distribution; 0 if empty.
double load_entropy(std::span<const std::int64_t> loads);

}  // namespace spikemoe
