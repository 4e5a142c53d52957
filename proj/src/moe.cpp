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

#include "spikemoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace spikemoe {

template <typename Scalar>
ExpertMlp<Scalar> ExpertMlp<Scalar>::create(Index dim, Index hidden, const LifParams& lif, double gain,
                                            std::mt19937_64& rng) {
  ExpertMlp e;
  e.fc1 = SpikeLinear<Scalar>::create(dim, hidden, lif, gain, rng);
  e.w2 = init_weight<Scalar>(hidden, dim, gain, rng);
  e.b2 = Var<Scalar>::parameter({dim}, Array<Scalar>::Zero(dim));
  return e;
}

template <typename Scalar>
MoeLayer<Scalar> MoeLayer<Scalar>::create(Index dim, Index hidden, Index num_experts, Index k, Index prompt_len,
                                          const LifParams& lif, double gain, std::mt19937_64& rng,
                                          std::shared_ptr<ExpertMlp<Scalar>> shared) {
  if (num_experts < 1 || k < 1 || k > num_experts) {
    throw ContractError("MoE needs 1 <= k <= K, got k=" + std::to_string(k) + " K=" + std::to_string(num_experts));
  }
  MoeLayer layer;
  const Index unique = shared ? num_experts - 1 : num_experts;
  for (Index e = 0; e < unique; ++e) {
    layer.experts.push_back(std::make_shared<ExpertMlp<Scalar>>(ExpertMlp<Scalar>::create(dim, hidden, lif, gain, rng)));
  }
  if (shared) {
    if (shared->dim() != dim) throw DimensionError("shared expert dim does not match layer dim");
    layer.shared_index = num_experts - 1;
    layer.experts.push_back(std::move(shared));
  }
  layer.k = k;
  layer.gate_weight_tokens = init_weight<Scalar>(dim, num_experts, gain, rng);
  layer.gate_weight_prompt = init_weight<Scalar>(prompt_len * dim, num_experts, gain, rng);
  layer.gate_bias = Var<Scalar>::parameter({num_experts}, Array<Scalar>::Zero(num_experts));
  layer.gate_lif = lif;
  layer.out_lif = lif;
  std::normal_distribution<double> normal(0.0, 0.02);
  Array<Scalar> p(prompt_len * dim);
  for (Index i = 0; i < p.size(); ++i) p[i] = static_cast<Scalar>(normal(rng));
  layer.prompt.p = Var<Scalar>::parameter({prompt_len, dim}, std::move(p));
  return layer;
}

template <typename Scalar>
GateResult<Scalar> gate(const SpikeTensor<Scalar>& s_l, const SdPrompt<Scalar>& prompt, const MoeLayer<Scalar>& layer,
                        ForwardContext* ctx) {
  if (s_l.shape().size() != 4) throw DimensionError("gate expects (T, B, N, D) spikes, got " + to_string(s_l.shape()));
  if (prompt.p.size() != layer.gate_weight_prompt.dim(0)) {
    throw DimensionError("prompt " + to_string(prompt.p.shape()) + " does not match gate prompt weights " +
                         to_string(layer.gate_weight_prompt.shape()));
  }
  const Index steps = s_l.dim(0);
  const Index tokens = s_l.dim(1) * s_l.dim(2);
  const Index experts = layer.num_experts();

  // [S; P] W = S W_s + P W_p; the prompt half is token-independent.
  count_accumulate(ctx, "gate", s_l, experts);
  Var<Scalar> membrane = spike_matmul(s_l, layer.gate_weight_tokens, layer.gate_bias);
  Var<Scalar> prompt_term = reshape(matmul(reshape(prompt.p, {1, prompt.p.size()}), layer.gate_weight_prompt), {experts});
  membrane = add(membrane, prompt_term);
  count_neurons(ctx, "gate", membrane.shape());
  SpikeTensor<Scalar> g = spike_norm(membrane, layer.gate_lif);

  RoutingRecord<Scalar> record;
  record.num_tokens = tokens;
  record.num_experts = experts;
  record.timesteps = steps;
  record.gate_counts = reshape(sum(g.values(), 0), {tokens, experts});
  return {std::move(g), std::move(record)};
}

template <typename Scalar>
RoutingRecord<Scalar> select_topk(const RoutingRecord<Scalar>& record, Index k, Index forced_expert) {
  const Index experts = record.num_experts;
  if (k < 1 || k > experts) {
    throw ContractError("top-k with k=" + std::to_string(k) + " over " + std::to_string(experts) + " experts");
  }
  if (!record.gate_counts.defined()) throw ContractError("select_topk needs populated gate counts");
  if (forced_expert >= experts) throw ContractError("forced expert index out of range");
  RoutingRecord<Scalar> out = record;
  out.k = k;
  out.selected.assign(static_cast<std::size_t>(record.num_tokens * k), 0);
  out.loads.assign(static_cast<std::size_t>(experts), 0);
  out.routable.assign(static_cast<std::size_t>(experts), true);
  if (forced_expert >= 0) out.routable[static_cast<std::size_t>(forced_expert)] = false;

  const auto& counts = record.gate_counts.value();
  std::vector<int> order(static_cast<std::size_t>(experts));
  for (Index n = 0; n < record.num_tokens; ++n) {
    const Scalar* row = counts.data() + n * experts;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      const bool fa = a == forced_expert;
      const bool fb = b == forced_expert;
      if (fa != fb) return fa;
      return row[a] > row[b];
    });
    for (Index j = 0; j < k; ++j) {
      const int e = order[static_cast<std::size_t>(j)];
      out.selected[static_cast<std::size_t>(n * k + j)] = e;
      ++out.loads[static_cast<std::size_t>(e)];
    }
  }
  out.n_routed = std::count(out.routable.begin(), out.routable.end(), true);
  return out;
}

template <typename Scalar>
Var<Scalar> expert_forward(const SpikeTensor<Scalar>& s, const ExpertMlp<Scalar>& expert, ForwardContext* ctx,
                           std::string_view site) {
  if (s.shape().empty() || s.shape().back() != expert.dim()) {
    throw DimensionError("expert input " + to_string(s.shape()) + " does not match expert dim " +
                         std::to_string(expert.dim()));
  }
  const std::string base(site);
  const SpikeTensor<Scalar> hidden = spike_linear(s, expert.fc1, ctx, base.empty() ? "fc1" : base + ".fc1");
  count_accumulate(ctx, base.empty() ? "fc2" : base + ".fc2", hidden, expert.dim());
  return spike_matmul(hidden, expert.w2, expert.b2);
}

template <typename Scalar>
Scalar balance_loss(const RoutingRecord<Scalar>& record) {
  if (record.loads.empty() || record.n_routed < 1) throw ContractError("balance loss needs a populated record");
  Scalar total = 0;
  for (std::size_t e = 0; e < record.loads.size(); ++e) {
    if (record.routable[e]) total += static_cast<Scalar>(record.loads[e]);
  }
  const Scalar denom = total + Scalar(1e-8);
  const Scalar target = Scalar(1) / static_cast<Scalar>(record.n_routed);
  Scalar sq = 0;
  for (std::size_t e = 0; e < record.loads.size(); ++e) {
    if (!record.routable[e]) continue;
    const Scalar d = static_cast<Scalar>(record.loads[e]) / denom - target;
    sq += d * d;
  }
  const Scalar mse = sq / static_cast<Scalar>(record.n_routed);
  return static_cast<Scalar>(record.n_routed) * mse;
}

template <typename Scalar>
Var<Scalar> importance_loss(const RoutingRecord<Scalar>& record) {
  if (record.n_routed <= 1 || !record.gate_counts.defined()) return Var<Scalar>::scalar(0);
  Array<Scalar> keep(record.num_experts);
  for (Index e = 0; e < record.num_experts; ++e) keep[e] = record.routable[static_cast<std::size_t>(e)] ? 1 : 0;
  // Mean firing rate of each expert's gate over tokens and time.
  Var<Scalar> rate = scale(mean(record.gate_counts, 0), Scalar(1) / static_cast<Scalar>(record.timesteps));
  rate = mask(rate, keep);
  const Scalar mass = rate.value().sum();
  if (!(mass > Scalar(0))) return Var<Scalar>::scalar(0);
  Var<Scalar> p = div(rate, add_scalar(sum_all(rate), Scalar(1e-8)));
  Var<Scalar> entropy = scale(sum_all(mul(p, log(add_scalar(p, Scalar(1e-8))))), Scalar(-1));
  return scale(entropy, Scalar(1) / static_cast<Scalar>(std::log(static_cast<double>(record.n_routed))));
}

template <typename Scalar>
Var<Scalar> aux_loss(const RoutingRecord<Scalar>& record, double alpha) {
  if (record.num_tokens == 0 || record.loads.empty()) throw ContractError("aux loss needs a non-empty record");
  const Var<Scalar> balance = Var<Scalar>::scalar(balance_loss(record));
  return scale(sub(balance, importance_loss(record)), static_cast<Scalar>(alpha));
}

template <typename Scalar>
MoeOutput<Scalar> moe_forward(const SpikeTensor<Scalar>& s_l, const MoeLayer<Scalar>& layer, ForwardContext* ctx) {
  if (s_l.shape().size() != 4 || s_l.dim(3) != layer.dim()) {
    throw DimensionError("moe input " + to_string(s_l.shape()) + " does not match layer dim " +
                         std::to_string(layer.dim()));
  }
  const Index steps = s_l.dim(0);
  const Index tokens = s_l.dim(1) * s_l.dim(2);
  const Index dim = s_l.dim(3);
  const Index experts = layer.num_experts();

  GateResult<Scalar> gated = gate(s_l, layer.prompt, layer, ctx);
  RoutingRecord<Scalar> record =
      select_topk(gated.record, layer.k, layer.force_shared ? layer.shared_index : Index{-1});

  std::vector<std::vector<Index>> routed(static_cast<std::size_t>(experts));
  for (Index n = 0; n < tokens; ++n) {
    for (int e : record.selection(n)) routed[static_cast<std::size_t>(e)].push_back(n);
  }

  const Shape flat{steps, tokens, dim};
  const Var<Scalar> s_flat = reshape(s_l.values(), flat);
  std::vector<ScatterPiece<Scalar>> pieces;
  for (Index e = 0; e < experts; ++e) {
    auto& idx = routed[static_cast<std::size_t>(e)];
    if (idx.empty()) continue;
    const auto xs = SpikeTensor<Scalar>::adopt(index_select(s_flat, 1, std::span<const Index>(idx)));
    Var<Scalar> y = expert_forward(xs, *layer.experts[static_cast<std::size_t>(e)], ctx, "expert" + std::to_string(e));
    if (ctx && ctx->expert_calls) {
      auto& log = *ctx->expert_calls;
      if (static_cast<Index>(log.per_expert_rows.size()) < experts) log.per_expert_rows.resize(experts, 0);
      log.per_expert_rows[static_cast<std::size_t>(e)] += idx.size();
      for (Index n : idx) log.token_expert_pairs.emplace_back(n, static_cast<int>(e));
      ++log.invocations;
    }
    pieces.push_back({std::move(y), std::move(idx)});
  }

  Var<Scalar> combined = scale(index_add(flat, 1, pieces), Scalar(1) / static_cast<Scalar>(layer.k));
  count_neurons(ctx, "combine", flat);
  count_accumulate(ctx, "residual", s_l, 1);
  Var<Scalar> membrane = reshape(add(combined, s_flat), s_l.shape());
  count_neurons(ctx, "out", membrane.shape());
  SpikeTensor<Scalar> out = spike_norm(membrane, layer.out_lif);
  Var<Scalar> aux = aux_loss(record, layer.alpha_aux);
  return {std::move(out), std::move(record), std::move(aux)};
}

double load_entropy(std::span<const std::int64_t> loads) {
  double total = 0;
  for (auto c : loads) total += static_cast<double>(c);
  if (total <= 0) return 0.0;
  double h = 0;
  for (auto c : loads) {
    if (c <= 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h;
}

#define SPIKEMOE_INSTANTIATE_MOE(S)                                                                                 \
  template struct ExpertMlp<S>;                                                                                     \
  template struct MoeLayer<S>;                                                                                      \
  template GateResult<S> gate<S>(const SpikeTensor<S>&, const SdPrompt<S>&, const MoeLayer<S>&, ForwardContext*);   \
  template RoutingRecord<S> select_topk<S>(const RoutingRecord<S>&, Index, Index);                                  \
  template Var<S> expert_forward<S>(const SpikeTensor<S>&, const ExpertMlp<S>&, ForwardContext*, std::string_view); \
  template S balance_loss<S>(const RoutingRecord<S>&);                                                              \
  template Var<S> importance_loss<S>(const RoutingRecord<S>&);                                                      \
  template Var<S> aux_loss<S>(const RoutingRecord<S>&, double);                                                     \
  template MoeOutput<S> moe_forward<S>(const SpikeTensor<S>&, const MoeLayer<S>&, ForwardContext*);

SPIKEMOE_INSTANTIATE_MOE(float)
SPIKEMOE_INSTANTIATE_MOE(double)

}  // namespace spikemoe
