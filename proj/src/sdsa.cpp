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

#include "spikemoe/sdsa.hpp"

namespace spikemoe {

template <typename Scalar>
SdsaLayer<Scalar> SdsaLayer<Scalar>::create(Index dim, Index heads, const LifParams& lif, double gain,
                                            std::mt19937_64& rng) {
  if (heads < 1 || dim % heads != 0) {
    throw ContractError("embedding dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                        " heads");
  }
  SdsaLayer layer;
  layer.q = SpikeLinear<Scalar>::create(dim, dim, lif, gain, rng);
  layer.k = SpikeLinear<Scalar>::create(dim, dim, lif, gain, rng);
  layer.v = SpikeLinear<Scalar>::create(dim, dim, lif, gain, rng);
  layer.out = SpikeLinear<Scalar>::create(dim, dim, lif, gain, rng);
  layer.lif_attn = lif;
  layer.heads = heads;
  return layer;
}

namespace {

void check_heads(const Shape& shape, Index heads) {
  if (shape.empty() || heads < 1 || shape.back() % heads != 0) {
    throw DimensionError("channel extent of " + to_string(shape) + " not divisible into " + std::to_string(heads) +
                         " heads");
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> head_channel_sum(const SpikeTensor<Scalar>& q, const SpikeTensor<Scalar>& k, Index heads) {
  if (q.shape() != k.shape()) {
    throw DimensionError("Q " + to_string(q.shape()) + " and K " + to_string(k.shape()) + " differ");
  }
  check_heads(q.shape(), heads);
  const Index dim = q.shape().back();
  const Index hd = dim / heads;
  const Index rows = q.size() / dim;
  Shape out_shape = q.shape();
  out_shape.back() = heads;
  Array<Scalar> out(rows * heads);
  const auto& qv = q.values().value();
  const auto& kv = k.values().value();
  if (surrogate_forward_enabled()) {
    for (Index r = 0; r < rows; ++r) {
      for (Index h = 0; h < heads; ++h) {
        const Index off = r * dim + h * hd;
        out[r * heads + h] = (qv.segment(off, hd) * kv.segment(off, hd)).sum();
      }
    }
  } else {
    const PackedBits qb = q.pack();
    const PackedBits kb = k.pack();
    for (Index r = 0; r < rows; ++r) {
      for (Index h = 0; h < heads; ++h) {
        out[r * heads + h] = static_cast<Scalar>(PackedBits::and_count(qb, kb, r, h * hd, (h + 1) * hd));
      }
    }
  }
  return make_op<Scalar>(out_shape, std::move(out), "head_channel_sum", {q.values(), k.values()},
                         [rows, heads, hd, dim](Node<Scalar>& self) {
                           const auto& qv = self.parents[0]->value;
                           const auto& kv = self.parents[1]->value;
                           auto* gq = parent_grad(self, 0);
                           auto* gk = parent_grad(self, 1);
                           for (Index r = 0; r < rows; ++r) {
                             for (Index h = 0; h < heads; ++h) {
                               const Scalar g = self.grad[r * heads + h];
                               const Index off = r * dim + h * hd;
                               if (gq) gq->segment(off, hd) += g * kv.segment(off, hd);
                               if (gk) gk->segment(off, hd) += g * qv.segment(off, hd);
                             }
                           }
                         });
}

template <typename Scalar>
SpikeTensor<Scalar> head_gate(const SpikeTensor<Scalar>& g, const SpikeTensor<Scalar>& v, Index heads) {
  check_heads(v.shape(), heads);
  Shape expect = v.shape();
  expect.back() = heads;
  if (g.shape() != expect) {
    throw DimensionError("gate " + to_string(g.shape()) + " does not match " + to_string(expect));
  }
  const Index dim = v.shape().back();
  const Index hd = dim / heads;
  const Index rows = v.size() / dim;
  const auto& gv = g.values().value();
  const auto& vv = v.values().value();
  Array<Scalar> out(v.size());
  for (Index r = 0; r < rows; ++r) {
    for (Index h = 0; h < heads; ++h) {
      const Index off = r * dim + h * hd;
      out.segment(off, hd) = gv[r * heads + h] * vv.segment(off, hd);
    }
  }
  Var<Scalar> result = make_op<Scalar>(v.shape(), std::move(out), "head_gate", {g.values(), v.values()},
                                       [rows, heads, hd, dim](Node<Scalar>& self) {
                                         const auto& gv = self.parents[0]->value;
                                         const auto& vv = self.parents[1]->value;
                                         auto* gg = parent_grad(self, 0);
                                         auto* gvv = parent_grad(self, 1);
                                         for (Index r = 0; r < rows; ++r) {
                                           for (Index h = 0; h < heads; ++h) {
                                             const Index off = r * dim + h * hd;
                                             const auto up = self.grad.segment(off, hd);
                                             if (gg) (*gg)[r * heads + h] += (up * vv.segment(off, hd)).sum();
                                             if (gvv) gvv->segment(off, hd) += up * gv[r * heads + h];
                                           }
                                         }
                                       });
  return SpikeTensor<Scalar>::adopt(std::move(result));
}

namespace {

template <typename Scalar>
void count_pairs(ForwardContext* ctx, std::string_view site, const Var<Scalar>& produced,
                 const SpikeTensor<Scalar>& bound_by) {
  if (!ctx || !ctx->ledger) return;
  const Index steps = produced.dim(0);
  const Index pw = produced.size() / steps;
  const Index bw = bound_by.size() / steps;
  const auto& pv = produced.value();
  const auto& bv = bound_by.values().value();
  const std::string name = ctx->site(site);
  for (Index t = 0; t < steps; ++t) {
    OpCounts c;
    c.ac = static_cast<std::uint64_t>(pv.segment(t * pw, pw).sum());
    c.spikes = static_cast<std::uint64_t>((bv.segment(t * bw, bw) != Scalar(0)).count());
    c.theoretical_ac = c.spikes;
    ctx->ledger->add(name, t, c);
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> sdsa_membrane(const SpikeTensor<Scalar>& s_in, const SdsaLayer<Scalar>& layer, ForwardContext* ctx) {
  if (!surrogate_forward_enabled() && !is_binary(s_in.values().value())) {
    throw ContractError("sdsa input must be binary");
  }
  if (s_in.shape().size() < 2 || s_in.shape().back() != layer.dim()) {
    throw DimensionError("sdsa input " + to_string(s_in.shape()) + " does not match layer dim " +
                         std::to_string(layer.dim()));
  }
  const SpikeTensor<Scalar> q = spike_linear(s_in, layer.q, ctx, "q");
  const SpikeTensor<Scalar> k = spike_linear(s_in, layer.k, ctx, "k");
  const SpikeTensor<Scalar> v = spike_linear(s_in, layer.v, ctx, "v");

  const Var<Scalar> a = head_channel_sum(q, k, layer.heads);
  count_pairs(ctx, "qk", a, q);
  count_neurons(ctx, "qk", a.shape());
  const SpikeTensor<Scalar> g = spike_norm(a, layer.lif_attn);
  if (ctx && ctx->attention) {
    AttentionMap map{ctx->site("attn"), g.shape(), {}};
    map.values.assign(g.values().value().data(), g.values().value().data() + g.size());
    ctx->attention->push_back(std::move(map));
  }

  const SpikeTensor<Scalar> gated = head_gate(g, v, layer.heads);
  count_pairs(ctx, "gate_v", gated.values(), v);
  return spike_linear_membrane(gated, layer.out, ctx, "out");
}

template <typename Scalar>
SpikeTensor<Scalar> sdsa(const SpikeTensor<Scalar>& s_in, const SdsaLayer<Scalar>& layer, ForwardContext* ctx) {
  Var<Scalar> u = sdsa_membrane(s_in, layer, ctx);
  count_neurons(ctx, "out", u.shape());
  return spike_norm(u, layer.out.lif);
}

template <typename Scalar>
OpLedger count_sdsa_ops(const SpikeTensor<Scalar>& s_in, const SdsaLayer<Scalar>& layer) {
  NoGradGuard no_grad;
  OpLedger ledger;
  ForwardContext ctx;
  ctx.ledger = &ledger;
  sdsa(s_in, layer, &ctx);
  return ledger;
}

#define SPIKEMOE_INSTANTIATE_SDSA(S)                                                                  \
  template struct SdsaLayer<S>;                                                                       \
  template Var<S> head_channel_sum<S>(const SpikeTensor<S>&, const SpikeTensor<S>&, Index);           \
  template SpikeTensor<S> head_gate<S>(const SpikeTensor<S>&, const SpikeTensor<S>&, Index);          \
  template Var<S> sdsa_membrane<S>(const SpikeTensor<S>&, const SdsaLayer<S>&, ForwardContext*);      \
  template SpikeTensor<S> sdsa<S>(const SpikeTensor<S>&, const SdsaLayer<S>&, ForwardContext*);       \
  template OpLedger count_sdsa_ops<S>(const SpikeTensor<S>&, const SdsaLayer<S>&);

SPIKEMOE_INSTANTIATE_SDSA(float)
SPIKEMOE_INSTANTIATE_SDSA(double)

}  // namespace spikemoe
