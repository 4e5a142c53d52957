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

#include "spikemoe/model.hpp"

#include <random>

namespace spikemoe {

PatchConfig ModelConfig::patch() const {
  return {image_size, patch_size, in_channels, embed_dim, timesteps};
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ContractError("model config: " + what);
  };
  need(layers >= 0, "layers must be non-negative");
  need(embed_dim > 0 && heads > 0 && embed_dim % heads == 0, "embed_dim must be divisible by heads");
  need(num_experts >= 1, "need at least one expert");
  need(!shared_expert || num_experts >= 2 || !force_shared, "forced shared expert needs another slot");
  need(top_k >= 1 && top_k <= num_experts, "top_k must lie in [1, num_experts]");
  need(timesteps >= 1, "timesteps must be positive");
  need(num_classes >= 2, "need at least two classes");
  need(prompt_len >= 0, "prompt_len must be non-negative");
  need(alpha_aux >= 0, "alpha_aux must be non-negative");
  need(label_smoothing >= 0 && label_smoothing < 1, "label_smoothing must lie in [0, 1)");
  need(init_gain > 0, "init_gain must be positive");
  patch().validate();
  lif.validate();
}

template <typename Scalar>
SpikingMoeModel<Scalar>::SpikingMoeModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.init_seed);
  sps_ = SpsEmbedding<Scalar>::create(cfg_.patch(), cfg_.lif, 1.0, rng);
  if (cfg_.shared_expert && cfg_.layers > 0) {
    shared_ = std::make_shared<ExpertMlp<Scalar>>(
        ExpertMlp<Scalar>::create(cfg_.embed_dim, cfg_.hidden(), cfg_.lif, cfg_.init_gain, rng));
  }
  for (Index l = 0; l < cfg_.layers; ++l) {
    EncoderLayer<Scalar> layer;
    layer.attn = SdsaLayer<Scalar>::create(cfg_.embed_dim, cfg_.heads, cfg_.lif, cfg_.init_gain, rng);
    layer.moe = MoeLayer<Scalar>::create(cfg_.embed_dim, cfg_.hidden(), cfg_.num_experts, cfg_.top_k,
                                         cfg_.prompt_len, cfg_.lif, cfg_.init_gain, rng, shared_);
    layer.moe.force_shared = cfg_.force_shared && shared_ != nullptr;
    layer.moe.alpha_aux = cfg_.alpha_aux;
    layers_.push_back(std::move(layer));
  }
  head_ = Linear<Scalar>::create(cfg_.embed_dim, cfg_.num_classes, 1.0, rng);
}

template <typename Scalar>
ModelOutput<Scalar> SpikingMoeModel<Scalar>::forward(const Var<Scalar>& input, ForwardContext* ctx) {
  const SpikeTensor<Scalar> s0 =
      cfg_.input == InputKind::kStatic ? encode_static(input, sps_, ctx) : encode_events(input, sps_, ctx);
  return forward_tokens(s0, ctx);
}

template <typename Scalar>
ModelOutput<Scalar> SpikingMoeModel<Scalar>::forward_tokens(const SpikeTensor<Scalar>& s0, ForwardContext* ctx) {
  if (s0.shape().size() != 4 || s0.dim(3) != cfg_.embed_dim) {
    throw ContractError("token tensor " + to_string(s0.shape()) + " does not match embed_dim " +
                        std::to_string(cfg_.embed_dim));
  }
  ModelOutput<Scalar> out;
  out.aux_total = Var<Scalar>::scalar(0);
  out.block_outputs.push_back(s0);
  SpikeTensor<Scalar> s = s0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    ScopeGuard layer_scope(ctx, "layer" + std::to_string(l));
    auto& layer = layers_[l];
    {
      ScopeGuard scope(ctx, "sdsa");
      Var<Scalar> u = sdsa_membrane(s, layer.attn, ctx);
      count_accumulate(ctx, "shortcut", s, 1);
      u = add(u, s.values());
      count_neurons(ctx, "shortcut", u.shape());
      s = spike_norm(u, layer.attn.out.lif);
    }
    out.block_outputs.push_back(s);
    {
      ScopeGuard scope(ctx, "moe");
      MoeOutput<Scalar> mo = moe_forward(s, layer.moe, ctx);
      s = std::move(mo.out);
      out.aux_total = add(out.aux_total, mo.aux);
      out.routing.push_back(std::move(mo.record));
    }
    out.block_outputs.push_back(s);
  }

  // Token-average pooling per timestep: (T, B, N, D) -> (T, B, D).
  const Index steps = s.dim(0);
  const Index batch = s.dim(1);
  count_accumulate(ctx, "pool", s, 1);
  const Var<Scalar> rates = mean(s.values(), 2);
  out.step_logits = head_(rates);
  out.logits = mean(out.step_logits, 0);
  if (ctx && ctx->ledger) {
    const std::string site = ctx->site("head");
    for (Index t = 0; t < steps; ++t) {
      OpCounts c;
      c.mac = static_cast<std::uint64_t>(batch * cfg_.embed_dim * cfg_.num_classes);
      c.neuron_ops = static_cast<std::uint64_t>(batch * (cfg_.embed_dim + cfg_.num_classes));
      ctx->ledger->add(site, t, c);
    }
  }
  return out;
}

namespace {

template <typename Scalar>
void add_linear(std::vector<NamedParameter<Scalar>>& out, const std::string& prefix, const Var<Scalar>& w,
                const Var<Scalar>& b) {
  out.push_back({prefix + ".weight", w, true});
  out.push_back({prefix + ".bias", b, false});
}

template <typename Scalar>
void add_expert(std::vector<NamedParameter<Scalar>>& out, const std::string& prefix, const ExpertMlp<Scalar>& e) {
  add_linear(out, prefix + ".fc1", e.fc1.weight, e.fc1.bias);
  add_linear(out, prefix + ".fc2", e.w2, e.b2);
}

}  // namespace

template <typename Scalar>
std::vector<NamedParameter<Scalar>> SpikingMoeModel<Scalar>::parameters() {
  std::vector<NamedParameter<Scalar>> out;
  add_linear(out, "sps.proj", sps_.weight, sps_.bias);
  out.push_back({"sps.bn.gamma", sps_.bn_gamma, false});
  out.push_back({"sps.bn.beta", sps_.bn_beta, false});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "layer" + std::to_string(l);
    const auto& a = layers_[l].attn;
    add_linear(out, p + ".sdsa.q", a.q.weight, a.q.bias);
    add_linear(out, p + ".sdsa.k", a.k.weight, a.k.bias);
    add_linear(out, p + ".sdsa.v", a.v.weight, a.v.bias);
    add_linear(out, p + ".sdsa.out", a.out.weight, a.out.bias);
    const auto& m = layers_[l].moe;
    out.push_back({p + ".moe.gate.tokens", m.gate_weight_tokens, true});
    out.push_back({p + ".moe.gate.prompt_proj", m.gate_weight_prompt, true});
    out.push_back({p + ".moe.gate.bias", m.gate_bias, false});
    if (m.prompt.p.defined() && m.prompt.p.size() > 0) out.push_back({p + ".moe.prompt", m.prompt.p, false});
    for (Index e = 0; e < m.num_experts(); ++e) {
      if (e == m.shared_index) continue;
      add_expert(out, p + ".moe.expert" + std::to_string(e), *m.experts[static_cast<std::size_t>(e)]);
    }
  }
  if (shared_) add_expert(out, "shared_expert", *shared_);
  add_linear(out, "head", head_.weight, head_.bias);
  return out;
}

template <typename Scalar>
std::vector<NamedBuffer<Scalar>> SpikingMoeModel<Scalar>::buffers() {
  return {{"sps.bn.running_mean", &sps_.bn.running_mean}, {"sps.bn.running_var", &sps_.bn.running_var}};
}

template <typename Scalar>
Var<Scalar> model_loss(const ModelOutput<Scalar>& out, std::span<const int> labels, const ModelConfig& cfg) {
  const auto eps = static_cast<Scalar>(cfg.label_smoothing);
  Var<Scalar> ce;
  if (cfg.loss == LossMode::kMeanLogit) {
    ce = smoothed_cross_entropy(out.logits, labels, eps);
  } else {
    const Index steps = out.step_logits.dim(0);
    const Index batch = out.step_logits.dim(1);
    if (static_cast<Index>(labels.size()) != batch) {
      throw DimensionError("label count " + std::to_string(labels.size()) + " != batch " + std::to_string(batch));
    }
    std::vector<int> tiled;
    tiled.reserve(static_cast<std::size_t>(steps * batch));
    for (Index t = 0; t < steps; ++t) tiled.insert(tiled.end(), labels.begin(), labels.end());
    ce = smoothed_cross_entropy(reshape(out.step_logits, {steps * batch, out.step_logits.dim(2)}),
                                std::span<const int>(tiled), eps);
  }
  return out.aux_total.defined() ? add(ce, out.aux_total) : ce;
}

template <typename Scalar>
std::vector<int> predict(const Var<Scalar>& logits) {
  if (logits.rank() != 2) throw DimensionError("predict expects (batch, classes) logits");
  const Index rows = logits.dim(0);
  const Index classes = logits.dim(1);
  const auto& v = logits.value();
  std::vector<int> out(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    Index best = 0;
    for (Index c = 1; c < classes; ++c) {
      if (v[r * classes + c] > v[r * classes + best]) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

template <typename Scalar>
OpLedger profile_forward(SpikingMoeModel<Scalar>& model, const Var<Scalar>& input) {
  NoGradGuard no_grad;
  OpLedger ledger;
  ForwardContext ctx;
  ctx.ledger = &ledger;
  model.forward(input, &ctx);
  return ledger;
}

std::vector<std::string> interior_sites(const OpLedger& ledger) {
  std::vector<std::string> out;
  for (const auto& [site, steps] : ledger.sites()) {
    if (site.rfind("sps.conv", 0) == 0 || site.rfind("head", 0) == 0) continue;
    out.push_back(site);
  }
  return out;
}

#define SPIKEMOE_INSTANTIATE_MODEL(S)                                                         \
  template class SpikingMoeModel<S>;                                                          \
  template Var<S> model_loss<S>(const ModelOutput<S>&, std::span<const int>, const ModelConfig&); \
  template std::vector<int> predict<S>(const Var<S>&);                                        \
  template OpLedger profile_forward<S>(SpikingMoeModel<S>&, const Var<S>&);

SPIKEMOE_INSTANTIATE_MODEL(float)
SPIKEMOE_INSTANTIATE_MODEL(double)

}  // namespace spikemoe
