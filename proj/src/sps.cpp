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

#include "spikemoe/sps.hpp"

namespace spikemoe {

void PatchConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
    throw ContractError("image size " + std::to_string(image_size) + " not divisible by patch size " +
                        std::to_string(patch_size));
  }
  if (in_channels <= 0 || embed_dim <= 0 || timesteps <= 0) {
    throw ContractError("patch config extents must be positive");
  }
}

template <typename Scalar>
SpsEmbedding<Scalar> SpsEmbedding<Scalar>::create(const PatchConfig& cfg, const LifParams& lif, double gain,
                                                  std::mt19937_64& rng) {
  cfg.validate();
  lif.validate();
  SpsEmbedding sps;
  sps.cfg = cfg;
  sps.weight = init_weight<Scalar>(cfg.patch_features(), cfg.embed_dim, gain, rng);
  sps.bias = Var<Scalar>::parameter({cfg.embed_dim}, Array<Scalar>::Zero(cfg.embed_dim));
  sps.bn_gamma = Var<Scalar>::parameter({cfg.embed_dim}, Array<Scalar>::Ones(cfg.embed_dim));
  sps.bn_beta = Var<Scalar>::parameter({cfg.embed_dim}, Array<Scalar>::Zero(cfg.embed_dim));
  sps.bn.running_mean = Array<Scalar>::Zero(cfg.embed_dim);
  sps.bn.running_var = Array<Scalar>::Ones(cfg.embed_dim);
  sps.lif = lif;
  return sps;
}

namespace {

void check_image(const Shape& shape, const PatchConfig& cfg, std::size_t leading) {
  const std::size_t rank = leading + 3;
  if (shape.size() != rank || shape[leading] != cfg.in_channels || shape[leading + 1] != cfg.image_size ||
      shape[leading + 2] != cfg.image_size) {
    throw DimensionError("input " + to_string(shape) + " does not match patch config (C=" +
                         std::to_string(cfg.in_channels) + ", size=" + std::to_string(cfg.image_size) + ")");
  }
}

template <typename Scalar>
Var<Scalar> project_patches(const Var<Scalar>& images, SpsEmbedding<Scalar>& sps, bool training) {
  Var<Scalar> patches = extract_patches(images, sps.cfg.patch_size);
  Var<Scalar> proj = add(matmul(patches, sps.weight), sps.bias);
  return batch_norm(proj, sps.bn_gamma, sps.bn_beta, sps.bn, training);
}

}  // namespace

template <typename Scalar>
Var<Scalar> project_static(const Var<Scalar>& image, SpsEmbedding<Scalar>& sps, ForwardContext* ctx) {
  check_image(image.shape(), sps.cfg, 1);
  const bool training = ctx && ctx->training;
  Var<Scalar> proj = project_patches(image, sps, training);
  if (ctx && ctx->ledger) {
    // Analog input: a true multiply-accumulate convolution, evaluated once.
    OpCounts c;
    c.mac = static_cast<std::uint64_t>(image.dim(0) * sps.cfg.tokens() * sps.cfg.patch_features() * sps.cfg.embed_dim);
    c.neuron_ops = static_cast<std::uint64_t>(proj.size());
    ctx->ledger->add(ctx->site("sps.conv"), 0, c);
  }
  return tile_leading(proj, sps.cfg.timesteps);
}

template <typename Scalar>
SpikeTensor<Scalar> encode_static(const Var<Scalar>& image, SpsEmbedding<Scalar>& sps, ForwardContext* ctx) {
  Var<Scalar> u = project_static(image, sps, ctx);
  count_neurons(ctx, "sps.lif", u.shape());
  return spike_norm(u, sps.lif);
}

template <typename Scalar>
Var<Scalar> project_events(const Var<Scalar>& frames, SpsEmbedding<Scalar>& sps, ForwardContext* ctx) {
  check_image(frames.shape(), sps.cfg, 2);
  if (frames.dim(0) != sps.cfg.timesteps) {
    throw ContractError("event stream has " + std::to_string(frames.dim(0)) + " frames, config expects " +
                        std::to_string(sps.cfg.timesteps));
  }
  const Index steps = frames.dim(0);
  const Index batch = frames.dim(1);
  const bool training = ctx && ctx->training;
  Var<Scalar> flat = reshape(frames, {steps * batch, frames.dim(2), frames.dim(3), frames.dim(4)});
  Var<Scalar> proj = project_patches(flat, sps, training);
  if (ctx && ctx->ledger) {
    // Event frames are binary: each active pixel accumulates its weight column.
    const Index per_step = frames.size() / steps;
    const auto& v = frames.value();
    for (Index t = 0; t < steps; ++t) {
      OpCounts c;
      c.spikes = static_cast<std::uint64_t>((v.segment(t * per_step, per_step) != Scalar(0)).count());
      c.ac = c.spikes * static_cast<std::uint64_t>(sps.cfg.embed_dim);
      c.theoretical_ac = c.ac;
      c.neuron_ops = static_cast<std::uint64_t>(proj.size() / steps);
      ctx->ledger->add(ctx->site("sps.conv"), t, c);
    }
  }
  return reshape(proj, {steps, batch, sps.cfg.tokens(), sps.cfg.embed_dim});
}

template <typename Scalar>
SpikeTensor<Scalar> encode_events(const Var<Scalar>& frames, SpsEmbedding<Scalar>& sps, ForwardContext* ctx) {
  Var<Scalar> u = project_events(frames, sps, ctx);
  count_neurons(ctx, "sps.lif", u.shape());
  return spike_norm(u, sps.lif);
}

#define SPIKEMOE_INSTANTIATE_SPS(S)                                                                 \
  template struct SpsEmbedding<S>;                                                                  \
  template Var<S> project_static<S>(const Var<S>&, SpsEmbedding<S>&, ForwardContext*);              \
  template SpikeTensor<S> encode_static<S>(const Var<S>&, SpsEmbedding<S>&, ForwardContext*);       \
  template Var<S> project_events<S>(const Var<S>&, SpsEmbedding<S>&, ForwardContext*);              \
  template SpikeTensor<S> encode_events<S>(const Var<S>&, SpsEmbedding<S>&, ForwardContext*);

SPIKEMOE_INSTANTIATE_SPS(float)
SPIKEMOE_INSTANTIATE_SPS(double)

}  // namespace spikemoe
