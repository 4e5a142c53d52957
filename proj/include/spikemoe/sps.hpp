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

// Spiking patch splitting: stride-p patch projection, channel batch norm and
// a LIF layer, producing (T, B, N, D) spike tokens.

#pragma once

#include <random>

#include "spikemoe/linear.hpp"

namespace spikemoe {

struct PatchConfig {
  Index image_size = 32;
  Index patch_size = 4;
  Index in_channels = 3;
  Index embed_dim = 256;
  Index timesteps = 4;

  Index tokens() const { return (image_size / patch_size) * (image_size / patch_size); }
  Index patch_features() const { return in_channels * patch_size * patch_size; }
  /// Throws ContractError if the image does not split into whole patches.
  void validate() const;
};

template <typename Scalar>
struct SpsEmbedding {
  PatchConfig cfg;
  Var<Scalar> weight;  // (C * p * p, D)
  Var<Scalar> bias;    // (D)
  Var<Scalar> bn_gamma;
  Var<Scalar> bn_beta;
  BatchNormBuffers<Scalar> bn;
  LifParams lif;

  static SpsEmbedding create(const PatchConfig& cfg, const LifParams& lif, double gain, std::mt19937_64& rng);
};

/// Pre-LIF input for a static image (B, C, H, W): the projection is computed
/// once and repeated over T (direct coding). Returns (T, B, N, D).
template <typename Scalar>
Var<Scalar> project_static(const Var<Scalar>& image, SpsEmbedding<Scalar>& sps, ForwardContext* ctx = nullptr);

template <typename Scalar>
SpikeTensor<Scalar> encode_static(const Var<Scalar>& image, SpsEmbedding<Scalar>& sps, ForwardContext* ctx = nullptr);

/// Pre-LIF input for event frames (T, B, C, H, W), projected per timestep.
template <typename Scalar>
Var<Scalar> project_events(const Var<Scalar>& frames, SpsEmbedding<Scalar>& sps, ForwardContext* ctx = nullptr);

template <typename Scalar>
SpikeTensor<Scalar> encode_events(const Var<Scalar>& frames, SpsEmbedding<Scalar>& sps, ForwardContext* ctx = nullptr);

}  // namespace spikemoe
