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

// Linear maps over spike inputs. A binary input row selects weight rows, so
// the product is a sum of selected rows: accumulation only.

#pragma once

#include <random>
#include <string_view>

#include "spikemoe/lif.hpp"
#include "spikemoe/op_ledger.hpp"
#include "spikemoe/spike_tensor.hpp"
#include "spikemoe/tensor.hpp"

namespace spikemoe {

/// Uniform(-b, b) with b = gain * sqrt(3 / fan_in), i.e. std = gain / sqrt(fan_in).
template <typename Scalar>
Var<Scalar> init_weight(Index fan_in, Index fan_out, double gain, std::mt19937_64& rng);

template <typename Scalar>
struct SpikeLinear {
  Var<Scalar> weight;  // (in, out)
  Var<Scalar> bias;    // (out)
  LifParams lif;

  static SpikeLinear create(Index in, Index out, const LifParams& lif, double gain, std::mt19937_64& rng);
  Index in_features() const { return weight.dim(0); }
  Index out_features() const { return weight.dim(1); }
};

/// Real-input dense layer (classifier head).
template <typename Scalar>
struct Linear {
  Var<Scalar> weight;  // (in, out)
  Var<Scalar> bias;    // (out)

  static Linear create(Index in, Index out, double gain, std::mt19937_64& rng);
  Var<Scalar> operator()(const Var<Scalar>& x) const { return add(matmul(x, weight), bias); }
};

/// s (..., in) x w (in, out) + bias, computed by accumulating the weight rows
/// selected by each spike. `bias` may be undefined.
template <typename Scalar>
Var<Scalar> spike_matmul(const SpikeTensor<Scalar>& s, const Var<Scalar>& w, const Var<Scalar>& bias);

/// Counts one spike-driven accumulation stage per leading-axis timestep.
template <typename Scalar>
void count_accumulate(ForwardContext* ctx, std::string_view site, const SpikeTensor<Scalar>& input, Index fan_out);

/// Counts one membrane update per neuron per leading-axis timestep.
void count_neurons(ForwardContext* ctx, std::string_view site, const Shape& shape);

/// Pre-SN membrane input of a spike-linear layer.
template <typename Scalar>
Var<Scalar> spike_linear_membrane(const SpikeTensor<Scalar>& s, const SpikeLinear<Scalar>& layer,
                                  ForwardContext* ctx = nullptr, std::string_view site = {});

/// SN(s W + b).
template <typename Scalar>
SpikeTensor<Scalar> spike_linear(const SpikeTensor<Scalar>& s, const SpikeLinear<Scalar>& layer,
                                 ForwardContext* ctx = nullptr, std::string_view site = {});

}  // namespace spikemoe
