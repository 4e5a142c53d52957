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

// Leaky integrate-and-fire neurons.
//
//   U[t] = H[t-1] + X[t]
//   S[t] = Heaviside(U[t] - u_th)          (Heaviside(0) = 1)
//   H[t] = v_reset * S[t] + beta * U[t] * (1 - S[t])
//
// The step is differentiated through a surrogate derivative of the
// Heaviside; the membrane recursion itself is differentiated exactly.

#pragma once

#include "spikemoe/spike_tensor.hpp"
#include "spikemoe/tensor.hpp"

namespace spikemoe {

enum class SurrogateKind { kRectangular, kArctan };

struct LifParams {
  double u_th = 1.0;
  double v_reset = 0.0;
  double beta = 0.5;
  double surrogate_width = 1.0;
  SurrogateKind surrogate = SurrogateKind::kRectangular;

  /// Throws ContractError unless 0 < beta < 1, u_th > v_reset, width > 0.
  void validate() const;
  bool operator==(const LifParams&) const = default;
};

/// Surrogate d spike / d u at offset x = u - u_th.
double surrogate_derivative(const LifParams& params, double x);
/// Smooth stand-in for Heaviside(x) whose derivative is surrogate_derivative.
double surrogate_step(const LifParams& params, double x);

template <typename Scalar>
struct LifState {
  Var<Scalar> h;

  static LifState zeros(Shape shape) { return {Var<Scalar>::zeros(std::move(shape))}; }
};

template <typename Scalar>
struct LifStepResult {
  SpikeTensor<Scalar> spikes;
  LifState<Scalar> state;
  Var<Scalar> u;
};

/// Heaviside(u - u_th) with surrogate backward.
template <typename Scalar>
Var<Scalar> fire(const Var<Scalar>& u, const LifParams& params);

/// One neuron update, composed from primitive tape operations.
template <typename Scalar>
LifStepResult<Scalar> lif_step(const Var<Scalar>& x, const LifState<Scalar>& state, const LifParams& params);

/// Unrolls lif_step over the leading (time) axis from H = 0 as a single
/// fused tape node with backpropagation through time.
template <typename Scalar>
SpikeTensor<Scalar> lif_sequence(const Var<Scalar>& x_seq, const LifParams& params);

/// SN(.): a LIF layer applied to a real-valued (T, ...) input.
template <typename Scalar>
SpikeTensor<Scalar> spike_norm(const Var<Scalar>& x_seq, const LifParams& params) {
  return lif_sequence(x_seq, params);
}

}  // namespace spikemoe
