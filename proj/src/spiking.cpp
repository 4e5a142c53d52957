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

#include <bit>
#include <cmath>
#include <limits>
#include <numbers>

#include "spikemoe/lif.hpp"
#include "spikemoe/spike_tensor.hpp"

namespace spikemoe {

namespace {
thread_local bool g_surrogate_forward = false;
}  // namespace

SurrogateForwardScope::SurrogateForwardScope() : previous_(g_surrogate_forward) { g_surrogate_forward = true; }
SurrogateForwardScope::~SurrogateForwardScope() { g_surrogate_forward = previous_; }
bool surrogate_forward_enabled() { return g_surrogate_forward; }

Index PackedBits::and_count(const PackedBits& a, const PackedBits& b, Index row, Index begin, Index end) {
  const std::uint64_t* wa = a.words.data() + row * a.words_per_row;
  const std::uint64_t* wb = b.words.data() + row * b.words_per_row;
  Index total = 0;
  Index col = begin;
  while (col < end) {
    const Index word = col / 64;
    const Index lo = col % 64;
    const Index hi = std::min<Index>(64, lo + (end - col));
    std::uint64_t m = hi == 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << hi) - 1);
    m &= ~((std::uint64_t{1} << lo) - 1);
    total += std::popcount(wa[word] & wb[word] & m);
    col += hi - lo;
  }
  return total;
}

template <typename Scalar>
bool is_binary(const Array<Scalar>& values) {
  return ((values == Scalar(0)) || (values == Scalar(1))).all();
}

template <typename Scalar>
SpikeTensor<Scalar>::SpikeTensor(Var<Scalar> values) : values_(std::move(values)) {
  if (!surrogate_forward_enabled() && !is_binary(values_.value())) {
    throw ContractError("spike tensor of shape " + to_string(values_.shape()) + " has non-binary entries");
  }
}

template <typename Scalar>
SpikeTensor<Scalar> SpikeTensor<Scalar>::adopt(Var<Scalar> values) {
  return SpikeTensor(std::move(values), Unchecked{});
}

template <typename Scalar>
SpikeTensor<Scalar> SpikeTensor<Scalar>::zeros(Shape shape) {
  return SpikeTensor(Var<Scalar>::zeros(std::move(shape)));
}

template <typename Scalar>
SpikeTensor<Scalar> SpikeTensor<Scalar>::from_bits(Shape shape, std::span<const std::uint8_t> bits) {
  if (numel(shape) != static_cast<Index>(bits.size())) {
    throw DimensionError("bit count does not match shape " + to_string(shape));
  }
  Array<Scalar> v(static_cast<Index>(bits.size()));
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] > 1) throw ContractError("spike bits must be 0 or 1");
    v[static_cast<Index>(i)] = static_cast<Scalar>(bits[i]);
  }
  return SpikeTensor(Var<Scalar>::constant(std::move(shape), std::move(v)));
}

template <typename Scalar>
std::vector<std::uint8_t> SpikeTensor<Scalar>::bits() const {
  const auto& v = values_.value();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = v[i] != Scalar(0) ? 1 : 0;
  return out;
}

template <typename Scalar>
PackedBits SpikeTensor<Scalar>::pack() const {
  PackedBits p;
  p.cols = values_.rank() == 0 ? 1 : values_.shape().back();
  p.rows = p.cols == 0 ? 0 : values_.size() / p.cols;
  p.words_per_row = (p.cols + 63) / 64;
  p.words.assign(static_cast<std::size_t>(p.rows * p.words_per_row), 0);
  const auto& v = values_.value();
  for (Index r = 0; r < p.rows; ++r) {
    std::uint64_t* w = p.words.data() + r * p.words_per_row;
    const Scalar* src = v.data() + r * p.cols;
    for (Index c = 0; c < p.cols; ++c) {
      if (src[c] != Scalar(0)) w[c / 64] |= std::uint64_t{1} << (c % 64);
    }
  }
  return p;
}

template <typename Scalar>
Index SpikeTensor<Scalar>::count() const {
  return (values_.value() != Scalar(0)).count();
}

void LifParams::validate() const {
  if (!(beta > 0.0 && beta < 1.0)) throw ContractError("LIF decay beta must lie in (0, 1)");
  if (!(u_th > v_reset)) throw ContractError("LIF threshold must exceed the reset potential");
  if (!(surrogate_width > 0.0)) throw ContractError("surrogate width must be positive");
}

double surrogate_derivative(const LifParams& params, double x) {
  const double w = params.surrogate_width;
  if (params.surrogate == SurrogateKind::kArctan) {
    const double z = std::numbers::pi * x / w;
    return (1.0 / w) / (1.0 + z * z);
  }
  return std::abs(x) < 0.5 * w ? 1.0 / w : 0.0;
}

double surrogate_step(const LifParams& params, double x) {
  const double w = params.surrogate_width;
  if (params.surrogate == SurrogateKind::kArctan) {
    return 0.5 + std::atan(std::numbers::pi * x / w) / std::numbers::pi;
  }
  return std::clamp(x / w + 0.5, 0.0, 1.0);
}

namespace {

template <typename Scalar>
void require_finite(const Var<Scalar>& x, const char* what) {
  if (!x.value().allFinite()) throw NumericError(std::string(what) + " received non-finite input");
}

template <typename Scalar>
Scalar step_value(const LifParams& params, Scalar u) {
  const double x = static_cast<double>(u) - params.u_th;
  if (surrogate_forward_enabled()) return static_cast<Scalar>(surrogate_step(params, x));
  return x >= 0.0 ? Scalar(1) : Scalar(0);
}

// Smallest Scalar t with (t >= u_th) exactly, so that comparing in Scalar
// agrees with comparing in double.
template <typename Scalar>
Scalar exact_threshold(double u_th) {
  auto t = static_cast<Scalar>(u_th);
  if (static_cast<double>(t) < u_th) t = std::nextafter(t, std::numeric_limits<Scalar>::infinity());
  return t;
}

template <typename Scalar>
Array<Scalar> surrogate_derivative_array(const LifParams& params, const Array<Scalar>& u) {
  const auto w = static_cast<Scalar>(params.surrogate_width);
  const Array<Scalar> x = u - static_cast<Scalar>(params.u_th);
  if (params.surrogate == SurrogateKind::kArctan) {
    const Array<Scalar> z = x * static_cast<Scalar>(std::numbers::pi / params.surrogate_width);
    return (Scalar(1) / w) / (Scalar(1) + z * z);
  }
  return (x.abs() < w / Scalar(2)).template cast<Scalar>() / w;
}

}  // namespace

template <typename Scalar>
Var<Scalar> fire(const Var<Scalar>& u, const LifParams& params) {
  Array<Scalar> s(u.size());
  for (Index i = 0; i < u.size(); ++i) s[i] = step_value(params, u.value()[i]);
  return make_op<Scalar>(u.shape(), std::move(s), "fire", {u}, [params](Node<Scalar>& self) {
    auto* gu = parent_grad(self, 0);
    if (!gu) return;
    const auto& uv = self.parents[0]->value;
    for (Index i = 0; i < uv.size(); ++i) {
      (*gu)[i] += self.grad[i] * static_cast<Scalar>(surrogate_derivative(params, uv[i] - params.u_th));
    }
  });
}

template <typename Scalar>
LifStepResult<Scalar> lif_step(const Var<Scalar>& x, const LifState<Scalar>& state, const LifParams& params) {
  if (x.shape() != state.h.shape()) {
    throw DimensionError("lif_step input " + to_string(x.shape()) + " does not match state " +
                         to_string(state.h.shape()));
  }
  require_finite(x, "lif_step");
  Var<Scalar> u = add(state.h, x);
  Var<Scalar> s = fire(u, params);
  // H = v_reset * S + beta * (U - U * S)
  Var<Scalar> leak = scale(sub(u, mul(u, s)), static_cast<Scalar>(params.beta));
  Var<Scalar> h = add(scale(s, static_cast<Scalar>(params.v_reset)), leak);
  return {SpikeTensor<Scalar>(s), LifState<Scalar>{h}, u};
}

template <typename Scalar>
SpikeTensor<Scalar> lif_sequence(const Var<Scalar>& x_seq, const LifParams& params) {
  if (x_seq.rank() < 1 || x_seq.dim(0) == 0) throw ContractError("lif_sequence needs a non-empty time axis");
  require_finite(x_seq, "lif_sequence");
  const Index steps = x_seq.dim(0);
  const Index width = x_seq.size() / steps;
  const auto beta = static_cast<Scalar>(params.beta);
  const auto v_reset = static_cast<Scalar>(params.v_reset);

  Array<Scalar> spikes(x_seq.size());
  Array<Scalar> membrane(x_seq.size());
  Array<Scalar> h = Array<Scalar>::Zero(width);
  const auto& x = x_seq.value();
  const bool shadow = surrogate_forward_enabled();
  const Scalar threshold = exact_threshold<Scalar>(params.u_th);
  for (Index t = 0; t < steps; ++t) {
    const Index off = t * width;
    auto u = membrane.segment(off, width);
    auto s = spikes.segment(off, width);
    u = h + x.segment(off, width);
    if (shadow) {
      for (Index i = 0; i < width; ++i) s[i] = step_value(params, u[i]);
    } else {
      s = (u >= threshold).template cast<Scalar>();
    }
    h = v_reset * s + beta * u * (Scalar(1) - s);
  }

  Var<Scalar> out = make_op<Scalar>(
      x_seq.shape(), std::move(spikes), "lif", {x_seq},
      [params, steps, width, beta, v_reset, membrane = std::move(membrane)](Node<Scalar>& self) {
        auto* gx = parent_grad(self, 0);
        if (!gx) return;
        const Array<Scalar> ds = surrogate_derivative_array(params, membrane);
        const auto& s = self.value;
        const auto& gs = self.grad;
        Array<Scalar> gh = Array<Scalar>::Zero(width);  // dL/dH[t]
        for (Index t = steps - 1; t >= 0; --t) {
          const Index off = t * width;
          const auto u = membrane.segment(off, width);
          const Array<Scalar> du = (gs.segment(off, width) + gh * (v_reset - beta * u)) * ds.segment(off, width) +
                                   gh * beta * (Scalar(1) - s.segment(off, width));
          gx->segment(off, width) += du;
          gh = du;
        }
      });
  return shadow ? SpikeTensor<Scalar>(std::move(out)) : SpikeTensor<Scalar>::adopt(std::move(out));
}

template class SpikeTensor<float>;
template class SpikeTensor<double>;
template bool is_binary<float>(const Array<float>&);
template bool is_binary<double>(const Array<double>&);
template Var<float> fire<float>(const Var<float>&, const LifParams&);
template Var<double> fire<double>(const Var<double>&, const LifParams&);
template LifStepResult<float> lif_step<float>(const Var<float>&, const LifState<float>&, const LifParams&);
template LifStepResult<double> lif_step<double>(const Var<double>&, const LifState<double>&, const LifParams&);
template SpikeTensor<float> lif_sequence<float>(const Var<float>&, const LifParams&);
template SpikeTensor<double> lif_sequence<double>(const Var<double>&, const LifParams&);

}  // namespace spikemoe
