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

#include "spikemoe/linear.hpp"

#include <cmath>
#include <memory>

namespace spikemoe {

template <typename Scalar>
Var<Scalar> init_weight(Index fan_in, Index fan_out, double gain, std::mt19937_64& rng) {
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(std::max<Index>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Array<Scalar> w(fan_in * fan_out);
  for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(dist(rng));
  return Var<Scalar>::parameter({fan_in, fan_out}, std::move(w));
}

template <typename Scalar>
SpikeLinear<Scalar> SpikeLinear<Scalar>::create(Index in, Index out, const LifParams& lif, double gain,
                                                std::mt19937_64& rng) {
  lif.validate();
  return {init_weight<Scalar>(in, out, gain, rng), Var<Scalar>::parameter({out}, Array<Scalar>::Zero(out)), lif};
}

template <typename Scalar>
Linear<Scalar> Linear<Scalar>::create(Index in, Index out, double gain, std::mt19937_64& rng) {
  return {init_weight<Scalar>(in, out, gain, rng), Var<Scalar>::parameter({out}, Array<Scalar>::Zero(out))};
}

namespace {

// Column indices of the nonzero entries of each row.
struct ActiveSet {
  std::vector<Index> row_begin;
  std::vector<Index> cols;
};

template <typename Scalar>
ActiveSet active_columns(const Array<Scalar>& v, Index rows, Index cols) {
  ActiveSet a;
  a.row_begin.resize(static_cast<std::size_t>(rows + 1));
  a.cols.reserve(static_cast<std::size_t>(v.size() / 4));
  for (Index r = 0; r < rows; ++r) {
    a.row_begin[r] = static_cast<Index>(a.cols.size());
    const Scalar* row = v.data() + r * cols;
    for (Index c = 0; c < cols; ++c) {
      if (row[c] != Scalar(0)) a.cols.push_back(c);
    }
  }
  a.row_begin[rows] = static_cast<Index>(a.cols.size());
  return a;
}

}  // namespace

template <typename Scalar>
Var<Scalar> spike_matmul(const SpikeTensor<Scalar>& s, const Var<Scalar>& w, const Var<Scalar>& bias) {
  const Var<Scalar>& x = s.values();
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(0)) {
    throw DimensionError("spike_matmul: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(w.shape()));
  }
  const Index in = w.dim(0);
  const Index out_dim = w.dim(1);
  if (bias.defined() && bias.size() != out_dim) throw DimensionError("spike_matmul: bias extent mismatch");
  const Index rows = in == 0 ? 0 : x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;

  Array<Scalar> out(rows * out_dim);
  MatrixMap<Scalar> om(out.data(), rows, out_dim);
  const ConstMatrixMap<Scalar> wm = w.matrix();
  std::shared_ptr<ActiveSet> active;
  if (surrogate_forward_enabled()) {
    // Shadow forward: inputs are real-valued surrogate activations.
    om.noalias() = ConstMatrixMap<Scalar>(x.value().data(), rows, in) * wm;
    if (bias.defined()) om.rowwise() += bias.value().matrix().transpose();
  } else {
    active = std::make_shared<ActiveSet>(active_columns(x.value(), rows, in));
    for (Index r = 0; r < rows; ++r) {
      if (bias.defined()) {
        om.row(r) = bias.value().matrix().transpose();
      } else {
        om.row(r).setZero();
      }
      for (Index j = active->row_begin[r]; j < active->row_begin[r + 1]; ++j) om.row(r) += wm.row(active->cols[j]);
    }
  }

  std::vector<Var<Scalar>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_op<Scalar>(out_shape, std::move(out), "spike_matmul", std::move(inputs),
                         [rows, in, out_dim, active](Node<Scalar>& self) {
                           ConstMatrixMap<Scalar> g(self.grad.data(), rows, out_dim);
                           const auto& xv = self.parents[0]->value;
                           ConstMatrixMap<Scalar> wm(self.parents[1]->value.data(), in, out_dim);
                           if (auto* gw = parent_grad(self, 1)) {
                             MatrixMap<Scalar> gwm(gw->data(), in, out_dim);
                             if (active) {
                               for (Index r = 0; r < rows; ++r) {
                                 for (Index j = active->row_begin[r]; j < active->row_begin[r + 1]; ++j) {
                                   gwm.row(active->cols[j]) += g.row(r);
                                 }
                               }
                             } else {
                               gwm.noalias() += ConstMatrixMap<Scalar>(xv.data(), rows, in).transpose() * g;
                             }
                           }
                           if (self.parents.size() > 2) {
                             if (auto* gb = parent_grad(self, 2)) *gb += g.colwise().sum().transpose().array();
                           }
                           if (auto* gx = parent_grad(self, 0)) {
                             MatrixMap<Scalar>(gx->data(), rows, in).noalias() += g * wm.transpose();
                           }
                         });
}

template <typename Scalar>
void count_accumulate(ForwardContext* ctx, std::string_view site, const SpikeTensor<Scalar>& input, Index fan_out) {
  if (!ctx || !ctx->ledger) return;
  const auto& v = input.values().value();
  const Index steps = input.dim(0);
  const Index width = input.size() / steps;
  const std::string name = ctx->site(site);
  for (Index t = 0; t < steps; ++t) {
    const auto n = static_cast<std::uint64_t>((v.segment(t * width, width) != Scalar(0)).count());
    OpCounts c;
    c.spikes = n;
    c.ac = n * static_cast<std::uint64_t>(fan_out);
    c.theoretical_ac = c.ac;
    ctx->ledger->add(name, t, c);
  }
}

void count_neurons(ForwardContext* ctx, std::string_view site, const Shape& shape) {
  if (!ctx || !ctx->ledger) return;
  const Index steps = shape.at(0);
  const auto width = static_cast<std::uint64_t>(numel(shape) / steps);
  const std::string name = ctx->site(site);
  for (Index t = 0; t < steps; ++t) {
    OpCounts c;
    c.neuron_ops = width;
    ctx->ledger->add(name, t, c);
  }
}

template <typename Scalar>
Var<Scalar> spike_linear_membrane(const SpikeTensor<Scalar>& s, const SpikeLinear<Scalar>& layer,
                                  ForwardContext* ctx, std::string_view site) {
  count_accumulate(ctx, site, s, layer.out_features());
  return spike_matmul(s, layer.weight, layer.bias);
}

template <typename Scalar>
SpikeTensor<Scalar> spike_linear(const SpikeTensor<Scalar>& s, const SpikeLinear<Scalar>& layer, ForwardContext* ctx,
                                 std::string_view site) {
  Var<Scalar> u = spike_linear_membrane(s, layer, ctx, site);
  count_neurons(ctx, site, u.shape());
  return spike_norm(u, layer.lif);
}

#define SPIKEMOE_INSTANTIATE_LINEAR(S)                                                                          \
  template Var<S> init_weight<S>(Index, Index, double, std::mt19937_64&);                                       \
  template struct SpikeLinear<S>;                                                                               \
  template struct Linear<S>;                                                                                    \
  template Var<S> spike_matmul<S>(const SpikeTensor<S>&, const Var<S>&, const Var<S>&);                         \
  template void count_accumulate<S>(ForwardContext*, std::string_view, const SpikeTensor<S>&, Index);           \
  template Var<S> spike_linear_membrane<S>(const SpikeTensor<S>&, const SpikeLinear<S>&, ForwardContext*,       \
                                           std::string_view);                                                   \
  template SpikeTensor<S> spike_linear<S>(const SpikeTensor<S>&, const SpikeLinear<S>&, ForwardContext*,        \
                                          std::string_view);

SPIKEMOE_INSTANTIATE_LINEAR(float)
SPIKEMOE_INSTANTIATE_LINEAR(double)

}  // namespace spikemoe
