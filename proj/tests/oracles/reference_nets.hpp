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

// Loop-level reference implementations of the spiking layers. They share no
// code with the library beyond reading parameter values, and use the same
// per-element arithmetic order so that results can be compared bit-exactly.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spikemoe/lif.hpp"
#include "spikemoe/moe.hpp"
#include "spikemoe/op_ledger.hpp"
#include "spikemoe/sdsa.hpp"

namespace oracle {

using spikemoe::Index;

/// Dense (T, rows, cols) buffer.
template <typename S>
struct Seq {
  Index steps = 0, rows = 0, cols = 0;
  std::vector<S> v;
  Seq() = default;
  Seq(Index t, Index r, Index c) : steps(t), rows(r), cols(c), v(static_cast<std::size_t>(t * r * c), S(0)) {}
  S& at(Index t, Index r, Index c) { return v[static_cast<std::size_t>((t * rows + r) * cols + c)]; }
  S at(Index t, Index r, Index c) const { return v[static_cast<std::size_t>((t * rows + r) * cols + c)]; }
  Index nnz_at(Index t) const {
    Index n = 0;
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) n += at(t, r, c) != S(0) ? 1 : 0;
    return n;
  }
};

/// Per-(site, timestep) counts kept by the instrumented references.
struct Ledger {
  std::map<std::string, std::vector<spikemoe::OpCounts>> sites;
  spikemoe::OpCounts& at(const std::string& site, Index t) {
    auto& v = sites[site];
    if (static_cast<Index>(v.size()) <= t) v.resize(static_cast<std::size_t>(t + 1));
    return v[static_cast<std::size_t>(t)];
  }
};

/// LIF recursion over the time axis of x, one neuron at a time.
template <typename S>
Seq<S> lif(const Seq<S>& x, const spikemoe::LifParams& p) {
  Seq<S> out(x.steps, x.rows, x.cols);
  for (Index r = 0; r < x.rows; ++r) {
    for (Index c = 0; c < x.cols; ++c) {
      S h = 0;
      for (Index t = 0; t < x.steps; ++t) {
        const S u = h + x.at(t, r, c);
        const bool fire = static_cast<double>(u) >= p.u_th;
        out.at(t, r, c) = fire ? S(1) : S(0);
        h = fire ? static_cast<S>(p.v_reset) : static_cast<S>(p.beta) * u;
      }
    }
  }
  return out;
}

/// bias + sum of weight rows picked by the active inputs, ascending. When a
/// ledger is given, every (active input, weight) pair adds one accumulate.
template <typename S>
Seq<S> accumulate(const Seq<S>& s, const spikemoe::Var<S>& w, const spikemoe::Var<S>& b, Ledger* ledger = nullptr,
                  const std::string& site = {}) {
  const Index in = w.dim(0);
  const Index out_dim = w.dim(1);
  Seq<S> out(s.steps, s.rows, out_dim);
  const auto& wv = w.value();
  for (Index t = 0; t < s.steps; ++t) {
    for (Index r = 0; r < s.rows; ++r) {
      for (Index o = 0; o < out_dim; ++o) {
        S acc = b.defined() ? b.value()[o] : S(0);
        for (Index j = 0; j < in; ++j) {
          if (s.at(t, r, j) != S(0)) {
            acc += wv[j * out_dim + o];
            if (ledger) ++ledger->at(site, t).ac;
          }
        }
        out.at(t, r, o) = acc;
      }
    }
    if (ledger) {
      auto& c = ledger->at(site, t);
      c.spikes += static_cast<std::uint64_t>(s.nnz_at(t));
      c.theoretical_ac += static_cast<std::uint64_t>(s.nnz_at(t) * out_dim);
    }
  }
  return out;
}

template <typename S>
void count_neurons(Ledger* ledger, const std::string& site, const Seq<S>& x) {
  if (!ledger) return;
  for (Index t = 0; t < x.steps; ++t) ledger->at(site, t).neuron_ops += static_cast<std::uint64_t>(x.rows * x.cols);
}

template <typename S>
Seq<S> from_var(const spikemoe::Var<S>& v) {
  const Index steps = v.dim(0);
  const Index cols = v.shape().back();
  Seq<S> out(steps, v.size() / (steps * cols), cols);
  for (Index i = 0; i < v.size(); ++i) out.v[static_cast<std::size_t>(i)] = v.value()[i];
  return out;
}

template <typename S>
Seq<S> add(const Seq<S>& a, const Seq<S>& b) {
  Seq<S> out = a;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = a.v[i] + b.v[i];
  return out;
}

template <typename S>
struct SdsaTrace {
  Seq<S> q, k, v, a, g, gated, membrane;
};

/// Spike-driven attention with Q (x) K materialized entry by entry.
template <typename S>
SdsaTrace<S> sdsa(const Seq<S>& s, const spikemoe::SdsaLayer<S>& layer, Ledger* ledger = nullptr,
                  const std::string& scope = {}) {
  SdsaTrace<S> tr;
  const auto site = [&](const std::string& n) { return scope + n; };
  tr.q = lif(accumulate(s, layer.q.weight, layer.q.bias, ledger, site("q")), layer.q.lif);
  count_neurons(ledger, site("q"), tr.q);
  tr.k = lif(accumulate(s, layer.k.weight, layer.k.bias, ledger, site("k")), layer.k.lif);
  count_neurons(ledger, site("k"), tr.k);
  tr.v = lif(accumulate(s, layer.v.weight, layer.v.bias, ledger, site("v")), layer.v.lif);
  count_neurons(ledger, site("v"), tr.v);

  const Index d = s.cols;
  const Index heads = layer.heads;
  const Index hd = d / heads;
  Seq<S> hadamard(s.steps, s.rows, d);
  for (std::size_t i = 0; i < hadamard.v.size(); ++i) hadamard.v[i] = tr.q.v[i] * tr.k.v[i];
  tr.a = Seq<S>(s.steps, s.rows, heads);
  for (Index t = 0; t < s.steps; ++t) {
    for (Index r = 0; r < s.rows; ++r) {
      for (Index h = 0; h < heads; ++h) {
        S sum = 0;
        for (Index c = h * hd; c < (h + 1) * hd; ++c) sum += hadamard.at(t, r, c);
        tr.a.at(t, r, h) = sum;
        if (ledger) ledger->at(site("qk"), t).ac += static_cast<std::uint64_t>(sum);
      }
    }
    if (ledger) {
      auto& c = ledger->at(site("qk"), t);
      c.spikes += static_cast<std::uint64_t>(tr.q.nnz_at(t));
      c.theoretical_ac += static_cast<std::uint64_t>(tr.q.nnz_at(t));
    }
  }
  count_neurons(ledger, site("qk"), tr.a);
  tr.g = lif(tr.a, layer.lif_attn);
  tr.gated = Seq<S>(s.steps, s.rows, d);
  for (Index t = 0; t < s.steps; ++t) {
    for (Index r = 0; r < s.rows; ++r)
      for (Index c = 0; c < d; ++c) tr.gated.at(t, r, c) = tr.g.at(t, r, c / hd) * tr.v.at(t, r, c);
    if (ledger) {
      auto& c = ledger->at(site("gate_v"), t);
      c.ac += static_cast<std::uint64_t>(tr.gated.nnz_at(t));
      c.spikes += static_cast<std::uint64_t>(tr.v.nnz_at(t));
      c.theoretical_ac += static_cast<std::uint64_t>(tr.v.nnz_at(t));
    }
  }
  tr.membrane = accumulate(tr.gated, layer.out.weight, layer.out.bias, ledger, site("out"));
  return tr;
}

template <typename S>
struct MoeTrace {
  Seq<S> gate_membrane, g;
  std::vector<std::vector<int>> selected;  // per token, best first
  std::vector<std::int64_t> loads;
  Seq<S> combined, out;
  std::vector<bool> evaluated;  // experts the reference ran on at least one token
};

/// Top-k by repeated arg-max with lowest-index ties.
inline std::vector<int> topk(const std::vector<double>& counts, Index k, int forced = -1) {
  std::vector<int> out;
  std::vector<bool> used(counts.size(), false);
  if (forced >= 0) {
    out.push_back(forced);
    used[static_cast<std::size_t>(forced)] = true;
  }
  while (static_cast<Index>(out.size()) < k) {
    int best = -1;
    for (std::size_t e = 0; e < counts.size(); ++e) {
      if (used[e]) continue;
      if (best < 0 || counts[e] > counts[static_cast<std::size_t>(best)]) best = static_cast<int>(e);
    }
    used[static_cast<std::size_t>(best)] = true;
    out.push_back(best);
  }
  return out;
}

/// Mixture block evaluated densely: every expert runs on every token and
/// unselected results are multiplied by zero. With a ledger, counts are taken
/// only for (token, expert) pairs the sparse layer would evaluate.
template <typename S>
MoeTrace<S> moe(const Seq<S>& s, const spikemoe::MoeLayer<S>& layer, Ledger* ledger = nullptr,
                const std::string& scope = {}) {
  MoeTrace<S> tr;
  const auto site = [&](const std::string& n) { return scope + n; };
  const Index experts = layer.num_experts();
  const Index tokens = s.rows;
  const Index d = s.cols;

  // Prompt half of the gate input, identical for every token.
  std::vector<S> prompt_term(static_cast<std::size_t>(experts), S(0));
  const auto& pv = layer.prompt.p.value();
  const auto& wp = layer.gate_weight_prompt.value();
  for (Index e = 0; e < experts; ++e) {
    S acc = 0;
    for (Index j = 0; j < pv.size(); ++j) acc += pv[j] * wp[j * experts + e];
    prompt_term[static_cast<std::size_t>(e)] = acc;
  }
  tr.gate_membrane = accumulate(s, layer.gate_weight_tokens, layer.gate_bias, ledger, site("gate"));
  for (Index t = 0; t < s.steps; ++t)
    for (Index n = 0; n < tokens; ++n)
      for (Index e = 0; e < experts; ++e) tr.gate_membrane.at(t, n, e) += prompt_term[static_cast<std::size_t>(e)];
  count_neurons(ledger, site("gate"), tr.gate_membrane);
  tr.g = lif(tr.gate_membrane, layer.gate_lif);

  const int forced = layer.force_shared ? static_cast<int>(layer.shared_index) : -1;
  tr.loads.assign(static_cast<std::size_t>(experts), 0);
  std::vector<std::vector<S>> mask(static_cast<std::size_t>(experts), std::vector<S>(static_cast<std::size_t>(tokens), S(0)));
  for (Index n = 0; n < tokens; ++n) {
    std::vector<double> counts(static_cast<std::size_t>(experts), 0.0);
    for (Index t = 0; t < s.steps; ++t)
      for (Index e = 0; e < experts; ++e) counts[static_cast<std::size_t>(e)] += static_cast<double>(tr.g.at(t, n, e));
    tr.selected.push_back(topk(counts, layer.k, forced));
    for (int e : tr.selected.back()) {
      ++tr.loads[static_cast<std::size_t>(e)];
      mask[static_cast<std::size_t>(e)][static_cast<std::size_t>(n)] = S(1);
    }
  }

  tr.combined = Seq<S>(s.steps, tokens, d);
  tr.evaluated.assign(static_cast<std::size_t>(experts), false);
  for (Index e = 0; e < experts; ++e) {
    const auto& ex = *layer.experts[static_cast<std::size_t>(e)];
    const bool used = tr.loads[static_cast<std::size_t>(e)] > 0;
    tr.evaluated[static_cast<std::size_t>(e)] = used;
    // Counting covers only the rows routed to this expert.
    Ledger* l = used ? ledger : nullptr;
    Seq<S> routed_in(s.steps, 0, d);
    Seq<S> hidden_all = lif(accumulate(s, ex.fc1.weight, ex.fc1.bias), ex.fc1.lif);
    Seq<S> y = accumulate(hidden_all, ex.w2, ex.b2);
    if (l) {
      const std::string base = site("expert" + std::to_string(e));
      Index rows = 0;
      for (Index n = 0; n < tokens; ++n) rows += mask[static_cast<std::size_t>(e)][static_cast<std::size_t>(n)] != S(0) ? 1 : 0;
      Seq<S> sub(s.steps, rows, d), hsub(s.steps, rows, ex.hidden());
      Index r = 0;
      for (Index n = 0; n < tokens; ++n) {
        if (mask[static_cast<std::size_t>(e)][static_cast<std::size_t>(n)] == S(0)) continue;
        for (Index t = 0; t < s.steps; ++t) {
          for (Index c = 0; c < d; ++c) sub.at(t, r, c) = s.at(t, n, c);
          for (Index c = 0; c < ex.hidden(); ++c) hsub.at(t, r, c) = hidden_all.at(t, n, c);
        }
        ++r;
      }
      accumulate(sub, ex.fc1.weight, ex.fc1.bias, l, base + ".fc1");
      count_neurons(l, base + ".fc1", hsub);
      accumulate(hsub, ex.w2, ex.b2, l, base + ".fc2");
    }
    for (Index t = 0; t < s.steps; ++t)
      for (Index n = 0; n < tokens; ++n)
        for (Index c = 0; c < d; ++c)
          tr.combined.at(t, n, c) += mask[static_cast<std::size_t>(e)][static_cast<std::size_t>(n)] * y.at(t, n, c);
  }
  const S inv_k = S(1) / static_cast<S>(layer.k);
  Seq<S> membrane(s.steps, tokens, d);
  for (std::size_t i = 0; i < membrane.v.size(); ++i) membrane.v[i] = tr.combined.v[i] * inv_k + s.v[i];
  count_neurons(ledger, site("combine"), membrane);
  if (ledger) {
    for (Index t = 0; t < s.steps; ++t) {
      auto& c = ledger->at(site("residual"), t);
      c.ac += static_cast<std::uint64_t>(s.nnz_at(t));
      c.spikes += static_cast<std::uint64_t>(s.nnz_at(t));
      c.theoretical_ac += static_cast<std::uint64_t>(s.nnz_at(t));
    }
  }
  count_neurons(ledger, site("out"), membrane);
  tr.out = lif(membrane, layer.out_lif);
  return tr;
}

}  // namespace oracle
