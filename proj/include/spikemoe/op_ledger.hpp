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

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "spikemoe/tensor.hpp"

namespace spikemoe {

/// Operation counts for one site at one timestep.
struct OpCounts {
  std::uint64_t ac = 0;              // spike-gated accumulations
  std::uint64_t mac = 0;             // real-valued multiply-accumulates
  std::uint64_t spikes = 0;          // input spikes that triggered work
  std::uint64_t theoretical_ac = 0;  // spikes x fan-out
  std::uint64_t neuron_ops = 0;      // membrane leak / averaging multiplies

  OpCounts& operator+=(const OpCounts& o) {
    ac += o.ac;
    mac += o.mac;
    spikes += o.spikes;
    theoretical_ac += o.theoretical_ac;
    neuron_ops += o.neuron_ops;
    return *this;
  }
  bool operator==(const OpCounts&) const = default;
};

/// Exact per-(site, timestep) operation ledger. Site names are dotted paths
/// such as "layer0.sdsa.q"; a layer's totals are the sum over its prefix.
class OpLedger {
 public:
  void add(const std::string& site, Index timestep, const OpCounts& counts);
  void merge(const OpLedger& other);

  const std::map<std::string, std::vector<OpCounts>>& sites() const { return sites_; }
  OpCounts total() const;
  OpCounts site_total(const std::string& site) const;
  /// Sum over `prefix` itself and every site below it.
  OpCounts prefix_total(std::string_view prefix) const;
  /// Totals of one timestep over `prefix`.
  OpCounts prefix_at(std::string_view prefix, Index timestep) const;
  bool empty() const { return sites_.empty(); }

  bool operator==(const OpLedger&) const = default;

 private:
  std::map<std::string, std::vector<OpCounts>> sites_;
};

/// Captured attention gate maps, one entry per SDSA layer invocation.
struct AttentionMap {
  std::string site;
  Shape shape;  // (T, B, N, heads)
  std::vector<float> values;
};

/// Records which (token, expert) pairs an MoE layer actually evaluated.
struct ExpertCallLog {
  std::vector<std::uint64_t> per_expert_rows;
  std::vector<std::pair<Index, int>> token_expert_pairs;
  std::uint64_t invocations = 0;  // expert_forward calls (batched)

  std::uint64_t total_rows() const;
  void clear();
};

/// Optional instrumentation and mode for a forward pass.
struct ForwardContext {
  bool training = false;
  OpLedger* ledger = nullptr;
  std::vector<AttentionMap>* attention = nullptr;
  ExpertCallLog* expert_calls = nullptr;
  std::string scope;

  std::string site(std::string_view name) const;
};

/// Pushes a site prefix for the lifetime of the guard.
class ScopeGuard {
 public:
  ScopeGuard(ForwardContext* ctx, std::string_view name);
  ~ScopeGuard();
  ScopeGuard(const ScopeGuard&) = delete;
  ScopeGuard& operator=(const ScopeGuard&) = delete;

 private:
  ForwardContext* ctx_;
  std::string previous_;
};

/// e_ac * AC + e_mac * MAC in pJ. Throws ContractError on negative costs.
double energy_estimate(const OpLedger& ledger, double e_ac_pj = 0.9, double e_mac_pj = 4.6);

}  // namespace spikemoe
