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

#include "spikemoe/op_ledger.hpp"

namespace spikemoe {

namespace {

bool under_prefix(std::string_view site, std::string_view prefix) {
  if (prefix.empty()) return true;
  if (site.substr(0, prefix.size()) != prefix) return false;
  return site.size() == prefix.size() || site[prefix.size()] == '.';
}

}  // namespace

void OpLedger::add(const std::string& site, Index timestep, const OpCounts& counts) {
  auto& per_t = sites_[site];
  if (static_cast<Index>(per_t.size()) <= timestep) per_t.resize(static_cast<std::size_t>(timestep + 1));
  per_t[static_cast<std::size_t>(timestep)] += counts;
}

void OpLedger::merge(const OpLedger& other) {
  for (const auto& [site, per_t] : other.sites_) {
    for (std::size_t t = 0; t < per_t.size(); ++t) add(site, static_cast<Index>(t), per_t[t]);
  }
}

OpCounts OpLedger::total() const { return prefix_total(""); }

OpCounts OpLedger::site_total(const std::string& site) const {
  OpCounts out;
  if (auto it = sites_.find(site); it != sites_.end()) {
    for (const auto& c : it->second) out += c;
  }
  return out;
}

OpCounts OpLedger::prefix_total(std::string_view prefix) const {
  OpCounts out;
  for (const auto& [site, per_t] : sites_) {
    if (!under_prefix(site, prefix)) continue;
    for (const auto& c : per_t) out += c;
  }
  return out;
}

OpCounts OpLedger::prefix_at(std::string_view prefix, Index timestep) const {
  OpCounts out;
  for (const auto& [site, per_t] : sites_) {
    if (under_prefix(site, prefix) && timestep < static_cast<Index>(per_t.size())) {
      out += per_t[static_cast<std::size_t>(timestep)];
    }
  }
  return out;
}

std::uint64_t ExpertCallLog::total_rows() const {
  std::uint64_t n = 0;
  for (auto r : per_expert_rows) n += r;
  return n;
}

void ExpertCallLog::clear() {
  per_expert_rows.clear();
  token_expert_pairs.clear();
  invocations = 0;
}

std::string ForwardContext::site(std::string_view name) const {
  if (scope.empty()) return std::string(name);
  if (name.empty()) return scope;
  return scope + "." + std::string(name);
}

ScopeGuard::ScopeGuard(ForwardContext* ctx, std::string_view name) : ctx_(ctx) {
  if (!ctx_) return;
  previous_ = ctx_->scope;
  ctx_->scope = ctx_->site(name);
}

ScopeGuard::~ScopeGuard() {
  if (ctx_) ctx_->scope = previous_;
}

double energy_estimate(const OpLedger& ledger, double e_ac_pj, double e_mac_pj) {
  if (e_ac_pj < 0.0 || e_mac_pj < 0.0) throw ContractError("energy costs must be non-negative");
  const OpCounts t = ledger.total();
  return e_ac_pj * static_cast<double>(t.ac) + e_mac_pj * static_cast<double>(t.mac);
}

}  // namespace spikemoe
