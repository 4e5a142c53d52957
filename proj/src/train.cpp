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

#include "spikemoe/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include <json.hpp>

namespace spikemoe {

using Json = nlohmann::ordered_json;

void OptimConfig::validate() const {
  // Zero is allowed: it freezes the weights while still running the loop.
  if (!(lr >= 0) || !std::isfinite(lr)) throw ContractError("learning rate must be finite and non-negative");
  if (warmup_epochs < 0 || warmup_epochs > static_cast<double>(total_epochs)) {
    throw ContractError("warmup epochs must lie in [0, total_epochs]");
  }
  if (total_epochs < 0) throw ContractError("total epochs must be non-negative");
  if (batch_size <= 0) throw ContractError("batch size must be positive");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ContractError("betas must lie in [0, 1)");
  if (eps < 0 || weight_decay < 0) throw ContractError("eps and weight decay must be non-negative");
}

template <typename Scalar>
void adamw_step(std::vector<NamedParameter<Scalar>>& params, AdamState<Scalar>& state, const OptimConfig& cfg,
                double lr) {
  for (const auto& p : params) {
    if (p.var.has_grad() && !p.var.grad().allFinite()) {
      throw NumericError("non-finite gradient in parameter " + p.name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const auto b1 = static_cast<Scalar>(cfg.beta1);
  const auto b2 = static_cast<Scalar>(cfg.beta2);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(cfg.beta1, t));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(cfg.beta2, t));
  const auto step = static_cast<Scalar>(lr);
  const auto eps = static_cast<Scalar>(cfg.eps);
  const auto shrink = static_cast<Scalar>(1.0 - lr * cfg.weight_decay);
  for (auto& p : params) {
    if (!p.var.has_grad()) continue;
    const auto& g = p.var.grad();
    auto& m = state.first_moment[p.name];
    auto& v = state.second_moment[p.name];
    if (m.size() != g.size()) m = Array<Scalar>::Zero(g.size());
    if (v.size() != g.size()) v = Array<Scalar>::Zero(g.size());
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    auto& w = p.var.mutable_value();
    if (p.decay) w *= shrink;
    w -= step * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

double lr_at(double epoch, const OptimConfig& cfg) {
  const double total = static_cast<double>(cfg.total_epochs);
  const double warm = cfg.warmup_epochs;
  if (warm > 0 && epoch < warm) return cfg.lr * std::max(0.0, epoch) / warm;
  if (total <= warm) return epoch >= total ? 0.0 : cfg.lr;
  const double progress = std::clamp((epoch - warm) / (total - warm), 0.0, 1.0);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void check_compatible(const ModelConfig& cfg, const Dataset& data) {
  const bool events = data.input == InputKind::kEvents;
  if ((cfg.input == InputKind::kEvents) != events) {
    throw ContractError("model expects " + std::string(cfg.input == InputKind::kEvents ? "event" : "static") +
                        " input but the dataset holds " + (events ? "events" : "images"));
  }
  if (cfg.in_channels != data.channels || cfg.image_size != data.height || cfg.image_size != data.width) {
    throw ContractError("model input geometry (" + std::to_string(cfg.in_channels) + "x" +
                        std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) +
                        ") does not match dataset (" + std::to_string(data.channels) + "x" +
                        std::to_string(data.height) + "x" + std::to_string(data.width) + ")");
  }
  if (events && cfg.timesteps != data.timesteps) {
    throw ContractError("model timesteps " + std::to_string(cfg.timesteps) + " != event frames " +
                        std::to_string(data.timesteps));
  }
  if (cfg.num_classes < data.num_classes) {
    throw ContractError("model has " + std::to_string(cfg.num_classes) + " classes, dataset " +
                        std::to_string(data.num_classes));
  }
}

std::string routing_record_json(const RoutingRecord<float>& record, Index layer) {
  Json j;
  j["layer"] = layer;
  j["num_experts"] = record.num_experts;
  j["k"] = record.k;
  Json sel = Json::array();
  for (Index n = 0; n < record.num_tokens; ++n) {
    const auto s = record.selection(n);
    sel.push_back(std::vector<int>(s.begin(), s.end()));
  }
  j["selected"] = std::move(sel);
  return j.dump();
}

std::vector<double> LoadTable::fractions(Index layer) const {
  const auto& c = counts.at(layer);
  const double total = static_cast<double>(std::accumulate(c.begin(), c.end(), std::int64_t{0}));
  std::vector<double> out(c.size(), 0.0);
  if (total > 0) {
    for (std::size_t e = 0; e < c.size(); ++e) out[e] = static_cast<double>(c[e]) / total;
  }
  return out;
}

double LoadTable::entropy(Index layer) const { return load_entropy(counts.at(layer)); }

LoadTable aggregate_routing(const std::vector<std::string>& lines) {
  LoadTable table;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(lines[i]);
      const auto layer = j.at("layer").get<Index>();
      const auto experts = j.at("num_experts").get<Index>();
      auto& c = table.counts[layer];
      if (c.empty()) c.assign(static_cast<std::size_t>(experts), 0);
      if (static_cast<Index>(c.size()) != experts) throw FormatError("expert count changes within layer");
      for (const auto& token : j.at("selected")) {
        for (const auto& e : token) {
          const int idx = e.get<int>();
          if (idx < 0 || idx >= experts) throw FormatError("expert index " + std::to_string(idx) + " out of range");
          ++c[static_cast<std::size_t>(idx)];
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("routing log line " + std::to_string(i + 1) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("routing log line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return table;
}

namespace {

void add_loads(std::vector<std::vector<std::int64_t>>& acc, const std::vector<RoutingRecord<float>>& routing) {
  if (acc.size() < routing.size()) acc.resize(routing.size());
  for (std::size_t l = 0; l < routing.size(); ++l) {
    auto& a = acc[l];
    if (a.size() < routing[l].loads.size()) a.resize(routing[l].loads.size(), 0);
    for (std::size_t e = 0; e < routing[l].loads.size(); ++e) a[e] += routing[l].loads[e];
  }
}

double mean_entropy(const std::vector<std::vector<std::int64_t>>& loads) {
  if (loads.empty()) return 0.0;
  double h = 0;
  for (const auto& l : loads) h += load_entropy(l);
  return h / static_cast<double>(loads.size());
}

std::vector<Index> range(Index begin, Index end) {
  std::vector<Index> out(static_cast<std::size_t>(std::max<Index>(0, end - begin)));
  std::iota(out.begin(), out.end(), begin);
  return out;
}

}  // namespace

EvalResult evaluate(SpikingMoeModel<float>& model, const Dataset& data, const EvalOptions& options) {
  check_compatible(model.config(), data);
  NoGradGuard no_grad;
  EvalResult result;
  const Index n = options.max_samples > 0 ? std::min(options.max_samples, data.size()) : data.size();
  Index correct = 0;
  double loss_sum = 0;
  for (Index begin = 0; begin < n; begin += options.batch_size) {
    const auto idx = range(begin, std::min(n, begin + options.batch_size));
    const Batch batch = make_batch(data, idx);
    ForwardContext ctx;
    ctx.attention = options.attention;
    const ModelOutput<float> out = model.forward(batch.input, &ctx);
    const auto pred = predict(out.logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i] ? 1 : 0;
    loss_sum += static_cast<double>(model_loss(out, batch.labels, model.config()).item()) *
                static_cast<double>(idx.size());
    add_loads(result.loads, out.routing);
    if (options.routing_lines) {
      for (std::size_t l = 0; l < out.routing.size(); ++l) {
        options.routing_lines->push_back(routing_record_json(out.routing[l], static_cast<Index>(l)));
      }
    }
  }
  result.samples = n;
  result.accuracy = n > 0 ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  result.loss = n > 0 ? loss_sum / static_cast<double>(n) : 0.0;
  result.load_entropy = mean_entropy(result.loads);
  return result;
}

std::string EpochRecord::to_json() const {
  Json j;
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["train_loss"] = train_loss;
  j["train_acc"] = train_acc;
  j["aux"] = aux;
  j["val_acc"] = val_acc;
  j["loads"] = loads;
  j["load_entropy"] = load_entropy;
  j["ac"] = ac;
  j["mac"] = mac;
  j["energy_pj"] = energy_pj;
  return j.dump();
}

namespace {

OptimizerSnapshot snapshot_optimizer(const AdamState<float>& state) {
  OptimizerSnapshot snap;
  snap.step = state.step;
  for (const auto& [name, m] : state.first_moment) {
    snap.first_moment.push_back({name, {m.size()}, std::vector<float>(m.data(), m.data() + m.size())});
  }
  for (const auto& [name, v] : state.second_moment) {
    snap.second_moment.push_back({name, {v.size()}, std::vector<float>(v.data(), v.data() + v.size())});
  }
  return snap;
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const OptimConfig& optim, const Dataset& train_set,
                  const Dataset& val_set, const TrainOptions& options) {
  optim.validate();
  if (train_set.size() == 0) throw ContractError("training set is empty");
  check_compatible(model_cfg, train_set);
  const Dataset& held = val_set.size() > 0 ? val_set : train_set;
  check_compatible(model_cfg, held);

  TrainResult result;
  result.model = std::make_shared<SpikingMoeModel<float>>(model_cfg);
  auto& model = *result.model;
  auto params = model.parameters();
  AdamState<float> state;
  std::mt19937_64 rng(optim.seed);
  const AugmentConfig aug = optim.augment && train_set.input == InputKind::kStatic
                                ? AugmentConfig{true, 4}
                                : AugmentConfig{};
  const Index steps_per_epoch = (train_set.size() + optim.batch_size - 1) / optim.batch_size;
  std::string metrics;

  std::vector<Index> order = range(0, train_set.size());
  for (Index epoch = 0; epoch < optim.total_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    Index correct = 0;
    double loss_sum = 0;
    double aux_sum = 0;
    for (Index s = 0; s < steps_per_epoch; ++s) {
      const Index begin = s * optim.batch_size;
      const Index end = std::min(train_set.size(), begin + optim.batch_size);
      const std::span<const Index> idx(order.data() + begin, static_cast<std::size_t>(end - begin));
      const Batch batch = make_batch(train_set, idx, aug, &rng);
      ForwardContext ctx;
      ctx.training = true;
      const ModelOutput<float> out = model.forward(batch.input, &ctx);
      const Var<float> loss = model_loss(out, batch.labels, model_cfg);
      for (auto& p : params) p.var.zero_grad();
      backward(loss);
      rec.lr = lr_at(static_cast<double>(epoch) + static_cast<double>(s + 1) / static_cast<double>(steps_per_epoch),
                     optim);
      adamw_step(params, state, optim, rec.lr);

      const auto pred = predict(out.logits);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i] ? 1 : 0;
      const auto bsz = static_cast<double>(idx.size());
      loss_sum += static_cast<double>(loss.item()) * bsz;
      aux_sum += static_cast<double>(out.aux_total.item()) * bsz;
      add_loads(rec.loads, out.routing);
    }
    const auto n = static_cast<double>(train_set.size());
    rec.train_loss = loss_sum / n;
    rec.train_acc = static_cast<double>(correct) / n;
    rec.aux = aux_sum / n;
    rec.load_entropy = mean_entropy(rec.loads);
    rec.val_acc = evaluate(model, held, {optim.batch_size}).accuracy;

    if (options.profile_samples > 0) {
      const auto idx = range(0, std::min(options.profile_samples, held.size()));
      const OpLedger ledger = profile_forward(model, make_batch(held, idx).input);
      const OpCounts total = ledger.total();
      rec.ac = total.ac;
      rec.mac = total.mac;
      rec.energy_pj = energy_estimate(ledger);
    }

    const std::string line = rec.to_json();
    metrics += line + "\n";
    if (!options.metrics_path.empty()) write_file_atomic(options.metrics_path, metrics);
    if (options.log) *options.log << line << "\n";

    if (rec.val_acc > result.best_val_acc) {
      result.best_val_acc = rec.val_acc;
      result.best = capture_checkpoint(model);
      result.best.optimizer = snapshot_optimizer(state);
      result.best.metrics_json = line;
      if (!options.checkpoint_path.empty()) save_checkpoint(result.best, options.checkpoint_path);
    }
    result.history.push_back(std::move(rec));
  }
  if (result.history.empty()) {
    result.best = capture_checkpoint(model);
    if (!options.checkpoint_path.empty()) save_checkpoint(result.best, options.checkpoint_path);
  }
  return result;
}

bool SweepReport::monotone_nondecreasing() const {
  for (std::size_t i = 1; i < entries.size(); ++i) {
    if (entries[i].test_acc < entries[i - 1].test_acc) return false;
  }
  return true;
}

std::string SweepReport::to_json() const {
  Json j;
  Json rows = Json::array();
  for (const auto& e : entries) {
    Json r;
    r["timesteps"] = e.timesteps;
    r["test_acc"] = e.test_acc;
    r["final_train_loss"] = e.final_train_loss;
    r["ac_per_sample"] = e.ac_per_sample;
    r["energy_pj_per_sample"] = e.energy_pj_per_sample;
    rows.push_back(std::move(r));
  }
  j["entries"] = std::move(rows);
  j["monotone_nondecreasing"] = monotone_nondecreasing();
  return j.dump(2);
}

SweepReport run_timestep_sweep(const ModelConfig& base, const OptimConfig& optim, const Dataset& train_set,
                               const Dataset& test_set, const std::vector<Index>& steps, std::ostream* log) {
  if (base.input != InputKind::kStatic) throw ContractError("timestep sweep needs static inputs");
  SweepReport report;
  for (Index t : steps) {
    ModelConfig cfg = base;
    cfg.timesteps = t;
    TrainOptions opts;
    opts.profile_samples = 0;
    TrainResult run = train(cfg, optim, train_set, test_set, opts);
    SweepEntry entry;
    entry.timesteps = t;
    entry.test_acc = evaluate(*run.model, test_set, {optim.batch_size}).accuracy;
    entry.final_train_loss = run.history.empty() ? 0.0 : run.history.back().train_loss;
    const Index probe = std::min<Index>(16, test_set.size());
    const OpLedger ledger = profile_forward(*run.model, make_batch(test_set, range(0, probe)).input);
    entry.ac_per_sample = static_cast<double>(ledger.total().ac) / static_cast<double>(probe);
    entry.energy_pj_per_sample = energy_estimate(ledger) / static_cast<double>(probe);
    if (log) {
      *log << "timesteps " << t << " test_acc " << entry.test_acc << "\n";
    }
    report.entries.push_back(entry);
  }
  return report;
}

template void adamw_step<float>(std::vector<NamedParameter<float>>&, AdamState<float>&, const OptimConfig&, double);
template void adamw_step<double>(std::vector<NamedParameter<double>>&, AdamState<double>&, const OptimConfig&,
                                 double);

}  // namespace spikemoe
