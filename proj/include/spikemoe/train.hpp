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

// Optimization: AdamW with decoupled decay, warm-up plus cosine schedule, the
// epoch loop with JSONL metrics, evaluation and the timestep sweep.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "spikemoe/data.hpp"
#include "spikemoe/io.hpp"
#include "spikemoe/model.hpp"

namespace spikemoe {

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_epochs = 0;
  Index total_epochs = 10;
  std::uint64_t seed = 0;
  Index batch_size = 64;
  bool augment = true;

  /// Throws ContractError unless lr >= 0 and 0 <= warmup <= total.
  void validate() const;
};

template <typename Scalar>
struct AdamState {
  std::map<std::string, Array<Scalar>> first_moment;
  std::map<std::string, Array<Scalar>> second_moment;
  std::int64_t step = 0;
};

/// One AdamW update at learning rate `lr`. Parameters without a gradient are
/// skipped. Throws NumericError naming the first non-finite gradient before
/// anything is modified.
template <typename Scalar>
void adamw_step(std::vector<NamedParameter<Scalar>>& params, AdamState<Scalar>& state, const OptimConfig& cfg,
                double lr);

/// Linear warm-up from 0 to lr, then half-cosine down to 0 at total_epochs.
/// `epoch` may be fractional.
double lr_at(double epoch, const OptimConfig& cfg);

struct EvalResult {
  double accuracy = 0;  // fraction in [0, 1]
  double loss = 0;
  Index samples = 0;
  std::vector<std::vector<std::int64_t>> loads;  // per layer, per expert
  double load_entropy = 0;  // mean over layers, nats
};

struct EvalOptions {
  Index batch_size = 64;
  std::vector<std::string>* routing_lines = nullptr;  // JSONL routing records
  std::vector<AttentionMap>* attention = nullptr;
  Index max_samples = 0;  // 0 evaluates everything
};

EvalResult evaluate(SpikingMoeModel<float>& model, const Dataset& data, const EvalOptions& options = {});

struct EpochRecord {
  Index epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double aux = 0;
  double val_acc = 0;
  std::vector<std::vector<std::int64_t>> loads;
  double load_entropy = 0;
  std::uint64_t ac = 0;
  std::uint64_t mac = 0;
  double energy_pj = 0;

  std::string to_json() const;
};

struct TrainOptions {
  std::filesystem::path checkpoint_path;  // best-validation checkpoint
  std::filesystem::path metrics_path;     // one JSON line per epoch
  std::ostream* log = nullptr;
  Index profile_samples = 8;  // samples per epoch for the op ledger
};

struct TrainResult {
  std::vector<EpochRecord> history;
  Checkpoint best;
  double best_val_acc = -1;
  std::shared_ptr<SpikingMoeModel<float>> model;  // state after the last epoch
};

/// Trains a fresh model. `val` may be empty, in which case the clean training
/// set is evaluated instead. Reproducible for a given (config, seed, data).
TrainResult train(const ModelConfig& model_cfg, const OptimConfig& optim, const Dataset& train_set,
                  const Dataset& val_set, const TrainOptions& options = {});

/// Checks that the model geometry fits the dataset.
void check_compatible(const ModelConfig& cfg, const Dataset& data);

std::string routing_record_json(const RoutingRecord<float>& record, Index layer);

struct LoadTable {
  std::map<Index, std::vector<std::int64_t>> counts;  // layer -> per-expert selections
  std::vector<double> fractions(Index layer) const;
  double entropy(Index layer) const;  // nats
};

/// Aggregates JSONL routing records. Throws FormatError on a malformed line.
LoadTable aggregate_routing(const std::vector<std::string>& lines);

struct SweepEntry {
  Index timesteps = 0;
  double test_acc = 0;
  double final_train_loss = 0;
  double ac_per_sample = 0;
  double energy_pj_per_sample = 0;
};

struct SweepReport {
  std::vector<SweepEntry> entries;
  bool monotone_nondecreasing() const;
  std::string to_json() const;
};

/// Trains and evaluates one model per timestep count with everything else
/// fixed. Static inputs only.
SweepReport run_timestep_sweep(const ModelConfig& base, const OptimConfig& optim, const Dataset& train_set,
                               const Dataset& test_set, const std::vector<Index>& steps,
                               std::ostream* log = nullptr);

}  // namespace spikemoe
