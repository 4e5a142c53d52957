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

#include "spikemoe/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "spikemoe/data.hpp"
#include "spikemoe/io.hpp"
#include "spikemoe/train.hpp"

namespace spikemoe {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// Model, optimizer and data settings shared by every subcommand. Values come
// from an optional JSON config file, then explicit flags.
struct RunSettings {
  ModelConfig model;
  OptimConfig optim;
  DatasetSpec data;
  fs::path test_path;
  std::uint64_t data_seed = 0;
};

struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  Index epochs = 0;
  double lr = 0;
  Index timesteps = 0;
  Index layers = 0;
  Index dim = 0;
  Index heads = 0;
  Index experts = 0;
  Index topk = 0;
  double alpha_aux = 0;
  std::string loss;
  std::string data_kind;
  std::string data_path;
  std::string test_path;
  Index count = 0;
  Index batch_size = 0;
  Index patch = 0;
  double val_fraction = 0;
  std::uint64_t data_seed = 0;
  std::string checkpoint;
  std::string out;

  std::map<std::string, CLI::Option*> opts;
  bool given(const std::string& name) const {
    const auto it = opts.find(name);
    return it != opts.end() && it->second->count() > 0;
  }
};

void add_model_flags(CLI::App* cmd, Flags& f) {
  f.opts["config"] = cmd->add_option("--config", f.config, "JSON config file (flags override it)");
  f.opts["seed"] = cmd->add_option("--seed", f.seed, "Seed for initialization, shuffling and augmentation");
  f.opts["epochs"] = cmd->add_option("--epochs", f.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
  f.opts["lr"] = cmd->add_option("--lr", f.lr, "Peak learning rate (0 freezes the weights)")->check(CLI::NonNegativeNumber);
  f.opts["timesteps"] = cmd->add_option("--timesteps", f.timesteps, "Simulation timesteps T")->check(CLI::PositiveNumber);
  f.opts["layers"] = cmd->add_option("--layers", f.layers, "Encoder layers")->check(CLI::NonNegativeNumber);
  f.opts["dim"] = cmd->add_option("--dim", f.dim, "Embedding dimension")->check(CLI::PositiveNumber);
  f.opts["heads"] = cmd->add_option("--heads", f.heads, "Attention heads")->check(CLI::PositiveNumber);
  f.opts["experts"] = cmd->add_option("--experts", f.experts, "Experts per layer, shared slot included")
                          ->check(CLI::PositiveNumber);
  f.opts["topk"] = cmd->add_option("--topk", f.topk, "Experts selected per token")->check(CLI::PositiveNumber);
  f.opts["alpha-aux"] = cmd->add_option("--alpha-aux", f.alpha_aux, "Routing auxiliary loss weight")
                            ->check(CLI::NonNegativeNumber);
  f.opts["loss"] = cmd->add_option("--loss", f.loss, "Classification loss")->check(CLI::IsMember({"ce", "tet"}));
  f.opts["batch-size"] = cmd->add_option("--batch-size", f.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
  f.opts["patch"] = cmd->add_option("--patch", f.patch, "Patch size")->check(CLI::PositiveNumber);
}

void add_data_flags(CLI::App* cmd, Flags& f) {
  f.opts["data-kind"] = cmd->add_option("--data-kind", f.data_kind, "Dataset kind")
                            ->check(CLI::IsMember({"cifar10-binary", "synthetic-static", "synthetic-events"}));
  f.opts["data-path"] = cmd->add_option("--data-path,--data", f.data_path, "Dataset file or CIFAR-10 directory");
  f.opts["test-path"] = cmd->add_option("--test-path", f.test_path, "Held-out dataset file");
  f.opts["count"] = cmd->add_option("--count", f.count, "Samples to use (0 keeps all)")->check(CLI::NonNegativeNumber);
  f.opts["val-fraction"] = cmd->add_option("--val-fraction", f.val_fraction, "Fraction held out for validation")
                               ->check(CLI::Range(0.0, 0.99));
  f.opts["data-seed"] = cmd->add_option("--data-seed", f.data_seed, "Seed for synthetic data");
}

void apply_optim_json(const Json& j, OptimConfig& o) {
  for (const auto& [key, value] : j.items()) {
    if (key == "lr") o.lr = value.get<double>();
    else if (key == "weight_decay") o.weight_decay = value.get<double>();
    else if (key == "beta1") o.beta1 = value.get<double>();
    else if (key == "beta2") o.beta2 = value.get<double>();
    else if (key == "eps") o.eps = value.get<double>();
    else if (key == "warmup_epochs") o.warmup_epochs = value.get<double>();
    else if (key == "epochs" || key == "total_epochs") o.total_epochs = value.get<Index>();
    else if (key == "seed") o.seed = value.get<std::uint64_t>();
    else if (key == "batch_size") o.batch_size = value.get<Index>();
    else if (key == "augment") o.augment = value.get<bool>();
    else throw FormatError("unknown optim key '" + key + "'");
  }
}

void apply_data_json(const Json& j, RunSettings& s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "kind") s.data.kind = parse_dataset_kind(value.get<std::string>());
    else if (key == "path") s.data.path = value.get<std::string>();
    else if (key == "test_path") s.test_path = value.get<std::string>();
    else if (key == "count") s.data.count = value.get<Index>();
    else if (key == "seed") s.data_seed = value.get<std::uint64_t>();
    else if (key == "image_size") s.data.image_size = value.get<Index>();
    else if (key == "num_classes") s.data.num_classes = value.get<int>();
    else if (key == "timesteps") s.data.timesteps = value.get<Index>();
    else if (key == "val_fraction") s.data.val_fraction = value.get<double>();
    else if (key == "mean") s.data.mean = value.get<std::vector<float>>();
    else if (key == "stddev") s.data.stddev = value.get<std::vector<float>>();
    else throw FormatError("unknown data key '" + key + "'");
  }
}

RunSettings resolve(const Flags& f) {
  RunSettings s;
  if (!f.config.empty()) {
    Json j;
    try {
      j = Json::parse(read_file(f.config));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(f.config + ": " + e.what());
    }
    try {
      for (const auto& [key, value] : j.items()) {
        if (key == "model") s.model = config_from_json(value.dump(), s.model);
        else if (key == "optim") apply_optim_json(value, s.optim);
        else if (key == "data") apply_data_json(value, s);
        else throw FormatError("unknown config section '" + key + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(f.config + ": " + e.what());
    }
  }
  if (f.given("seed")) {
    s.optim.seed = f.seed;
    s.model.init_seed = f.seed;
  }
  if (f.given("epochs")) s.optim.total_epochs = f.epochs;
  if (f.given("lr")) s.optim.lr = f.lr;
  if (f.given("timesteps")) {
    s.model.timesteps = f.timesteps;
    s.data.timesteps = f.timesteps;
  }
  if (f.given("layers")) s.model.layers = f.layers;
  if (f.given("dim")) s.model.embed_dim = f.dim;
  if (f.given("heads")) s.model.heads = f.heads;
  if (f.given("experts")) s.model.num_experts = f.experts;
  if (f.given("topk")) s.model.top_k = f.topk;
  if (f.given("alpha-aux")) s.model.alpha_aux = f.alpha_aux;
  if (f.given("loss")) s.model.loss = f.loss == "tet" ? LossMode::kTet : LossMode::kMeanLogit;
  if (f.given("batch-size")) s.optim.batch_size = f.batch_size;
  if (f.given("patch")) s.model.patch_size = f.patch;
  if (f.given("data-kind")) s.data.kind = parse_dataset_kind(f.data_kind);
  if (f.given("data-path")) s.data.path = f.data_path;
  if (f.given("test-path")) s.test_path = f.test_path;
  if (f.given("count")) s.data.count = f.count;
  if (f.given("val-fraction")) s.data.val_fraction = f.val_fraction;
  if (f.given("data-seed")) s.data_seed = f.data_seed;
  s.data.seed = s.data_seed;
  return s;
}

// Adapts the input geometry of `cfg` to the dataset.
void fit_to_data(ModelConfig& cfg, const Dataset& data) {
  cfg.input = data.input;
  cfg.in_channels = data.channels;
  cfg.image_size = data.height;
  cfg.num_classes = std::max<Index>(data.num_classes, 2);
  if (data.input == InputKind::kEvents) cfg.timesteps = data.timesteps;
}

Dataset load_eval_data(const RunSettings& s, bool train_split) {
  DatasetSpec spec = s.data;
  if (!train_split && !s.test_path.empty()) spec.path = s.test_path;
  return load_dataset(spec, train_split || !s.test_path.empty());
}

std::string percent(double fraction) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(1) << 100.0 * fraction;
  return ss.str();
}

std::unique_ptr<SpikingMoeModel<float>> model_from_checkpoint(const fs::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  auto model = std::make_unique<SpikingMoeModel<float>>(ckpt.config);
  restore_checkpoint(ckpt, *model);
  return model;
}

int cmd_gen_data(const std::string& kind, std::uint64_t seed, Index count, Index size, int classes, Index steps,
                 const std::string& out_path, std::ostream& out) {
  const Dataset ds = gen_synthetic(parse_dataset_kind(kind), seed, count, size, classes, steps);
  save_dataset(ds, out_path);
  out << "wrote " << ds.size() << " samples to " << out_path << "\n";
  return 0;
}

int cmd_train(const Flags& f, std::ostream& out) {
  RunSettings s = resolve(f);
  Dataset full = load_dataset(s.data, true);
  fit_to_data(s.model, full);
  Dataset train_set = full;
  Dataset val_set;
  if (s.data.val_fraction > 0) {
    std::tie(train_set, val_set) = split_dataset(full, s.data.val_fraction, s.data_seed);
  } else if (!s.test_path.empty() || s.data.kind == DatasetKind::kCifar10Binary) {
    val_set = load_eval_data(s, false);
  }
  TrainOptions opts;
  const fs::path out_dir = f.out.empty() ? fs::path(".") : fs::path(f.out);
  fs::create_directories(out_dir);
  opts.metrics_path = out_dir / "metrics.jsonl";
  opts.checkpoint_path = f.checkpoint.empty() ? out_dir / "best.ckpt" : fs::path(f.checkpoint);
  opts.log = &out;
  const TrainResult result = train(s.model, s.optim, train_set, val_set, opts);
  out << "best accuracy " << percent(std::max(0.0, result.best_val_acc)) << "\n";
  out << "checkpoint " << opts.checkpoint_path.string() << "\n";
  return 0;
}

int cmd_eval(const Flags& f, const std::string& routing_out, std::ostream& out) {
  if (f.checkpoint.empty()) throw CLI::RequiredError("--checkpoint");
  auto model = model_from_checkpoint(f.checkpoint);
  const RunSettings s = resolve(f);
  const Dataset data = load_eval_data(s, s.test_path.empty() && s.data.kind != DatasetKind::kCifar10Binary);
  std::vector<std::string> lines;
  EvalOptions opts;
  opts.batch_size = s.optim.batch_size;
  if (!routing_out.empty()) opts.routing_lines = &lines;
  const EvalResult r = evaluate(*model, data, opts);
  if (!routing_out.empty()) {
    std::string text;
    for (const auto& l : lines) text += l + "\n";
    write_file_atomic(routing_out, text);
  }
  out << "accuracy " << percent(r.accuracy) << "\n";
  return 0;
}

int cmd_routing_stats(const Flags& f, const std::string& log_path, bool as_json, std::ostream& out) {
  std::vector<std::string> lines;
  if (!log_path.empty()) {
    std::istringstream in(read_file(log_path));
    for (std::string line; std::getline(in, line);) lines.push_back(line);
  } else {
    if (f.checkpoint.empty()) throw CLI::RequiredError("--log or --checkpoint");
    auto model = model_from_checkpoint(f.checkpoint);
    const RunSettings s = resolve(f);
    EvalOptions opts;
    opts.routing_lines = &lines;
    evaluate(*model, load_eval_data(s, true), opts);
  }
  const LoadTable table = aggregate_routing(lines);
  Json report = Json::array();
  for (const auto& [layer, counts] : table.counts) {
    Json row;
    row["layer"] = layer;
    row["counts"] = counts;
    row["fractions"] = table.fractions(layer);
    row["entropy"] = table.entropy(layer);
    report.push_back(std::move(row));
  }
  if (as_json) {
    out << report.dump(2) << "\n";
    return 0;
  }
  for (const auto& [layer, counts] : table.counts) {
    out << "layer " << layer << " loads [";
    const auto fr = table.fractions(layer);
    for (std::size_t e = 0; e < fr.size(); ++e) out << (e ? "," : "") << fr[e];
    out << "] entropy " << table.entropy(layer) << "\n";
  }
  return 0;
}

int cmd_attn_export(const Flags& f, Index samples, std::ostream& out) {
  if (f.checkpoint.empty()) throw CLI::RequiredError("--checkpoint");
  if (f.out.empty()) throw CLI::RequiredError("--out");
  auto model = model_from_checkpoint(f.checkpoint);
  const RunSettings s = resolve(f);
  const Dataset data = load_eval_data(s, true);
  std::vector<AttentionMap> maps;
  EvalOptions opts;
  opts.attention = &maps;
  opts.max_samples = samples;
  opts.batch_size = std::max<Index>(1, samples);
  evaluate(*model, data, opts);
  fs::create_directories(f.out);
  Index files = 0;
  for (const auto& m : maps) {
    // (T, B, N, heads) -> one (T, B, N) array per head.
    const Index heads = m.shape.back();
    const Index rows = numel(m.shape) / heads;
    Shape per_head(m.shape.begin(), m.shape.end() - 1);
    std::string stem = m.site;
    std::replace(stem.begin(), stem.end(), '.', '_');
    for (Index h = 0; h < heads; ++h) {
      std::vector<float> values(static_cast<std::size_t>(rows));
      for (Index r = 0; r < rows; ++r) values[static_cast<std::size_t>(r)] = m.values[static_cast<std::size_t>(r * heads + h)];
      write_file_atomic(fs::path(f.out) / (stem + "_head" + std::to_string(h) + ".npy"), encode_npy(per_head, values));
      ++files;
    }
  }
  out << "wrote " << files << " attention maps to " << f.out << "\n";
  return 0;
}

int cmd_profile(const Flags& f, Index samples, double e_ac, double e_mac, std::ostream& out) {
  RunSettings s = resolve(f);
  const Dataset data = load_eval_data(s, true);
  std::unique_ptr<SpikingMoeModel<float>> model;
  if (!f.checkpoint.empty()) {
    model = model_from_checkpoint(f.checkpoint);
  } else {
    fit_to_data(s.model, data);
    model = std::make_unique<SpikingMoeModel<float>>(s.model);
  }
  check_compatible(model->config(), data);
  std::vector<Index> idx(static_cast<std::size_t>(std::min(samples, data.size())));
  std::iota(idx.begin(), idx.end(), Index{0});
  const OpLedger ledger = profile_forward(*model, make_batch(data, idx).input);
  Json report;
  Json sites = Json::object();
  for (const auto& [site, steps] : ledger.sites()) {
    Json rows = Json::array();
    for (const auto& c : steps) {
      rows.push_back({{"ac", c.ac}, {"mac", c.mac}, {"spikes", c.spikes}, {"theoretical_ac", c.theoretical_ac},
                      {"neuron_ops", c.neuron_ops}});
    }
    sites[site] = std::move(rows);
  }
  const OpCounts total = ledger.total();
  std::uint64_t interior_mac = 0;
  for (const auto& site : interior_sites(ledger)) interior_mac += ledger.site_total(site).mac;
  report["samples"] = idx.size();
  report["sites"] = std::move(sites);
  report["total"] = {{"ac", total.ac}, {"mac", total.mac}, {"spikes", total.spikes},
                     {"theoretical_ac", total.theoretical_ac}, {"neuron_ops", total.neuron_ops}};
  report["interior_mac"] = interior_mac;
  report["energy_pj"] = energy_estimate(ledger, e_ac, e_mac);
  report["e_ac_pj"] = e_ac;
  report["e_mac_pj"] = e_mac;
  const std::string text = report.dump(2);
  if (!f.out.empty()) write_file_atomic(f.out, text + "\n");
  out << text << "\n";
  return 0;
}

int cmd_sweep(const Flags& f, const std::vector<Index>& steps, std::ostream& out) {
  RunSettings s = resolve(f);
  Dataset full = load_dataset(s.data, true);
  fit_to_data(s.model, full);
  Dataset train_set = full;
  Dataset test_set;
  if (!s.test_path.empty() || s.data.kind == DatasetKind::kCifar10Binary) {
    test_set = load_eval_data(s, false);
  } else {
    std::tie(train_set, test_set) = split_dataset(full, s.data.val_fraction > 0 ? s.data.val_fraction : 0.2, s.data_seed);
  }
  const SweepReport report = run_timestep_sweep(s.model, s.optim, train_set, test_set, steps, &out);
  const std::string text = report.to_json();
  if (!f.out.empty()) write_file_atomic(f.out, text + "\n");
  out << text << "\n";
  return 0;
}

void apply_thread_cap() {
  if (const char* env = std::getenv("SPIKEMOE_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) Eigen::setNbThreads(n);
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spike-driven mixture-of-experts vision transformer"};
  app.require_subcommand(1);
  Flags f;

  auto* train_cmd = app.add_subcommand("train", "Train a model and write metrics plus the best checkpoint");
  add_model_flags(train_cmd, f);
  add_data_flags(train_cmd, f);
  train_cmd->add_option("--checkpoint", f.checkpoint, "Best-checkpoint output path");
  train_cmd->add_option("--out", f.out, "Output directory for metrics.jsonl");

  Flags ef;
  std::string routing_out;
  auto* eval_cmd = app.add_subcommand("eval", "Report top-1 accuracy of a checkpoint");
  add_data_flags(eval_cmd, ef);
  ef.opts["batch-size"] = eval_cmd->add_option("--batch-size", ef.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--checkpoint", ef.checkpoint, "Checkpoint to evaluate")->required();
  eval_cmd->add_option("--routing-log", routing_out, "Write per-batch routing records (JSONL)");

  Flags rf;
  std::string log_path;
  bool as_json = false;
  auto* routing_cmd = app.add_subcommand("routing-stats", "Per-expert load table and entropy");
  add_data_flags(routing_cmd, rf);
  routing_cmd->add_option("--log", log_path, "Routing JSONL log to aggregate");
  routing_cmd->add_option("--checkpoint", rf.checkpoint, "Checkpoint to route the dataset through");
  routing_cmd->add_flag("--json", as_json, "Print JSON instead of a table");

  Flags af;
  Index attn_samples = 4;
  auto* attn_cmd = app.add_subcommand("attn-export", "Write attention gate maps per head as .npy arrays");
  add_data_flags(attn_cmd, af);
  attn_cmd->add_option("--checkpoint", af.checkpoint, "Checkpoint")->required();
  attn_cmd->add_option("--out", af.out, "Output directory")->required();
  attn_cmd->add_option("--samples", attn_samples, "Samples to export")->check(CLI::PositiveNumber);

  Flags pf;
  Index profile_samples = 8;
  double e_ac = 0.9;
  double e_mac = 4.6;
  auto* profile_cmd = app.add_subcommand("profile", "Operation ledger and energy estimate");
  add_model_flags(profile_cmd, pf);
  add_data_flags(profile_cmd, pf);
  profile_cmd->add_option("--checkpoint", pf.checkpoint, "Checkpoint (fresh model from flags if omitted)");
  profile_cmd->add_option("--out", pf.out, "Also write the report to this file");
  profile_cmd->add_option("--samples", profile_samples, "Samples to profile")->check(CLI::PositiveNumber);
  profile_cmd->add_option("--e-ac", e_ac, "Energy per accumulate (pJ)");
  profile_cmd->add_option("--e-mac", e_mac, "Energy per multiply-accumulate (pJ)");

  std::string gen_kind = "synthetic-static";
  std::uint64_t gen_seed = 0;
  Index gen_count = 256;
  Index gen_size = 32;
  int gen_classes = 10;
  Index gen_steps = 4;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  gen_cmd->add_option("--kind", gen_kind, "Dataset kind")
      ->check(CLI::IsMember({"synthetic-static", "synthetic-events"}));
  gen_cmd->add_option("--seed", gen_seed, "Generator seed");
  gen_cmd->add_option("--count", gen_count, "Samples")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--image-size", gen_size, "Image side length")->check(CLI::Range(4, 1024));
  gen_cmd->add_option("--classes", gen_classes, "Number of classes")->check(CLI::Range(2, 255));
  gen_cmd->add_option("--timesteps", gen_steps, "Event frames per sample")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--out", gen_out, "Output file")->required();

  Flags sf;
  std::vector<Index> sweep_steps{1, 2, 4, 8};
  auto* sweep_cmd = app.add_subcommand("sweep", "Accuracy across timestep counts");
  add_model_flags(sweep_cmd, sf);
  add_data_flags(sweep_cmd, sf);
  sweep_cmd->add_option("--steps", sweep_steps, "Timestep counts")->delimiter(',');
  sweep_cmd->add_option("--out", sf.out, "Also write the report to this file");

  std::vector<std::string> rev(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return 2;
  }

  apply_thread_cap();
  try {
    if (train_cmd->parsed()) return cmd_train(f, out);
    if (eval_cmd->parsed()) return cmd_eval(ef, routing_out, out);
    if (routing_cmd->parsed()) return cmd_routing_stats(rf, log_path, as_json, out);
    if (attn_cmd->parsed()) return cmd_attn_export(af, attn_samples, out);
    if (profile_cmd->parsed()) return cmd_profile(pf, profile_samples, e_ac, e_mac, out);
    if (gen_cmd->parsed()) return cmd_gen_data(gen_kind, gen_seed, gen_count, gen_size, gen_classes, gen_steps, gen_out, out);
    if (sweep_cmd->parsed()) return cmd_sweep(sf, sweep_steps, out);
  } catch (const CLI::ParseError& e) {
    err << "error: missing " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace spikemoe
