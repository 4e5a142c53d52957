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

// In-memory datasets: CIFAR-10 binary batches, seeded synthetic stand-ins and
// a self-describing dataset file.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "spikemoe/model.hpp"

namespace spikemoe {

enum class DatasetKind { kCifar10Binary, kSyntheticStatic, kSyntheticEvents };

std::string to_string(DatasetKind kind);
/// Accepts "cifar10-binary", "synthetic-static", "synthetic-events".
DatasetKind parse_dataset_kind(const std::string& name);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::kSyntheticStatic;
  std::filesystem::path path;
  Index count = 0;  // 0 keeps every record
  std::uint64_t seed = 0;
  Index image_size = 32;
  Index channels = 3;  // forced to 2 for events
  Index timesteps = 4;  // event frames per sample
  int num_classes = 10;
  double val_fraction = 0.0;
  std::vector<float> mean;  // per-channel normalization; empty keeps raw values
  std::vector<float> stddev;
};

/// Samples stored contiguously as float. Static samples are (C, H, W) in
/// [0, 1]; event samples are binary (T, C, H, W).
struct Dataset {
  InputKind input = InputKind::kStatic;
  Index channels = 0;
  Index height = 0;
  Index width = 0;
  Index timesteps = 1;
  int num_classes = 0;
  std::vector<float> data;
  std::vector<int> labels;
  std::vector<float> mean;
  std::vector<float> stddev;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index sample_numel() const { return timesteps * channels * height * width; }
  std::span<const float> sample(Index i) const {
    return {data.data() + i * sample_numel(), static_cast<std::size_t>(sample_numel())};
  }
  /// Copies the listed samples into a new dataset with the same geometry.
  Dataset subset(std::span<const Index> indices) const;
  bool operator==(const Dataset&) const = default;
};

/// Reads one CIFAR-10 binary batch file (3073-byte records) or, for a
/// directory, data_batch_*.bin (train) or test_batch.bin (test). Throws
/// FormatError with the byte offset on a truncated record.
Dataset load_cifar10_file(const std::filesystem::path& file, Index limit = 0);
Dataset load_cifar10(const std::filesystem::path& path, bool train, Index limit = 0);

/// Seeded, class-conditional synthetic data: Gaussian blobs whose row and
/// colour encode the class, or binary frames of a dot moving in a class
/// direction. Values are quantized to multiples of 1/255.
Dataset gen_synthetic(DatasetKind kind, std::uint64_t seed, Index count, Index image_size = 32,
                      int num_classes = 10, Index timesteps = 4);

/// Loads whatever `spec` describes (dataset file, CIFAR path or generator).
Dataset load_dataset(const DatasetSpec& spec, bool train = true);

/// Deterministic split: the last `fraction` of a seeded permutation.
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double fraction, std::uint64_t seed);

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset_file(const std::filesystem::path& path);

struct Batch {
  Var<float> input;  // (B, C, H, W) or (T, B, C, H, W)
  std::vector<int> labels;
};

struct AugmentConfig {
  bool flip = false;
  Index pad = 0;  // pad-and-crop shift, static images only
};

/// Gathers samples into a model input, applying normalization and, when `rng`
/// is given, random flips and pad-and-crop shifts.
Batch make_batch(const Dataset& data, std::span<const Index> indices, const AugmentConfig& aug = {},
                 std::mt19937_64* rng = nullptr);

}  // namespace spikemoe
