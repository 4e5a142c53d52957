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

// Persistence: checkpoints, dense array export and atomic file writes.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spikemoe/model.hpp"

namespace spikemoe {

/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
  bool operator==(const NamedTensor&) const = default;
};

struct OptimizerSnapshot {
  std::int64_t step = 0;
  std::vector<NamedTensor> first_moment;
  std::vector<NamedTensor> second_moment;
  bool operator==(const OptimizerSnapshot&) const = default;
};

struct Checkpoint {
  static constexpr char kMagic[9] = "SPMOECKP";
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig config;
  std::vector<NamedTensor> tensors;  // parameters, then buffers
  std::optional<OptimizerSnapshot> optimizer;
  std::string metrics_json = "{}";
  bool operator==(const Checkpoint&) const = default;
};

std::string config_to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults; unknown keys throw FormatError.
ModelConfig config_from_json(const std::string& text, ModelConfig base = {});

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError on bad magic, version or truncation; nothing is
/// returned on failure.
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of every parameter and buffer of `model`.
template <typename Scalar>
Checkpoint capture_checkpoint(SpikingMoeModel<Scalar>& model);

/// Copies tensors into `model`. Throws DimensionError naming the tensor on a
/// shape mismatch and ContractError on a missing one; the model is untouched
/// on failure.
template <typename Scalar>
void restore_checkpoint(const Checkpoint& ckpt, SpikingMoeModel<Scalar>& model);

/// NumPy .npy (format 1.0, little-endian float32, C order).
std::string encode_npy(const Shape& shape, const std::vector<float>& values);
NamedTensor decode_npy(const std::string& bytes);

}  // namespace spikemoe
