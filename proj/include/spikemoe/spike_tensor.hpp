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
#include <span>
#include <vector>

#include "spikemoe/tensor.hpp"

namespace spikemoe {

/// While active on this thread, spike producers emit the smooth surrogate
/// value instead of the Heaviside step. Used to check tape gradients against
/// finite differences; spike tensors are not binary inside this scope.
class SurrogateForwardScope {
 public:
  SurrogateForwardScope();
  ~SurrogateForwardScope();
  SurrogateForwardScope(const SurrogateForwardScope&) = delete;
  SurrogateForwardScope& operator=(const SurrogateForwardScope&) = delete;

 private:
  bool previous_;
};

bool surrogate_forward_enabled();

/// Row-wise bit packing of a (rows, cols) 0/1 matrix into 64-bit words.
struct PackedBits {
  Index rows = 0;
  Index cols = 0;
  Index words_per_row = 0;
  std::vector<std::uint64_t> words;

  bool test(Index row, Index col) const {
    return (words[row * words_per_row + col / 64] >> (col % 64)) & 1U;
  }
  /// popcount(a[row, begin:end] & b[row, begin:end]).
  static Index and_count(const PackedBits& a, const PackedBits& b, Index row, Index begin, Index end);
};

/// Binary activations. Entries are exactly 0 or 1; the values stay linked to
/// the tape of their producer so gradients flow through the surrogate.
template <typename Scalar>
class SpikeTensor {
 public:
  SpikeTensor() = default;
  /// Throws ContractError if any entry is not 0 or 1 (checked outside
  /// SurrogateForwardScope only).
  explicit SpikeTensor(Var<Scalar> values);

  /// Skips the check; for producers whose output is binary by construction.
  static SpikeTensor adopt(Var<Scalar> values);
  static SpikeTensor zeros(Shape shape);
  static SpikeTensor from_bits(Shape shape, std::span<const std::uint8_t> bits);

  bool defined() const { return values_.defined(); }
  const Shape& shape() const { return values_.shape(); }
  Index dim(Index axis) const { return values_.dim(axis); }
  Index size() const { return values_.size(); }

  const Var<Scalar>& values() const { return values_; }
  std::vector<std::uint8_t> bits() const;
  PackedBits pack() const;
  Index count() const;

 private:
  struct Unchecked {};
  SpikeTensor(Var<Scalar> values, Unchecked) : values_(std::move(values)) {}

  Var<Scalar> values_;
};

/// True when every entry is exactly 0 or 1.
template <typename Scalar>
bool is_binary(const Array<Scalar>& values);

extern template class SpikeTensor<float>;
extern template class SpikeTensor<double>;

}  // namespace spikemoe
