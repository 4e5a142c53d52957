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

// The full encoder: patch embedding, L x (attention + expert mixture) with
// membrane shortcuts, token-average pooling and a per-timestep linear head.

#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spikemoe/moe.hpp"
#include "spikemoe/sdsa.hpp"
#include "spikemoe/sps.hpp"

namespace spikemoe {

enum class LossMode { kMeanLogit, kTet };
enum class InputKind { kStatic, kEvents };

struct ModelConfig {
  Index layers = 2;
  Index embed_dim = 256;
  Index heads = 8;
  Index num_experts = 4;  // including the shared slot
  Index top_k = 2;
  Index timesteps = 4;
  Index num_classes = 10;
  Index image_size = 32;
  Index patch_size = 4;
  Index in_channels = 3;
  Index expert_hidden = 0;  // 0 selects 4 * embed_dim
  Index prompt_len = 1;
  InputKind input = InputKind::kStatic;
  LifParams lif;
  double alpha_aux = 0.1;
  LossMode loss = LossMode::kMeanLogit;
  double label_smoothing = 0.1;
  bool shared_expert = true;
  bool force_shared = false;
  double init_gain = 1.5;
  std::uint64_t init_seed = 0;

  PatchConfig patch() const;
  Index hidden() const { return expert_hidden > 0 ? expert_hidden : 4 * embed_dim; }
  /// Throws ContractError on any inconsistent extent.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename Scalar>
struct EncoderLayer {
  SdsaLayer<Scalar> attn;
  MoeLayer<Scalar> moe;
};

template <typename Scalar>
struct ModelOutput {
  Var<Scalar> logits;       // (B, classes)
  Var<Scalar> step_logits;  // (T, B, classes)
  std::vector<RoutingRecord<Scalar>> routing;
  Var<Scalar> aux_total;
  std::vector<SpikeTensor<Scalar>> block_outputs;  // S_0 and every block output, in order
};

template <typename Scalar>
struct NamedParameter {
  std::string name;
  Var<Scalar> var;
  bool decay = false;  // weight matrices only
};

template <typename Scalar>
struct NamedBuffer {
  std::string name;
  Array<Scalar>* data;
};

/// Parameters are handles: copying a model aliases its weights.
template <typename Scalar>
class SpikingMoeModel {
 public:
  explicit SpikingMoeModel(const ModelConfig& cfg);

  /// Static input (B, C, H, W) or event frames (T, B, C, H, W).
  ModelOutput<Scalar> forward(const Var<Scalar>& input, ForwardContext* ctx = nullptr);
  /// Runs the encoder and head from spike tokens S_0 of shape (T, B, N, D).
  ModelOutput<Scalar> forward_tokens(const SpikeTensor<Scalar>& s0, ForwardContext* ctx = nullptr);

  std::vector<NamedParameter<Scalar>> parameters();
  std::vector<NamedBuffer<Scalar>> buffers();

  const ModelConfig& config() const { return cfg_; }
  SpsEmbedding<Scalar>& sps() { return sps_; }
  std::vector<EncoderLayer<Scalar>>& layers() { return layers_; }
  Linear<Scalar>& head() { return head_; }
  const std::shared_ptr<ExpertMlp<Scalar>>& shared_expert() const { return shared_; }

 private:
  ModelConfig cfg_;
  SpsEmbedding<Scalar> sps_;
  std::vector<EncoderLayer<Scalar>> layers_;
  std::shared_ptr<ExpertMlp<Scalar>> shared_;
  Linear<Scalar> head_;
};

/// Classification loss plus the summed auxiliary routing losses.
template <typename Scalar>
Var<Scalar> model_loss(const ModelOutput<Scalar>& out, std::span<const int> labels, const ModelConfig& cfg);

/// Argmax per row; ties resolve to the lowest class index.
template <typename Scalar>
std::vector<int> predict(const Var<Scalar>& logits);

/// Inference-mode forward with an exact operation ledger.
template <typename Scalar>
OpLedger profile_forward(SpikingMoeModel<Scalar>& model, const Var<Scalar>& input);

/// Site prefixes lying on the spike path (everything except the analog patch
/// projection and the classifier head).
std::vector<std::string> interior_sites(const OpLedger& ledger);

}  // namespace spikemoe
