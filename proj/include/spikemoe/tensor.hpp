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

// Dense row-major tensors with a reverse-mode gradient tape.
//
// A Var<Scalar> is a shared handle to a graph node. Operations on Vars build
// the tape implicitly when at least one input requires a gradient and grad
// mode is enabled; otherwise they produce plain constants.

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spikemoe/errors.hpp"

namespace spikemoe {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Resolves a possibly negative axis against `rank`; throws DimensionError.
Index normalize_axis(Index axis, Index rank);

/// Trailing-aligned broadcast of two shapes; throws DimensionError.
Shape broadcast_shapes(const Shape& a, const Shape& b);

// Grad mode is thread-local. NoGradGuard disables tape construction.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
struct Node {
  Shape shape;
  Array<Scalar> value;
  Array<Scalar> grad;  // empty until first written
  bool requires_grad = false;
  bool is_leaf = true;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  /// Gradient buffer, zero-initialized on first access.
  Array<Scalar>& grad_buffer();
};

template <typename Scalar>
class Var {
 public:
  using NodeType = Node<Scalar>;

  Var() = default;
  explicit Var(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, Array<Scalar> data);
  static Var zeros(Shape shape);
  static Var full(Shape shape, Scalar fill);
  static Var scalar(Scalar value);
  /// Trainable leaf.
  static Var parameter(Shape shape, Array<Scalar> data);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const;
  Index size() const { return node_->value.size(); }

  const Array<Scalar>& value() const { return node_->value; }
  /// Direct write access; only legal on leaves (optimizer updates, loading).
  Array<Scalar>& mutable_value();

  bool has_grad() const { return node_->grad.size() > 0; }
  const Array<Scalar>& grad() const { return node_->grad; }
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  std::string_view op() const { return node_->op; }

  /// (numel / last extent) x last extent row-major view.
  ConstMatrixMap<Scalar> matrix() const;
  Scalar item() const;

  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

struct BackwardOptions {
  bool retain_graph = false;
};

/// Populates grads of every tape ancestor of a scalar root. Leaf grads
/// accumulate across calls; interior grads are recomputed. Unless
/// retain_graph is set, interior nodes drop their tape links afterwards.
template <typename Scalar>
void backward(const Var<Scalar>& root, BackwardOptions options = {});

/// Visits every node reachable from root once (parents before children).
template <typename Scalar>
void visit_graph(const Var<Scalar>& root, const std::function<void(const Node<Scalar>&)>& fn);

/// Builds an operation node. `backward` receives the result node; its grad
/// is the upstream gradient and parents[i] are the inputs in order.
template <typename Scalar>
Var<Scalar> make_op(Shape shape, Array<Scalar> value, std::string_view op,
                    std::vector<Var<Scalar>> inputs, std::function<void(Node<Scalar>&)> backward);

/// Gradient buffer of parent `i` if it is tracked, otherwise nullptr.
template <typename Scalar>
Array<Scalar>* parent_grad(Node<Scalar>& self, std::size_t i);

enum class ElementwiseKind { kAdd, kSubtract, kMultiply, kDivide };
enum class ReduceKind { kSum, kMean };

template <typename Scalar>
Var<Scalar> elementwise(ElementwiseKind kind, const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor);
template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar offset);
/// Multiplies by a constant mask of identical shape; no gradient to the mask.
template <typename Scalar>
Var<Scalar> mask(const Var<Scalar>& a, const Array<Scalar>& keep);
template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a);
template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a);
/// Value copy with the tape link cut.
template <typename Scalar>
Var<Scalar> detach(const Var<Scalar>& a);

/// a: (..., k) with leading extents flattened, b: (k, n) -> (..., n).
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> reduce(ReduceKind kind, const Var<Scalar>& a, Index axis);
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a, Index axis);
template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a, Index axis);
template <typename Scalar>
Var<Scalar> sum_all(const Var<Scalar>& a);
template <typename Scalar>
Var<Scalar> mean_all(const Var<Scalar>& a);

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape);
/// Prepends an axis of length `times`, repeating a along it.
template <typename Scalar>
Var<Scalar> tile_leading(const Var<Scalar>& a, Index times);
/// Selects `indices` along `axis`.
template <typename Scalar>
Var<Scalar> index_select(const Var<Scalar>& a, Index axis, std::span<const Index> indices);

/// One scattered contribution for index_add.
template <typename Scalar>
struct ScatterPiece {
  Var<Scalar> source;
  std::vector<Index> indices;
};

/// Zero tensor of `shape` plus each piece added at its indices along `axis`,
/// pieces applied in order.
template <typename Scalar>
Var<Scalar> index_add(const Shape& shape, Index axis, const std::vector<ScatterPiece<Scalar>>& pieces);

/// Per-channel batch normalization over all leading positions of (..., C).
template <typename Scalar>
struct BatchNormBuffers {
  Array<Scalar> running_mean;
  Array<Scalar> running_var;
};

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       BatchNormBuffers<Scalar>& buffers, bool training, Scalar momentum = Scalar(0.1),
                       Scalar eps = Scalar(1e-5));

/// Mean label-smoothed cross entropy of (R, C) logits.
template <typename Scalar>
Var<Scalar> smoothed_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels,
                                   Scalar smoothing);

/// (B, C, H, W) -> (B, N, C*p*p) non-overlapping patches, patch-grid
/// row-major, channel-major within a patch.
template <typename Scalar>
Var<Scalar> extract_patches(const Var<Scalar>& image, Index patch);

}  // namespace spikemoe
