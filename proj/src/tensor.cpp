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

#include "spikemoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace spikemoe {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index normalize_axis(Index axis, Index rank) {
  const Index resolved = axis < 0 ? axis + rank : axis;
  if (resolved < 0 || resolved >= rank) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return resolved;
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const Index ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    const Index eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    out[rank - 1 - i] = ea == 1 ? eb : ea;
  }
  return out;
}

namespace {

thread_local bool g_grad_enabled = true;

// Maps each flat index of `out` to the flat index of a broadcast operand.
class BroadcastIndex {
 public:
  BroadcastIndex(const Shape& out, const Shape& in) : in_size_(numel(in)) {
    if (in == out) {
      mode_ = Mode::kSame;
      return;
    }
    // Exact trailing suffix: offset = i mod |in|.
    bool suffix = in.size() <= out.size();
    for (std::size_t i = 0; suffix && i < in.size(); ++i) {
      suffix = in[in.size() - 1 - i] == out[out.size() - 1 - i];
    }
    if (suffix) {
      mode_ = Mode::kSuffix;
      return;
    }
    mode_ = Mode::kGeneral;
    const auto rank = static_cast<Index>(out.size());
    const auto in_rank = static_cast<Index>(in.size());
    std::vector<Index> stride(static_cast<std::size_t>(rank), 0);
    Index s = 1;
    for (Index d = in_rank - 1; d >= 0; --d) {
      const Index od = d + (rank - in_rank);
      stride[od] = in[d] == 1 ? 0 : s;
      s *= in[d];
    }
    const Index n = numel(out);
    map_.resize(static_cast<std::size_t>(n));
    std::vector<Index> counter(static_cast<std::size_t>(rank), 0);
    Index offset = 0;
    for (Index i = 0; i < n; ++i) {
      map_[i] = offset;
      for (Index d = rank - 1; d >= 0; --d) {
        ++counter[d];
        offset += stride[d];
        if (counter[d] < out[d]) break;
        offset -= stride[d] * out[d];
        counter[d] = 0;
      }
    }
  }

  Index operator()(Index i) const {
    switch (mode_) {
      case Mode::kSame:
        return i;
      case Mode::kSuffix:
        return i % in_size_;
      default:
        return map_[i];
    }
  }

 private:
  enum class Mode { kSame, kSuffix, kGeneral };
  Mode mode_ = Mode::kSame;
  Index in_size_;
  std::vector<Index> map_;
};

struct AxisSplit {
  Index outer;
  Index length;
  Index inner;
};

AxisSplit split_at(const Shape& shape, Index axis) {
  AxisSplit s{1, shape[axis], 1};
  for (Index d = 0; d < axis; ++d) s.outer *= shape[d];
  for (Index d = axis + 1; d < static_cast<Index>(shape.size()); ++d) s.inner *= shape[d];
  return s;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Scalar>
Array<Scalar>& Node<Scalar>::grad_buffer() {
  if (grad.size() != value.size()) grad = Array<Scalar>::Zero(value.size());
  return grad;
}

template <typename Scalar>
Var<Scalar> Var<Scalar>::constant(Shape shape, Array<Scalar> data) {
  if (numel(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         to_string(shape));
  }
  auto node = std::make_shared<NodeType>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  return Var(std::move(node));
}

template <typename Scalar>
Var<Scalar> Var<Scalar>::zeros(Shape shape) {
  const Index n = numel(shape);
  return constant(std::move(shape), Array<Scalar>::Zero(n));
}

template <typename Scalar>
Var<Scalar> Var<Scalar>::full(Shape shape, Scalar fill) {
  const Index n = numel(shape);
  return constant(std::move(shape), Array<Scalar>::Constant(n, fill));
}

template <typename Scalar>
Var<Scalar> Var<Scalar>::scalar(Scalar value) {
  return constant({}, Array<Scalar>::Constant(1, value));
}

template <typename Scalar>
Var<Scalar> Var<Scalar>::parameter(Shape shape, Array<Scalar> data) {
  Var v = constant(std::move(shape), std::move(data));
  v.node_->requires_grad = true;
  return v;
}

template <typename Scalar>
Index Var<Scalar>::dim(Index axis) const {
  return node_->shape[normalize_axis(axis, rank())];
}

template <typename Scalar>
Array<Scalar>& Var<Scalar>::mutable_value() {
  if (!node_->is_leaf) throw ContractError("mutable_value() is only valid on leaf tensors");
  return node_->value;
}

template <typename Scalar>
void Var<Scalar>::zero_grad() {
  node_->grad.resize(0);
}

template <typename Scalar>
ConstMatrixMap<Scalar> Var<Scalar>::matrix() const {
  const Index cols = rank() == 0 ? 1 : node_->shape.back();
  const Index rows = cols == 0 ? 0 : size() / cols;
  return ConstMatrixMap<Scalar>(node_->value.data(), rows, cols);
}

template <typename Scalar>
Scalar Var<Scalar>::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename Scalar>
Var<Scalar> make_op(Shape shape, Array<Scalar> value, std::string_view op, std::vector<Var<Scalar>> inputs,
                    std::function<void(Node<Scalar>&)> backward_fn) {
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->is_leaf = false;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || (in.defined() && in.requires_grad());
  }
  if (track) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = std::move(backward_fn);
  }
  return Var<Scalar>(std::move(node));
}

template <typename Scalar>
Array<Scalar>* parent_grad(Node<Scalar>& self, std::size_t i) {
  auto& parent = self.parents[i];
  if (!parent || !parent->requires_grad) return nullptr;
  return &parent->grad_buffer();
}

template <typename Scalar>
void visit_graph(const Var<Scalar>& root, const std::function<void(const Node<Scalar>&)>& fn) {
  std::unordered_set<const Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* parent = node->parents[next++].get();
      if (parent && seen.insert(parent).second) stack.emplace_back(parent, 0);
      continue;
    }
    fn(*node);
    stack.pop_back();
  }
}

template <typename Scalar>
void backward(const Var<Scalar>& root, BackwardOptions options) {
  if (root.size() != 1) {
    throw ContractError("backward() requires a scalar root, got shape " + to_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node<Scalar>*> order;
  visit_graph<Scalar>(root, [&](const Node<Scalar>& n) {
    if (n.requires_grad) order.push_back(const_cast<Node<Scalar>*>(&n));
  });
  for (Node<Scalar>* n : order) {
    if (!n->is_leaf) n->grad = Array<Scalar>::Zero(n->value.size());
  }
  root.node()->grad_buffer()[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* n = *it;
    if (!n->is_leaf && n->backward) n->backward(*n);
  }
  if (!options.retain_graph) {
    for (Node<Scalar>* n : order) {
      if (n->is_leaf) continue;
      n->backward = nullptr;
      n->parents.clear();
    }
  }
}

template <typename Scalar>
Var<Scalar> elementwise(ElementwiseKind kind, const Var<Scalar>& a, const Var<Scalar>& b) {
  Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const Index n = numel(out_shape);
  Array<Scalar> out(n);
  const bool same = a.shape() == out_shape && b.shape() == out_shape;
  const auto& av = a.value();
  const auto& bv = b.value();
  if (same) {
    switch (kind) {
      case ElementwiseKind::kAdd: out = av + bv; break;
      case ElementwiseKind::kSubtract: out = av - bv; break;
      case ElementwiseKind::kMultiply: out = av * bv; break;
      case ElementwiseKind::kDivide: out = av / bv; break;
    }
  } else {
    const BroadcastIndex ia(out_shape, a.shape());
    const BroadcastIndex ib(out_shape, b.shape());
    for (Index i = 0; i < n; ++i) {
      const Scalar x = av[ia(i)];
      const Scalar y = bv[ib(i)];
      switch (kind) {
        case ElementwiseKind::kAdd: out[i] = x + y; break;
        case ElementwiseKind::kSubtract: out[i] = x - y; break;
        case ElementwiseKind::kMultiply: out[i] = x * y; break;
        case ElementwiseKind::kDivide: out[i] = x / y; break;
      }
    }
  }

  static constexpr std::string_view kNames[] = {"add", "sub", "mul", "div"};
  const Shape a_shape = a.shape();
  const Shape b_shape = b.shape();
  return make_op<Scalar>(
      out_shape, std::move(out), kNames[static_cast<int>(kind)], {a, b},
      [kind, a_shape, b_shape, same](Node<Scalar>& self) {
        const auto& g = self.grad;
        const auto& x = self.parents[0]->value;
        const auto& y = self.parents[1]->value;
        Array<Scalar>* ga = parent_grad(self, 0);
        Array<Scalar>* gb = parent_grad(self, 1);
        if (same) {
          switch (kind) {
            case ElementwiseKind::kAdd:
              if (ga) *ga += g;
              if (gb) *gb += g;
              break;
            case ElementwiseKind::kSubtract:
              if (ga) *ga += g;
              if (gb) *gb -= g;
              break;
            case ElementwiseKind::kMultiply:
              if (ga) *ga += g * y;
              if (gb) *gb += g * x;
              break;
            case ElementwiseKind::kDivide:
              if (ga) *ga += g / y;
              if (gb) *gb -= g * x / (y * y);
              break;
          }
          return;
        }
        const BroadcastIndex ia(self.shape, a_shape);
        const BroadcastIndex ib(self.shape, b_shape);
        for (Index i = 0; i < g.size(); ++i) {
          const Index p = ia(i);
          const Index q = ib(i);
          switch (kind) {
            case ElementwiseKind::kAdd:
              if (ga) (*ga)[p] += g[i];
              if (gb) (*gb)[q] += g[i];
              break;
            case ElementwiseKind::kSubtract:
              if (ga) (*ga)[p] += g[i];
              if (gb) (*gb)[q] -= g[i];
              break;
            case ElementwiseKind::kMultiply:
              if (ga) (*ga)[p] += g[i] * y[q];
              if (gb) (*gb)[q] += g[i] * x[p];
              break;
            case ElementwiseKind::kDivide:
              if (ga) (*ga)[p] += g[i] / y[q];
              if (gb) (*gb)[q] -= g[i] * x[p] / (y[q] * y[q]);
              break;
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  return elementwise(ElementwiseKind::kAdd, a, b);
}
template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  return elementwise(ElementwiseKind::kSubtract, a, b);
}
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  return elementwise(ElementwiseKind::kMultiply, a, b);
}
template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b) {
  return elementwise(ElementwiseKind::kDivide, a, b);
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  return make_op<Scalar>(a.shape(), a.value() * factor, "scale", {a}, [factor](Node<Scalar>& self) {
    if (auto* ga = parent_grad(self, 0)) *ga += self.grad * factor;
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar offset) {
  return make_op<Scalar>(a.shape(), a.value() + offset, "add_scalar", {a}, [](Node<Scalar>& self) {
    if (auto* ga = parent_grad(self, 0)) *ga += self.grad;
  });
}

template <typename Scalar>
Var<Scalar> mask(const Var<Scalar>& a, const Array<Scalar>& keep) {
  if (keep.size() != a.size()) throw DimensionError("mask length does not match tensor " + to_string(a.shape()));
  return make_op<Scalar>(a.shape(), a.value() * keep, "mask", {a}, [keep](Node<Scalar>& self) {
    if (auto* ga = parent_grad(self, 0)) *ga += self.grad * keep;
  });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  return make_op<Scalar>(a.shape(), a.value().log(), "log", {a}, [](Node<Scalar>& self) {
    if (auto* ga = parent_grad(self, 0)) *ga += self.grad / self.parents[0]->value;
  });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  return make_op<Scalar>(a.shape(), a.value().square(), "square", {a}, [](Node<Scalar>& self) {
    if (auto* ga = parent_grad(self, 0)) *ga += Scalar(2) * self.grad * self.parents[0]->value;
  });
}

template <typename Scalar>
Var<Scalar> detach(const Var<Scalar>& a) {
  return Var<Scalar>::constant(a.shape(), a.value());
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rank() < 1 || b.rank() != 2) {
    throw DimensionError("matmul expects (..., k) x (k, n), got " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  const Index k = a.shape().back();
  if (k != b.dim(0)) {
    throw DimensionError("matmul inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const Index n = b.dim(1);
  const Index rows = k == 0 ? numel(Shape(a.shape().begin(), a.shape().end() - 1)) : a.size() / k;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Array<Scalar> out(rows * n);
  MatrixMap<Scalar> om(out.data(), rows, n);
  om.noalias() = ConstMatrixMap<Scalar>(a.value().data(), rows, k) * b.matrix();
  return make_op<Scalar>(out_shape, std::move(out), "matmul", {a, b}, [rows, k, n](Node<Scalar>& self) {
    ConstMatrixMap<Scalar> g(self.grad.data(), rows, n);
    ConstMatrixMap<Scalar> am(self.parents[0]->value.data(), rows, k);
    ConstMatrixMap<Scalar> bm(self.parents[1]->value.data(), k, n);
    if (auto* ga = parent_grad(self, 0)) MatrixMap<Scalar>(ga->data(), rows, k).noalias() += g * bm.transpose();
    if (auto* gb = parent_grad(self, 1)) MatrixMap<Scalar>(gb->data(), k, n).noalias() += am.transpose() * g;
  });
}

template <typename Scalar>
Var<Scalar> reduce(ReduceKind kind, const Var<Scalar>& a, Index axis) {
  const Index ax = normalize_axis(axis, a.rank());
  const AxisSplit s = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + ax);
  Array<Scalar> out = Array<Scalar>::Zero(s.outer * s.inner);
  const auto& v = a.value();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index l = 0; l < s.length; ++l) {
      out.segment(o * s.inner, s.inner) += v.segment((o * s.length + l) * s.inner, s.inner);
    }
  }
  const Scalar factor = kind == ReduceKind::kMean ? Scalar(1) / static_cast<Scalar>(s.length) : Scalar(1);
  if (kind == ReduceKind::kMean) out *= factor;
  return make_op<Scalar>(out_shape, std::move(out), kind == ReduceKind::kMean ? "mean" : "sum", {a},
                         [s, factor](Node<Scalar>& self) {
                           auto* ga = parent_grad(self, 0);
                           if (!ga) return;
                           for (Index o = 0; o < s.outer; ++o) {
                             for (Index l = 0; l < s.length; ++l) {
                               ga->segment((o * s.length + l) * s.inner, s.inner) +=
                                   self.grad.segment(o * s.inner, s.inner) * factor;
                             }
                           }
                         });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a, Index axis) {
  return reduce(ReduceKind::kSum, a, axis);
}
template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a, Index axis) {
  return reduce(ReduceKind::kMean, a, axis);
}

template <typename Scalar>
Var<Scalar> sum_all(const Var<Scalar>& a) {
  Array<Scalar> out = Array<Scalar>::Constant(1, a.value().sum());
  return make_op<Scalar>({}, std::move(out), "sum_all", {a}, [](Node<Scalar>& self) {
    if (auto* ga = parent_grad(self, 0)) *ga += self.grad[0];
  });
}

template <typename Scalar>
Var<Scalar> mean_all(const Var<Scalar>& a) {
  const Scalar inv = Scalar(1) / static_cast<Scalar>(std::max<Index>(a.size(), 1));
  Array<Scalar> out = Array<Scalar>::Constant(1, a.value().sum() * inv);
  return make_op<Scalar>({}, std::move(out), "mean_all", {a}, [inv](Node<Scalar>& self) {
    if (auto* ga = parent_grad(self, 0)) *ga += self.grad[0] * inv;
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  return make_op<Scalar>(std::move(shape), a.value(), "reshape", {a}, [](Node<Scalar>& self) {
    if (auto* ga = parent_grad(self, 0)) *ga += self.grad;
  });
}

template <typename Scalar>
Var<Scalar> tile_leading(const Var<Scalar>& a, Index times) {
  if (times < 1) throw ContractError("tile_leading needs times >= 1");
  Shape out_shape;
  out_shape.push_back(times);
  out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
  const Index n = a.size();
  Array<Scalar> out(n * times);
  for (Index t = 0; t < times; ++t) out.segment(t * n, n) = a.value();
  return make_op<Scalar>(out_shape, std::move(out), "tile", {a}, [n, times](Node<Scalar>& self) {
    auto* ga = parent_grad(self, 0);
    if (!ga) return;
    for (Index t = 0; t < times; ++t) *ga += self.grad.segment(t * n, n);
  });
}

template <typename Scalar>
Var<Scalar> index_select(const Var<Scalar>& a, Index axis, std::span<const Index> indices) {
  const Index ax = normalize_axis(axis, a.rank());
  const AxisSplit s = split_at(a.shape(), ax);
  for (Index i : indices) {
    if (i < 0 || i >= s.length) throw DimensionError("index " + std::to_string(i) + " out of range");
  }
  std::vector<Index> idx(indices.begin(), indices.end());
  const auto m = static_cast<Index>(idx.size());
  Shape out_shape = a.shape();
  out_shape[ax] = m;
  Array<Scalar> out(s.outer * m * s.inner);
  const auto& v = a.value();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index j = 0; j < m; ++j) {
      out.segment((o * m + j) * s.inner, s.inner) = v.segment((o * s.length + idx[j]) * s.inner, s.inner);
    }
  }
  return make_op<Scalar>(out_shape, std::move(out), "index_select", {a},
                         [s, m, idx = std::move(idx)](Node<Scalar>& self) {
                           auto* ga = parent_grad(self, 0);
                           if (!ga) return;
                           for (Index o = 0; o < s.outer; ++o) {
                             for (Index j = 0; j < m; ++j) {
                               ga->segment((o * s.length + idx[j]) * s.inner, s.inner) +=
                                   self.grad.segment((o * m + j) * s.inner, s.inner);
                             }
                           }
                         });
}

template <typename Scalar>
Var<Scalar> index_add(const Shape& shape, Index axis, const std::vector<ScatterPiece<Scalar>>& pieces) {
  const Index ax = normalize_axis(axis, static_cast<Index>(shape.size()));
  const AxisSplit s = split_at(shape, ax);
  Array<Scalar> out = Array<Scalar>::Zero(numel(shape));
  std::vector<Var<Scalar>> inputs;
  std::vector<std::vector<Index>> index_lists;
  for (const auto& piece : pieces) {
    Shape expect = shape;
    expect[ax] = static_cast<Index>(piece.indices.size());
    if (piece.source.shape() != expect) {
      throw DimensionError("index_add piece shape " + to_string(piece.source.shape()) + ", expected " +
                           to_string(expect));
    }
    const auto m = static_cast<Index>(piece.indices.size());
    const auto& v = piece.source.value();
    for (Index j : piece.indices) {
      if (j < 0 || j >= s.length) throw DimensionError("index " + std::to_string(j) + " out of range");
    }
    for (Index o = 0; o < s.outer; ++o) {
      for (Index j = 0; j < m; ++j) {
        out.segment((o * s.length + piece.indices[j]) * s.inner, s.inner) +=
            v.segment((o * m + j) * s.inner, s.inner);
      }
    }
    inputs.push_back(piece.source);
    index_lists.push_back(piece.indices);
  }
  return make_op<Scalar>(shape, std::move(out), "index_add", std::move(inputs),
                         [s, lists = std::move(index_lists)](Node<Scalar>& self) {
                           for (std::size_t p = 0; p < lists.size(); ++p) {
                             auto* gp = parent_grad(self, p);
                             if (!gp) continue;
                             const auto& idx = lists[p];
                             const auto m = static_cast<Index>(idx.size());
                             for (Index o = 0; o < s.outer; ++o) {
                               for (Index j = 0; j < m; ++j) {
                                 gp->segment((o * m + j) * s.inner, s.inner) +=
                                     self.grad.segment((o * s.length + idx[j]) * s.inner, s.inner);
                               }
                             }
                           }
                         });
}

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       BatchNormBuffers<Scalar>& buffers, bool training, Scalar momentum, Scalar eps) {
  const Index channels = x.shape().back();
  if (gamma.size() != channels || beta.size() != channels) {
    throw DimensionError("batch_norm affine parameters do not match channel extent " + std::to_string(channels));
  }
  if (buffers.running_mean.size() != channels) {
    buffers.running_mean = Array<Scalar>::Zero(channels);
    buffers.running_var = Array<Scalar>::Ones(channels);
  }
  const Index rows = x.size() / channels;
  ConstMatrixMap<Scalar> xm(x.value().data(), rows, channels);
  Eigen::Array<Scalar, 1, Eigen::Dynamic> mu(channels);
  Eigen::Array<Scalar, 1, Eigen::Dynamic> var(channels);
  if (training) {
    mu = xm.colwise().mean().array();
    var = (xm.array().rowwise() - mu).square().colwise().sum() / static_cast<Scalar>(rows);
    const Scalar unbias = rows > 1 ? static_cast<Scalar>(rows) / static_cast<Scalar>(rows - 1) : Scalar(1);
    buffers.running_mean = (Scalar(1) - momentum) * buffers.running_mean + momentum * mu.transpose();
    buffers.running_var = (Scalar(1) - momentum) * buffers.running_var + momentum * unbias * var.transpose();
  } else {
    mu = buffers.running_mean.transpose();
    var = buffers.running_var.transpose();
  }
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> inv_std = (var + eps).rsqrt();
  RowMatrix<Scalar> xhat = ((xm.array().rowwise() - mu).rowwise() * inv_std).matrix();
  Array<Scalar> out(x.size());
  MatrixMap<Scalar>(out.data(), rows, channels) =
      ((xhat.array().rowwise() * gamma.value().transpose()).rowwise() + beta.value().transpose()).matrix();
  return make_op<Scalar>(
      x.shape(), std::move(out), "batch_norm", {x, gamma, beta},
      [rows, channels, training, inv_std, xhat = std::move(xhat)](Node<Scalar>& self) {
        ConstMatrixMap<Scalar> g(self.grad.data(), rows, channels);
        const auto& gam = self.parents[1]->value;
        if (auto* gg = parent_grad(self, 1)) *gg += (g.array() * xhat.array()).colwise().sum().transpose();
        if (auto* gb = parent_grad(self, 2)) *gb += g.array().colwise().sum().transpose();
        auto* gx = parent_grad(self, 0);
        if (!gx) return;
        MatrixMap<Scalar> gxm(gx->data(), rows, channels);
        const RowMatrix<Scalar> dxhat = (g.array().rowwise() * gam.transpose()).matrix();
        if (!training) {
          gxm.array() += dxhat.array().rowwise() * inv_std;
          return;
        }
        const auto n = static_cast<Scalar>(rows);
        const Eigen::Array<Scalar, 1, Eigen::Dynamic> sum_d = dxhat.array().colwise().sum();
        const Eigen::Array<Scalar, 1, Eigen::Dynamic> sum_dx = (dxhat.array() * xhat.array()).colwise().sum();
        gxm.array() += ((dxhat.array() * n).rowwise() - sum_d - xhat.array().rowwise() * sum_dx).rowwise() *
                       (inv_std / n);
      });
}

template <typename Scalar>
Var<Scalar> smoothed_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels, Scalar smoothing) {
  if (logits.rank() != 2) throw DimensionError("cross entropy expects (rows, classes) logits");
  const Index rows = logits.dim(0);
  const Index classes = logits.dim(1);
  if (static_cast<Index>(labels.size()) != rows) {
    throw DimensionError("label count " + std::to_string(labels.size()) + " != rows " + std::to_string(rows));
  }
  for (int y : labels) {
    if (y < 0 || y >= classes) throw ContractError("label " + std::to_string(y) + " out of range");
  }
  ConstMatrixMap<Scalar> z(logits.value().data(), rows, classes);
  RowMatrix<Scalar> target = RowMatrix<Scalar>::Constant(rows, classes, smoothing / static_cast<Scalar>(classes));
  for (Index r = 0; r < rows; ++r) target(r, labels[r]) += Scalar(1) - smoothing;
  RowMatrix<Scalar> probs(rows, classes);
  Scalar total = 0;
  for (Index r = 0; r < rows; ++r) {
    const Scalar m = z.row(r).maxCoeff();
    const Scalar lse = m + std::log((z.row(r).array() - m).exp().sum());
    probs.row(r) = (z.row(r).array() - lse).exp().matrix();
    total -= (target.row(r).array() * (z.row(r).array() - lse)).sum();
  }
  const Scalar inv_rows = Scalar(1) / static_cast<Scalar>(rows);
  Array<Scalar> out = Array<Scalar>::Constant(1, total * inv_rows);
  return make_op<Scalar>({}, std::move(out), "cross_entropy", {logits},
                         [rows, classes, inv_rows, probs = std::move(probs),
                          target = std::move(target)](Node<Scalar>& self) {
                           auto* gz = parent_grad(self, 0);
                           if (!gz) return;
                           MatrixMap<Scalar>(gz->data(), rows, classes) += (probs - target) * (self.grad[0] * inv_rows);
                         });
}

template <typename Scalar>
Var<Scalar> extract_patches(const Var<Scalar>& image, Index patch) {
  if (image.rank() != 4) throw DimensionError("extract_patches expects (B, C, H, W), got " + to_string(image.shape()));
  const Index b = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (patch <= 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("image " + to_string(image.shape()) + " not divisible into patches of " +
                         std::to_string(patch));
  }
  const Index gh = h / patch, gw = w / patch, tokens = gh * gw, feat = c * patch * patch;
  // Flat source offset of each output element, shared with backward.
  auto offsets = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(b * tokens * feat));
  Index pos = 0;
  for (Index bi = 0; bi < b; ++bi) {
    for (Index py = 0; py < gh; ++py) {
      for (Index px = 0; px < gw; ++px) {
        for (Index ci = 0; ci < c; ++ci) {
          for (Index i = 0; i < patch; ++i) {
            for (Index j = 0; j < patch; ++j) {
              (*offsets)[pos++] = ((bi * c + ci) * h + py * patch + i) * w + px * patch + j;
            }
          }
        }
      }
    }
  }
  Array<Scalar> out(pos);
  const auto& v = image.value();
  for (Index i = 0; i < pos; ++i) out[i] = v[(*offsets)[i]];
  return make_op<Scalar>({b, tokens, feat}, std::move(out), "patches", {image}, [offsets](Node<Scalar>& self) {
    auto* gi = parent_grad(self, 0);
    if (!gi) return;
    for (std::size_t i = 0; i < offsets->size(); ++i) (*gi)[(*offsets)[i]] += self.grad[static_cast<Index>(i)];
  });
}

#define SPIKEMOE_INSTANTIATE_TENSOR(S)                                                                        \
  template struct Node<S>;                                                                                    \
  template class Var<S>;                                                                                      \
  template void backward<S>(const Var<S>&, BackwardOptions);                                                  \
  template void visit_graph<S>(const Var<S>&, const std::function<void(const Node<S>&)>&);                    \
  template Var<S> make_op<S>(Shape, Array<S>, std::string_view, std::vector<Var<S>>,                         \
                             std::function<void(Node<S>&)>);                                                  \
  template Array<S>* parent_grad<S>(Node<S>&, std::size_t);                                                   \
  template Var<S> elementwise<S>(ElementwiseKind, const Var<S>&, const Var<S>&);                              \
  template Var<S> add<S>(const Var<S>&, const Var<S>&);                                                       \
  template Var<S> sub<S>(const Var<S>&, const Var<S>&);                                                       \
  template Var<S> mul<S>(const Var<S>&, const Var<S>&);                                                       \
  template Var<S> div<S>(const Var<S>&, const Var<S>&);                                                       \
  template Var<S> scale<S>(const Var<S>&, S);                                                                 \
  template Var<S> add_scalar<S>(const Var<S>&, S);                                                            \
  template Var<S> mask<S>(const Var<S>&, const Array<S>&);                                                    \
  template Var<S> log<S>(const Var<S>&);                                                                      \
  template Var<S> square<S>(const Var<S>&);                                                                   \
  template Var<S> detach<S>(const Var<S>&);                                                                   \
  template Var<S> matmul<S>(const Var<S>&, const Var<S>&);                                                    \
  template Var<S> reduce<S>(ReduceKind, const Var<S>&, Index);                                                \
  template Var<S> sum<S>(const Var<S>&, Index);                                                               \
  template Var<S> mean<S>(const Var<S>&, Index);                                                              \
  template Var<S> sum_all<S>(const Var<S>&);                                                                  \
  template Var<S> mean_all<S>(const Var<S>&);                                                                 \
  template Var<S> reshape<S>(const Var<S>&, Shape);                                                           \
  template Var<S> tile_leading<S>(const Var<S>&, Index);                                                      \
  template Var<S> index_select<S>(const Var<S>&, Index, std::span<const Index>);                              \
  template Var<S> index_add<S>(const Shape&, Index, const std::vector<ScatterPiece<S>>&);                     \
  template Var<S> batch_norm<S>(const Var<S>&, const Var<S>&, const Var<S>&, BatchNormBuffers<S>&, bool, S,   \
                                S);                                                                           \
  template Var<S> smoothed_cross_entropy<S>(const Var<S>&, std::span<const int>, S);                          \
  template Var<S> extract_patches<S>(const Var<S>&, Index);

SPIKEMOE_INSTANTIATE_TENSOR(float)
SPIKEMOE_INSTANTIATE_TENSOR(double)

}  // namespace spikemoe
