// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float32 tensors with tape-free reverse-mode autodiff. Every op that
// sees an input requiring gradients records a closure on its output node;
// Tensor::backward() orders the recorded nodes topologically and replays the
// closures in reverse. Reductions accumulate in double.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "polyglot/rng.hpp"

namespace polyglot {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<float>& ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] std::size_t rank() const { return shape().size(); }
  [[nodiscard]] std::size_t dim(std::ptrdiff_t axis) const;
  [[nodiscard]] std::size_t size() const;

  [[nodiscard]] std::span<const float> data() const;
  /// Mutable access for optimizers and initializers; never call on a node
  /// that is part of a live graph.
  [[nodiscard]] std::span<float> mutable_data();
  [[nodiscard]] float item() const;
  [[nodiscard]] float at(std::initializer_list<std::size_t> index) const;

  [[nodiscard]] bool requires_grad() const;
  /// True once a backward pass has deposited a gradient here.
  [[nodiscard]] bool has_grad() const;
  [[nodiscard]] std::span<const float> grad() const;
  [[nodiscard]] std::span<float> mutable_grad();
  /// Drops the gradient buffer (the tensor reads as "no gradient" again).
  void clear_grad();

  /// Runs reverse-mode differentiation from this scalar. Leaf gradients
  /// accumulate; the recorded graph is released afterwards, so a second call
  /// on the same loss throws.
  void backward();

  /// A new leaf sharing no graph history with this tensor.
  [[nodiscard]] Tensor detach() const;

  [[nodiscard]] const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// While alive, ops on the current thread record no graph (evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// ---- differentiable ops ----------------------------------------------------

/// [m,k]x[k,n] or batched [B,m,k]x[B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Same shapes, or b's shape equal to the trailing dimensions of a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor transpose(const Tensor& x, std::ptrdiff_t axis0 = -2, std::ptrdiff_t axis1 = -1);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::ptrdiff_t axis);
Tensor softmax(const Tensor& x, std::ptrdiff_t axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);
Tensor gelu(const Tensor& x);
/// Inverted dropout. Identity when !train or p == 0.
Tensor dropout(const Tensor& x, float p, bool train, CounterRng& rng);
/// Rows of `table` ([V,h]) at `ids`; the gradient scatter-adds back.
Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids);
/// Mean of -log softmax(logits)[target] over rows whose target != ignore_id.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::int32_t ignore_id);
Tensor sum(const Tensor& x);

// Row/column plumbing for sparse expert dispatch.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor select_columns(const Tensor& x, std::span<const std::size_t> columns);
/// out[i] = x[rows[i], cols[i]].
Tensor pick(const Tensor& x, std::span<const std::size_t> rows, std::span<const std::size_t> cols);
/// out[i,:] = x[i,:] * factors[i].
Tensor scale_rows(const Tensor& x, const Tensor& factors);
/// Zero [n_rows, h] tensor with parts[p] row r added into row rows[p][r].
Tensor combine_rows(std::span<const Tensor> parts, std::span<const std::vector<std::size_t>> rows,
                    std::size_t n_rows, std::size_t width);

// ---- non-differentiable helpers ---------------------------------------------

/// Index of the maximum along the last axis, one per row; ties go to the lower index.
std::vector<std::size_t> argmax(const Tensor& x);
/// Indices of the k largest values, largest first; ties go to the lower index.
std::vector<std::size_t> top_k(std::span<const float> values, std::size_t k);

}  // namespace polyglot
