#pragma once

// Minimal first-order reverse-mode differentiation over dense Arrays.
//
// A Tape records operations in creation order; Var is a cheap handle to one
// recorded node. Parameters live outside the tape as shared Tensors so that a
// fresh tape can be built every step while gradients accumulate in place.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "scam/array.hpp"

namespace scam {

struct Tensor {
  Array value;
  Array grad;
  bool requires_grad = false;
  bool has_grad = false;

  Tensor() = default;
  Tensor(Array v, bool rg) : value(std::move(v)), requires_grad(rg) {}

  /// Lazily allocates a zero gradient of value's shape.
  Array& ensure_grad();
  void zero_grad();
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr make_parameter(Array value);

class Tape;

class Var {
 public:
  Var() = default;

  const Array& value() const;
  /// Gradient of the last backward root w.r.t. this node. Zero if none flowed.
  Array grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Backward rule: receives d(root)/d(output) and the input tensors, and adds
/// the input contributions into each input's grad when it requires one.
using BackwardRule = std::function<void(const Array& grad_out, std::span<Tensor* const> inputs)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value);
  Var leaf(Array value, bool requires_grad = true);
  /// Leaf that shares storage with an externally owned tensor; gradients
  /// accumulate directly into it.
  Var parameter(const TensorPtr& tensor);

  Var record(Array value, std::vector<Var> inputs, BackwardRule rule);

  /// Seeds d(root)/d(root) = 1 and propagates in reverse recording order.
  /// Intermediate gradients are reset first; leaf gradients accumulate.
  void backward(const Var& root);

  /// Zeroes the gradients of every node including shared parameters.
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  Tensor& tensor(std::size_t id) { return *nodes_.at(id).tensor; }
  const Tensor& tensor(std::size_t id) const { return *nodes_.at(id).tensor; }

 private:
  struct Node {
    TensorPtr tensor;
    std::vector<std::size_t> inputs;
    BackwardRule rule;
    bool is_leaf = true;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
};

// ---- operations ---------------------------------------------------------

Var matmul(const Var& a, const Var& b);

/// 1-D convolution with zero padding. x is [C_in x T] or batched [B x C_in x T];
/// w is [C_out x C_in x k]; b is [C_out].
Var conv1d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t padding);
std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride,
                                 std::size_t padding);

enum class Elementwise { add, sub, mul, abs, relu, scale, reciprocal };

/// Binary ops accept equal shapes or one scalar operand.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var abs(const Var& x);
Var relu(const Var& x);
Var scale(const Var& x, double factor);
Var reciprocal(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
/// Reduces over the listed axes, dropping them. Reducing every axis yields shape {1}.
Var sum(const Var& x, std::vector<std::size_t> axes);
Var mean(const Var& x, std::vector<std::size_t> axes);

Var concat(const std::vector<Var>& parts, std::size_t axis);
Var transpose(const Var& x);
Var permute(const Var& x, std::vector<std::size_t> order);
Var reshape(const Var& x, Shape shape);

Var stop_gradient(const Var& x);

// Plain-array helpers shared by models and tests.
Array permute_array(const Array& x, const std::vector<std::size_t>& order);
Array matmul_array(const Array& a, const Array& b);

}  // namespace scam
