#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "can/errors.hpp"

namespace can {

using Shape = std::vector<std::size_t>;

/// Padding mask: 1 marks a real position, 0 a padded one. Empty means "all real".
using Mask = std::vector<std::uint8_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace debug {
/// When set, every recorded op checks its output for NaN/Inf and throws NumericError.
inline thread_local bool check_finite = false;
}  // namespace debug

/// One value in the computation graph. Non-leaf nodes keep their inputs and a
/// backward rule that pushes `grad` into the inputs' gradients.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle. Copies share the underlying node, which is
/// what lets a parameter appear in many places of one graph; use `detach()` for
/// an independent value copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (shape.empty()) throw DimensionError("tensor needs at least one axis");
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  static Tensor vector(std::initializer_list<T> values, bool requires_grad = false) {
    return Tensor({values.size()}, std::vector<T>(values), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows,
                       bool requires_grad = false) {
    std::vector<T> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access; only meaningful on leaves (optimizer updates, grad checks).
  std::span<T> mutable_data() { return node_->value; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T at(std::size_t i) const { return node_->value.at(i); }
  T at(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw DimensionError("at(i, j) needs a matrix");
    return node_->value.at(i * node_->shape[1] + j);
  }

  /// Gradient accumulated by backward(); zeros if none has reached this node.
  std::span<const T> grad() const { return node_->grad_buffer(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Records a new graph node. The backward rule reads `out.grad` and adds into
/// `out.inputs[i]->grad_buffer()` for every input that requires a gradient.
/// Inputs are dropped when none of them requires a gradient.
template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> value,
                  std::vector<Tensor<T>> inputs, std::function<void(Node<T>&)> backward) {
  if (debug::check_finite) {
    for (T v : value) {
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite output from ") + name);
    }
  }
  Tensor<T> out(std::move(shape), std::move(value));
  auto* node = out.node();
  node->op = name;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return out;
}

}  // namespace can
