#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <unordered_set>
#include <vector>

#include "can/ops.hpp"
#include "can/tensor.hpp"

namespace can {

/// Topologically ordered view of every gradient-carrying node reachable from a
/// root: each node appears once, after all of its inputs.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root) {
    Tape tape;
    if (!root.defined() || !root.requires_grad()) return tape;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS; the second stack slot is the next input to visit.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* in = node->inputs[next++].get();
        if (in->requires_grad && seen.insert(in).second) stack.emplace_back(in, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  const std::vector<Node<T>*>& nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<Node<T>*> order_;
};

/// Reverse-mode accumulation from a scalar loss into every requires-grad leaf.
/// Leaf gradients accumulate across calls; call zero_grad() between steps.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  auto tape = Tape<T>::record(loss);
  if (tape.size() == 0) return;
  for (Node<T>* n : tape.nodes()) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  loss.node()->grad_buffer()[0] += T(1);
  const auto& order = tape.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
}

namespace detail {

// Fixed, non-degenerate projection weights used to turn a non-scalar output
// into a scalar objective for gradient checking.
template <typename T>
Tensor<T> probe_objective(const Tensor<T>& y) {
  if (y.numel() == 1) return y;
  std::vector<T> w(y.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = T(0.5) + T(0.37) * std::sin(T(1.3) * T(i + 1));
  return sum(mul(y, Tensor<T>(y.shape(), std::move(w))));
}

template <typename T>
T relative_error(T analytic, T numeric) {
  return std::abs(analytic - numeric) / std::max(T(1), std::abs(analytic));
}

}  // namespace detail

/// Max over coordinates of |analytic − central difference| / max(1, |analytic|)
/// for f at x. Non-scalar outputs are reduced with a fixed weighted sum.
template <typename T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T h = T(1e-5)) {
  Tensor<T> leaf(x.shape(), std::vector<T>(x.data().begin(), x.data().end()), true);
  backward(detail::probe_objective(f(leaf)));
  std::vector<T> analytic(leaf.grad().begin(), leaf.grad().end());

  T worst = 0;
  std::vector<T> base(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto eval = [&](T delta) {
      std::vector<T> v = base;
      v[i] += delta;
      return detail::probe_objective(f(Tensor<T>(x.shape(), std::move(v)))).item();
    };
    const T numeric = (eval(h) - eval(-h)) / (T(2) * h);
    worst = std::max(worst, detail::relative_error(analytic[i], numeric));
  }
  return worst;
}

/// Same metric over every coordinate of a set of leaves used by `loss_fn`.
/// Leaves are perturbed in place and restored.
template <typename T>
T grad_check_parameters(const std::function<Tensor<T>()>& loss_fn, std::vector<Tensor<T>> params,
                        T h = T(1e-5)) {
  for (auto& p : params) p.zero_grad();
  backward(detail::probe_objective(loss_fn()));
  T worst = 0;
  for (auto& p : params) {
    std::vector<T> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T orig = values[i];
      values[i] = orig + h;
      const T up = detail::probe_objective(loss_fn()).item();
      values[i] = orig - h;
      const T down = detail::probe_objective(loss_fn()).item();
      values[i] = orig;
      worst = std::max(worst, detail::relative_error(analytic[i], (up - down) / (T(2) * h)));
    }
  }
  return worst;
}

}  // namespace can
