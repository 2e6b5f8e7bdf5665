#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "can/ops.hpp"
#include "can/random.hpp"
#include "can/tensor.hpp"

namespace can {

/// Named trainable leaves in a deterministic order.
template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

/// Per-forward settings shared by every layer.
struct Context {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
  /// x + Sublayer(x) before each LayerNorm in attention units.
  bool residual = true;
};

/// Uniform in [−1/√fan_in, +1/√fan_in], as a trainable leaf.
template <typename T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(values), true);
}

template <typename T>
struct Linear {
  Tensor<T> weight;  // [d_in × d_out]
  Tensor<T> bias;    // [d_out]

  static Linear init(std::size_t d_in, std::size_t d_out, Rng& rng) {
    return {uniform_init<T>({d_in, d_out}, d_in, rng), Tensor<T>::zeros({d_out}, true)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-5);

  static LayerNormParams init(std::size_t d) {
    return {Tensor<T>::full({d}, T(1), true), Tensor<T>::zeros({d}, true), T(1e-5)};
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  return layer_norm(x, p.gamma, p.beta, p.eps);
}

/// Linear → ReLU → Dropout → Linear, width preserving.
template <typename T>
struct FeedForward {
  Linear<T> expand;
  Linear<T> contract;

  static FeedForward init(std::size_t d_model, std::size_t d_ff, Rng& rng) {
    auto expand = Linear<T>::init(d_model, d_ff, rng);
    return {std::move(expand), Linear<T>::init(d_ff, d_model, rng)};
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    expand.collect(prefix + ".expand", out);
    contract.collect(prefix + ".contract", out);
  }
};

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForward<T>& p, const Context& ctx) {
  if (x.rank() != 2 || x.dim(1) != p.expand.in_features()) {
    throw DimensionError("feed_forward: input " + shape_str(x.shape()) + " vs width " +
                         std::to_string(p.expand.in_features()));
  }
  return p.contract(dropout(relu(p.expand(x)), ctx.dropout, ctx.training, ctx.rng));
}

/// Stacked Linear+ReLU with a linear final layer.
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;

  /// widths = {d_in, hidden..., d_out}
  static Mlp init(const std::vector<std::size_t>& widths, Rng& rng) {
    Mlp m;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      m.layers.push_back(Linear<T>::init(widths[i], widths[i + 1], rng));
    return m;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + "." + std::to_string(i), out);
  }
};

template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const Mlp<T>& p) {
  if (p.layers.empty()) throw ContractError("mlp: no layers");
  if (x.rank() != 2 || x.dim(1) != p.layers.front().in_features()) {
    throw DimensionError("mlp: input " + shape_str(x.shape()) + " vs width " +
                         std::to_string(p.layers.front().in_features()));
  }
  Tensor<T> h = x;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    h = p.layers[i](h);
    if (i + 1 < p.layers.size()) h = relu(h);
  }
  return h;
}

/// One LSTM direction. Gate blocks along the 4h axis are ordered
/// input | forget | cell | output.
template <typename T>
struct LstmDirection {
  Tensor<T> w_input;   // [d_in × 4h]
  Tensor<T> w_hidden;  // [h × 4h]
  Tensor<T> bias;      // [4h]

  std::size_t hidden() const { return w_hidden.dim(0); }

  static LstmDirection init(std::size_t d_in, std::size_t h, Rng& rng) {
    LstmDirection p{uniform_init<T>({d_in, 4 * h}, d_in, rng), uniform_init<T>({h, 4 * h}, h, rng),
                    Tensor<T>::zeros({4 * h}, true)};
    auto b = p.bias.mutable_data();
    for (std::size_t j = h; j < 2 * h; ++j) b[j] = T(1);
    return p;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix + ".w_input", w_input);
    out.emplace_back(prefix + ".w_hidden", w_hidden);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename T>
struct LstmParams {
  LstmDirection<T> forward;
  LstmDirection<T> backward;

  static LstmParams init(std::size_t d_in, std::size_t h, Rng& rng) {
    auto fwd = LstmDirection<T>::init(d_in, h, rng);
    return {std::move(fwd), LstmDirection<T>::init(d_in, h, rng)};
  }

  std::size_t hidden() const { return forward.hidden(); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    forward.collect(prefix + ".forward", out);
    backward.collect(prefix + ".backward", out);
  }
};

/// Runs one direction over seq [m×d_in] from zero state; output row t is h_t.
template <typename T>
Tensor<T> lstm_pass(const Tensor<T>& seq, const LstmDirection<T>& p, bool reverse) {
  const std::size_t m = seq.dim(0), h = p.hidden();
  const auto gates_in = add(matmul(seq, p.w_input), p.bias);
  std::vector<Tensor<T>> outputs(m);
  Tensor<T> h_prev, c_prev;
  for (std::size_t step = 0; step < m; ++step) {
    const std::size_t t = reverse ? m - 1 - step : step;
    auto gates = slice(gates_in, 0, t, t + 1);
    if (h_prev.defined()) gates = add(gates, matmul(h_prev, p.w_hidden));
    auto input_gate = sigmoid(slice(gates, 1, 0, h));
    auto forget_gate = sigmoid(slice(gates, 1, h, 2 * h));
    auto candidate = tanh(slice(gates, 1, 2 * h, 3 * h));
    auto output_gate = sigmoid(slice(gates, 1, 3 * h, 4 * h));
    auto c = mul(input_gate, candidate);
    if (c_prev.defined()) c = add(mul(forget_gate, c_prev), c);
    h_prev = mul(output_gate, tanh(c));
    c_prev = c;
    outputs[t] = h_prev;
  }
  return concat(outputs, 0);
}

/// One-layer bidirectional LSTM, output [m × 2h] = forward ‖ backward per
/// position. Masked positions are skipped by both directions and emit zeros.
template <typename T>
Tensor<T> bilstm(const Tensor<T>& seq, const LstmParams<T>& p, std::span<const std::uint8_t> mask = {}) {
  if (seq.rank() != 2 || seq.dim(0) == 0) throw ContractError("bilstm: empty sequence");
  if (seq.dim(1) != p.forward.w_input.dim(0)) {
    throw DimensionError("bilstm: input " + shape_str(seq.shape()) + " vs input width " +
                         std::to_string(p.forward.w_input.dim(0)));
  }
  const std::size_t m = seq.dim(0);
  if (!mask.empty() && mask.size() != m) throw DimensionError("bilstm: mask length differs from sequence");

  std::vector<long> real, scatter(m, -1);
  for (std::size_t t = 0; t < m; ++t) {
    if (mask.empty() || mask[t]) {
      scatter[t] = static_cast<long>(real.size());
      real.push_back(static_cast<long>(t));
    }
  }
  if (real.empty()) throw ContractError("bilstm: every position is padding");
  const bool compacted = real.size() != m;
  const auto input = compacted ? gather_rows(seq, std::span<const long>(real)) : seq;
  auto out = concat<T>({lstm_pass(input, p.forward, false), lstm_pass(input, p.backward, true)}, 1);
  return compacted ? gather_rows(out, std::span<const long>(scatter)) : out;
}

}  // namespace can
