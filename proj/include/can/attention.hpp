#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "can/nn.hpp"
#include "can/ops.hpp"

namespace can {

/// Pre-softmax score given to padded key positions.
inline constexpr double kMaskedScore = -1e9;

/// Detached attention weights of one head: rows are query positions, columns
/// key positions.
struct WeightMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double at(std::size_t i, std::size_t j) const { return values.at(i * cols + j); }
};

/// Interpretability record for one attention unit.
struct AttentionTrace {
  std::string unit;
  std::vector<WeightMatrix> heads;
  std::vector<std::string> query_tokens;
  std::vector<std::string> key_tokens;
};

template <typename T>
WeightMatrix to_weight_matrix(const Tensor<T>& w) {
  return {w.dim(0), w.dim(1), std::vector<double>(w.data().begin(), w.data().end())};
}

template <typename T>
struct SdpaResult {
  Tensor<T> output;   // [m × d_v]
  Tensor<T> weights;  // [m × n]
};

/// softmax(Q·Kᵀ/√d_k)·V with padded keys excluded.
template <typename T>
SdpaResult<T> sdpa(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                   std::span<const std::uint8_t> key_mask = {}) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw DimensionError("sdpa: incompatible Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) +
                         ", V " + shape_str(v.shape()));
  }
  const std::size_t n = k.dim(0);
  auto scores = scale(matmul(q, transpose(k)), T(1) / std::sqrt(static_cast<T>(k.dim(1))));
  if (!key_mask.empty()) {
    if (key_mask.size() != n) throw DimensionError("sdpa: mask length differs from key count");
    std::vector<T> bias(n, T(0));
    bool any_valid = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (key_mask[j]) {
        any_valid = true;
      } else {
        bias[j] = static_cast<T>(kMaskedScore);
      }
    }
    if (!any_valid) throw ContractError("sdpa: every key position is masked");
    scores = add(scores, Tensor<T>({n}, std::move(bias)));
  }
  auto weights = softmax(scores, 1);
  return {matmul(weights, v), weights};
}

template <typename T>
struct MhaParams {
  std::vector<Tensor<T>> w_query;  // h × [d × d_k]
  std::vector<Tensor<T>> w_key;    // h × [d × d_k]
  std::vector<Tensor<T>> w_value;  // h × [d × d_v]
  Tensor<T> w_out;                 // [h·d_v × d]

  std::size_t heads() const { return w_query.size(); }
  std::size_t d_k() const { return w_query.front().dim(1); }
  std::size_t d_v() const { return w_value.front().dim(1); }

  /// d_k = d_v = d_model / heads.
  static MhaParams init(std::size_t d_model, std::size_t heads, Rng& rng) {
    if (heads == 0 || d_model % heads != 0) {
      throw ContractError("multi-head attention: " + std::to_string(heads) + " heads do not divide width " +
                          std::to_string(d_model));
    }
    const std::size_t dh = d_model / heads;
    MhaParams p;
    for (std::size_t i = 0; i < heads; ++i) {
      p.w_query.push_back(uniform_init<T>({d_model, dh}, d_model, rng));
      p.w_key.push_back(uniform_init<T>({d_model, dh}, d_model, rng));
      p.w_value.push_back(uniform_init<T>({d_model, dh}, d_model, rng));
    }
    p.w_out = uniform_init<T>({heads * dh, d_model}, heads * dh, rng);
    return p;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t i = 0; i < heads(); ++i) {
      const auto head = prefix + ".head" + std::to_string(i);
      out.emplace_back(head + ".w_query", w_query[i]);
      out.emplace_back(head + ".w_key", w_key[i]);
      out.emplace_back(head + ".w_value", w_value[i]);
    }
    out.emplace_back(prefix + ".w_out", w_out);
  }
};

template <typename T>
struct MhaResult {
  Tensor<T> output;                // [m × d]
  std::vector<Tensor<T>> weights;  // per head, [m × n]
};

/// Concat(head_1..head_h)·W^O where head_i = sdpa(Q·W^Q_i, K·W^K_i, V·W^V_i).
template <typename T>
MhaResult<T> multi_head(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                        const MhaParams<T>& p, std::span<const std::uint8_t> key_mask = {}) {
  if (p.heads() == 0) throw ContractError("multi_head: no heads");
  if (p.w_out.dim(0) != p.heads() * p.d_v()) {
    throw DimensionError("multi_head: W^O input extent " + std::to_string(p.w_out.dim(0)) + " != h·d_v");
  }
  MhaResult<T> result;
  std::vector<Tensor<T>> heads;
  heads.reserve(p.heads());
  for (std::size_t i = 0; i < p.heads(); ++i) {
    auto head = sdpa(matmul(q_in, p.w_query[i]), matmul(k_in, p.w_key[i]), matmul(v_in, p.w_value[i]), key_mask);
    heads.push_back(head.output);
    result.weights.push_back(head.weights);
  }
  result.output = matmul(heads.size() == 1 ? heads.front() : concat(heads, 1), p.w_out);
  return result;
}

/// Multi-head layer plus feed-forward layer, each followed by LayerNorm.
template <typename T>
struct AttnUnitParams {
  MhaParams<T> mha;
  FeedForward<T> ffn;
  LayerNormParams<T> ln1;
  LayerNormParams<T> ln2;

  static AttnUnitParams init(std::size_t d_model, std::size_t heads, std::size_t d_ff, Rng& rng) {
    auto mha = MhaParams<T>::init(d_model, heads, rng);
    auto ffn = FeedForward<T>::init(d_model, d_ff, rng);
    return {std::move(mha), std::move(ffn), LayerNormParams<T>::init(d_model), LayerNormParams<T>::init(d_model)};
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    mha.collect(prefix + ".mha", out);
    ffn.collect(prefix + ".ffn", out);
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
  }
};

template <typename T>
struct UnitResult {
  Tensor<T> output;                // [m × d]
  std::vector<Tensor<T>> weights;  // per head, [m × n]

  AttentionTrace trace(std::string unit, std::vector<std::string> query_tokens = {},
                       std::vector<std::string> key_tokens = {}) const {
    AttentionTrace t{std::move(unit), {}, std::move(query_tokens), std::move(key_tokens)};
    for (const auto& w : weights) t.heads.push_back(to_weight_matrix(w));
    return t;
  }
};

/// x attends to `guide` (Q = x, K = V = guide):
///   y = LN(x + MHA(x, guide, guide)),  out = LN(y + FFN(y))
/// The residual terms are dropped when ctx.residual is false.
template <typename T>
UnitResult<T> guided_attention_unit(const Tensor<T>& x, const Tensor<T>& guide, const AttnUnitParams<T>& p,
                                    std::span<const std::uint8_t> guide_mask, const Context& ctx) {
  if (x.rank() != 2 || guide.rank() != 2 || x.dim(1) != guide.dim(1)) {
    throw DimensionError("attention unit: x " + shape_str(x.shape()) + " vs guide " + shape_str(guide.shape()));
  }
  auto attended = multi_head(x, guide, guide, p.mha, guide_mask);
  auto y = layer_norm(ctx.residual ? add(x, attended.output) : attended.output, p.ln1);
  auto ff = feed_forward(y, p.ffn, ctx);
  return {layer_norm(ctx.residual ? add(y, ff) : ff, p.ln2), std::move(attended.weights)};
}

/// Guided attention of a sequence with itself.
template <typename T>
UnitResult<T> self_attention_unit(const Tensor<T>& x, const AttnUnitParams<T>& p,
                                  std::span<const std::uint8_t> mask, const Context& ctx) {
  return guided_attention_unit(x, x, p, mask, ctx);
}

}  // namespace can
