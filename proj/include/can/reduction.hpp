#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "can/attention.hpp"
#include "can/nn.hpp"

namespace can {

template <typename T>
struct ReductionParams {
  Mlp<T> score_query;                 // d → d/2 → 1
  std::optional<Mlp<T>> score_response;  // absent when the query MLP is shared
  Tensor<T> w_x1;                     // [d × d_c]
  Tensor<T> w_x2;                     // [d × d_c]
  LayerNormParams<T> fusion_norm;
  Linear<T> classifier;               // d_c → 1

  static ReductionParams init(std::size_t d_model, std::size_t d_fused, bool share_mlp, Rng& rng) {
    const std::vector<std::size_t> widths{d_model, std::max<std::size_t>(1, d_model / 2), 1};
    ReductionParams p;
    p.score_query = Mlp<T>::init(widths, rng);
    if (!share_mlp) p.score_response = Mlp<T>::init(widths, rng);
    p.w_x1 = uniform_init<T>({d_model, d_fused}, d_model, rng);
    p.w_x2 = uniform_init<T>({d_model, d_fused}, d_model, rng);
    p.fusion_norm = LayerNormParams<T>::init(d_fused);
    p.classifier = Linear<T>::init(d_fused, 1, rng);
    return p;
  }

  const Mlp<T>& response_mlp() const { return score_response ? *score_response : score_query; }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    score_query.collect(prefix + ".score_query", out);
    if (score_response) score_response->collect(prefix + ".score_response", out);
    out.emplace_back(prefix + ".w_x1", w_x1);
    out.emplace_back(prefix + ".w_x2", w_x2);
    fusion_norm.collect(prefix + ".fusion_norm", out);
    classifier.collect(prefix + ".classifier", out);
  }
};

template <typename T>
struct ReduceResult {
  Tensor<T> pooled;  // [d]
  Tensor<T> alpha;   // [m], zero on padding
};

/// α = softmax over real positions of the per-position MLP score; pooled = Σ αᵢ·Zᵢ.
template <typename T>
ReduceResult<T> reduce(const Tensor<T>& z, std::span<const std::uint8_t> mask, const Mlp<T>& score) {
  if (z.rank() != 2 || z.dim(0) == 0) throw ContractError("reduce: empty sequence");
  const std::size_t m = z.dim(0), d = z.dim(1);
  auto scores = reshape(mlp(z, score), {1, m});
  if (!mask.empty()) {
    if (mask.size() != m) throw DimensionError("reduce: mask length differs from sequence");
    std::vector<T> bias(m, T(0));
    bool any = false;
    for (std::size_t i = 0; i < m; ++i) {
      if (mask[i]) {
        any = true;
      } else {
        bias[i] = static_cast<T>(kMaskedScore);
      }
    }
    if (!any) throw ContractError("reduce: every position is padding");
    scores = add(scores, Tensor<T>({m}, std::move(bias)));
  }
  auto alpha = softmax(scores, 1);
  return {reshape(matmul(alpha, z), {d}), reshape(alpha, {m})};
}

/// c = LayerNorm(W_x1ᵀ·z̃_q + W_x2ᵀ·z̃_r), shape [d_c].
template <typename T>
Tensor<T> fuse(const Tensor<T>& pooled_q, const Tensor<T>& pooled_r, const ReductionParams<T>& p) {
  const std::size_t d = p.w_x1.dim(0);
  if (pooled_q.numel() != d || pooled_r.numel() != d) {
    throw DimensionError("fuse: pooled widths " + shape_str(pooled_q.shape()) + ", " +
                         shape_str(pooled_r.shape()) + " vs projection input " + std::to_string(d));
  }
  auto projected = add(matmul(reshape(pooled_q, {1, d}), p.w_x1), matmul(reshape(pooled_r, {1, d}), p.w_x2));
  auto c = layer_norm(projected, p.fusion_norm);
  return reshape(c, {p.w_x1.dim(1)});
}

/// Scalar candidate logit from the fused feature, shape [1].
template <typename T>
Tensor<T> classify(const Tensor<T>& fused, const ReductionParams<T>& p) {
  return reshape(p.classifier(reshape(fused, {1, fused.numel()})), {1});
}

/// Index of the largest value; ties go to the lowest index.
template <typename U>
std::size_t argmax_lowest(std::span<const U> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

}  // namespace can
