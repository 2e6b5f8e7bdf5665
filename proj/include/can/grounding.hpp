#pragma once

#include <optional>
#include <string>
#include <vector>

#include "can/attention.hpp"
#include "can/nn.hpp"

namespace can {

/// A word position, optionally linked to an image object ("[1]" → 1).
struct TaggedToken {
  std::string text;
  std::optional<std::size_t> tag;

  bool operator==(const TaggedToken&) const = default;
};

inline std::vector<std::string> token_texts(std::span<const TaggedToken> tokens) {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(t.text);
  return out;
}

/// Image-text representation of one text sequence after the BiLSTM.
template <typename T>
struct GroundedSeq {
  Tensor<T> positions;  // [m × d_model]
  std::vector<TaggedToken> tokens;
  Mask mask;  // empty or length m
};

/// Concatenates each token embedding with the feature of the object it tags,
/// or with zeros when untagged. Result [m × (d_t + d_o)].
template <typename T>
Tensor<T> align_tags(std::span<const TaggedToken> tokens, const Tensor<T>& token_emb, const Tensor<T>& objects) {
  if (token_emb.rank() != 2 || token_emb.dim(0) != tokens.size()) {
    throw DimensionError("align_tags: " + std::to_string(tokens.size()) + " tokens vs embeddings " +
                         shape_str(token_emb.shape()));
  }
  if (objects.rank() != 2) throw DimensionError("align_tags: objects must be [k × d_o]");
  std::vector<long> rows(tokens.size(), -1);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!tokens[i].tag) continue;
    if (*tokens[i].tag >= objects.dim(0)) {
      throw DataError("align_tags: token " + std::to_string(i) + " (\"" + tokens[i].text + "\") tags object " +
                      std::to_string(*tokens[i].tag) + " but only " + std::to_string(objects.dim(0)) +
                      " objects exist");
    }
    rows[i] = static_cast<long>(*tokens[i].tag);
  }
  return concat<T>({token_emb, gather_rows(objects, std::span<const long>(rows))}, 1);
}

template <typename T>
struct GroundingParams {
  LstmParams<T> lstm;
  std::optional<Linear<T>> projection;  // present when 2·d_h != d_model

  static GroundingParams init(std::size_t d_in, std::size_t d_hidden, std::size_t d_model, Rng& rng) {
    GroundingParams p{LstmParams<T>::init(d_in, d_hidden, rng), std::nullopt};
    if (2 * d_hidden != d_model) p.projection = Linear<T>::init(2 * d_hidden, d_model, rng);
    return p;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    lstm.collect(prefix + ".lstm", out);
    if (projection) projection->collect(prefix + ".projection", out);
  }
};

template <typename T>
GroundedSeq<T> ground(const Tensor<T>& aligned, const GroundingParams<T>& p, std::vector<TaggedToken> tokens,
                      Mask mask = {}) {
  auto h = bilstm(aligned, p.lstm, mask);
  if (p.projection) h = (*p.projection)(h);
  return {h, std::move(tokens), std::move(mask)};
}

/// Sequencing of the two guidances applied to the response.
enum class GaOrder { query_first, object_first };

template <typename T>
struct GuidedFuseParams {
  AttnUnitParams<T> query_guide;   // grounded_r guided by grounded_q
  AttnUnitParams<T> object_guide;  // grounded_r guided by objects
  std::optional<AttnUnitParams<T>> query_self;  // optional self-attention route for q

  void collect(const std::string& prefix, ParamList<T>& out) const {
    query_guide.collect(prefix + ".query_guide", out);
    object_guide.collect(prefix + ".object_guide", out);
    if (query_self) query_self->collect(prefix + ".query_self", out);
  }
};

template <typename T>
struct FuseResult {
  Tensor<T> q_tilde;
  Tensor<T> r_tilde;
};

/// r̃ = GA(GA(grounded_r, grounded_q), objects) (or the reverse order); q̃ is
/// grounded_q unless a query self-attention route is configured.
/// `objects` must already be projected to d_model. Traces are appended when
/// `traces` is non-null.
template <typename T>
FuseResult<T> guided_fuse(const GroundedSeq<T>& grounded_q, const GroundedSeq<T>& grounded_r,
                          const Tensor<T>& objects, std::span<const std::string> object_labels,
                          const GuidedFuseParams<T>& p, const Context& ctx, GaOrder order = GaOrder::query_first,
                          std::vector<AttentionTrace>* traces = nullptr) {
  if (objects.rank() != 2 || objects.dim(1) != grounded_r.positions.dim(1)) {
    throw DimensionError("guided_fuse: objects " + shape_str(objects.shape()) + " not projected to width " +
                         std::to_string(grounded_r.positions.dim(1)));
  }
  const auto q_tokens = token_texts(grounded_q.tokens);
  const auto r_tokens = token_texts(grounded_r.tokens);
  const std::vector<std::string> o_tokens(object_labels.begin(), object_labels.end());

  auto by_query = [&](const Tensor<T>& r) {
    auto u = guided_attention_unit(r, grounded_q.positions, p.query_guide, grounded_q.mask, ctx);
    if (traces) traces->push_back(u.trace("ga_query", r_tokens, q_tokens));
    return u.output;
  };
  auto by_objects = [&](const Tensor<T>& r) {
    auto u = guided_attention_unit(r, objects, p.object_guide, {}, ctx);
    if (traces) traces->push_back(u.trace("ga_object", r_tokens, o_tokens));
    return u.output;
  };

  Tensor<T> r = grounded_r.positions;
  r = order == GaOrder::query_first ? by_objects(by_query(r)) : by_query(by_objects(r));

  Tensor<T> q = grounded_q.positions;
  if (p.query_self) {
    auto u = self_attention_unit(q, *p.query_self, grounded_q.mask, ctx);
    if (traces) traces->push_back(u.trace("query_self", q_tokens, q_tokens));
    q = u.output;
  }
  return {q, r};
}

}  // namespace can
