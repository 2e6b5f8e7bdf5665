#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "can/attention.hpp"
#include "can/checkpoint.hpp"
#include "can/coattention.hpp"
#include "can/grounding.hpp"
#include "can/nn.hpp"
#include "can/reduction.hpp"
#include "can/vcr_data.hpp"

namespace can {

enum class EncoderKind { coattention, lstm };

struct ModelConfig {
  std::size_t d_model = 16;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t d_ff = 0;     // 0 → 4·d_model
  std::size_t d_token = 0;  // 0 → d_model
  std::size_t d_object = 8;
  std::size_t vocab_size = 0;
  double dropout = 0.1;
  bool residual = true;
  bool ga = true;
  EncoderKind encoder = EncoderKind::coattention;
  GaOrder ga_order = GaOrder::query_first;
  bool self_first = true;
  bool refresh_joint = false;
  bool route_query = false;
  bool share_reduction_mlp = false;
  std::size_t pad_to = 0;  // pad text sequences with [pad] up to this length

  std::size_t ff_width() const { return d_ff ? d_ff : 4 * d_model; }
  std::size_t token_width() const { return d_token ? d_token : d_model; }
  std::size_t lstm_hidden() const { return d_model / 2; }

  void validate() const {
    if (d_model == 0 || heads == 0 || layers == 0 || d_object == 0) {
      throw ContractError("model config: widths, heads and layers must be positive");
    }
    if (d_model % heads != 0) {
      throw ContractError("model config: heads (" + std::to_string(heads) + ") must divide d_model (" +
                          std::to_string(d_model) + ")");
    }
    if (d_model < 2) throw ContractError("model config: d_model must be at least 2");
    if (vocab_size < 2) throw ContractError("model config: vocabulary not set");
    if (dropout < 0.0 || dropout >= 1.0) throw ContractError("model config: dropout must lie in [0, 1)");
  }
};

/// Token ids plus the tagged tokens and mask of one text sequence.
struct EncodedSeq {
  std::vector<int> ids;
  TokenSeq tokens;
  Mask mask;
};

inline EncodedSeq encode(const TokenSeq& tokens, const Vocab& vocab, std::size_t pad_to = 0) {
  EncodedSeq out;
  for (const auto& t : tokens) {
    const bool pad = lowercase(t.text) == kPadToken;
    out.ids.push_back(pad ? Vocab::kPad : vocab.id(t.text));
    out.tokens.push_back(pad ? TaggedToken{kPadToken, std::nullopt} : t);
    out.mask.push_back(pad ? 0 : 1);
  }
  while (out.ids.size() < pad_to) {
    out.ids.push_back(Vocab::kPad);
    out.tokens.push_back({kPadToken, std::nullopt});
    out.mask.push_back(0);
  }
  return out;
}

/// One task of one instance, encoded for the model.
template <typename T>
struct TaskInput {
  std::string instance_id;
  TaskKind kind = TaskKind::q2a;
  EncodedSeq query;
  std::vector<EncodedSeq> responses;
  Tensor<T> objects;  // [k × d_o]
  std::vector<std::string> object_labels;
  std::size_t gold = 0;
};

template <typename T>
Tensor<T> convert(const Tensor<double>& t) {
  return Tensor<T>(t.shape(), std::vector<T>(t.data().begin(), t.data().end()));
}

template <typename T>
TaskInput<T> prepare(const VcrInstance& inst, TaskKind kind, const Vocab& vocab, std::size_t pad_to = 0) {
  const auto ex = make_task(inst, kind);
  TaskInput<T> in{inst.instance_id, kind, encode(ex.query, vocab, pad_to), {}, convert<T>(inst.objects),
                  inst.object_labels, ex.gold};
  for (const auto& r : ex.responses) in.responses.push_back(encode(r, vocab, pad_to));
  return in;
}

/// Per-candidate logit with its reduction weights.
struct CandidateScore {
  double logit = 0;
  std::vector<double> alpha_q;
  std::vector<double> alpha_r;
};

template <typename T>
struct CandidateOutput {
  Tensor<T> logit;  // [1]
  Tensor<T> alpha_q;
  Tensor<T> alpha_r;
  std::vector<AttentionTrace> traces;
};

template <typename T>
struct ScoreResult {
  Tensor<T> logits;  // [4]
  std::vector<CandidateOutput<T>> candidates;
  std::size_t prediction = 0;

  std::vector<CandidateScore> scores() const {
    std::vector<CandidateScore> out;
    for (const auto& c : candidates) {
      out.push_back({static_cast<double>(c.logit.item()),
                     std::vector<double>(c.alpha_q.data().begin(), c.alpha_q.data().end()),
                     std::vector<double>(c.alpha_r.data().begin(), c.alpha_r.data().end())});
    }
    return out;
  }
};

/// The full network: token embeddings → tag alignment + BiLSTM grounding →
/// guided attention fusion → co-attention (or BiLSTM) encoder → attention
/// reduction → fusion LayerNorm → scalar logit per candidate.
template <typename T>
class CanModel {
 public:
  ModelConfig config;
  Tensor<T> embedding;  // [V × d_t]
  GroundingParams<T> grounding;
  std::optional<Linear<T>> object_projection;
  std::optional<GuidedFuseParams<T>> fusion;
  std::optional<CoAttnParams<T>> coattention;
  std::optional<LstmParams<T>> encoder_lstm;
  ReductionParams<T> reduction;

  static CanModel init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    CanModel m;
    m.config = cfg;
    const std::size_t d = cfg.d_model, dt = cfg.token_width();
    m.embedding = uniform_init<T>({cfg.vocab_size, dt}, dt, rng);
    m.grounding = GroundingParams<T>::init(dt + cfg.d_object, cfg.lstm_hidden(), d, rng);
    if (cfg.ga) {
      m.object_projection = Linear<T>::init(cfg.d_object, d, rng);
      auto query_guide = AttnUnitParams<T>::init(d, cfg.heads, cfg.ff_width(), rng);
      auto object_guide = AttnUnitParams<T>::init(d, cfg.heads, cfg.ff_width(), rng);
      m.fusion = GuidedFuseParams<T>{std::move(query_guide), std::move(object_guide), std::nullopt};
      if (cfg.route_query) m.fusion->query_self = AttnUnitParams<T>::init(d, cfg.heads, cfg.ff_width(), rng);
    }
    if (cfg.encoder == EncoderKind::coattention) {
      m.coattention = CoAttnParams<T>::init(cfg.layers, d, cfg.heads, cfg.ff_width(), rng);
    } else {
      m.encoder_lstm = LstmParams<T>::init(d, cfg.lstm_hidden(), rng);
    }
    m.reduction = ReductionParams<T>::init(d, d, cfg.share_reduction_mlp, rng);
    return m;
  }

  static CanModel init(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return init(cfg, rng);
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    out.emplace_back("embedding", embedding);
    grounding.collect("grounding", out);
    if (object_projection) object_projection->collect("object_projection", out);
    if (fusion) fusion->collect("fusion", out);
    if (coattention) coattention->collect("coattention", out);
    if (encoder_lstm) encoder_lstm->collect("encoder_lstm", out);
    reduction.collect("reduction", out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }

  void zero_grad() const {
    for (auto [name, t] : parameters()) t.zero_grad();
  }

  std::vector<checkpoint::Entry> state() const {
    std::vector<checkpoint::Entry> out;
    for (const auto& [name, t] : parameters()) out.push_back(checkpoint::to_entry(name, t));
    return out;
  }

  /// Copies values from checkpoint entries; names and shapes must match exactly.
  void load_state(const std::vector<checkpoint::Entry>& entries) {
    std::map<std::string, const checkpoint::Entry*> by_name;
    for (const auto& e : entries) by_name.emplace(e.name, &e);
    auto params = parameters();
    if (by_name.size() != params.size()) {
      throw DataError("checkpoint holds " + std::to_string(by_name.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
    }
    for (auto& [name, t] : params) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw DataError("checkpoint is missing parameter " + name);
      if (it->second->shape != t.shape()) {
        throw DataError("checkpoint parameter " + name + " has shape " + shape_str(it->second->shape) +
                        ", model expects " + shape_str(t.shape()));
      }
      auto dst = t.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
    }
  }

  Context context(bool training, Rng* rng = nullptr) const {
    return Context{training, config.dropout, rng, config.residual};
  }

  GroundedSeq<T> ground_text(const EncodedSeq& seq, const Tensor<T>& objects) const {
    auto emb = embedding_lookup(embedding, std::span<const int>(seq.ids));
    auto aligned = align_tags(std::span<const TaggedToken>(seq.tokens), emb, objects);
    return ground(aligned, grounding, seq.tokens, seq.mask);
  }

  /// Everything after grounding for one response, given the shared query side.
  CandidateOutput<T> score_response(const GroundedSeq<T>& grounded_q, const EncodedSeq& response,
                                    const Tensor<T>& objects, const Tensor<T>& projected_objects,
                                    std::span<const std::string> object_labels, const Context& ctx,
                                    bool collect_traces) const {
    CandidateOutput<T> out;
    auto* traces = collect_traces ? &out.traces : nullptr;
    auto grounded_r = ground_text(response, objects);

    Tensor<T> q_tilde = grounded_q.positions, r_tilde = grounded_r.positions;
    if (fusion) {
      auto fused = guided_fuse(grounded_q, grounded_r, projected_objects, object_labels, *fusion, ctx,
                               config.ga_order, traces);
      q_tilde = fused.q_tilde;
      r_tilde = fused.r_tilde;
    }
    Sequence<T> q{q_tilde, grounded_q.mask, token_texts(grounded_q.tokens)};
    Sequence<T> r{r_tilde, grounded_r.mask, token_texts(grounded_r.tokens)};
    auto joint = join(q, r);
    auto encoded = coattention
                       ? coattend(joint, q, r, *coattention, ctx, {config.self_first, config.refresh_joint}, traces)
                       : lstm_encode(joint, *encoder_lstm);

    auto pooled_q = reduce(encoded.z_q, q.mask, reduction.score_query);
    auto pooled_r = reduce(encoded.z_r, r.mask, reduction.response_mlp());
    out.logit = classify(fuse(pooled_q.pooled, pooled_r.pooled, reduction), reduction);
    out.alpha_q = pooled_q.alpha;
    out.alpha_r = pooled_r.alpha;
    return out;
  }

  /// Runs the pipeline once per candidate with shared weights; logits [4],
  /// prediction = argmax with ties to the lowest index.
  ScoreResult<T> score_candidates(const TaskInput<T>& in, const Context& ctx, bool collect_traces = false) const {
    if (in.responses.size() != kCandidates) {
      throw DataError("instance " + in.instance_id + ": expected " + std::to_string(kCandidates) +
                      " candidates, got " + std::to_string(in.responses.size()));
    }
    if (in.objects.rank() != 2 || in.objects.dim(1) != config.d_object) {
      throw DimensionError("instance " + in.instance_id + ": object features " + shape_str(in.objects.shape()) +
                           " vs model width " + std::to_string(config.d_object));
    }
    const auto grounded_q = ground_text(in.query, in.objects);
    const auto projected = object_projection ? (*object_projection)(in.objects) : Tensor<T>();
    ScoreResult<T> result;
    std::vector<Tensor<T>> logits;
    for (const auto& response : in.responses) {
      result.candidates.push_back(
          score_response(grounded_q, response, in.objects, projected, in.object_labels, ctx, collect_traces));
      logits.push_back(result.candidates.back().logit);
    }
    result.logits = concat(logits, 0);
    result.prediction = argmax_lowest(result.logits.data());
    return result;
  }
};

}  // namespace can
