#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "can/attention.hpp"
#include "can/nn.hpp"

namespace can {

enum class Source : std::uint8_t { query, response };

/// A sequence with its padding mask and per-position token labels.
template <typename T>
struct Sequence {
  Tensor<T> x;  // [m × d]
  Mask mask;    // empty means all real
  std::vector<std::string> tokens;

  std::size_t length() const { return x.dim(0); }
};

inline Mask full_mask(const Mask& mask, std::size_t length) {
  return mask.empty() ? Mask(length, 1) : mask;
}

/// X = q̃ ‖ r̃ along the sequence axis, query positions first.
template <typename T>
struct JointSeq {
  Tensor<T> x;
  Mask mask;
  std::vector<Source> provenance;
  std::vector<std::string> tokens;

  std::size_t query_length() const {
    return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(), Source::query));
  }
};

template <typename T>
JointSeq<T> join(const Sequence<T>& q, const Sequence<T>& r) {
  if (q.x.rank() != 2 || r.x.rank() != 2 || q.x.dim(1) != r.x.dim(1)) {
    throw DimensionError("join: feature widths differ, q " + shape_str(q.x.shape()) + " vs r " +
                         shape_str(r.x.shape()));
  }
  if (r.x.dim(0) == 0) throw ContractError("join: response sequence is empty");
  JointSeq<T> out;
  out.x = concat<T>({q.x, r.x}, 0);
  out.mask = full_mask(q.mask, q.length());
  auto rm = full_mask(r.mask, r.length());
  out.mask.insert(out.mask.end(), rm.begin(), rm.end());
  out.provenance.assign(q.length(), Source::query);
  out.provenance.insert(out.provenance.end(), r.length(), Source::response);
  out.tokens = q.tokens;
  out.tokens.insert(out.tokens.end(), r.tokens.begin(), r.tokens.end());
  return out;
}

template <typename T>
struct CoAttnLayer {
  AttnUnitParams<T> self;
  AttnUnitParams<T> guided;

  void collect(const std::string& prefix, ParamList<T>& out) const {
    self.collect(prefix + ".self", out);
    guided.collect(prefix + ".guided", out);
  }
};

template <typename T>
struct CoAttnParams {
  std::vector<CoAttnLayer<T>> query_module;
  std::vector<CoAttnLayer<T>> response_module;

  static CoAttnParams init(std::size_t layers, std::size_t d_model, std::size_t heads, std::size_t d_ff, Rng& rng) {
    if (layers == 0) throw ContractError("co-attention needs at least one layer");
    CoAttnParams p;
    for (auto* module : {&p.query_module, &p.response_module}) {
      for (std::size_t l = 0; l < layers; ++l) {
        auto self = AttnUnitParams<T>::init(d_model, heads, d_ff, rng);
        module->push_back({std::move(self), AttnUnitParams<T>::init(d_model, heads, d_ff, rng)});
      }
    }
    return p;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t l = 0; l < query_module.size(); ++l)
      query_module[l].collect(prefix + ".query.l" + std::to_string(l), out);
    for (std::size_t l = 0; l < response_module.size(); ++l)
      response_module[l].collect(prefix + ".response.l" + std::to_string(l), out);
  }
};

struct CoAttnOptions {
  bool self_first = true;      // SA then GA inside each layer
  bool refresh_joint = false;  // rebuild X from both modules' outputs after every layer
};

template <typename T>
struct CoAttnResult {
  Tensor<T> z_q;  // [m_q × d]
  Tensor<T> z_r;  // [m_r × d]
};

/// Two stacks of (self attention, guided attention by X): one starting from q̃,
/// one from r̃.
template <typename T>
CoAttnResult<T> coattend(const JointSeq<T>& joint, const Sequence<T>& q, const Sequence<T>& r,
                         const CoAttnParams<T>& p, const Context& ctx, CoAttnOptions options = {},
                         std::vector<AttentionTrace>* traces = nullptr) {
  if (p.query_module.size() != p.response_module.size() || p.query_module.empty()) {
    throw ContractError("coattend: modules need the same non-zero layer count");
  }
  if (joint.x.dim(1) != q.x.dim(1) || joint.x.dim(1) != r.x.dim(1)) {
    throw DimensionError("coattend: X width differs from q̃/r̃ width");
  }

  auto layer = [&](const Tensor<T>& y, const Sequence<T>& own, const JointSeq<T>& x, const CoAttnLayer<T>& params,
                   const std::string& label) {
    Tensor<T> out = y;
    auto self_step = [&] {
      auto u = self_attention_unit(out, params.self, own.mask, ctx);
      if (traces) traces->push_back(u.trace(label + "/self", own.tokens, own.tokens));
      out = u.output;
    };
    auto guided_step = [&] {
      auto u = guided_attention_unit(out, x.x, params.guided, x.mask, ctx);
      if (traces) traces->push_back(u.trace(label + "/guided", own.tokens, x.tokens));
      out = u.output;
    };
    if (options.self_first) {
      self_step();
      guided_step();
    } else {
      guided_step();
      self_step();
    }
    return out;
  };

  Tensor<T> yq = q.x, yr = r.x;
  JointSeq<T> x = joint;
  for (std::size_t l = 0; l < p.query_module.size(); ++l) {
    const auto tag = "/l" + std::to_string(l);
    auto next_q = layer(yq, q, x, p.query_module[l], "coattn_query" + tag);
    auto next_r = layer(yr, r, x, p.response_module[l], "coattn_response" + tag);
    yq = next_q;
    yr = next_r;
    if (options.refresh_joint) x = join(Sequence<T>{yq, q.mask, q.tokens}, Sequence<T>{yr, r.mask, r.tokens});
  }
  return {yq, yr};
}

/// Ablation encoder: a BiLSTM over X in place of both co-attention modules;
/// Z_q and Z_r are the query and response slices of its output.
template <typename T>
CoAttnResult<T> lstm_encode(const JointSeq<T>& joint, const LstmParams<T>& p) {
  const std::size_t mq = joint.query_length(), total = joint.x.dim(0);
  auto h = bilstm(joint.x, p, joint.mask);
  if (mq == 0) throw ContractError("lstm_encode: empty query");
  return {slice(h, 0, 0, mq), slice(h, 0, mq, total)};
}

}  // namespace can
