#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "can/attention.hpp"
#include "can/model.hpp"
#include "can/trainer.hpp"
#include "can/vcr_data.hpp"

namespace can {

/// {unit, heads: [[row, ...] per head], query_tokens, key_tokens}
inline nlohmann::json trace_json(const AttentionTrace& trace) {
  auto heads = nlohmann::json::array();
  for (const auto& h : trace.heads) {
    auto rows = nlohmann::json::array();
    for (std::size_t i = 0; i < h.rows; ++i) {
      rows.push_back(std::vector<double>(h.values.begin() + static_cast<long>(i * h.cols),
                                         h.values.begin() + static_cast<long>((i + 1) * h.cols)));
    }
    heads.push_back(std::move(rows));
  }
  return {{"unit", trace.unit}, {"heads", heads}, {"query_tokens", trace.query_tokens}, {"key_tokens", trace.key_tokens}};
}

/// Reduction weights exported in the trace schema: one head, one row.
inline AttentionTrace reduction_trace(std::string unit, const std::vector<double>& alpha,
                                      std::vector<std::string> tokens) {
  return {std::move(unit), {WeightMatrix{1, alpha.size(), alpha}}, {"<pooled>"}, std::move(tokens)};
}

struct Inspection {
  PredictionRecord record;
  /// Per candidate, every attention unit followed by the two reduction traces.
  std::vector<std::vector<AttentionTrace>> candidates;
};

template <typename T>
Inspection inspect(const CanModel<T>& model, const VcrInstance& inst, const Vocab& vocab, TaskKind kind) {
  const auto in = prepare<T>(inst, kind, vocab, model.config.pad_to);
  const auto scored = model.score_candidates(in, model.context(false), true);
  Inspection out{make_record(inst.instance_id, kind, logits_array(scored.logits), in.gold), {}};
  const auto scores = scored.scores();
  for (std::size_t c = 0; c < scored.candidates.size(); ++c) {
    auto traces = scored.candidates[c].traces;
    traces.push_back(reduction_trace("reduction_query", scores[c].alpha_q, token_texts(in.query.tokens)));
    traces.push_back(reduction_trace("reduction_response", scores[c].alpha_r, token_texts(in.responses[c].tokens)));
    out.candidates.push_back(std::move(traces));
  }
  return out;
}

inline std::string trace_file_name(TaskKind kind, std::size_t candidate, const std::string& unit) {
  std::string safe = unit;
  std::replace(safe.begin(), safe.end(), '/', '_');
  return to_string(kind) + "_c" + std::to_string(candidate) + "_" + safe + ".json";
}

/// Writes one JSON file per unit and candidate plus prediction.json; returns the paths written.
inline std::vector<std::filesystem::path> write_inspection(const std::filesystem::path& dir, const Inspection& insp) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::filesystem::path& p, const nlohmann::json& j) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + p.string());
    out << j.dump() << '\n';
    written.push_back(p);
  };
  for (std::size_t c = 0; c < insp.candidates.size(); ++c)
    for (const auto& t : insp.candidates[c]) put(dir / trace_file_name(insp.record.task, c, t.unit), trace_json(t));
  put(dir / (to_string(insp.record.task) + "_prediction.json"), insp.record.to_json());
  return written;
}

}  // namespace can
