#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "can/checkpoint.hpp"
#include "can/errors.hpp"
#include "can/grounding.hpp"
#include "can/random.hpp"
#include "can/tensor.hpp"

namespace can {

inline constexpr std::size_t kCandidates = 4;

using TokenSeq = std::vector<TaggedToken>;

/// One image with its question, four answers, four rationales and gold labels.
struct VcrInstance {
  std::string instance_id;
  Tensor<double> objects;  // [k × d_o]
  std::vector<std::string> object_labels;
  TokenSeq question;
  std::array<TokenSeq, kCandidates> answers;
  std::array<TokenSeq, kCandidates> rationales;
  std::size_t gold_answer = 0;
  std::size_t gold_rationale = 0;

  std::size_t object_count() const { return object_labels.size(); }
};

enum class TaskKind { q2a, qa2r };

inline std::string to_string(TaskKind k) { return k == TaskKind::q2a ? "Q2A" : "QA2R"; }

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "Q2A" || s == "q2a") return TaskKind::q2a;
  if (s == "QA2R" || s == "qa2r") return TaskKind::qa2r;
  throw ContractError("unknown task kind: " + s);
}

struct TaskExample {
  std::string instance_id;
  TaskKind kind = TaskKind::q2a;
  TokenSeq query;
  std::array<TokenSeq, kCandidates> responses;
  std::size_t gold = 0;
};

/// Checks every VcrInstance invariant; throws DataError naming the instance.
inline void validate(const VcrInstance& inst) {
  const auto fail = [&](const std::string& why) { throw DataError("instance " + inst.instance_id + ": " + why); };
  if (inst.instance_id.empty()) throw DataError("instance with empty id");
  if (inst.object_labels.empty()) fail("no objects");
  if (!inst.objects.defined() || inst.objects.rank() != 2 || inst.objects.dim(0) != inst.object_labels.size()) {
    fail("object feature rows do not match " + std::to_string(inst.object_labels.size()) + " object labels");
  }
  if (inst.gold_answer >= kCandidates) fail("gold answer index out of range");
  if (inst.gold_rationale >= kCandidates) fail("gold rationale index out of range");
  auto check = [&](const TokenSeq& seq, const std::string& where) {
    if (seq.empty()) fail(where + " is empty");
    for (const auto& t : seq) {
      if (t.tag && *t.tag >= inst.object_count()) {
        fail(where + " tags object " + std::to_string(*t.tag) + " but only " + std::to_string(inst.object_count()) +
             " objects exist");
      }
    }
  };
  check(inst.question, "question");
  for (std::size_t i = 0; i < kCandidates; ++i) {
    check(inst.answers[i], "answer " + std::to_string(i));
    check(inst.rationales[i], "rationale " + std::to_string(i));
  }
}

/// Q2A: question → answers. QA2R: question ⊕ gold answer → rationales.
inline TaskExample make_task(const VcrInstance& inst, TaskKind kind) {
  TaskExample ex{inst.instance_id, kind, inst.question, {}, 0};
  if (kind == TaskKind::q2a) {
    ex.responses = inst.answers;
    ex.gold = inst.gold_answer;
  } else {
    const auto& answer = inst.answers[inst.gold_answer];
    ex.query.insert(ex.query.end(), answer.begin(), answer.end());
    ex.responses = inst.rationales;
    ex.gold = inst.gold_rationale;
  }
  return ex;
}

// ---------------------------------------------------------------------------
// Tokens and vocabulary

inline std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline std::string tag_text(std::size_t object) { return "[" + std::to_string(object) + "]"; }

/// "[k]" → k, anything else → nullopt.
inline std::optional<std::size_t> parse_tag(const std::string& token) {
  if (token.size() < 3 || token.front() != '[' || token.back() != ']') return std::nullopt;
  std::size_t v = 0;
  for (std::size_t i = 1; i + 1 < token.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(token[i]))) return std::nullopt;
    v = v * 10 + static_cast<std::size_t>(token[i] - '0');
  }
  return v;
}

/// Whitespace split plus lowercasing; "[k]" tokens become tags.
inline TokenSeq tokenize(const std::string& text) {
  TokenSeq out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) out.push_back({lowercase(word), parse_tag(word)});
  return out;
}

inline constexpr const char* kPadToken = "[pad]";
inline constexpr const char* kUnkToken = "[unk]";

/// Dense token ids: PAD = 0, UNK = 1, then one tag token per object slot,
/// then words in sorted order.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Vocab() : Vocab(std::vector<std::string>{kPadToken, kUnkToken}) {}

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 2 || tokens_[0] != kPadToken || tokens_[1] != kUnkToken) {
      throw DataError("vocabulary must start with " + std::string(kPadToken) + ", " + kUnkToken);
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) throw DataError("duplicate vocabulary token " + tokens_[i]);
    }
  }

  static Vocab build(const std::vector<VcrInstance>& instances, std::size_t object_slots) {
    std::vector<std::string> tokens{kPadToken, kUnkToken};
    for (std::size_t k = 0; k < object_slots; ++k) tokens.push_back(tag_text(k));
    std::vector<std::string> words;
    auto add = [&](const TokenSeq& seq) {
      for (const auto& t : seq) {
        auto w = lowercase(t.text);
        if (!parse_tag(w) && w != kPadToken) words.push_back(std::move(w));
      }
    };
    for (const auto& inst : instances) {
      add(inst.question);
      for (const auto& a : inst.answers) add(a);
      for (const auto& r : inst.rationales) add(r);
    }
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    tokens.insert(tokens.end(), words.begin(), words.end());
    return Vocab(std::move(tokens));
  }

  int id(const std::string& token) const {
    auto it = ids_.find(lowercase(token));
    return it == ids_.end() ? kUnk : it->second;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) tokens.push_back(line);
    }
    return Vocab(std::move(tokens));
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// ---------------------------------------------------------------------------
// Annotation files (JSON Lines) and feature containers

namespace detail {

inline nlohmann::json tokens_json(const TokenSeq& seq) {
  auto words = nlohmann::json::array();
  for (const auto& t : seq) words.push_back(t.text);
  return words;
}

inline nlohmann::json tags_json(const TokenSeq& seq) {
  auto tags = nlohmann::json::array();
  for (const auto& t : seq) tags.push_back(t.tag ? static_cast<long>(*t.tag) : -1L);
  return tags;
}

inline TokenSeq tokens_from_json(const nlohmann::json& words, const nlohmann::json& tags, const std::string& where) {
  if (!words.is_array() || !tags.is_array() || words.size() != tags.size()) {
    throw DataError(where + ": tokens and tags must be arrays of equal length");
  }
  TokenSeq seq;
  for (std::size_t i = 0; i < words.size(); ++i) {
    const long tag = tags[i].get<long>();
    seq.push_back({words[i].get<std::string>(), tag < 0 ? std::nullopt : std::optional<std::size_t>(tag)});
  }
  return seq;
}

}  // namespace detail

inline std::string feature_key(const std::string& instance_id) { return "objects/" + instance_id; }

/// Annotation half of an instance as one JSON object (features live in the container).
inline nlohmann::json annotation_json(const VcrInstance& inst) {
  nlohmann::json j;
  j["id"] = inst.instance_id;
  j["objects"] = inst.object_labels;
  j["question"] = detail::tokens_json(inst.question);
  j["question_tags"] = detail::tags_json(inst.question);
  for (const char* field : {"answers", "rationales"}) {
    const auto& seqs = std::string(field) == "answers" ? inst.answers : inst.rationales;
    auto words = nlohmann::json::array(), tags = nlohmann::json::array();
    for (const auto& s : seqs) {
      words.push_back(detail::tokens_json(s));
      tags.push_back(detail::tags_json(s));
    }
    j[field] = words;
    j[std::string(field) == "answers" ? "answer_tags" : "rationale_tags"] = tags;
  }
  j["answer_label"] = inst.gold_answer;
  j["rationale_label"] = inst.gold_rationale;
  return j;
}

/// Parses one annotation line; objects are attached separately.
inline VcrInstance instance_from_annotation(const nlohmann::json& j, const std::string& where) {
  try {
    VcrInstance inst;
    inst.instance_id = j.at("id").get<std::string>();
    const std::string at = where + " (" + inst.instance_id + ")";
    inst.object_labels = j.at("objects").get<std::vector<std::string>>();
    inst.question = detail::tokens_from_json(j.at("question"), j.at("question_tags"), at);
    for (const char* field : {"answers", "rationales"}) {
      const bool answers = std::string(field) == "answers";
      const auto& words = j.at(field);
      const auto& tags = j.at(answers ? "answer_tags" : "rationale_tags");
      if (!words.is_array() || words.size() != kCandidates || !tags.is_array() || tags.size() != kCandidates) {
        throw DataError(at + ": expected exactly " + std::to_string(kCandidates) + " " + field);
      }
      auto& dest = answers ? inst.answers : inst.rationales;
      for (std::size_t i = 0; i < kCandidates; ++i) dest[i] = detail::tokens_from_json(words[i], tags[i], at);
    }
    inst.gold_answer = j.at("answer_label").get<std::size_t>();
    inst.gold_rationale = j.at("rationale_label").get<std::size_t>();
    return inst;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
}

inline std::vector<VcrInstance> read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::vector<VcrInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": malformed JSON: " + e.what());
    }
    out.push_back(instance_from_annotation(j, where));
  }
  return out;
}

/// Attaches "objects/<id>" features and validates every instance.
inline void attach_features(std::vector<VcrInstance>& instances, const std::vector<checkpoint::Entry>& entries) {
  std::unordered_map<std::string, const checkpoint::Entry*> by_name;
  for (const auto& e : entries) by_name.emplace(e.name, &e);
  std::size_t width = 0;
  for (auto& inst : instances) {
    auto it = by_name.find(feature_key(inst.instance_id));
    if (it == by_name.end()) throw DataError("instance " + inst.instance_id + ": no object features in container");
    const auto& e = *it->second;
    if (e.shape.size() != 2 || e.shape[0] != inst.object_labels.size()) {
      throw DataError("instance " + inst.instance_id + ": feature shape " + shape_str(e.shape) + " does not match " +
                      std::to_string(inst.object_labels.size()) + " objects");
    }
    if (width != 0 && e.shape[1] != width) throw DataError("instance " + inst.instance_id + ": inconsistent feature width");
    width = e.shape[1];
    inst.objects = checkpoint::to_tensor<double>(e);
    validate(inst);
  }
}

inline std::vector<VcrInstance> load_instances(const std::filesystem::path& annotations,
                                               const std::filesystem::path& features) {
  auto instances = read_annotations(annotations);
  attach_features(instances, checkpoint::read(features));
  return instances;
}

inline void write_annotations(const std::filesystem::path& path, const std::vector<VcrInstance>& instances) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const auto& inst : instances) out << annotation_json(inst).dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<checkpoint::Entry> feature_entries(const std::vector<VcrInstance>& instances) {
  std::vector<checkpoint::Entry> entries;
  for (const auto& inst : instances) entries.push_back(checkpoint::to_entry(feature_key(inst.instance_id), inst.objects));
  return entries;
}

// ---------------------------------------------------------------------------
// Predictions and metrics

struct PredictionRecord {
  std::string instance_id;
  TaskKind task = TaskKind::q2a;
  std::array<double, kCandidates> logits{};
  std::size_t pred = 0;
  std::size_t gold = 0;

  bool correct() const { return pred == gold; }

  nlohmann::json to_json() const {
    return {{"instance_id", instance_id}, {"task", to_string(task)}, {"logits", logits}, {"pred", pred}, {"gold", gold}};
  }
};

/// Candidate-choice accuracy for both tasks and their per-instance conjunction.
struct Metrics {
  double q2a = 0;
  double qa2r = 0;
  double q2ar = 0;
  std::size_t n = 0;

  nlohmann::json to_json() const {
    return {{"metric", "accuracy"}, {"q2a", q2a}, {"qa2r", qa2r}, {"q2ar", q2ar}, {"n", n}};
  }
};

/// An instance counts for Q2AR only if both of its predictions are correct.
inline Metrics q2ar_metric(const std::vector<PredictionRecord>& q2a, const std::vector<PredictionRecord>& qa2r) {
  if (q2a.size() != qa2r.size()) throw DataError("q2ar_metric: prediction sets differ in size");
  std::map<std::string, bool> reason_ok;
  for (const auto& r : qa2r) {
    if (!reason_ok.emplace(r.instance_id, r.correct()).second) throw DataError("q2ar_metric: duplicate id " + r.instance_id);
  }
  Metrics m;
  m.n = q2a.size();
  if (m.n == 0) return m;
  std::size_t a = 0, r = 0, both = 0;
  for (const auto& p : q2a) {
    auto it = reason_ok.find(p.instance_id);
    if (it == reason_ok.end()) throw DataError("q2ar_metric: no QA2R prediction for instance " + p.instance_id);
    a += p.correct();
    r += it->second;
    both += p.correct() && it->second;
  }
  const double n = static_cast<double>(m.n);
  m.q2a = static_cast<double>(a) / n;
  m.qa2r = static_cast<double>(r) / n;
  m.q2ar = static_cast<double>(both) / n;
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic data

/// How the gold response is planted.
///
/// anchor_match: the question tags an anchor object; exactly one other object
/// (the focus) carries a noisy copy of the anchor's feature vector, and a third
/// (the witness) carries the focus feature rotated by half its width. The gold
/// answer tags the focus and the gold rationale tags the witness. Answer and
/// rationale distractors come from disjoint object pools far from both anchor
/// and witness. Every tagged object's feature has the same marginal
/// distribution, so the gold can only be found by relating tagged object
/// features to each other.
enum class SynthRule { anchor_match };

struct SynthOptions {
  std::uint64_t seed = 7;
  std::size_t n = 32;
  std::size_t k_objects = 9;
  std::size_t vocab_size = 24;
  std::size_t d_object = 8;
  SynthRule rule = SynthRule::anchor_match;
  /// Noise on the focus copy, relative to unit-variance features.
  double focus_noise = 0.3;
  /// Distractors are resampled until their cosine with anchor and witness is below this.
  double max_distractor_cosine = 0.5;
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

/// Deterministic in `seed`; instance i uses its own derived stream.
inline std::vector<VcrInstance> synth_generate(const SynthOptions& opt) {
  if (opt.n == 0) throw ContractError("synth_generate: n must be at least 1");
  constexpr std::size_t kMinObjects = 3 + 2 * (kCandidates - 1);
  if (opt.k_objects < kMinObjects) {
    throw ContractError("synth_generate: need at least " + std::to_string(kMinObjects) + " objects");
  }
  if (opt.vocab_size == 0 || opt.d_object == 0) throw ContractError("synth_generate: empty vocabulary or features");
  static const std::vector<std::string> kLabels{"person", "chair", "tie", "clock", "vase",
                                                "cup",    "dog",   "car", "book",  "bottle"};
  const std::size_t k = opt.k_objects, d = opt.d_object;

  std::vector<VcrInstance> out;
  out.reserve(opt.n);
  for (std::size_t idx = 0; idx < opt.n; ++idx) {
    Rng rng(Rng::derive(opt.seed, idx));
    VcrInstance inst;
    inst.instance_id = "synth-" + std::to_string(opt.seed) + "-" + std::to_string(idx);
    for (std::size_t o = 0; o < k; ++o) inst.object_labels.push_back(kLabels[rng.below(kLabels.size())]);

    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    const std::size_t anchor = perm[0], focus = perm[1], witness = perm[2];
    const std::vector<std::size_t> others(perm.begin() + 3, perm.end());

    std::vector<double> feats(k * d);
    auto row = [&](std::size_t o) { return std::span<double>(feats.data() + o * d, d); };
    for (auto& v : row(anchor)) v = rng.normal();
    const double norm = 1.0 / std::sqrt(1.0 + opt.focus_noise * opt.focus_noise);
    for (std::size_t j = 0; j < d; ++j) row(focus)[j] = (row(anchor)[j] + opt.focus_noise * rng.normal()) * norm;
    for (std::size_t j = 0; j < d; ++j) row(witness)[j] = row(focus)[(j + d / 2) % d];
    for (std::size_t o : others) {
      do {
        for (auto& v : row(o)) v = rng.normal();
      } while (cosine(row(o), row(anchor)) >= opt.max_distractor_cosine ||
               cosine(row(o), row(witness)) >= opt.max_distractor_cosine);
    }
    inst.objects = Tensor<double>({k, d}, std::move(feats));

    auto words = [&](std::size_t lo, std::size_t hi) {
      TokenSeq seq;
      const std::size_t len = lo + rng.below(hi - lo + 1);
      for (std::size_t i = 0; i < len; ++i) seq.push_back({"w" + std::to_string(rng.below(opt.vocab_size)), std::nullopt});
      return seq;
    };
    auto with_tag = [&](TokenSeq seq, std::size_t object) {
      const std::size_t at = rng.below(seq.size() + 1);
      seq.insert(seq.begin() + static_cast<long>(at), TaggedToken{tag_text(object), object});
      return seq;
    };

    inst.question = with_tag(words(3, 5), anchor);
    const std::size_t half = others.size() / 2;
    const std::vector<std::size_t> answer_pool(others.begin(), others.begin() + static_cast<long>(half));
    const std::vector<std::size_t> rationale_pool(others.begin() + static_cast<long>(half), others.end());
    auto fill = [&](std::array<TokenSeq, kCandidates>& slots, std::size_t& gold, std::size_t target,
                    std::vector<std::size_t> pool) {
      gold = rng.below(kCandidates);
      std::shuffle(pool.begin(), pool.end(), rng.engine());
      std::size_t next = 0;
      for (std::size_t c = 0; c < kCandidates; ++c)
        slots[c] = with_tag(words(2, 4), c == gold ? target : pool[next++]);
    };
    fill(inst.answers, inst.gold_answer, focus, answer_pool);
    fill(inst.rationales, inst.gold_rationale, witness, rationale_pool);
    validate(inst);
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace can
