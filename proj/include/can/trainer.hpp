#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "can/autograd.hpp"
#include "can/checkpoint.hpp"
#include "can/model.hpp"
#include "can/vcr_data.hpp"

namespace can {

enum class Profile { f64, f32 };

struct TrainConfig {
  ModelConfig model;
  double lr = 1e-3;
  std::size_t epochs = 200;
  std::size_t batch_size = 8;
  std::uint64_t seed = 7;
  Profile profile = Profile::f64;
  std::size_t patience = 20;  // 0 disables early stopping

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ContractError("train config: lr must be finite and non-negative");
    if (epochs == 0 || batch_size == 0) throw ContractError("train config: epochs and batch_size must be positive");
    if (model.d_model == 0 || model.heads == 0 || model.d_model % model.heads != 0) {
      throw ContractError("train config: heads must divide d_model");
    }
  }
};

// ---------------------------------------------------------------------------
// Flat key=value config files

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ContractError("config " + key + ": expected true|false, got '" + v + "'");
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used != v.size() || n < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ContractError("config " + key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ContractError("config " + key + ": expected a number, got '" + v + "'");
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

/// Sets one TrainConfig field by its config-file key.
inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  using namespace detail;
  auto& m = cfg.model;
  if (key == "lr") cfg.lr = parse_real(key, value);
  else if (key == "epochs") cfg.epochs = parse_size(key, value);
  else if (key == "batch_size") cfg.batch_size = parse_size(key, value);
  else if (key == "seed") cfg.seed = parse_size(key, value);
  else if (key == "patience") cfg.patience = parse_size(key, value);
  else if (key == "profile") {
    if (value != "f64" && value != "f32") throw ContractError("config profile: expected f64|f32");
    cfg.profile = value == "f32" ? Profile::f32 : Profile::f64;
  } else if (key == "d_model") m.d_model = parse_size(key, value);
  else if (key == "heads") m.heads = parse_size(key, value);
  else if (key == "layers") m.layers = parse_size(key, value);
  else if (key == "d_ff") m.d_ff = parse_size(key, value);
  else if (key == "d_token") m.d_token = parse_size(key, value);
  else if (key == "d_object") m.d_object = parse_size(key, value);
  else if (key == "vocab_size") m.vocab_size = parse_size(key, value);
  else if (key == "dropout") m.dropout = parse_real(key, value);
  else if (key == "residual") m.residual = parse_bool(key, value);
  else if (key == "ga") m.ga = parse_bool(key, value);
  else if (key == "encoder") {
    if (value != "coattention" && value != "lstm") throw ContractError("config encoder: expected coattention|lstm");
    m.encoder = value == "lstm" ? EncoderKind::lstm : EncoderKind::coattention;
  } else if (key == "ga_order") {
    if (value != "query_first" && value != "object_first") {
      throw ContractError("config ga_order: expected query_first|object_first");
    }
    m.ga_order = value == "object_first" ? GaOrder::object_first : GaOrder::query_first;
  } else if (key == "self_first") m.self_first = parse_bool(key, value);
  else if (key == "refresh_joint") m.refresh_joint = parse_bool(key, value);
  else if (key == "route_query") m.route_query = parse_bool(key, value);
  else if (key == "share_reduction_mlp") m.share_reduction_mlp = parse_bool(key, value);
  else if (key == "pad_to") m.pad_to = parse_size(key, value);
  else throw ContractError("unknown config key: " + key);
}

/// Applies "key=value" lines ('#' starts a comment) on top of `base`.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ContractError("config line " + std::to_string(line_no) + ": expected key=value");
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), base);
}

inline std::string format_config(const TrainConfig& cfg) {
  const auto& m = cfg.model;
  std::ostringstream out;
  out.precision(17);
  auto b = [](bool v) { return v ? "true" : "false"; };
  out << "lr=" << cfg.lr << "\nepochs=" << cfg.epochs << "\nbatch_size=" << cfg.batch_size << "\nseed=" << cfg.seed
      << "\npatience=" << cfg.patience << "\nprofile=" << (cfg.profile == Profile::f32 ? "f32" : "f64")
      << "\nd_model=" << m.d_model << "\nheads=" << m.heads << "\nlayers=" << m.layers << "\nd_ff=" << m.d_ff
      << "\nd_token=" << m.d_token << "\nd_object=" << m.d_object << "\nvocab_size=" << m.vocab_size
      << "\ndropout=" << m.dropout << "\nresidual=" << b(m.residual) << "\nga=" << b(m.ga)
      << "\nencoder=" << (m.encoder == EncoderKind::lstm ? "lstm" : "coattention")
      << "\nga_order=" << (m.ga_order == GaOrder::object_first ? "object_first" : "query_first")
      << "\nself_first=" << b(m.self_first) << "\nrefresh_joint=" << b(m.refresh_joint)
      << "\nroute_query=" << b(m.route_query) << "\nshare_reduction_mlp=" << b(m.share_reduction_mlp)
      << "\npad_to=" << m.pad_to << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Optimization

/// Adam with bias correction over a fixed parameter list.
template <typename T>
class Adam {
 public:
  explicit Adam(ParamList<T> params, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, t] : params_) {
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(t.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& tensor = params_[k].second;
      auto values = tensor.mutable_data();
      auto grad = tensor.grad();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = grad[i];
        m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
        v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
        const double update = lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
        values[i] = static_cast<T>(values[i] - update);
      }
    }
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  std::size_t steps() const { return t_; }

 private:
  ParamList<T> params_;
  double lr_, beta1_, beta2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Softmax cross-entropy of the candidate logits against the gold index.
template <typename T>
Tensor<T> loss(const Tensor<T>& logits, std::size_t gold) {
  if (gold >= logits.numel()) {
    throw ContractError("loss: gold index " + std::to_string(gold) + " out of range for " +
                        std::to_string(logits.numel()) + " candidates");
  }
  return cross_entropy(logits, gold);
}

/// Both tasks of one instance, encoded once.
template <typename T>
struct PreparedInstance {
  TaskInput<T> q2a;
  TaskInput<T> qa2r;
};

template <typename T>
std::vector<PreparedInstance<T>> prepare_all(const std::vector<VcrInstance>& instances, const Vocab& vocab,
                                             std::size_t pad_to = 0) {
  std::vector<PreparedInstance<T>> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) {
    out.push_back({prepare<T>(inst, TaskKind::q2a, vocab, pad_to), prepare<T>(inst, TaskKind::qa2r, vocab, pad_to)});
  }
  return out;
}

/// Mean of the two task losses for one instance.
template <typename T>
Tensor<T> instance_loss(const CanModel<T>& model, const PreparedInstance<T>& item, const Context& ctx) {
  auto a = loss(model.score_candidates(item.q2a, ctx).logits, item.q2a.gold);
  auto r = loss(model.score_candidates(item.qa2r, ctx).logits, item.qa2r.gold);
  return scale(add(a, r), T(0.5));
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  Metrics metrics;
  std::vector<PredictionRecord> q2a;
  std::vector<PredictionRecord> qa2r;
};

/// Anything that maps a task of an instance to four candidate logits.
using Scorer = std::function<std::array<double, kCandidates>(std::size_t index, TaskKind kind)>;

inline PredictionRecord make_record(const std::string& id, TaskKind kind, const std::array<double, kCandidates>& logits,
                                    std::size_t gold) {
  return {id, kind, logits, argmax_lowest(std::span<const double>(logits)), gold};
}

/// Runs both tasks for every instance and aggregates Q2A, QA2R and Q2AR.
inline EvalResult evaluate_with(const std::vector<VcrInstance>& instances, const Scorer& scorer) {
  EvalResult out;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    out.q2a.push_back(make_record(inst.instance_id, TaskKind::q2a, scorer(i, TaskKind::q2a), inst.gold_answer));
    out.qa2r.push_back(make_record(inst.instance_id, TaskKind::qa2r, scorer(i, TaskKind::qa2r), inst.gold_rationale));
  }
  out.metrics = q2ar_metric(out.q2a, out.qa2r);
  return out;
}

template <typename T>
std::array<double, kCandidates> logits_array(const Tensor<T>& logits) {
  std::array<double, kCandidates> out{};
  for (std::size_t c = 0; c < kCandidates; ++c) out[c] = static_cast<double>(logits.at(c));
  return out;
}

/// Evaluation-mode scoring (dropout off) of every prepared instance.
template <typename T>
EvalResult evaluate(const CanModel<T>& model, const std::vector<VcrInstance>& instances,
                    const std::vector<PreparedInstance<T>>& prepared) {
  const auto ctx = model.context(false);
  return evaluate_with(instances, [&](std::size_t i, TaskKind kind) {
    const auto& in = kind == TaskKind::q2a ? prepared[i].q2a : prepared[i].qa2r;
    return logits_array(model.score_candidates(in, ctx).logits);
  });
}

// ---------------------------------------------------------------------------
// Checkpoint bundles: <stem>.canckpt + <stem>.config + <stem>.vocab

inline std::filesystem::path sibling(const std::filesystem::path& ckpt, const char* ext) {
  auto p = ckpt;
  p.replace_extension(ext);
  return p;
}

template <typename T>
void save_bundle(const std::filesystem::path& ckpt, const TrainConfig& cfg, const Vocab& vocab,
                 const CanModel<T>& model) {
  checkpoint::write(ckpt, model.state());
  std::ofstream out(sibling(ckpt, ".config"), std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + sibling(ckpt, ".config").string());
  out << format_config(cfg);
  vocab.save(sibling(ckpt, ".vocab"));
}

template <typename T>
struct Bundle {
  TrainConfig config;
  Vocab vocab;
  CanModel<T> model;
};

inline TrainConfig load_bundle_config(const std::filesystem::path& ckpt) {
  return load_config(sibling(ckpt, ".config"));
}

template <typename T>
Bundle<T> load_bundle(const std::filesystem::path& ckpt) {
  if (!std::filesystem::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt.string());
  auto cfg = load_bundle_config(ckpt);
  auto vocab = Vocab::load(sibling(ckpt, ".vocab"));
  if (vocab.size() != cfg.model.vocab_size) {
    throw DataError("vocabulary file has " + std::to_string(vocab.size()) + " tokens, checkpoint expects " +
                    std::to_string(cfg.model.vocab_size));
  }
  auto model = CanModel<T>::init(cfg.model, cfg.seed);
  model.load_state(checkpoint::read(ckpt));
  return {cfg, std::move(vocab), std::move(model)};
}

// ---------------------------------------------------------------------------
// Training

struct EpochReport {
  std::size_t epoch = 0;
  double loss = 0;
  double train_q2a = 0;
  double train_qa2r = 0;
  double val_q2a = 0;
  double val_qa2r = 0;
  double wall_seconds = 0;

  /// Equality of everything except wall time.
  bool same_outcome(const EpochReport& o) const {
    return epoch == o.epoch && loss == o.loss && train_q2a == o.train_q2a && train_qa2r == o.train_qa2r &&
           val_q2a == o.val_q2a && val_qa2r == o.val_qa2r;
  }

  nlohmann::json to_json() const {
    return {{"epoch", epoch},         {"loss", loss},         {"train_q2a", train_q2a},
            {"train_qa2r", train_qa2r}, {"val_q2a", val_q2a}, {"val_qa2r", val_qa2r},
            {"wall_seconds", wall_seconds}};
  }
};

template <typename T>
struct TrainResult {
  CanModel<T> model;
  std::vector<EpochReport> reports;
  bool early_stopped = false;
};

/// Vocabulary with tag slots for the largest object count seen.
inline Vocab build_vocab(const std::vector<VcrInstance>& train_set, const std::vector<VcrInstance>& val_set) {
  std::size_t slots = 0;
  for (const auto* set : {&train_set, &val_set})
    for (const auto& inst : *set) slots = std::max(slots, inst.object_count());
  return Vocab::build(train_set, slots);
}

/// Mini-batch Adam on the mean Q2A/QA2R cross-entropy. When `out_dir` is set
/// the bundle is rewritten and a line appended to train_log.jsonl each epoch.
template <typename T>
TrainResult<T> train(TrainConfig cfg, const std::vector<VcrInstance>& train_set,
                     const std::vector<VcrInstance>& val_set, const Vocab& vocab,
                     const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                     const std::function<void(const EpochReport&)>& on_epoch = {}) {
  if (train_set.empty()) throw ContractError("train: empty training split");
  cfg.model.vocab_size = vocab.size();
  cfg.model.d_object = train_set.front().objects.dim(1);
  cfg.validate();

  Rng rng(cfg.seed);
  TrainResult<T> result{CanModel<T>::init(cfg.model, cfg.seed), {}, false};
  auto& model = result.model;
  const auto train_items = prepare_all<T>(train_set, vocab, cfg.model.pad_to);
  const auto val_items = prepare_all<T>(val_set, vocab, cfg.model.pad_to);
  Adam<T> optimizer(model.parameters(), cfg.lr);

  std::ofstream log;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    log.open(*out_dir / "train_log.jsonl", std::ios::trunc);
    if (!log) throw IoError("cannot open for writing: " + (*out_dir / "train_log.jsonl").string());
  }

  std::vector<std::size_t> order(train_items.size());
  std::iota(order.begin(), order.end(), 0);
  double best_val = -1;
  std::size_t best_epoch = 0;
  const auto ctx = model.context(true, &rng);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      const T inv = T(1) / static_cast<T>(end - b);
      optimizer.zero_grad();
      for (std::size_t i = b; i < end; ++i) {
        auto l = instance_loss(model, train_items[order[i]], ctx);
        total += static_cast<double>(l.item());
        backward(scale(l, inv));
      }
      optimizer.step();
    }

    EpochReport report;
    report.epoch = epoch;
    report.loss = total / static_cast<double>(order.size());
    const auto train_eval = evaluate(model, train_set, train_items).metrics;
    report.train_q2a = train_eval.q2a;
    report.train_qa2r = train_eval.qa2r;
    if (!val_set.empty()) {
      const auto val_eval = evaluate(model, val_set, val_items).metrics;
      report.val_q2a = val_eval.q2a;
      report.val_qa2r = val_eval.qa2r;
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.reports.push_back(report);
    if (out_dir) {
      save_bundle(*out_dir / "model.canckpt", cfg, vocab, model);
      log << report.to_json().dump() << '\n' << std::flush;
    }
    if (on_epoch) on_epoch(report);
    if (!std::isfinite(report.loss)) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + report.to_json().dump());
    }

    if (!val_set.empty() && cfg.patience > 0) {
      if (report.val_q2a > best_val) {
        best_val = report.val_q2a;
        best_epoch = epoch;
      } else if (epoch - best_epoch >= cfg.patience) {
        result.early_stopped = true;
        break;
      }
    }
  }
  return result;
}

}  // namespace can
