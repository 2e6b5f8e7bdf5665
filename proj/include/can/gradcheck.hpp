#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "can/autograd.hpp"
#include "can/model.hpp"
#include "can/trainer.hpp"

namespace can {

struct GradcheckOptions {
  std::uint64_t seed = 7;
  std::size_t d_model = 8;
  std::size_t heads = 2;
  std::size_t layers = 1;
  std::size_t query_length = 3;
  std::size_t response_length = 3;
  std::size_t objects = 2;
  std::size_t d_object = 4;
  double h = 1e-5;
};

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0;
  std::size_t coordinates = 0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;

  double worst() const {
    double w = 0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }

  nlohmann::json to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& e : entries)
      arr.push_back({{"check", e.name}, {"max_rel_error", e.max_rel_error}, {"coordinates", e.coordinates}});
    return {{"checks", arr}, {"max_rel_error", worst()}};
  }
};

/// Random instance with the requested sequence lengths; every text sequence
/// tags one object so the grounding path carries gradient.
inline VcrInstance gradcheck_instance(const GradcheckOptions& opt) {
  Rng rng(opt.seed);
  VcrInstance inst;
  inst.instance_id = "gradcheck-" + std::to_string(opt.seed);
  std::vector<double> feats(opt.objects * opt.d_object);
  for (auto& v : feats) v = rng.normal();
  inst.objects = Tensor<double>({opt.objects, opt.d_object}, std::move(feats));
  for (std::size_t o = 0; o < opt.objects; ++o) inst.object_labels.push_back("obj" + std::to_string(o));
  auto text = [&](std::size_t len) {
    TokenSeq seq;
    for (std::size_t i = 0; i < len; ++i) seq.push_back({"w" + std::to_string(rng.below(6)), std::nullopt});
    const std::size_t at = rng.below(len), object = rng.below(opt.objects);
    seq[at] = {tag_text(object), object};
    return seq;
  };
  inst.question = text(opt.query_length);
  for (std::size_t c = 0; c < kCandidates; ++c) {
    inst.answers[c] = text(opt.response_length);
    inst.rationales[c] = text(opt.response_length);
  }
  inst.gold_answer = rng.below(kCandidates);
  inst.gold_rationale = rng.below(kCandidates);
  validate(inst);
  return inst;
}

/// Central-difference check of every parameter group of the full network, and
/// of the object features, against the Q2A cross-entropy. Dropout is off.
inline GradcheckReport gradcheck_model(const GradcheckOptions& opt) {
  const auto inst = gradcheck_instance(opt);
  const auto vocab = build_vocab({inst}, {});
  ModelConfig cfg;
  cfg.d_model = opt.d_model;
  cfg.heads = opt.heads;
  cfg.layers = opt.layers;
  cfg.d_object = opt.d_object;
  cfg.vocab_size = vocab.size();
  cfg.dropout = 0.0;
  auto model = CanModel<double>::init(cfg, opt.seed);
  const auto ctx = model.context(false);
  auto in = prepare<double>(inst, TaskKind::q2a, vocab);

  GradcheckReport report;
  auto objective = [&] { return loss(model.score_candidates(in, ctx).logits, in.gold); };

  // One group per component; fusion and co-attention split one level further.
  std::vector<std::pair<std::string, std::vector<Tensor<double>>>> groups;
  for (const auto& [name, t] : model.parameters()) {
    auto cut = name.find('.');
    const auto top = name.substr(0, cut);
    if ((top == "coattention" || top == "fusion") && cut != std::string::npos) cut = name.find('.', cut + 1);
    const auto group = name.substr(0, cut);
    if (groups.empty() || groups.back().first != group) groups.emplace_back(group, std::vector<Tensor<double>>{});
    groups.back().second.push_back(t);
  }
  for (auto& [group, leaves] : groups) {
    std::size_t n = 0;
    for (const auto& t : leaves) n += t.numel();
    model.zero_grad();
    report.entries.push_back({group, grad_check_parameters<double>(objective, leaves, opt.h), n});
  }

  const auto base_objects = in.objects;
  const double err = grad_check<double>(
      [&](const Tensor<double>& objects) {
        auto moved = in;
        moved.objects = objects;
        return loss(model.score_candidates(moved, ctx).logits, moved.gold);
      },
      base_objects, opt.h);
  report.entries.push_back({"object_features", err, base_objects.numel()});
  return report;
}

}  // namespace can
