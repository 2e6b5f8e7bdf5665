#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "can/can.hpp"

namespace fs = std::filesystem;

namespace {

constexpr const char* kTrainFile = "train.jsonl";
constexpr const char* kValFile = "val.jsonl";
constexpr const char* kFeatureFile = "features.canckpt";

void emit(const nlohmann::json& j) { std::cout << j.dump() << '\n' << std::flush; }

// Data directories must hold the feature container and the training split.
const CLI::Validator kDataDir(
    [](std::string& dir) -> std::string {
      for (const char* f : {kTrainFile, kFeatureFile})
        if (!fs::is_regular_file(fs::path(dir) / f)) return "data directory lacks " + std::string(f) + ": " + dir;
      return {};
    },
    "DATA_DIR");

std::vector<can::VcrInstance> load_split(const fs::path& dir, const char* file) {
  if (!fs::exists(dir / file)) return {};
  return can::load_instances(dir / file, dir / kFeatureFile);
}

struct SynthArgs {
  std::uint64_t seed = 7;
  std::size_t n = 32;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  can::SynthOptions opt;
  opt.seed = a.seed;
  opt.n = a.n + a.n / 4;
  const auto all = can::synth_generate(opt);
  const std::vector<can::VcrInstance> train(all.begin(), all.begin() + static_cast<long>(a.n));
  const std::vector<can::VcrInstance> val(all.begin() + static_cast<long>(a.n), all.end());
  const fs::path out(a.out);
  fs::create_directories(out);
  can::write_annotations(out / kTrainFile, train);
  can::write_annotations(out / kValFile, val);
  can::checkpoint::write(out / kFeatureFile, can::feature_entries(all));
  emit({{"train", train.size()}, {"val", val.size()}, {"seed", a.seed}, {"out", out.string()}});
  return 0;
}

struct TrainArgs {
  std::string config, data, out;
  std::optional<std::size_t> epochs, batch_size, patience;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> profile;
  std::vector<std::string> sets;
};

can::TrainConfig train_config(const TrainArgs& a) {
  can::TrainConfig cfg = a.config.empty() ? can::TrainConfig{} : can::load_config(a.config);
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.patience) cfg.patience = *a.patience;
  if (a.lr) cfg.lr = *a.lr;
  if (a.seed) cfg.seed = *a.seed;
  if (a.profile) can::set_config_value(cfg, "profile", *a.profile);
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw can::ContractError("--set expects key=value, got " + kv);
    can::set_config_value(cfg, can::detail::trim(kv.substr(0, eq)), can::detail::trim(kv.substr(eq + 1)));
  }
  return cfg;
}

template <typename T>
int run_train(const can::TrainConfig& cfg, const TrainArgs& a) {
  const fs::path data(a.data);
  const auto train_set = load_split(data, kTrainFile);
  const auto val_set = load_split(data, kValFile);
  const auto vocab = can::build_vocab(train_set, val_set);
  std::cerr << "training on " << train_set.size() << " instances, validating on " << val_set.size() << '\n';
  auto result = can::train<T>(cfg, train_set, val_set, vocab, fs::path(a.out),
                              [](const can::EpochReport& r) { emit(r.to_json()); });
  if (result.early_stopped) std::cerr << "early stop after epoch " << result.reports.back().epoch << '\n';
  std::cerr << "checkpoint: " << (fs::path(a.out) / "model.canckpt").string() << '\n';
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, split = "val";
};

template <typename T>
int run_eval(const EvalArgs& a) {
  const auto bundle = can::load_bundle<T>(a.ckpt);
  const auto set = load_split(a.data, a.split == "train" ? kTrainFile : kValFile);
  if (set.empty()) throw can::DataError("split " + a.split + " is empty in " + a.data);
  const auto prepared = can::prepare_all<T>(set, bundle.vocab, bundle.model.config.pad_to);
  auto j = can::evaluate(bundle.model, set, prepared).metrics.to_json();
  j["split"] = a.split;
  emit(j);
  return 0;
}

struct InspectArgs {
  std::string ckpt, data, instance_id, out, task = "both";
};

template <typename T>
int run_inspect(const InspectArgs& a) {
  const auto bundle = can::load_bundle<T>(a.ckpt);
  std::optional<can::VcrInstance> found;
  for (const char* file : {kTrainFile, kValFile}) {
    for (auto& inst : load_split(a.data, file))
      if (inst.instance_id == a.instance_id) found = std::move(inst);
    if (found) break;
  }
  if (!found) throw can::DataError("unknown instance id: " + a.instance_id);
  std::vector<can::TaskKind> kinds;
  if (a.task == "both") kinds = {can::TaskKind::q2a, can::TaskKind::qa2r};
  else kinds = {can::parse_task_kind(a.task)};
  for (auto kind : kinds) {
    const auto insp = can::inspect(bundle.model, *found, bundle.vocab, kind);
    const auto files = can::write_inspection(a.out, insp);
    std::cerr << "wrote " << files.size() << " files for " << can::to_string(kind) << " to " << a.out << '\n';
    emit(insp.record.to_json());
  }
  return 0;
}

template <typename F>
int with_profile(can::Profile p, F&& f) {
  return p == can::Profile::f32 ? f(float{}) : f(double{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cognitive attention network for visual commonsense reasoning"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth_cmd->add_option("--seed", synth.seed, "Generator seed");
  synth_cmd->add_option("--n", synth.n, "Training instances; a quarter as many go to validation")
      ->check(CLI::PositiveNumber);
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint bundle");
  train_cmd->add_option("--config", tr.config, "key=value config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required()->check(kDataDir);
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--epochs", tr.epochs)->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch-size", tr.batch_size)->check(CLI::PositiveNumber);
  train_cmd->add_option("--patience", tr.patience, "0 disables early stopping");
  train_cmd->add_option("--lr", tr.lr)->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_option("--profile", tr.profile)->check(CLI::IsMember({"f64", "f32"}));
  train_cmd->add_option("--set", tr.sets, "Override any config key, as key=value");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required()->check(kDataDir);
  eval_cmd->add_option("--split", ev.split)->check(CLI::IsMember({"val", "train"}));

  can::GradcheckOptions gc;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the full model");
  grad_cmd->add_option("--seed", gc.seed);

  InspectArgs in;
  auto* inspect_cmd = app.add_subcommand("inspect", "Export attention traces for one instance");
  inspect_cmd->add_option("--ckpt", in.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  inspect_cmd->add_option("--data", in.data, "Dataset directory")->required()->check(kDataDir);
  inspect_cmd->add_option("--instance-id", in.instance_id)->required();
  inspect_cmd->add_option("--out", in.out, "Output directory")->required();
  inspect_cmd->add_option("--task", in.task)->check(CLI::IsMember({"Q2A", "QA2R", "both"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*synth_cmd) return run_synth(synth);
    if (*train_cmd) {
      can::TrainConfig cfg;
      try {
        cfg = train_config(tr);
        cfg.validate();
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
      }
      return with_profile(cfg.profile, [&](auto t) { return run_train<decltype(t)>(cfg, tr); });
    }
    if (*eval_cmd) {
      const auto profile = can::load_bundle_config(ev.ckpt).profile;
      return with_profile(profile, [&](auto t) { return run_eval<decltype(t)>(ev); });
    }
    if (*grad_cmd) {
      const auto report = can::gradcheck_model(gc);
      emit(report.to_json());
      return report.worst() <= 1e-4 ? 0 : 1;
    }
    if (*inspect_cmd) {
      const auto profile = can::load_bundle_config(in.ckpt).profile;
      return with_profile(profile, [&](auto t) { return run_inspect<decltype(t)>(in); });
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
