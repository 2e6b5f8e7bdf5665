#include <gtest/gtest.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(CAN_CLI_PATH) + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t got;
  while ((got = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), got);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) n += !l.empty();
  return n;
}

nlohmann::json last_json(const std::string& out) {
  std::istringstream in(out);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return nlohmann::json::parse(last);
}

class Cli : public ::testing::Test {
 protected:
  fs::path root = fs::temp_directory_path() / ("can_cli_" + std::to_string(::getpid()));
  void SetUp() override { fs::create_directories(root); }
  void TearDown() override { fs::remove_all(root); }
  std::string at(const std::string& name) const { return (root / name).string(); }
};

}  // namespace

TEST_F(Cli, SynthSplitsAndIsByteStable) {
  auto a = cli("synth --n 32 --seed 7 --out " + at("a"));
  auto b = cli("synth --n 32 --seed 7 --out " + at("b"));
  ASSERT_EQ(a.code, 0);
  ASSERT_EQ(b.code, 0);
  EXPECT_EQ(lines(root / "a/train.jsonl"), 32u);
  EXPECT_EQ(lines(root / "a/val.jsonl"), 8u);
  for (const char* f : {"train.jsonl", "val.jsonl", "features.canckpt"})
    EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
  auto summary = last_json(a.out);
  EXPECT_EQ(summary["train"], 32);
  EXPECT_EQ(summary["val"], 8);
}

TEST_F(Cli, ZeroInstancesIsUsageError) { EXPECT_EQ(cli("synth --n 0 --out " + at("z")).code, 2); }

TEST_F(Cli, NoSubcommandIsUsageError) { EXPECT_EQ(cli("").code, 2); }

TEST_F(Cli, HelpExitsCleanly) { EXPECT_EQ(cli("--help").code, 0); }

TEST_F(Cli, MissingCheckpointExitsTwoWithoutOutput) {
  ASSERT_EQ(cli("synth --n 4 --out " + at("d")).code, 0);
  auto r = cli("eval --ckpt " + at("none.canckpt") + " --data " + at("d"));
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(r.out.empty());
}

TEST_F(Cli, MissingDataDirectoryExitsTwo) {
  auto r = cli("train --data " + at("nowhere") + " --out " + at("o"));
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(r.out.empty());
  EXPECT_FALSE(fs::exists(root / "o"));
}

TEST_F(Cli, BadConfigOverrideExitsTwo) {
  ASSERT_EQ(cli("synth --n 4 --out " + at("d")).code, 0);
  EXPECT_EQ(cli("train --data " + at("d") + " --out " + at("o") + " --set no_such_key=1").code, 2);
  EXPECT_EQ(cli("train --data " + at("d") + " --out " + at("o") + " --set heads=3").code, 2);
}

TEST_F(Cli, FreshCheckpointEvaluatesNearChance) {
  ASSERT_EQ(cli("synth --n 800 --seed 5 --out " + at("d")).code, 0);
  ASSERT_EQ(lines(root / "d/val.jsonl"), 200u);
  auto t = cli("train --data " + at("d") + " --out " + at("m") + " --epochs 1 --lr 0 --set d_model=8 --set layers=1");
  ASSERT_EQ(t.code, 0);
  auto report = last_json(t.out);
  EXPECT_EQ(report["epoch"], 1);
  auto e = cli("eval --ckpt " + at("m/model.canckpt") + " --data " + at("d"));
  ASSERT_EQ(e.code, 0);
  auto m = last_json(e.out);
  EXPECT_EQ(m["metric"], "accuracy");
  EXPECT_EQ(m["n"], 200);
  EXPECT_NEAR(m["q2a"].get<double>(), 0.25, 0.1);
  EXPECT_NEAR(m["qa2r"].get<double>(), 0.25, 0.1);
  EXPECT_LE(m["q2ar"].get<double>(), std::min(m["q2a"].get<double>(), m["qa2r"].get<double>()));
}

TEST_F(Cli, InspectExportsSimplexRowsWithZeroPadding) {
  ASSERT_EQ(cli("synth --n 4 --seed 9 --out " + at("d")).code, 0);
  ASSERT_EQ(cli("train --data " + at("d") + " --out " + at("m") + " --epochs 2 --set pad_to=24").code, 0);
  std::ifstream ann(root / "d/val.jsonl");
  std::string first;
  std::getline(ann, first);
  const auto inst = nlohmann::json::parse(first);
  const std::string id = inst["id"];
  auto r = cli("inspect --ckpt " + at("m/model.canckpt") + " --data " + at("d") + " --instance-id " + id +
               " --out " + at("x"));
  ASSERT_EQ(r.code, 0);

  std::size_t files = 0, ga_object = 0;
  for (const auto& entry : fs::directory_iterator(root / "x")) {
    const auto name = entry.path().filename().string();
    if (name.ends_with("_prediction.json")) continue;
    ++files;
    const auto j = nlohmann::json::parse(slurp(entry.path()));
    const auto keys = j["key_tokens"].get<std::vector<std::string>>();
    for (const auto& head : j["heads"]) {
      for (const auto& row : head) {
        ASSERT_EQ(row.size(), keys.size()) << name;
        double s = 0;
        for (std::size_t c = 0; c < keys.size(); ++c) {
          if (keys[c] == "[pad]") {
            EXPECT_EQ(row[c].get<double>(), 0.0) << name;
          }
          s += row[c].get<double>();
        }
        EXPECT_NEAR(s, 1.0, 1e-6) << name;
      }
    }
    if (j["unit"] == "ga_object") {
      ++ga_object;
      EXPECT_EQ(j["key_tokens"], inst["objects"]) << name;
    }
  }
  EXPECT_GT(files, 0u);
  EXPECT_EQ(ga_object, 8u);
  EXPECT_TRUE(fs::exists(root / "x/Q2A_prediction.json"));
  EXPECT_TRUE(fs::exists(root / "x/QA2R_prediction.json"));
}

TEST_F(Cli, InspectUnknownInstanceFails) {
  ASSERT_EQ(cli("synth --n 4 --out " + at("d")).code, 0);
  ASSERT_EQ(cli("train --data " + at("d") + " --out " + at("m") + " --epochs 1 --lr 0").code, 0);
  auto r = cli("inspect --ckpt " + at("m/model.canckpt") + " --data " + at("d") + " --instance-id nope --out " +
               at("x"));
  EXPECT_EQ(r.code, 1);
}

TEST_F(Cli, GradcheckPasses) {
  auto r = cli("gradcheck");
  ASSERT_EQ(r.code, 0);
  auto j = last_json(r.out);
  EXPECT_LE(j["max_rel_error"].get<double>(), 1e-4);
  EXPECT_GT(j["checks"].size(), 5u);
}
