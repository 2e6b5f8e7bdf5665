#include <gtest/gtest.h>

#include "can/autograd.hpp"
#include "can/model.hpp"
#include "can/reduction.hpp"
#include "can/trainer.hpp"
#include "oracles.hpp"

using T = can::Tensor<double>;

namespace {

std::vector<double> vec(const T& t) { return {t.data().begin(), t.data().end()}; }

void randomize_biases(can::ReductionParams<double>& p, can::Rng& rng) {
  can::ParamList<double> params;
  p.collect("r", params);
  for (auto [n, t] : params) {
    if (n.ends_with(".bias") || n.ends_with(".beta"))
      for (auto& v : t.mutable_data()) v = rng.uniform(-0.5, 0.5);
    if (n.ends_with(".gamma"))
      for (auto& v : t.mutable_data()) v = rng.uniform(0.5, 1.5);
  }
}

}  // namespace

TEST(Reduce, ZeroMlpGivesMeanOfRealRows) {
  can::Rng rng(71);
  auto p = can::ReductionParams<double>::init(4, 4, false, rng);
  for (auto& v : p.score_query.layers.back().weight.mutable_data()) v = 0.0;
  auto z = oracle::random_mat(3, 4, rng);
  auto r = can::reduce(oracle::tensor(z), can::Mask{1, 0, 1}, p.score_query);
  EXPECT_DOUBLE_EQ(r.alpha.at(0), 0.5);
  EXPECT_EQ(r.alpha.at(1), 0.0);
  EXPECT_DOUBLE_EQ(r.alpha.at(2), 0.5);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(r.pooled.at(c), 0.5 * (z(0, c) + z(2, c)), 1e-15);
}

TEST(Reduce, SinglePositionIsTheRow) {
  can::Rng rng(72);
  auto p = can::ReductionParams<double>::init(4, 4, false, rng);
  auto z = oracle::tensor(oracle::random_mat(1, 4, rng));
  auto r = can::reduce(z, {}, p.score_query);
  EXPECT_EQ(r.alpha.item(), 1.0);
  EXPECT_EQ(vec(r.pooled), vec(z));
}

TEST(Reduce, MatchesScalarLoopOracle) {
  can::Rng rng(73);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t d = 2 + 2 * rng.below(4), m = 1 + rng.below(7);
    auto p = can::ReductionParams<double>::init(d, d, false, rng);
    randomize_biases(p, rng);
    auto z = oracle::random_mat(m, d, rng, 2.0);
    can::Mask mask;
    if (trial % 2) {
      mask.assign(m, 1);
      for (auto& b : mask) b = rng.bernoulli(0.7);
      mask[rng.below(m)] = 1;
    }
    auto got = can::reduce(oracle::tensor(z), mask, p.score_query);
    auto want = oracle::reduce(z, mask, oracle::layers_of(p.score_query));
    EXPECT_LE(oracle::max_abs_diff(got.pooled.data(), want.pooled), 1e-10);
    EXPECT_LE(oracle::max_abs_diff(got.alpha.data(), want.alpha), 1e-10);
    double s = 0;
    for (std::size_t i = 0; i < m; ++i) {
      if (!mask.empty() && !mask[i]) {
        EXPECT_EQ(got.alpha.at(i), 0.0);
      }
      s += got.alpha.at(i);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Reduce, AllPaddingRejected) {
  can::Rng rng(74);
  auto p = can::ReductionParams<double>::init(4, 4, false, rng);
  EXPECT_THROW(can::reduce(oracle::tensor(oracle::random_mat(2, 4, rng)), can::Mask{0, 0}, p.score_query),
               can::ContractError);
}

TEST(Fuse, CancellationGivesBeta) {
  can::Rng rng(75);
  auto p = can::ReductionParams<double>::init(4, 4, false, rng);
  randomize_biases(p, rng);
  auto neg = p.w_x1.mutable_data();
  auto w2 = p.w_x2.mutable_data();
  for (std::size_t i = 0; i < neg.size(); ++i) w2[i] = -neg[i];
  auto z = T({4}, oracle::random_mat(1, 4, rng).v);
  EXPECT_EQ(vec(can::fuse(z, z, p)), vec(p.fusion_norm.beta));
  EXPECT_EQ(vec(can::fuse(T::zeros({4}), T::zeros({4}), p)), vec(p.fusion_norm.beta));
}

TEST(Fuse, MatchesFormulaOracle) {
  can::Rng rng(76);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t d = 2 + rng.below(7), dc = 2 + rng.below(7);
    auto p = can::ReductionParams<double>::init(d, dc, true, rng);
    randomize_biases(p, rng);
    auto zq = oracle::random_mat(1, d, rng, 2.0).v, zr = oracle::random_mat(1, d, rng, 2.0).v;
    auto got = can::fuse(T({d}, zq), T({d}, zr), p);
    auto want = oracle::fuse(zq, zr, oracle::of(p.w_x1), oracle::of(p.w_x2), vec(p.fusion_norm.gamma),
                             vec(p.fusion_norm.beta));
    EXPECT_LE(oracle::max_abs_diff(got.data(), want), 1e-10);
  }
}

TEST(Fuse, WidthMismatch) {
  can::Rng rng(77);
  auto p = can::ReductionParams<double>::init(4, 4, false, rng);
  EXPECT_THROW(can::fuse(T::zeros({3}), T::zeros({4}), p), can::DimensionError);
}

TEST(ArgMax, TiesGoToLowestIndex) {
  const std::vector<double> tie{0.5, 2.0, 2.0, -1.0};
  EXPECT_EQ(can::argmax_lowest(std::span<const double>(tie)), 1u);
  const std::vector<double> flat(4, 0.0);
  EXPECT_EQ(can::argmax_lowest(std::span<const double>(flat)), 0u);
}

TEST(Loss, UniformLogitsGiveLnFour) {
  EXPECT_NEAR(can::loss(T::zeros({4}), 2).item(), 1.386294, 1e-6);
  EXPECT_NEAR(can::loss(T::full({4}, 3.7), 0).item(), std::log(4.0), 1e-12);
}

class Candidates : public ::testing::Test {
 protected:
  void SetUp() override {
    can::SynthOptions opt;
    opt.n = 4;
    instances = can::synth_generate(opt);
    vocab = can::build_vocab(instances, {});
    can::ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.d_model = 8;
    cfg.layers = 1;
    model = can::CanModel<double>::init(cfg, 3);
  }

  can::TaskInput<double> input(std::size_t i, can::TaskKind kind = can::TaskKind::q2a) {
    return can::prepare<double>(instances[i], kind, vocab);
  }

  std::vector<can::VcrInstance> instances;
  can::Vocab vocab;
  can::CanModel<double> model;
};

TEST_F(Candidates, ZeroParametersTieAndPickFirst) {
  for (auto [n, t] : model.parameters())
    for (auto& v : t.mutable_data()) v = 0.0;
  auto r = model.score_candidates(input(0), model.context(false));
  for (std::size_t c = 1; c < 4; ++c) EXPECT_EQ(r.logits.at(c), r.logits.at(0));
  EXPECT_EQ(r.prediction, 0u);
}

TEST_F(Candidates, DuplicatedResponseGivesBitwiseEqualLogits) {
  auto in = input(1);
  in.responses[3] = in.responses[in.gold];
  auto r = model.score_candidates(in, model.context(false));
  EXPECT_EQ(r.logits.at(3), r.logits.at(in.gold));
}

TEST_F(Candidates, PermutationEquivariance) {
  can::Rng rng(78);
  for (std::size_t i = 0; i < instances.size(); ++i) {
    for (auto kind : {can::TaskKind::q2a, can::TaskKind::qa2r}) {
      auto in = input(i, kind);
      auto base = model.score_candidates(in, model.context(false));
      std::vector<std::size_t> perm{0, 1, 2, 3};
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      auto shuffled = in;
      for (std::size_t c = 0; c < 4; ++c) shuffled.responses[c] = in.responses[perm[c]];
      auto moved = model.score_candidates(shuffled, model.context(false));
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(moved.logits.at(c), base.logits.at(perm[c]));
    }
  }
}

TEST_F(Candidates, WrongCandidateCountRejected) {
  auto in = input(0);
  in.responses.pop_back();
  EXPECT_THROW(model.score_candidates(in, model.context(false)), can::DataError);
}

TEST_F(Candidates, AlphaIsSimplexOverRealPositions) {
  auto in = can::prepare<double>(instances[2], can::TaskKind::qa2r, vocab, 14);
  auto r = model.score_candidates(in, model.context(false));
  const auto scores = r.scores();
  auto check = [](const std::vector<double>& alpha, const can::Mask& mask) {
    ASSERT_EQ(alpha.size(), mask.size());
    double total = 0;
    for (std::size_t i = 0; i < alpha.size(); ++i) {
      if (!mask[i]) {
        EXPECT_EQ(alpha[i], 0.0);
      }
      total += alpha[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  };
  for (std::size_t c = 0; c < scores.size(); ++c) {
    check(scores[c].alpha_q, in.query.mask);
    check(scores[c].alpha_r, in.responses[c].mask);
  }
}

TEST_F(Candidates, MinimalInstanceGradCheck) {
  auto in = input(0);
  std::vector<T> leaves;
  for (auto& [n, t] : model.parameters())
    if (n.find("reduction") != std::string::npos || n == "embedding") leaves.push_back(t);
  const double err = can::grad_check_parameters<double>(
      [&] { return can::loss(model.score_candidates(in, model.context(false)).logits, in.gold); }, leaves);
  EXPECT_LE(err, 1e-4);
}
