#include <gtest/gtest.h>

#include <numeric>

#include "can/attention.hpp"
#include "can/autograd.hpp"
#include "oracles.hpp"

using T = can::Tensor<double>;

namespace {

can::Mask random_mask(std::size_t n, can::Rng& rng) {
  can::Mask m(n);
  for (auto& b : m) b = rng.bernoulli(0.7) ? 1 : 0;
  m[rng.below(n)] = 1;
  return m;
}

void expect_simplex_rows(const T& w, const can::Mask& mask) {
  for (std::size_t i = 0; i < w.dim(0); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < w.dim(1); ++j) {
      EXPECT_GE(w.at(i, j), 0.0);
      if (!mask.empty() && !mask[j]) {
        EXPECT_EQ(w.at(i, j), 0.0);
      }
      s += w.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

}  // namespace

TEST(Sdpa, SingleKeyReturnsItsValue) {
  auto r = can::sdpa(T::matrix({{0.3, -2}, {5, 1}}), T::matrix({{1, 1}}), T::matrix({{4, -3, 2}}));
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(r.weights.at(i, 0), 1.0);
    EXPECT_EQ(r.output.at(i, 0), 4.0);
    EXPECT_EQ(r.output.at(i, 1), -3.0);
    EXPECT_EQ(r.output.at(i, 2), 2.0);
  }
}

TEST(Sdpa, IdenticalKeysSplitEvenly) {
  auto r = can::sdpa(T::matrix({{1, 2}}), T::matrix({{0.5, 0.5}, {0.5, 0.5}}), T::matrix({{1, 0}, {0, 1}}));
  EXPECT_DOUBLE_EQ(r.weights.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(r.weights.at(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(r.output.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(r.output.at(0, 1), 0.5);
}

TEST(Sdpa, MatchesScalarLoopOracle) {
  can::Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = trial == 0 ? 2 : 1 + rng.below(8), n = trial == 0 ? 3 : 1 + rng.below(8);
    const std::size_t dk = trial == 0 ? 4 : 1 + rng.below(8), dv = 1 + rng.below(8);
    auto q = oracle::random_mat(m, dk, rng, 2.0), k = oracle::random_mat(n, dk, rng, 2.0);
    auto v = oracle::random_mat(n, dv, rng, 2.0);
    const auto mask = trial % 2 ? random_mask(n, rng) : can::Mask{};
    auto got = can::sdpa(oracle::tensor(q), oracle::tensor(k), oracle::tensor(v), mask);
    auto want = oracle::sdpa(q, k, v, mask);
    EXPECT_LE(oracle::max_abs_diff(got.output.data(), want.out.v), 1e-10);
    EXPECT_LE(oracle::max_abs_diff(got.weights.data(), want.weights.v), 1e-10);
    expect_simplex_rows(got.weights, mask);
  }
}

TEST(Sdpa, AllMaskedIsRejected) {
  EXPECT_THROW(can::sdpa(T::matrix({{1}}), T::matrix({{1}, {2}}), T::matrix({{1}, {2}}), can::Mask{0, 0}),
               can::ContractError);
  EXPECT_THROW(can::sdpa(T::zeros({2, 3}), T::zeros({2, 4}), T::zeros({2, 4})), can::DimensionError);
}

TEST(MultiHead, SingleIdentityHeadIsSdpa) {
  can::Rng rng(42);
  can::MhaParams<double> p;
  const auto eye = T::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  p.w_query = {eye};
  p.w_key = {eye};
  p.w_value = {eye};
  p.w_out = eye;
  auto q = oracle::tensor(oracle::random_mat(2, 3, rng)), k = oracle::tensor(oracle::random_mat(4, 3, rng));
  auto mh = can::multi_head(q, k, k, p);
  auto direct = can::sdpa(q, k, k);
  EXPECT_LE(oracle::max_abs_diff(mh.output.data(), direct.output.data()), 1e-12);
}

TEST(MultiHead, IdenticalHeadsGiveIdenticalTraces) {
  can::Rng rng(43);
  auto p = can::MhaParams<double>::init(4, 2, rng);
  p.w_query[1] = p.w_query[0];
  p.w_key[1] = p.w_key[0];
  p.w_value[1] = p.w_value[0];
  auto x = oracle::tensor(oracle::random_mat(3, 4, rng));
  auto r = can::multi_head(x, x, x, p);
  EXPECT_EQ(oracle::max_abs_diff(r.weights[0].data(), r.weights[1].data()), 0.0);
}

TEST(MultiHead, MatchesCompositionOracle) {
  can::Rng rng(44);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t heads = trial == 0 ? 2 : 1 + rng.below(3);
    const std::size_t d = heads * (trial == 0 ? 2 : 1 + rng.below(3));
    auto p = can::MhaParams<double>::init(d, heads, rng);
    const std::size_t m = 1 + rng.below(5), n = 1 + rng.below(5);
    auto q = oracle::random_mat(m, d, rng), k = oracle::random_mat(n, d, rng), v = oracle::random_mat(n, d, rng);
    const auto mask = trial % 2 ? random_mask(n, rng) : can::Mask{};
    auto got = can::multi_head(oracle::tensor(q), oracle::tensor(k), oracle::tensor(v), p, mask);
    EXPECT_LE(oracle::max_abs_diff(got.output.data(), oracle::multi_head(q, k, v, oracle::heads_of(p), mask).v), 1e-10);
    for (const auto& w : got.weights) expect_simplex_rows(w, mask);
  }
}

TEST(MultiHead, HeadsMustDivideWidth) {
  can::Rng rng(45);
  EXPECT_THROW(can::MhaParams<double>::init(5, 2, rng), can::ContractError);
}

class Unit : public ::testing::Test {
 protected:
  can::Rng rng{46};
  can::AttnUnitParams<double> p = can::AttnUnitParams<double>::init(4, 2, 16, rng);
  can::Context ctx{};
};

TEST_F(Unit, SingleGuidePositionGetsFullWeight) {
  auto x = oracle::tensor(oracle::random_mat(3, 4, rng));
  auto g = oracle::tensor(oracle::random_mat(1, 4, rng));
  auto u = can::guided_attention_unit(x, g, p, {}, ctx);
  ASSERT_EQ(u.output.shape(), (can::Shape{3, 4}));
  for (const auto& w : u.weights)
    for (double v : w.data()) EXPECT_EQ(v, 1.0);
}

TEST_F(Unit, OutputShapeIndependentOfGuideLength) {
  auto x = oracle::tensor(oracle::random_mat(2, 4, rng));
  for (std::size_t n = 1; n <= 6; ++n) {
    auto u = can::guided_attention_unit(x, oracle::tensor(oracle::random_mat(n, 4, rng)), p, {}, ctx);
    EXPECT_EQ(u.output.shape(), (can::Shape{2, 4}));
    EXPECT_EQ(u.weights.front().shape(), (can::Shape{2, n}));
  }
}

TEST_F(Unit, GuidePermutationInvariance) {
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(5);
    auto x = oracle::tensor(oracle::random_mat(3, 4, rng));
    auto g = oracle::random_mat(n, 4, rng);
    auto mask = random_mask(n, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    oracle::Mat gp(n, 4);
    can::Mask mp(n);
    for (std::size_t i = 0; i < n; ++i) {
      mp[i] = mask[perm[i]];
      for (std::size_t c = 0; c < 4; ++c) gp(i, c) = g(perm[i], c);
    }
    auto a = can::guided_attention_unit(x, oracle::tensor(g), p, mask, ctx);
    auto b = can::guided_attention_unit(x, oracle::tensor(gp), p, mp, ctx);
    EXPECT_LE(oracle::max_abs_diff(a.output.data(), b.output.data()), 1e-10);
  }
}

TEST_F(Unit, SelfAttentionOfOneAttendsItself) {
  auto u = can::self_attention_unit(oracle::tensor(oracle::random_mat(1, 4, rng)), p, {}, ctx);
  for (const auto& w : u.weights) EXPECT_EQ(w.item(), 1.0);
}

TEST_F(Unit, SelfAttentionIsGuidedBySelf) {
  auto x = oracle::tensor(oracle::random_mat(3, 4, rng));
  const can::Mask mask{1, 0, 1};
  auto a = can::self_attention_unit(x, p, mask, ctx);
  auto b = can::guided_attention_unit(x, x, p, mask, ctx);
  EXPECT_EQ(oracle::max_abs_diff(a.output.data(), b.output.data()), 0.0);
}

TEST_F(Unit, TraceRowsAreSimplices) {
  for (int seed = 0; seed < 100; ++seed) {
    can::Rng r(static_cast<std::uint64_t>(seed));
    const std::size_t m = 1 + r.below(5);
    auto mask = random_mask(m, r);
    auto u = can::self_attention_unit(oracle::tensor(oracle::random_mat(m, 4, r, 3.0)), p, mask, ctx);
    auto trace = u.trace("sa");
    ASSERT_EQ(trace.heads.size(), 2u);
    for (const auto& w : trace.heads) {
      for (std::size_t i = 0; i < w.rows; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < w.cols; ++j) {
          if (!mask[j]) {
            EXPECT_EQ(w.at(i, j), 0.0);
          }
          s += w.at(i, j);
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST_F(Unit, MatchesResidualLayerNormComposition) {
  auto x = oracle::random_mat(3, 4, rng), g = oracle::random_mat(2, 4, rng);
  auto u = can::guided_attention_unit(oracle::tensor(x), oracle::tensor(g), p, {}, ctx);
  auto attended = oracle::multi_head(x, g, g, oracle::heads_of(p.mha));
  for (std::size_t i = 0; i < attended.v.size(); ++i) attended.v[i] += x.v[i];
  auto y = oracle::layer_norm(attended);
  auto ff = oracle::mlp(y, {{oracle::of(p.ffn.expand.weight), {p.ffn.expand.bias.data().begin(), p.ffn.expand.bias.data().end()}},
                            {oracle::of(p.ffn.contract.weight), {p.ffn.contract.bias.data().begin(), p.ffn.contract.bias.data().end()}}});
  for (std::size_t i = 0; i < ff.v.size(); ++i) ff.v[i] += y.v[i];
  EXPECT_LE(oracle::max_abs_diff(u.output.data(), oracle::layer_norm(ff).v), 1e-10);
}

TEST_F(Unit, GradCheck) {
  auto x = oracle::tensor(oracle::random_mat(3, 4, rng));
  auto g = oracle::tensor(oracle::random_mat(2, 4, rng));
  const can::Mask mask{1, 0};
  EXPECT_LE(can::grad_check<double>([&](const T& v) { return can::guided_attention_unit(v, g, p, mask, ctx).output; }, x),
            1e-4);
  EXPECT_LE(can::grad_check<double>([&](const T& v) { return can::guided_attention_unit(x, v, p, {}, ctx).output; }, g),
            1e-4);
  can::ParamList<double> params;
  p.collect("unit", params);
  std::vector<T> leaves;
  for (auto& [n, t] : params) leaves.push_back(t);
  EXPECT_LE(can::grad_check_parameters<double>([&] { return can::guided_attention_unit(x, g, p, {}, ctx).output; },
                                               leaves),
            1e-4);
}
