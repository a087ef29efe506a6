#include "gta_oracle.hpp"

#include <gtest/gtest.h>

using namespace jointgcg;

TEST(Gta, MatchesCharacterOracleOnRandomPairs) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto c = jointgcg::testing::random_tokenizer_pair(seed);
    const auto g = c.gen.tokenize(c.text);
    const auto r = c.ret.tokenize(c.text);
    Rng rng(seed + 1000);
    const Matrix projected = jointgcg::testing::random_matrix(static_cast<Eigen::Index>(r.size()), 9, 1.0, rng);
    const Matrix fast = align_gradients(build_alignment(g.offsets, r.offsets), projected);
    const Matrix slow = jointgcg::testing::character_alignment_oracle(g.offsets, r.offsets, projected);
    EXPECT_LE((fast - slow).cwiseAbs().maxCoeff(), 1e-10) << "seed " << seed;
  }
}

TEST(Gta, CoveredTokensHaveUnitWeight) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto c = jointgcg::testing::random_tokenizer_pair(seed);
    const auto map = build_alignment(c.gen.tokenize(c.text).offsets, c.ret.tokenize(c.text).offsets);
    for (const auto& entries : map) {
      double sum = 0.0;
      for (const auto& e : entries) sum += e.weight;
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Gta, WorkedExampleWeights) {
  // generator: "capital" as one token; retriever: "ca" + "pital".
  const std::vector<Span> gen{{0, 7}};
  const std::vector<Span> ret{{0, 2}, {2, 7}};
  const auto map = build_alignment(gen, ret);
  ASSERT_EQ(map[0].size(), 2u);
  EXPECT_DOUBLE_EQ(map[0][0].weight, 2.0 / 7.0);
  EXPECT_DOUBLE_EQ(map[0][1].weight, 5.0 / 7.0);
}

TEST(Gta, IdenticalTokenizationsGiveIdentity) {
  const std::vector<Span> s{{0, 3}, {3, 4}, {4, 9}};
  Rng rng(2);
  const Matrix p = jointgcg::testing::random_matrix(3, 5, 1.0, rng);
  EXPECT_EQ(align_gradients(build_alignment(s, s), p), p);
}

TEST(Gta, UncoveredTokenGetsZeroRow) {
  const std::vector<Span> gen{{0, 2}, {2, 4}};
  const std::vector<Span> ret{{0, 2}};
  const Matrix out = align_gradients(build_alignment(gen, ret), Matrix::Ones(1, 3));
  EXPECT_EQ(out.row(1).norm(), 0.0);
}

TEST(Gta, EmptyGeneratorTokenIsRejected) {
  const std::vector<Span> gen{{2, 2}};
  EXPECT_THROW(build_alignment(gen, gen), Error);
}
