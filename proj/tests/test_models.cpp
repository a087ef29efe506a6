#include "fixtures.hpp"

#include <gtest/gtest.h>

using namespace jointgcg;
using jointgcg::testing::make_tiny_world;

TEST(Models, RetrieverGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto w = make_tiny_world(seed);
    const auto& m = w.retriever->model;
    const auto& tok = w.retriever->tokenizer;
    const TokenIds q = tok.tokenize("what is the capital").token_ids;
    const TokenIds d = tok.tokenize("paris is the city of france").token_ids;
    const PositionRange span{1, d.size() - 1};
    Rng rng(seed);
    const auto rep = finite_difference_check(
        [&](const Matrix& x) {
          const RelaxedRows rr{span.start, x};
          return retrieval_loss(m, q, d, &rr);
        },
        [&](const Matrix&) { return retrieval_grad(m, q, d, span); }, one_hot_rows(d, span, m.vocab_size()), 1e-5, 100,
        rng);
    EXPECT_LT(rep.max_rel_err, 1e-4) << "seed " << seed;
    EXPECT_EQ(rep.compared, 100u);
  }
}

TEST(Models, GeneratorGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto w = make_tiny_world(seed);
    const auto& m = w.generator->model;
    const auto& tok = w.generator->tokenizer;
    const TokenIds ctx = tok.tokenize("what is the capital of france").token_ids;
    const TokenIds tgt = tok.tokenize("paris .").token_ids;
    const PositionRange span{0, ctx.size()};
    Rng rng(seed);
    const auto rep = finite_difference_check(
        [&](const Matrix& x) {
          const RelaxedRows rr{span.start, x};
          return generation_loss(m, ctx, tgt, &rr);
        },
        [&](const Matrix&) { return generation_grad(m, ctx, tgt, span); }, one_hot_rows(ctx, span, m.vocab_size()), 1e-5,
        100, rng);
    EXPECT_LT(rep.max_rel_err, 1e-4) << "seed " << seed;
  }
}

TEST(Models, RetrievalLossIsSymmetric) {
  const auto w = make_tiny_world(3);
  const auto& tok = w.retriever->tokenizer;
  const TokenIds a = tok.tokenize("rome is the capital").token_ids;
  const TokenIds b = tok.tokenize("of italy").token_ids;
  EXPECT_NEAR(retrieval_loss(w.retriever->model, a, b), retrieval_loss(w.retriever->model, b, a), 1e-15);
}

TEST(Models, IdenticalTokenMultisetScoresOne) {
  const auto w = make_tiny_world(4);
  const auto& tok = w.retriever->tokenizer;
  EXPECT_NEAR(retrieval_loss(w.retriever->model, tok.tokenize("paris is").token_ids, tok.tokenize("is paris").token_ids),
              -1.0, 1e-12);
}

TEST(Models, UniformGeneratorHasPerplexityV) {
  const Vocabulary v = jointgcg::testing::tiny_generator_vocabulary();
  Rng rng(1);
  const auto n = static_cast<Eigen::Index>(v.size());
  GeneratorModel m(v, jointgcg::testing::random_matrix(n, 3, 1.0, rng), jointgcg::testing::random_matrix(2, 3, 1.0, rng), Matrix::Zero(n, 2));
  const TokenIds ids{3, 5, 7, 9};
  EXPECT_NEAR(perplexity_ids(m, ids), static_cast<double>(v.size()), 1e-9);
}

TEST(Models, ArgmaxTiesGoToLowestId) {
  Vector v(4);
  v << 1.0, 3.0, 3.0, 2.0;
  EXPECT_EQ(argmax_lowest(v), 1);
}

TEST(Models, GreedyDecodeStopsAtEndOfSequence) {
  const Vocabulary v({"</s>", "a", "b"});
  Matrix out = Matrix::Zero(3, 1);
  out(0, 0) = 5.0;  // end of sequence always wins
  GeneratorModel m(v, Matrix::Ones(3, 1), Matrix::Ones(1, 1), out);
  EXPECT_TRUE(greedy_decode(m, TokenIds{1, 2}, 4).empty());
}

TEST(Models, PositionDecayWeightsEarlierTokensMore) {
  const auto w = make_tiny_world(5, false, 3, 0.1);
  EXPECT_GT(w.generator->model.position_weight(0), w.generator->model.position_weight(10));
  EXPECT_DOUBLE_EQ(w.generator->model.position_weight(0), 1.0);
}

TEST(Models, ParameterFilesRoundTripExactly) {
  const auto w = make_tiny_world(6);
  const auto path = std::filesystem::temp_directory_path() / "jointgcg_gen.params";
  save_parameter_file(path.string(), w.generator->model.to_parameters());
  const auto back = GeneratorModel::from_parameters(w.generator->model.vocabulary(), load_parameter_file(path.string()));
  EXPECT_EQ(back.embedding(), w.generator->model.embedding());
  EXPECT_EQ(back.output(), w.generator->model.output());
  EXPECT_EQ(back.position_decay(), w.generator->model.position_decay());
}

TEST(Models, EmptyInputsAreRejected) {
  const auto w = make_tiny_world(7);
  EXPECT_THROW(retrieval_loss(w.retriever->model, TokenIds{}, TokenIds{1}), Error);
  EXPECT_THROW(greedy_decode(w.generator->model, TokenIds{1}, 0), Error);
}
