#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace jointgcg;
using jointgcg::testing::make_tiny_world;

TEST(Defenses, NearestRankPercentile) {
  std::vector<double> v;
  for (int i = 20; i >= 1; --i) v.push_back(i);
  EXPECT_DOUBLE_EQ(nearest_rank_percentile(v, 95.0), 19.0);
  EXPECT_DOUBLE_EQ(nearest_rank_percentile(v, 100.0), 20.0);
  EXPECT_DOUBLE_EQ(nearest_rank_percentile(v, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(nearest_rank_percentile({7.0}, 50.0), 7.0);
  EXPECT_THROW(nearest_rank_percentile({}, 95.0), Error);
  EXPECT_THROW(nearest_rank_percentile(v, 0.0), Error);
}

TEST(Defenses, PerplexityIsExpOfMeanTokenLoss) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto w = make_tiny_world(seed);
    for (const auto& d : w.corpus->documents()) {
      const auto ids = w.generator->tokenizer.tokenize(d.text).token_ids;
      double sum = 0.0;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const TokenIds prefix(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(i));
        const TokenIds one{ids[i]};
        sum += generation_loss(w.generator->model, prefix, one);
      }
      const double expected = std::exp(sum / static_cast<double>(ids.size()));
      EXPECT_NEAR(perplexity(*w.generator, d.text), expected, 1e-9 * expected);
    }
  }
}

TEST(Defenses, PerplexityRejectsEmptyText) {
  const auto w = make_tiny_world(1);
  EXPECT_THROW(perplexity(*w.generator, ""), Error);
}

TEST(Defenses, ThresholdFromBenignDocuments) {
  const auto w = make_tiny_world(4);
  Corpus c = *w.corpus;
  c.add({"p", "zzzz zzzz zzzz", true});
  const auto t = fit_threshold(*w.generator, c, 95.0);
  EXPECT_EQ(t.source_ids.size(), w.corpus->size());
  EXPECT_DOUBLE_EQ(t.threshold, nearest_rank_percentile(corpus_perplexities(*w.generator, *w.corpus), 95.0));
}

TEST(Defenses, FilterKeepsUnderThresholdAndIncumbent) {
  const auto w = make_tiny_world(5);
  std::vector<std::string> texts;
  for (const auto& d : w.corpus->documents()) texts.push_back(d.text);
  texts.push_back("qqqq xxxx zzzz");
  std::vector<double> ppl;
  for (const auto& t : texts) ppl.push_back(perplexity(*w.generator, t));
  const double thr = nearest_rank_percentile(ppl, 50.0);
  const std::size_t incumbent = texts.size() - 1;
  const auto kept = ppl_constrained_filter(texts, incumbent, *w.generator, thr);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const bool in = std::find(kept.begin(), kept.end(), i) != kept.end();
    EXPECT_EQ(in, i == incumbent || ppl[i] <= thr) << i;
  }
}

TEST(Defenses, SwapReplacesExactCount) {
  const std::string text = "paris is the capital of france and rome is the capital of italy .";
  for (double ratio : {0.0, 0.01, 0.05, 0.2, 1.0}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const std::string out = swap_perturb(text, ratio, seed);
      ASSERT_EQ(out.size(), text.size());
      std::size_t diff = 0;
      for (std::size_t i = 0; i < text.size(); ++i) {
        diff += out[i] != text[i] ? 1 : 0;
        EXPECT_GE(out[i], 0x20);
        EXPECT_LE(out[i], 0x7e);
      }
      EXPECT_EQ(diff, swap_count(text.size(), ratio));
      EXPECT_EQ(diff, static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(text.size()))));
    }
  }
  EXPECT_EQ(swap_count(20, 0.05), 1u);
  EXPECT_EQ(swap_count(21, 0.05), 2u);
  EXPECT_THROW(swap_perturb(text, 1.5, 0), Error);
}

TEST(Defenses, SwapIsSeeded) {
  EXPECT_EQ(swap_perturb("abcdefghij", 0.3, 9), swap_perturb("abcdefghij", 0.3, 9));
}

TEST(Defenses, DefendedGenerateVotes) {
  const auto w = make_tiny_world(6);
  const std::array<OverlayDocument, 1> overlay{OverlayDocument{"poison", "rome rome rome"}};
  const auto a = defended_generate(*w.env, w.target.query, overlay, 0.0, 3, 1);
  ASSERT_EQ(a.copies.size(), 3u);
  EXPECT_EQ(a.copies[0], a.copies[1]);
  EXPECT_EQ(a.answer, a.copies[0]);
  const auto clean = w.env->answer(w.target.query, w.env->context_texts(w.env->retrieve(w.target.query, overlay), overlay));
  EXPECT_EQ(a.answer, clean);
  EXPECT_THROW(defended_generate(*w.env, w.target.query, overlay, 0.05, 0, 1), Error);
}

TEST(Defenses, HistogramCountsEveryValue) {
  const std::vector<double> v{1.0, 2.0, 2.5, 3.0, 10.0};
  const auto bins = histogram(v, 3);
  ASSERT_EQ(bins.size(), 3u);
  std::size_t total = 0;
  for (const auto& b : bins) total += b.count;
  EXPECT_EQ(total, v.size());
  EXPECT_DOUBLE_EQ(bins.front().lo, 1.0);
  EXPECT_DOUBLE_EQ(bins.back().hi, 10.0);
}
