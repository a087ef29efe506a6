#include "fixtures.hpp"

#include <gtest/gtest.h>

using namespace jointgcg;

TEST(Tokenizers, CharacterOffsetsCoverText) {
  Vocabulary v(printable_ascii_characters());
  Tokenizer t(TokenizerKind::Character, v);
  const auto r = t.tokenize("ab c!");
  ASSERT_EQ(r.size(), 5u);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r.offsets[i], (Span{i, i + 1}));
  EXPECT_EQ(t.detokenize(r.token_ids), "ab c!");
}

TEST(Tokenizers, WhitespaceSkipsSpaces) {
  Vocabulary v({"the", "capital", "is"});
  Tokenizer t(TokenizerKind::Whitespace, v);
  const auto r = t.tokenize("the  capital is");
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r.offsets[1], (Span{5, 12}));
  EXPECT_EQ(t.detokenize(r.token_ids), "the capital is");
  EXPECT_THROW(t.tokenize("the city"), Error);
}

TEST(Tokenizers, GreedyPrefersLongestMatch) {
  Tokenizer t(TokenizerKind::GreedyLongestMatch, jointgcg::testing::tiny_retriever_vocabulary());
  const auto r = t.tokenize("capital");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(t.vocabulary().entry(r.token_ids[0]), "ca");
  EXPECT_EQ(t.vocabulary().entry(r.token_ids[1]), "pital");
  EXPECT_EQ(r.offsets[1], (Span{2, 7}));
}

TEST(Tokenizers, RoundTripDetectsMerges) {
  Tokenizer t(TokenizerKind::GreedyLongestMatch, jointgcg::testing::tiny_generator_vocabulary());
  const auto& v = t.vocabulary();
  EXPECT_TRUE(t.round_trips(TokenIds{v.require("!"), v.require("rome")}));
  // "i" followed by "s" re-tokenizes as the word "is".
  EXPECT_FALSE(t.round_trips(TokenIds{v.require("i"), v.require("s")}));
}

TEST(Tokenizers, OffsetsAreContiguousForGreedy) {
  Tokenizer t(TokenizerKind::GreedyLongestMatch, jointgcg::testing::tiny_generator_vocabulary());
  const std::string text = "what is the capital of france ?";
  const auto r = t.tokenize(text);
  std::size_t pos = 0;
  for (const auto& s : r.offsets) {
    EXPECT_EQ(s.start, pos);
    pos = s.end;
  }
  EXPECT_EQ(pos, text.size());
}

TEST(Tokenizers, SharedTokensPairEqualStrings) {
  const auto g = jointgcg::testing::tiny_generator_vocabulary();
  const auto r = jointgcg::testing::tiny_retriever_vocabulary();
  const auto shared = shared_tokens(g, r);
  for (const auto& [a, b] : shared) EXPECT_EQ(g.entry(a), r.entry(b));
  // 31 characters plus "is", "the", "of", "rome".
  EXPECT_EQ(shared.size(), 35u);
}

TEST(Tokenizers, VocabularyRejectsDuplicates) {
  EXPECT_THROW(Vocabulary({"a", "a"}), Error);
  EXPECT_THROW(Vocabulary({"a", ""}), Error);
}

TEST(Tokenizers, AsciiMaskFlagsNonAscii) {
  Vocabulary v({"a", "\xc3\xa9", "b"});
  EXPECT_TRUE(v.ascii_mask()[0]);
  EXPECT_FALSE(v.ascii_mask()[1]);
}
