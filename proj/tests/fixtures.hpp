#pragma once

// Small hand-sized worlds shared by the unit tests and the acceptance checks.

#include "jointgcg/jointgcg.hpp"

#include <memory>
#include <string>
#include <vector>

namespace jointgcg::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  }
  return m;
}

inline std::vector<std::string> tiny_characters() {
  std::vector<std::string> out = {" ", "!", "?", ".", ":"};
  for (char c = 'a'; c <= 'z'; ++c) out.emplace_back(1, c);
  return out;
}

inline const std::vector<std::string>& tiny_words() {
  static const std::vector<std::string> words = {"what", "is",   "the",   "capital", "of",    "france",
                                                 "paris", "rome", "italy", "city",    "answer"};
  return words;
}

/// Generator vocabulary: end-of-sequence, 31 characters, 11 words (43 entries).
inline Vocabulary tiny_generator_vocabulary() {
  std::vector<std::string> entries = {"</s>"};
  for (const auto& c : tiny_characters()) entries.push_back(c);
  for (const auto& w : tiny_words()) entries.push_back(w);
  return Vocabulary(entries);
}

/// Retriever vocabulary: characters plus word pieces that cut words differently.
inline Vocabulary tiny_retriever_vocabulary() {
  std::vector<std::string> entries = tiny_characters();
  for (const auto& w : {"wh", "at", "ca", "pital", "fra", "nce", "par", "is", "rome", "ita", "ly", "the", "of"}) {
    entries.emplace_back(w);
  }
  return Vocabulary(entries);
}

struct TinyWorld {
  std::shared_ptr<const RetrieverBundle> retriever;
  std::shared_ptr<const GeneratorBundle> generator;
  std::shared_ptr<const Corpus> corpus;
  std::unique_ptr<RagEnvironment> env;
  ProjectionMatrix projection;
  QueryTarget target{"what is the capital of france", "rome"};
};

/// Random models over the tiny vocabularies; `shared_vocab` gives both sides the generator
/// vocabulary and tokenizer, with an identity projection.
inline TinyWorld make_tiny_world(std::uint64_t seed, bool shared_vocab = false, std::size_t k = 3,
                                 double decay = 0.02) {
  Rng rng(seed);
  TinyWorld w;
  const Vocabulary gv = tiny_generator_vocabulary();
  const Vocabulary rv = shared_vocab ? gv : tiny_retriever_vocabulary();
  const auto gsize = static_cast<Eigen::Index>(gv.size());
  const auto rsize = static_cast<Eigen::Index>(rv.size());
  w.retriever = std::make_shared<const RetrieverBundle>(
      RetrieverBundle{RetrieverModel(rv, random_matrix(rsize, 6, 1.0, rng)), Tokenizer(TokenizerKind::GreedyLongestMatch, rv)});
  w.generator = std::make_shared<const GeneratorBundle>(
      GeneratorBundle{GeneratorModel(gv, random_matrix(gsize, 5, 1.0, rng), random_matrix(4, 5, 1.0, rng),
                                     random_matrix(gsize, 4, 2.0, rng), decay),
                      Tokenizer(TokenizerKind::GreedyLongestMatch, gv)});
  auto corpus = std::make_shared<Corpus>();
  corpus->add({"d1", "paris is the capital of france .", false});
  corpus->add({"d2", "the capital city of france is paris .", false});
  corpus->add({"d3", "rome is the capital of italy .", false});
  corpus->add({"d4", "italy is what rome is .", false});
  corpus->add({"d5", "the answer is paris .", false});
  w.corpus = corpus;
  w.env = std::make_unique<RagEnvironment>(w.retriever, w.generator, w.corpus, k, 2);
  w.projection.values = shared_vocab ? Matrix(Matrix::Identity(gsize, gsize)) : random_matrix(rsize, gsize, 0.3, rng);
  return w;
}

inline TokenIds bang_sequence(const TinyWorld& w, std::size_t n) {
  return TokenIds(n, w.generator->model.vocabulary().require("!"));
}

}  // namespace jointgcg::testing
