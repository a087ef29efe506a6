#pragma once

// Perplexity scoring and filtering, and swap-perturbation smoothing.

#include "jointgcg/core.hpp"
#include "jointgcg/models.hpp"
#include "jointgcg/rag_env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace jointgcg {

/// exp(mean per-token cross-entropy), teacher-forced from an empty prefix.
inline double perplexity_ids(const GeneratorModel& model, std::span<const TokenId> ids) {
  if (ids.empty()) fail(ErrorCode::EmptyText, "perplexity needs at least one token");
  const TokenIds none;
  return std::exp(generation_loss(model, none, ids) / static_cast<double>(ids.size()));
}

inline double perplexity(const GeneratorBundle& gen, std::string_view text) {
  if (text.empty()) fail(ErrorCode::EmptyText, "perplexity of empty text");
  return perplexity_ids(gen.model, gen.tokenizer.tokenize(text).token_ids);
}

struct PplThreshold {
  double threshold = std::numeric_limits<double>::infinity();
  double percentile = 95.0;
  std::vector<std::string> source_ids;
};

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value (at least the first).
inline double nearest_rank_percentile(std::vector<double> values, double percentile) {
  if (values.empty()) fail(ErrorCode::EmptyCorpus, "percentile of an empty list");
  if (!(percentile > 0.0 && percentile <= 100.0)) fail(ErrorCode::InvalidArgument, "percentile must be in (0, 100]");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

inline std::vector<double> corpus_perplexities(const GeneratorBundle& gen, const Corpus& corpus) {
  std::vector<double> out;
  for (const auto& d : corpus.documents()) {
    if (!d.poison) out.push_back(perplexity(gen, d.text));
  }
  return out;
}

inline PplThreshold fit_threshold(const GeneratorBundle& gen, const Corpus& corpus, double percentile = 95.0) {
  PplThreshold t;
  t.percentile = percentile;
  std::vector<double> values;
  for (const auto& d : corpus.documents()) {
    if (d.poison) continue;
    values.push_back(perplexity(gen, d.text));
    t.source_ids.push_back(d.id);
  }
  if (values.empty()) fail(ErrorCode::EmptyCorpus, "threshold needs benign documents");
  t.threshold = nearest_rank_percentile(std::move(values), percentile);
  return t;
}

/// Indices of candidate texts with perplexity <= threshold; `incumbent` is always kept.
inline std::vector<std::size_t> ppl_constrained_filter(std::span<const std::string> texts, std::size_t incumbent,
                                                       const GeneratorBundle& gen, double threshold) {
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (i == incumbent || perplexity(gen, texts[i]) <= threshold) kept.push_back(i);
  }
  return kept;
}

/// Replaces exactly ceil(ratio * length) distinct byte positions with different printable ASCII characters.
inline std::string swap_perturb(std::string_view text, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) fail(ErrorCode::InvalidArgument, "ratio must be in [0, 1]");
  std::string out(text);
  const auto count = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(out.size())));
  if (count == 0) return out;
  Rng rng(seed);
  for (std::size_t pos : rng.sample_distinct(out.size(), count)) {
    const char original = out[pos];
    char c = original;
    while (c == original) c = static_cast<char>(0x20 + rng.uniform_index(95));
    out[pos] = c;
  }
  return out;
}

inline std::size_t swap_count(std::size_t length, double ratio) {
  return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(length)));
}

struct DefendedAnswer {
  std::string answer;
  std::vector<std::string> copies;
};

/// Majority vote over `copies` decodes, each with independently perturbed contexts.
/// Ties go to the answer first produced.
inline DefendedAnswer defended_generate(const RagEnvironment& env, std::string_view query,
                                        std::span<const OverlayDocument> overlay, double ratio, std::size_t copies,
                                        std::uint64_t seed) {
  if (copies < 1) fail(ErrorCode::InvalidArgument, "copies must be >= 1");
  const RetrievalResult r = env.retrieve(query, overlay);
  const auto contexts = env.context_texts(r, overlay);
  DefendedAnswer out;
  for (std::size_t c = 0; c < copies; ++c) {
    std::vector<std::string> perturbed;
    for (std::size_t d = 0; d < contexts.size(); ++d) {
      perturbed.push_back(swap_perturb(contexts[d], ratio, derive_seed(derive_seed(seed, c), d)));
    }
    out.copies.push_back(env.answer(query, perturbed));
  }
  std::size_t best_votes = 0;
  for (std::size_t c = 0; c < out.copies.size(); ++c) {
    const auto votes = static_cast<std::size_t>(std::count(out.copies.begin(), out.copies.end(), out.copies[c]));
    if (votes > best_votes) {
      best_votes = votes;
      out.answer = out.copies[c];
    }
  }
  return out;
}

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

/// Equal-width bins over [min, max]; the last bin is closed.
inline std::vector<HistogramBin> histogram(std::span<const double> values, std::size_t bins) {
  if (bins < 1) fail(ErrorCode::InvalidArgument, "histogram needs at least one bin");
  std::vector<HistogramBin> out;
  if (values.empty()) return out;
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double lo = *mn;
  const double width = (*mx - lo) / static_cast<double>(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    out.push_back({lo + width * static_cast<double>(b), lo + width * static_cast<double>(b + 1), 0});
  }
  for (double v : values) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>((v - lo) / width) : 0;
    out[std::min(b, bins - 1)].count++;
  }
  return out;
}

inline void write_histogram_csv(const std::string& path, std::span<const HistogramBin> bins) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path);
  out << "bin_lo,bin_hi,count\n";
  for (const auto& b : bins) out << format_double(b.lo) << ',' << format_double(b.hi) << ',' << b.count << '\n';
}

}  // namespace jointgcg
