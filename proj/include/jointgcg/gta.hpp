#pragma once

// Gradient tokenization alignment: carries per-token gradient rows from one
// tokenization of a text onto another tokenization of the same text, weighting
// each source token by the fraction of the destination token it overlaps.

#include "jointgcg/core.hpp"

#include <algorithm>
#include <span>
#include <vector>

namespace jointgcg {

struct AlignmentEntry {
  std::size_t retriever_index = 0;
  double weight = 0.0;  // overlap characters / generator token characters
};

/// One entry list per generator token.
using AlignmentMap = std::vector<std::vector<AlignmentEntry>>;

inline AlignmentMap build_alignment(std::span<const Span> gen_offsets, std::span<const Span> ret_offsets) {
  AlignmentMap map;
  map.reserve(gen_offsets.size());
  for (std::size_t g = 0; g < gen_offsets.size(); ++g) {
    const Span l = gen_offsets[g];
    if (l.end <= l.start) fail(ErrorCode::EmptyGeneratorToken, "generator token " + std::to_string(g) + " is empty");
    const double length = static_cast<double>(l.length());
    std::vector<AlignmentEntry> entries;
    for (std::size_t r = 0; r < ret_offsets.size(); ++r) {
      const Span b = ret_offsets[r];
      const std::size_t lo = std::max(l.start, b.start);
      const std::size_t hi = std::min(l.end, b.end);
      if (hi > lo) entries.push_back({r, static_cast<double>(hi - lo) / length});
    }
    map.push_back(std::move(entries));
  }
  return map;
}

/// Row g of the result is sum over map[g] of weight * projected.row(retriever_index).
inline Matrix align_gradients(const AlignmentMap& map, const Matrix& projected) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(map.size()), projected.cols());
  for (std::size_t g = 0; g < map.size(); ++g) {
    for (const auto& e : map[g]) {
      if (e.retriever_index >= static_cast<std::size_t>(projected.rows())) {
        fail(ErrorCode::IndexOutOfRange, "retriever index " + std::to_string(e.retriever_index));
      }
      out.row(static_cast<Eigen::Index>(g)) += e.weight * projected.row(static_cast<Eigen::Index>(e.retriever_index));
    }
  }
  return out;
}

}  // namespace jointgcg
