#pragma once

// Adaptive weighted fusion of generator and aligned retriever gradients.

#include "jointgcg/core.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace jointgcg {

/// Similarities feeding the rank-stability metric.
struct StabilityInput {
  double sim_poison = 0.0;
  double sim_best_benign = 0.0;      // best non-poison candidate
  std::vector<double> topk_sims;     // retrieved scores, non-increasing
};

struct FusionWeight {
  double alpha = 0.5;
  double p_value = 0.0;
};

inline constexpr double kGapFloor = 1e-9;

/// Mean gap between consecutive top-k scores; the sum telescopes to first - last.
inline double average_gap(std::span<const double> topk) {
  if (topk.size() < 2) fail(ErrorCode::KTooSmall, "need at least two retrieved scores");
  return (topk.front() - topk.back()) / static_cast<double>(topk.size() - 1);
}

inline double stability(const StabilityInput& in) {
  const double gap = average_gap(in.topk_sims);
  return (in.sim_poison - in.sim_best_benign) / std::max(gap, kGapFloor);
}

/// alpha = 1 - sigmoid(P): a stably top-ranked poison shifts weight to generation.
inline FusionWeight fusion_weight(double p) {
  if (!std::isfinite(p)) fail(ErrorCode::InvalidArgument, "stability must be finite");
  return {1.0 - 1.0 / (1.0 + std::exp(-p)), p};
}

/// (1 - alpha) * grad_gen + alpha * grad_ret_aligned.
inline Matrix fuse(const Matrix& grad_gen, const Matrix& grad_ret_aligned, double alpha) {
  if (grad_gen.rows() != grad_ret_aligned.rows() || grad_gen.cols() != grad_ret_aligned.cols()) {
    fail(ErrorCode::ShapeMismatch, "fused gradients must share a shape");
  }
  return (1.0 - alpha) * grad_gen + alpha * grad_ret_aligned;
}

}  // namespace jointgcg
