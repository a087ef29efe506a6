#pragma once

// Toy retriever and generator with exact gradients with respect to relaxed
// one-hot token choices.
//
// A token position can be "relaxed": instead of selecting one embedding row,
// it carries a real weight per vocabulary entry and contributes
// sum_v weight[v] * E[v]. At a one-hot point the relaxed model equals the
// discrete one, and the gradient entry (p, v) is the derivative of the loss
// with respect to weight[v] at position p.

#include "jointgcg/core.hpp"
#include "jointgcg/model_io.hpp"
#include "jointgcg/tokenizers.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <utility>

namespace jointgcg {

/// Token-index range [start, end) within a sequence.
using PositionRange = Span;

/// Real-valued selection weights for positions [start, start + rows) of a sequence.
struct RelaxedRows {
  std::size_t start = 0;
  Matrix weights;  // rows = positions, cols = vocabulary
};

inline Matrix one_hot_rows(std::span<const TokenId> ids, PositionRange range, std::size_t vocab_size) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(range.length()), static_cast<Eigen::Index>(vocab_size));
  for (std::size_t i = range.start; i < range.end; ++i) m(static_cast<Eigen::Index>(i - range.start), ids[i]) = 1.0;
  return m;
}

namespace detail {

inline void check_ids(const Vocabulary& vocab, std::span<const TokenId> ids) {
  for (TokenId id : ids) {
    if (!vocab.valid(id)) fail(ErrorCode::IdOutOfRange, "token id " + std::to_string(id));
  }
}

inline void check_relaxed(const RelaxedRows* relaxed, std::size_t length, std::size_t vocab_size) {
  if (!relaxed) return;
  if (relaxed->start + static_cast<std::size_t>(relaxed->weights.rows()) > length) {
    fail(ErrorCode::SpanOutOfRange, "relaxed rows exceed sequence");
  }
  if (static_cast<std::size_t>(relaxed->weights.cols()) != vocab_size) {
    fail(ErrorCode::DimensionMismatch, "relaxed rows have wrong vocabulary width");
  }
}

inline bool in_relaxed(const RelaxedRows* relaxed, std::size_t i) {
  return relaxed && i >= relaxed->start && i < relaxed->start + static_cast<std::size_t>(relaxed->weights.rows());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Retriever: mean pooling followed by L2 normalization.

class RetrieverModel {
 public:
  RetrieverModel(Vocabulary vocabulary, Matrix embedding)
      : vocab_(std::move(vocabulary)), embedding_(std::move(embedding)) {
    if (static_cast<std::size_t>(embedding_.rows()) != vocab_.size()) {
      fail(ErrorCode::DimensionMismatch, "retriever embedding rows != vocabulary size");
    }
    if (!embedding_.allFinite()) fail(ErrorCode::InvalidArgument, "retriever embedding has non-finite entries");
  }

  const Vocabulary& vocabulary() const { return vocab_; }
  const Matrix& embedding() const { return embedding_; }
  std::size_t dim() const { return static_cast<std::size_t>(embedding_.cols()); }
  std::size_t vocab_size() const { return vocab_.size(); }

  /// Unnormalized mean of the selected rows.
  Vector mean_embedding(std::span<const TokenId> ids, const RelaxedRows* relaxed = nullptr) const {
    if (ids.empty()) fail(ErrorCode::EmptyInput, "cannot embed an empty token list");
    detail::check_ids(vocab_, ids);
    detail::check_relaxed(relaxed, ids.size(), vocab_size());
    Vector sum = Vector::Zero(embedding_.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (detail::in_relaxed(relaxed, i)) {
        sum += embedding_.transpose() * relaxed->weights.row(static_cast<Eigen::Index>(i - relaxed->start)).transpose();
      } else {
        sum += embedding_.row(ids[i]).transpose();
      }
    }
    return sum / static_cast<double>(ids.size());
  }

  ParameterFile to_parameters() const {
    ParameterFile f;
    f.kind = "retriever";
    f.add_matrix("embedding", embedding_);
    return f;
  }

  static RetrieverModel from_parameters(Vocabulary vocabulary, const ParameterFile& f) {
    if (f.kind != "retriever") fail(ErrorCode::ModelLoadError, "expected retriever file, got " + f.kind);
    return RetrieverModel(std::move(vocabulary), f.matrix("embedding"));
  }

 private:
  Vocabulary vocab_;
  Matrix embedding_;
};

inline Vector normalize_or_fail(const Vector& v) {
  const double n = v.norm();
  if (n == 0.0) fail(ErrorCode::ZeroVector, "pooled embedding is exactly zero");
  return v / n;
}

inline Vector embed(const RetrieverModel& model, std::span<const TokenId> ids, const RelaxedRows* relaxed = nullptr) {
  return normalize_or_fail(model.mean_embedding(ids, relaxed));
}

inline double cosine(const Vector& a, const Vector& b) { return a.dot(b) / (a.norm() * b.norm()); }

/// Negative cosine similarity between query and document embeddings.
inline double retrieval_loss(const RetrieverModel& model, std::span<const TokenId> query_ids,
                             std::span<const TokenId> doc_ids, const RelaxedRows* relaxed_doc = nullptr) {
  if (query_ids.empty() || doc_ids.empty()) fail(ErrorCode::EmptyInput, "retrieval_loss needs non-empty inputs");
  return -embed(model, query_ids).dot(embed(model, doc_ids, relaxed_doc));
}

/// Gradient of retrieval_loss over document positions in `span`, shape |span| x V_ret.
inline Matrix retrieval_grad_at(const RetrieverModel& model, const Vector& query_unit, std::span<const TokenId> doc_ids,
                                PositionRange span) {
  if (span.end > doc_ids.size() || span.start > span.end) fail(ErrorCode::SpanOutOfRange, "span outside document");
  const Vector mean = model.mean_embedding(doc_ids);
  const double norm = mean.norm();
  if (norm == 0.0) fail(ErrorCode::ZeroVector, "document embedding is exactly zero");
  const Vector doc_unit = mean / norm;
  // d(-q.e)/dm where e = m/|m|
  const Vector d_mean = -(query_unit - query_unit.dot(doc_unit) * doc_unit) / norm;
  const Vector row = model.embedding() * d_mean / static_cast<double>(doc_ids.size());
  Matrix grad(static_cast<Eigen::Index>(span.length()), static_cast<Eigen::Index>(model.vocab_size()));
  for (Eigen::Index r = 0; r < grad.rows(); ++r) grad.row(r) = row.transpose();
  return grad;
}

inline Matrix retrieval_grad(const RetrieverModel& model, std::span<const TokenId> query_ids,
                             std::span<const TokenId> doc_ids, PositionRange span) {
  if (query_ids.empty() || doc_ids.empty()) fail(ErrorCode::EmptyInput, "retrieval_grad needs non-empty inputs");
  return retrieval_grad_at(model, embed(model, query_ids), doc_ids, span);
}

// ---------------------------------------------------------------------------
// Generator: position-weighted mean pooling, tanh hidden layer, linear logits.
//
// Position i of the running sequence carries weight exp(-decay * i); decay = 0
// is plain mean pooling. Entry 0 of the vocabulary is the end-of-sequence token.

class GeneratorModel {
 public:
  static constexpr TokenId kEndOfSequence = 0;

  GeneratorModel(Vocabulary vocabulary, Matrix embedding, Matrix hidden, Matrix output, double position_decay = 0.0)
      : vocab_(std::move(vocabulary)),
        embedding_(std::move(embedding)),
        hidden_(std::move(hidden)),
        output_(std::move(output)),
        decay_(position_decay) {
    const auto v = static_cast<Eigen::Index>(vocab_.size());
    if (embedding_.rows() != v || output_.rows() != v || hidden_.cols() != embedding_.cols() ||
        output_.cols() != hidden_.rows()) {
      fail(ErrorCode::DimensionMismatch, "generator parameter shapes do not chain");
    }
    if (!embedding_.allFinite() || !hidden_.allFinite() || !output_.allFinite() || !std::isfinite(decay_) ||
        decay_ < 0.0) {
      fail(ErrorCode::InvalidArgument, "generator parameters must be finite (decay >= 0)");
    }
  }

  const Vocabulary& vocabulary() const { return vocab_; }
  const Matrix& embedding() const { return embedding_; }
  const Matrix& hidden() const { return hidden_; }
  const Matrix& output() const { return output_; }
  double position_decay() const { return decay_; }
  std::size_t vocab_size() const { return vocab_.size(); }

  double position_weight(std::size_t i) const { return decay_ == 0.0 ? 1.0 : std::exp(-decay_ * static_cast<double>(i)); }

  Vector logits_from_pooled(const Vector& pooled) const { return output_ * (hidden_ * pooled).array().tanh().matrix(); }

  /// Next-token logits after the whole of `ids`.
  Vector next_logits(std::span<const TokenId> ids) const {
    detail::check_ids(vocab_, ids);
    Vector sum = Vector::Zero(embedding_.cols());
    double total = 0.0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const double w = position_weight(i);
      sum += w * embedding_.row(ids[i]).transpose();
      total += w;
    }
    return logits_from_pooled(total > 0.0 ? Vector(sum / total) : sum);
  }

  ParameterFile to_parameters() const {
    ParameterFile f;
    f.kind = "generator";
    f.add_scalar("position_decay", decay_);
    f.add_matrix("embedding", embedding_);
    f.add_matrix("hidden", hidden_);
    f.add_matrix("output", output_);
    return f;
  }

  static GeneratorModel from_parameters(Vocabulary vocabulary, const ParameterFile& f) {
    if (f.kind != "generator") fail(ErrorCode::ModelLoadError, "expected generator file, got " + f.kind);
    return GeneratorModel(std::move(vocabulary), f.matrix("embedding"), f.matrix("hidden"), f.matrix("output"),
                          f.scalar_or("position_decay", 0.0));
  }

 private:
  Vocabulary vocab_;
  Matrix embedding_;
  Matrix hidden_;
  Matrix output_;
  double decay_;
};

inline Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

inline double log_sum_exp(const Vector& logits) {
  const double mx = logits.maxCoeff();
  return mx + std::log((logits.array() - mx).exp().sum());
}

namespace detail {

/// Teacher-forced pass over context ++ target. When `pooled_grad` is non-null it
/// receives sum_j dL_j/dpooled_j / W_j, the quantity every context-position
/// gradient row is built from.
inline double generation_pass(const GeneratorModel& model, std::span<const TokenId> context,
                              std::span<const TokenId> target, const RelaxedRows* relaxed, Vector* pooled_grad) {
  if (target.empty()) fail(ErrorCode::EmptyTarget, "generation target is empty");
  check_ids(model.vocabulary(), context);
  check_ids(model.vocabulary(), target);
  check_relaxed(relaxed, context.size(), model.vocab_size());
  const Matrix& E = model.embedding();
  Vector sum = Vector::Zero(E.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < context.size(); ++i) {
    const double w = model.position_weight(i);
    if (in_relaxed(relaxed, i)) {
      sum += w * (E.transpose() * relaxed->weights.row(static_cast<Eigen::Index>(i - relaxed->start)).transpose());
    } else {
      sum += w * E.row(context[i]).transpose();
    }
    total += w;
  }
  if (pooled_grad) *pooled_grad = Vector::Zero(E.cols());
  double loss = 0.0;
  for (std::size_t j = 0; j < target.size(); ++j) {
    const Vector pooled = total > 0.0 ? Vector(sum / total) : sum;
    const Vector h = (model.hidden() * pooled).array().tanh().matrix();
    const Vector z = model.output() * h;
    const TokenId t = target[j];
    loss += log_sum_exp(z) - z(t);
    if (pooled_grad && total > 0.0) {
      Vector dz = softmax(z);
      dz(t) -= 1.0;
      const Vector dh = model.output().transpose() * dz;
      const Vector da = (dh.array() * (1.0 - h.array().square())).matrix();
      *pooled_grad += model.hidden().transpose() * da / total;
    }
    const double w = model.position_weight(context.size() + j);
    sum += w * E.row(t).transpose();
    total += w;
  }
  return loss;
}

}  // namespace detail

/// Teacher-forced cross-entropy of `target` following `context` (sum over target tokens).
inline double generation_loss(const GeneratorModel& model, std::span<const TokenId> context,
                              std::span<const TokenId> target, const RelaxedRows* relaxed_context = nullptr) {
  return detail::generation_pass(model, context, target, relaxed_context, nullptr);
}

/// Gradient of generation_loss over context positions in `span`, shape |span| x V_gen.
inline Matrix generation_grad(const GeneratorModel& model, std::span<const TokenId> context,
                              std::span<const TokenId> target, PositionRange span) {
  if (span.end > context.size() || span.start > span.end) fail(ErrorCode::SpanOutOfRange, "span outside context");
  Vector pooled_grad;
  detail::generation_pass(model, context, target, nullptr, &pooled_grad);
  const Vector base = model.embedding() * pooled_grad;
  Matrix grad(static_cast<Eigen::Index>(span.length()), static_cast<Eigen::Index>(model.vocab_size()));
  for (std::size_t i = span.start; i < span.end; ++i) {
    grad.row(static_cast<Eigen::Index>(i - span.start)) = model.position_weight(i) * base.transpose();
  }
  return grad;
}

/// Index of the largest entry; ties resolve to the lowest index.
inline TokenId argmax_lowest(const Vector& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return static_cast<TokenId>(best);
}

/// Greedy decoding; the end-of-sequence token stops decoding and is not emitted.
inline TokenIds greedy_decode(const GeneratorModel& model, std::span<const TokenId> context, std::size_t max_len) {
  if (max_len < 1) fail(ErrorCode::InvalidArgument, "max_len must be >= 1");
  detail::check_ids(model.vocabulary(), context);
  const Matrix& E = model.embedding();
  Vector sum = Vector::Zero(E.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < context.size(); ++i) {
    const double w = model.position_weight(i);
    sum += w * E.row(context[i]).transpose();
    total += w;
  }
  TokenIds out;
  for (std::size_t step = 0; step < max_len; ++step) {
    const Vector pooled = total > 0.0 ? Vector(sum / total) : sum;
    const TokenId next = argmax_lowest(model.logits_from_pooled(pooled));
    if (next == GeneratorModel::kEndOfSequence) break;
    out.push_back(next);
    const double w = model.position_weight(context.size() + step);
    sum += w * E.row(next).transpose();
    total += w;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct FdReport {
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;
  std::size_t compared = 0;
};

/// Relative disagreement of two derivative estimates; both below `floor` counts as 0.
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  const double a = std::abs(analytic);
  const double n = std::abs(numeric);
  if (a < floor && n < floor) return 0.0;
  return std::abs(analytic - numeric) / std::max(a, n);
}

/// Compares `grad(point)` against central differences of `loss` on
/// `sample_count` uniformly drawn coordinates of `point`.
template <class LossFn, class GradFn>
FdReport finite_difference_check(LossFn&& loss, GradFn&& grad, const Matrix& point, double epsilon,
                                 std::size_t sample_count, Rng& rng, double floor = 1e-8) {
  if (!(epsilon > 0.0)) fail(ErrorCode::InvalidArgument, "epsilon must be positive");
  const Matrix analytic = grad(point);
  if (analytic.rows() != point.rows() || analytic.cols() != point.cols()) {
    fail(ErrorCode::ShapeMismatch, "gradient shape differs from instance shape");
  }
  FdReport report;
  if (point.size() == 0) return report;
  Matrix x = point;
  double sum = 0.0;
  for (std::size_t s = 0; s < sample_count; ++s) {
    const auto r = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::size_t>(point.rows())));
    const auto c = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::size_t>(point.cols())));
    const double original = x(r, c);
    x(r, c) = original + epsilon;
    const double up = loss(x);
    x(r, c) = original - epsilon;
    const double down = loss(x);
    x(r, c) = original;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double err = relative_error(analytic(r, c), numeric, floor);
    report.max_rel_err = std::max(report.max_rel_err, err);
    sum += err;
    ++report.compared;
  }
  report.mean_rel_err = sum / static_cast<double>(report.compared);
  return report;
}

}  // namespace jointgcg
