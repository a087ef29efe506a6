#pragma once

// Greedy coordinate attack on the gated joint loss with full re-retrieval per candidate.

#include "jointgcg/awf.hpp"
#include "jointgcg/core.hpp"
#include "jointgcg/cvp.hpp"
#include "jointgcg/defenses.hpp"
#include "jointgcg/gta.hpp"
#include "jointgcg/models.hpp"
#include "jointgcg/rag_env.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace jointgcg {

enum class AttackMode { Full, FixedAlpha, NoRetLoss, NoCvpGta };

struct ModeSpec {
  AttackMode kind = AttackMode::Full;
  double fixed_alpha = 0.5;

  bool operator==(const ModeSpec&) const = default;
};

inline std::string to_string(const ModeSpec& m) {
  switch (m.kind) {
    case AttackMode::Full: return "full";
    case AttackMode::FixedAlpha: return "fixed_alpha:" + format_double(m.fixed_alpha);
    case AttackMode::NoRetLoss: return "no_ret_loss";
    case AttackMode::NoCvpGta: return "no_cvp_gta";
  }
  return "?";
}

/// "full", "no_ret_loss", "no_cvp_gta" or "fixed_alpha:<x>".
inline ModeSpec parse_mode(std::string_view text) {
  if (text == "full") return {AttackMode::Full, 0.5};
  if (text == "no_ret_loss") return {AttackMode::NoRetLoss, 0.0};
  if (text == "no_cvp_gta") return {AttackMode::NoCvpGta, 0.5};
  constexpr std::string_view prefix = "fixed_alpha:";
  if (text.starts_with(prefix)) {
    const double a = parse_double(text.substr(prefix.size()));
    if (!(a >= 0.0 && a <= 1.0)) fail(ErrorCode::ConfigInvalid, "fixed alpha must be in [0, 1]");
    return {AttackMode::FixedAlpha, a};
  }
  fail(ErrorCode::ConfigInvalid, "unknown attack mode '" + std::string(text) + "'");
}

enum class SamplingLaw { Random, Exhaustive };

struct CandidateConfig {
  std::size_t top_n = 16;
  std::size_t positions_m = 0;  // 0 selects every position
  std::size_t batch_b = 128;
  std::size_t substitutions = 1;
  SamplingLaw sampling = SamplingLaw::Random;

  std::size_t positions(std::size_t n_adv) const { return positions_m == 0 ? n_adv : positions_m; }

  void validate(std::size_t vocab_size, std::size_t n_adv) const {
    if (top_n < 1 || top_n > vocab_size) fail(ErrorCode::ConfigInvalid, "top_n must be in [1, V_gen]");
    const std::size_t m = positions(n_adv);
    if (m < 1 || m > n_adv) fail(ErrorCode::ConfigInvalid, "positions_m must be in [1, n_adv]");
    if (batch_b < 1) fail(ErrorCode::ConfigInvalid, "batch_b must be >= 1");
    if (substitutions < 1 || substitutions > m) fail(ErrorCode::ConfigInvalid, "substitutions must be in [1, positions_m]");
    if (sampling == SamplingLaw::Exhaustive && substitutions != 1) {
      fail(ErrorCode::ConfigInvalid, "exhaustive sampling enumerates single substitutions only");
    }
  }
};

struct AttackConfig {
  CandidateConfig candidates;
  std::size_t steps = 64;
  std::size_t warmup_steps = 0;  // batch mode: retrieval-only steps with alpha pinned to 1
  ModeSpec mode;
  bool unit_fusion = false;  // grad_gen + aligned instead of the alpha-weighted sum
  std::optional<double> ppl_threshold;
  std::uint64_t seed = 0;
};

/// Tokens an adversarial position may take: ASCII and not end-of-sequence.
inline std::vector<bool> adversarial_mask(const Vocabulary& vocab) {
  std::vector<bool> mask = vocab.ascii_mask();
  if (!mask.empty()) mask[GeneratorModel::kEndOfSequence] = false;
  return mask;
}

/// Per position, the `top_n` allowed tokens with the most negative gradient (ties: lowest id).
inline std::vector<std::vector<TokenId>> top_tokens(const Matrix& grad, const std::vector<bool>& allowed,
                                                    std::size_t top_n) {
  std::vector<std::vector<TokenId>> out;
  std::vector<TokenId> ids;
  for (std::size_t v = 0; v < allowed.size(); ++v) {
    if (allowed[v]) ids.push_back(static_cast<TokenId>(v));
  }
  for (Eigen::Index p = 0; p < grad.rows(); ++p) {
    std::vector<TokenId> order = ids;
    const std::size_t n = std::min(top_n, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                      [&](TokenId a, TokenId b) {
                        const double ga = grad(p, a), gb = grad(p, b);
                        return ga != gb ? ga < gb : a < b;
                      });
    order.resize(n);
    out.push_back(std::move(order));
  }
  return out;
}

struct CandidateSet {
  std::vector<TokenIds> sequences;  // the incumbent is last
  std::size_t incumbent_index() const { return sequences.size() - 1; }
};

inline CandidateSet propose_candidates(const Matrix& grad, const TokenIds& seq, const CandidateConfig& cfg,
                                       const std::vector<bool>& allowed, Rng& rng) {
  if (static_cast<std::size_t>(grad.rows()) != seq.size() || static_cast<std::size_t>(grad.cols()) != allowed.size()) {
    fail(ErrorCode::ShapeMismatch, "gradient must be n_adv x V_gen");
  }
  cfg.validate(allowed.size(), seq.size());
  const auto top = top_tokens(grad, allowed, cfg.top_n);
  const std::size_t m = cfg.positions(seq.size());
  std::vector<std::size_t> positions;
  if (m == seq.size()) {
    positions.resize(m);
    std::iota(positions.begin(), positions.end(), 0);
  } else {
    positions = rng.sample_distinct(seq.size(), m);
  }
  CandidateSet set;
  if (cfg.sampling == SamplingLaw::Exhaustive) {
    std::sort(positions.begin(), positions.end());
    for (std::size_t p : positions) {
      std::vector<TokenId> tokens = top[p];
      std::sort(tokens.begin(), tokens.end());
      for (TokenId t : tokens) {
        if (t == seq[p]) continue;
        TokenIds c = seq;
        c[p] = t;
        set.sequences.push_back(std::move(c));
      }
    }
  } else {
    for (std::size_t b = 0; b < cfg.batch_b; ++b) {
      TokenIds c = seq;
      for (std::size_t pick : rng.sample_distinct(m, cfg.substitutions)) {
        const std::size_t p = positions[pick];
        c[p] = top[p][rng.uniform_index(top[p].size())];
      }
      set.sequences.push_back(std::move(c));
    }
  }
  set.sequences.push_back(seq);
  return set;
}

/// Poison text and its retriever-side encoding.
struct PoisonTokens {
  std::string adv_text;
  std::string text;
  TokenIds ret_ids;
  std::vector<Span> ret_offsets;
  std::size_t ret_adv_count = 0;  // leading retriever tokens overlapping the adversarial text
  Vector ret_unit;
};

/// Where the poison lands for one query.
struct Placement {
  double score = 0.0;
  bool retrieved = false;
  std::optional<std::size_t> rank;
  std::size_t context_rank = 1;  // actual rank, or forced to the last slot when not retrieved
};

struct LossBreakdown {
  double l_ret = 0.0;
  double l_gen = 0.0;
  double l_joint = 0.0;
  double objective = 0.0;  // what selection minimizes under the mode
  double alpha = 0.0;
  bool retrieved = false;
  std::optional<std::size_t> rank;
};

/// Joint objective over one or more target queries sharing a poison payload.
class JointObjective {
 public:
  JointObjective(const RagEnvironment& env, std::vector<QueryTarget> targets, std::string payload,
                 const ProjectionMatrix* projection = nullptr, std::string poison_id = "poison")
      : env_(&env), targets_(std::move(targets)), payload_(std::move(payload)), projection_(projection),
        poison_id_(std::move(poison_id)) {
    if (targets_.empty()) fail(ErrorCode::EmptyQuerySet, "attack needs at least one target query");
    const auto& gen_tok = env.generator().tokenizer;
    const auto& tpl = env.prompt_template();
    preamble_ids_ = gen_tok.tokenize(tpl.preamble).token_ids;
    marker_ids_ = gen_tok.tokenize(tpl.context_marker).token_ids;
    payload_ids_ = gen_tok.tokenize(payload_).token_ids;
    if (env.k() < 2) std::clog << "note: k < 2, fusion weight fixed at 0.5\n";
    if (projection_ && (static_cast<std::size_t>(projection_->values.rows()) != env.retriever().model.vocab_size() ||
                        static_cast<std::size_t>(projection_->values.cols()) != env.generator().model.vocab_size())) {
      fail(ErrorCode::DimensionMismatch, "projection must be V_ret x V_gen");
    }
    for (const auto& t : targets_) {
      if (t.target.empty()) fail(ErrorCode::EmptyTarget, "target answer is empty");
      QueryCache c;
      c.q_unit = env.retriever().embed_text(t.query);
      auto all = env.index().rank_all(c.q_unit);
      if (all.size() > env.k()) all.resize(env.k());
      c.benign = std::move(all);
      for (const auto& d : c.benign) c.benign_ids.push_back(gen_tok.tokenize(env.corpus().find(d.id)->text).token_ids);
      c.tail_ids = gen_tok.tokenize(tpl.query_marker + t.query + tpl.answer_marker).token_ids;
      c.target_ids = gen_tok.tokenize(t.target).token_ids;
      queries_.push_back(std::move(c));
    }
  }

  const RagEnvironment& env() const { return *env_; }
  const std::vector<QueryTarget>& targets() const { return targets_; }
  std::size_t query_count() const { return targets_.size(); }
  const std::string& payload() const { return payload_; }
  const std::string& poison_id() const { return poison_id_; }
  const ProjectionMatrix* projection() const { return projection_; }

  /// Whether the top-k gap used by the fusion weight counts the poison when it is retrieved.
  void set_gap_includes_poison(bool include) { gap_includes_poison_ = include; }
  bool gap_includes_poison() const { return gap_includes_poison_; }

  std::string poison_text(const TokenIds& s_adv) const { return env_->generator().tokenizer.detokenize(s_adv) + payload_; }

  PoisonTokens encode(const TokenIds& s_adv) const {
    PoisonTokens p;
    p.adv_text = env_->generator().tokenizer.detokenize(s_adv);
    p.text = p.adv_text + payload_;
    auto r = env_->retriever().tokenizer.tokenize(p.text);
    p.ret_ids = std::move(r.token_ids);
    p.ret_offsets = std::move(r.offsets);
    while (p.ret_adv_count < p.ret_offsets.size() && p.ret_offsets[p.ret_adv_count].start < p.adv_text.size()) {
      ++p.ret_adv_count;
    }
    p.ret_unit = embed(env_->retriever().model, p.ret_ids);
    return p;
  }

  Placement place(std::size_t q, const PoisonTokens& p) const {
    const auto& c = queries_.at(q);
    Placement out;
    out.score = c.q_unit.dot(p.ret_unit);
    const ScoredDocument poison{poison_id_, out.score};
    std::size_t ahead = 0;
    while (ahead < c.benign.size() && ranks_before(c.benign[ahead], poison)) ++ahead;
    out.retrieved = ahead < env_->k();
    if (out.retrieved) out.rank = ahead + 1;
    out.context_rank = out.retrieved ? ahead + 1 : std::min(env_->k(), c.benign.size() + 1);
    return out;
  }

  /// AWF weight from the current retrieval state, or the mode's pinned value.
  double alpha(std::size_t q, const Placement& pl, const ModeSpec& mode) const {
    switch (mode.kind) {
      case AttackMode::FixedAlpha: return mode.fixed_alpha;
      case AttackMode::NoRetLoss: return 0.0;
      default: break;
    }
    const auto& c = queries_.at(q);
    std::vector<double> scores;
    for (const auto& d : c.benign) scores.push_back(d.score);
    if (pl.retrieved && gap_includes_poison_) {
      scores.insert(scores.begin() + static_cast<std::ptrdiff_t>(*pl.rank - 1), pl.score);
    }
    if (scores.size() > env_->k()) scores.resize(env_->k());
    if (scores.size() < 2 || c.benign.empty()) return 0.5;
    return fusion_weight(stability({pl.score, c.benign.front().score, scores})).alpha;
  }

  /// Generator prompt with the poison at `poison_rank` (absent when nullopt).
  TokenIds prompt_ids(std::size_t q, const TokenIds& s_adv, std::optional<std::size_t> poison_rank,
                      Span* adv_span = nullptr) const {
    const auto& c = queries_.at(q);
    TokenIds ids = preamble_ids_;
    const std::size_t benign_used = std::min(c.benign.size(), poison_rank ? env_->k() - 1 : env_->k());
    const std::size_t slots = benign_used + (poison_rank ? 1 : 0);
    std::size_t bi = 0;
    for (std::size_t slot = 1; slot <= slots; ++slot) {
      ids.insert(ids.end(), marker_ids_.begin(), marker_ids_.end());
      if (poison_rank && slot == *poison_rank) {
        const std::size_t start = ids.size();
        ids.insert(ids.end(), s_adv.begin(), s_adv.end());
        if (adv_span) *adv_span = {start, ids.size()};
        ids.insert(ids.end(), payload_ids_.begin(), payload_ids_.end());
      } else {
        const auto& b = c.benign_ids[bi++];
        ids.insert(ids.end(), b.begin(), b.end());
      }
    }
    ids.insert(ids.end(), c.tail_ids.begin(), c.tail_ids.end());
    return ids;
  }

  /// l_joint = (1 - alpha) [retrieved] l_gen + alpha l_ret, with l_gen always measured with
  /// the poison in context (at its rank, or the last slot) for reporting.
  LossBreakdown loss(std::size_t q, const TokenIds& s_adv, const PoisonTokens& p, double alpha,
                     AttackMode mode) const {
    const auto& c = queries_.at(q);
    const Placement pl = place(q, p);
    LossBreakdown out;
    out.alpha = alpha;
    out.retrieved = pl.retrieved;
    out.rank = pl.rank;
    out.l_ret = -pl.score;
    out.l_gen = generation_loss(env_->generator().model, prompt_ids(q, s_adv, pl.context_rank), c.target_ids);
    out.l_joint = (1.0 - alpha) * (pl.retrieved ? out.l_gen : 0.0) + alpha * out.l_ret;
    out.objective = mode == AttackMode::NoRetLoss ? out.l_gen : out.l_joint;
    return out;
  }

  Matrix generator_gradient(std::size_t q, const TokenIds& s_adv, std::size_t context_rank) const {
    Span span;
    const TokenIds prompt = prompt_ids(q, s_adv, context_rank, &span);
    return generation_grad(env_->generator().model, prompt, queries_.at(q).target_ids, span);
  }

  /// GTA(CVP(grad L_ret)) on the adversarial positions, n_adv x V_gen.
  Matrix aligned_retriever_gradient(std::size_t q, const TokenIds& s_adv, const PoisonTokens& p) const {
    if (!projection_) fail(ErrorCode::InvalidArgument, "joint gradient needs a projection matrix");
    const Matrix ret = retrieval_grad_at(env_->retriever().model, queries_.at(q).q_unit, p.ret_ids, {0, p.ret_adv_count});
    const Matrix projected = project_gradients(*projection_, ret);
    const auto gen_offsets = env_->generator().tokenizer.tokenize(p.adv_text).offsets;
    if (gen_offsets.size() != s_adv.size()) fail(ErrorCode::ShapeMismatch, "adversarial sequence does not round-trip");
    const std::vector<Span> ret_offsets(p.ret_offsets.begin(), p.ret_offsets.begin() + static_cast<std::ptrdiff_t>(p.ret_adv_count));
    return align_gradients(build_alignment(gen_offsets, ret_offsets), projected);
  }

  /// Proposal gradient for one query under `mode`.
  Matrix gradient(std::size_t q, const TokenIds& s_adv, const PoisonTokens& p, double alpha, const ModeSpec& mode,
                  bool unit_fusion = false) const {
    const Placement pl = place(q, p);
    if (mode.kind == AttackMode::NoRetLoss || mode.kind == AttackMode::NoCvpGta) {
      return generator_gradient(q, s_adv, pl.context_rank);
    }
    const double w_gen = pl.retrieved ? (unit_fusion ? 1.0 : 1.0 - alpha) : 0.0;
    const double w_ret = unit_fusion ? 1.0 : alpha;
    Matrix g = Matrix::Zero(static_cast<Eigen::Index>(s_adv.size()),
                            static_cast<Eigen::Index>(env_->generator().model.vocab_size()));
    if (w_gen != 0.0) g += w_gen * generator_gradient(q, s_adv, pl.context_rank);
    if (w_ret != 0.0) g += w_ret * aligned_retriever_gradient(q, s_adv, p);
    return g;
  }

  /// Greedy answer under the actual retrieval contains the target.
  bool succeeds(std::size_t q, const TokenIds& s_adv, const PoisonTokens& p) const {
    const Placement pl = place(q, p);
    const TokenIds prompt = prompt_ids(q, s_adv, pl.rank);
    const auto& gen = env_->generator();
    const std::string out = gen.tokenizer.detokenize(greedy_decode(gen.model, prompt, env_->max_new_tokens()));
    return out.find(targets_[q].target) != std::string::npos;
  }

 private:
  struct QueryCache {
    Vector q_unit;
    std::vector<ScoredDocument> benign;  // benign top-k
    std::vector<TokenIds> benign_ids;
    TokenIds tail_ids;
    TokenIds target_ids;
  };

  const RagEnvironment* env_;
  std::vector<QueryTarget> targets_;
  std::string payload_;
  const ProjectionMatrix* projection_;
  std::string poison_id_;
  TokenIds preamble_ids_;
  TokenIds marker_ids_;
  TokenIds payload_ids_;
  std::vector<QueryCache> queries_;
  bool gap_includes_poison_ = true;
};

/// Mean losses over the query set at fixed per-query alphas.
struct BatchLoss {
  double l_ret = 0.0;
  double l_gen = 0.0;
  double l_joint = 0.0;
  double objective = 0.0;
  std::size_t retrieved = 0;
  std::vector<LossBreakdown> per_query;
};

inline BatchLoss batch_loss(const JointObjective& obj, const TokenIds& s_adv, const PoisonTokens& p,
                            const std::vector<double>& alphas, AttackMode mode) {
  BatchLoss out;
  const double n = static_cast<double>(obj.query_count());
  for (std::size_t q = 0; q < obj.query_count(); ++q) {
    auto l = obj.loss(q, s_adv, p, alphas[q], mode);
    out.l_ret += l.l_ret / n;
    out.l_gen += l.l_gen / n;
    out.l_joint += l.l_joint / n;
    out.objective += l.objective / n;
    out.retrieved += l.retrieved ? 1 : 0;
    out.per_query.push_back(l);
  }
  return out;
}

inline std::vector<double> step_alphas(const JointObjective& obj, const PoisonTokens& p, const ModeSpec& mode) {
  std::vector<double> alphas;
  for (std::size_t q = 0; q < obj.query_count(); ++q) alphas.push_back(obj.alpha(q, obj.place(q, p), mode));
  return alphas;
}

inline Matrix batch_gradient(const JointObjective& obj, const TokenIds& s_adv, const PoisonTokens& p,
                             const std::vector<double>& alphas, const ModeSpec& mode, bool unit_fusion) {
  Matrix g;
  for (std::size_t q = 0; q < obj.query_count(); ++q) {
    Matrix gq = obj.gradient(q, s_adv, p, alphas[q], mode, unit_fusion);
    if (q == 0) g = std::move(gq);
    else g += gq;
  }
  return g / static_cast<double>(obj.query_count());
}

struct TraceRow {
  std::size_t step = 0;
  double l_ret = 0.0;
  double l_gen = 0.0;
  double l_joint = 0.0;
  double alpha = 0.0;   // mean over queries
  std::optional<std::size_t> rank;  // single-query runs
  std::size_t retrieved_count = 0;
  std::string sequence;  // adversarial text
  double objective = 0.0;
  double incumbent_objective = 0.0;  // incumbent at this step's alphas
  double best_objective = 0.0;
  double success_rate = 0.0;
  bool accepted = false;  // selection differs from the incumbent
  std::size_t candidates = 0;
  std::optional<double> perplexity;
};

struct AttackState {
  TokenIds sequence;
  std::size_t step = 0;
  double best_objective = std::numeric_limits<double>::infinity();
  std::vector<TraceRow> trace;
};

/// Losses and success of the current sequence without selection (trace row 0).
inline TraceRow describe(const JointObjective& obj, const AttackState& state, const ModeSpec& mode) {
  const PoisonTokens p = obj.encode(state.sequence);
  const auto alphas = step_alphas(obj, p, mode);
  const BatchLoss l = batch_loss(obj, state.sequence, p, alphas, mode.kind);
  TraceRow row;
  row.step = state.step;
  row.l_ret = l.l_ret;
  row.l_gen = l.l_gen;
  row.l_joint = l.l_joint;
  row.alpha = std::accumulate(alphas.begin(), alphas.end(), 0.0) / static_cast<double>(alphas.size());
  if (obj.query_count() == 1) row.rank = l.per_query[0].rank;
  row.retrieved_count = l.retrieved;
  row.sequence = p.adv_text;
  row.objective = row.incumbent_objective = row.best_objective = l.objective;
  std::size_t wins = 0;
  for (std::size_t q = 0; q < obj.query_count(); ++q) wins += obj.succeeds(q, state.sequence, p) ? 1 : 0;
  row.success_rate = static_cast<double>(wins) / static_cast<double>(obj.query_count());
  return row;
}

/// Keeps candidates that re-tokenize to themselves and, when constrained, stay under the
/// perplexity threshold. The incumbent is never dropped.
inline std::vector<std::size_t> feasible_candidates(const JointObjective& obj, const CandidateSet& set,
                                                    const std::optional<double>& ppl_threshold) {
  const auto& gen = obj.env().generator();
  std::vector<std::size_t> kept;
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < set.sequences.size(); ++i) {
    if (i != set.incumbent_index() && !gen.tokenizer.round_trips(set.sequences[i])) continue;
    kept.push_back(i);
    texts.push_back(obj.poison_text(set.sequences[i]));
  }
  if (!ppl_threshold) return kept;
  const auto survivors = ppl_constrained_filter(texts, texts.size() - 1, gen, *ppl_threshold);
  std::vector<std::size_t> out;
  for (std::size_t s : survivors) out.push_back(kept[s]);
  return out;
}

struct StepReport {
  std::size_t selected = 0;
  std::size_t evaluated = 0;
  std::vector<double> alphas;
  std::vector<double> objectives;  // per evaluated candidate, in candidate order
};

/// Index of the minimum; ties resolve to the earliest entry.
inline std::size_t argmin_earliest(const std::vector<double>& values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] < values[best]) best = i;
  }
  return best;
}

/// One greedy coordinate step; appends a trace row.
inline StepReport step(AttackState& state, const JointObjective& obj, const AttackConfig& cfg, const ModeSpec& mode,
                       Rng& rng) {
  const PoisonTokens inc = obj.encode(state.sequence);
  StepReport report;
  report.alphas = step_alphas(obj, inc, mode);
  const Matrix grad = batch_gradient(obj, state.sequence, inc, report.alphas, mode, cfg.unit_fusion);
  const auto allowed = adversarial_mask(obj.env().generator().model.vocabulary());
  const CandidateSet set = propose_candidates(grad, state.sequence, cfg.candidates, allowed, rng);
  const auto feasible = feasible_candidates(obj, set, cfg.ppl_threshold);
  std::vector<BatchLoss> losses;
  std::vector<PoisonTokens> encoded;
  for (std::size_t i : feasible) {
    encoded.push_back(obj.encode(set.sequences[i]));
    losses.push_back(batch_loss(obj, set.sequences[i], encoded.back(), report.alphas, mode.kind));
    report.objectives.push_back(losses.back().objective);
  }
  report.evaluated = feasible.size();
  const std::size_t pick = argmin_earliest(report.objectives);
  report.selected = feasible[pick];
  const BatchLoss& chosen = losses[pick];

  TraceRow row;
  row.step = ++state.step;
  row.l_ret = chosen.l_ret;
  row.l_gen = chosen.l_gen;
  row.l_joint = chosen.l_joint;
  row.alpha = std::accumulate(report.alphas.begin(), report.alphas.end(), 0.0) / static_cast<double>(report.alphas.size());
  if (obj.query_count() == 1) row.rank = chosen.per_query[0].rank;
  row.retrieved_count = chosen.retrieved;
  row.objective = chosen.objective;
  row.incumbent_objective = report.objectives.back();
  row.accepted = set.sequences[report.selected] != state.sequence;
  row.candidates = feasible.size();
  if (row.accepted) state.sequence = set.sequences[report.selected];
  row.sequence = encoded[pick].adv_text;
  state.best_objective = std::min(state.best_objective, row.objective);
  row.best_objective = state.best_objective;
  if (cfg.ppl_threshold) row.perplexity = perplexity(obj.env().generator(), encoded[pick].text);
  std::size_t wins = 0;
  for (std::size_t q = 0; q < obj.query_count(); ++q) wins += obj.succeeds(q, state.sequence, encoded[pick]) ? 1 : 0;
  row.success_rate = static_cast<double>(wins) / static_cast<double>(obj.query_count());
  state.trace.push_back(std::move(row));
  return report;
}

struct AttackResult {
  TokenIds sequence;
  std::string poison_text;
  std::vector<TraceRow> trace;
  std::vector<QueryOutcome> outcomes;
  AttackMetrics metrics;
  std::optional<std::size_t> first_success_step;  // first trace step where every query succeeds
};

inline AttackResult finish_attack(const JointObjective& obj, AttackState state) {
  AttackResult r;
  r.sequence = state.sequence;
  r.poison_text = obj.poison_text(state.sequence);
  for (const auto& row : state.trace) {
    if (row.success_rate >= 1.0) {
      r.first_success_step = row.step;
      break;
    }
  }
  r.trace = std::move(state.trace);
  const OverlayDocument overlay{obj.poison_id(), r.poison_text};
  for (const auto& t : obj.targets()) r.outcomes.push_back(obj.env().evaluate(t.query, t.target, overlay));
  r.metrics = summarize(r.outcomes);
  return r;
}

/// Optimizes `initial` against every query in `obj` at once (means of losses and gradients).
inline AttackResult run_batch_attack(const JointObjective& obj, const TokenIds& initial, const AttackConfig& cfg) {
  if (obj.query_count() == 0) fail(ErrorCode::EmptyQuerySet, "no target queries");
  const auto allowed = adversarial_mask(obj.env().generator().model.vocabulary());
  for (TokenId t : initial) {
    if (!obj.env().generator().model.vocabulary().valid(t) || !allowed[static_cast<std::size_t>(t)]) {
      fail(ErrorCode::InvalidArgument, "initial adversarial token outside the allowed set");
    }
  }
  cfg.candidates.validate(allowed.size(), initial.size());
  Rng rng(cfg.seed);
  AttackState state;
  state.sequence = initial;
  state.trace.push_back(describe(obj, state, cfg.mode));
  state.best_objective = state.trace.back().objective;
  const ModeSpec warm{AttackMode::FixedAlpha, 1.0};
  for (std::size_t s = 0; s < cfg.warmup_steps; ++s) step(state, obj, cfg, warm, rng);
  if (cfg.warmup_steps > 0) {
    state.best_objective = describe(obj, state, cfg.mode).objective;
  }
  for (std::size_t s = 0; s < cfg.steps; ++s) step(state, obj, cfg, cfg.mode, rng);
  return finish_attack(obj, std::move(state));
}

inline AttackResult run_attack(const JointObjective& obj, const TokenIds& initial, const AttackConfig& cfg) {
  return run_batch_attack(obj, initial, cfg);
}

struct OracleResult {
  TokenIds sequence;
  double objective = 0.0;
  std::size_t index = 0;  // position in the enumeration (incumbent last)
};

/// Exhaustive single-substitution neighbourhood, enumerated position-major with
/// ascending token id, incumbent last; same feasibility rules and tie-break as `step`.
inline OracleResult brute_force_step_oracle(const AttackState& state, const JointObjective& obj, const AttackConfig& cfg,
                                            const ModeSpec& mode) {
  const auto& vocab = obj.env().generator().model.vocabulary();
  if (vocab.size() > 64 || state.sequence.size() > 8) {
    fail(ErrorCode::GuardrailExceeded, "oracle limited to V_gen <= 64 and n_adv <= 8");
  }
  const auto allowed = adversarial_mask(vocab);
  const PoisonTokens inc = obj.encode(state.sequence);
  const auto alphas = step_alphas(obj, inc, mode);
  CandidateSet set;
  for (std::size_t p = 0; p < state.sequence.size(); ++p) {
    for (std::size_t v = 0; v < vocab.size(); ++v) {
      const auto t = static_cast<TokenId>(v);
      if (!allowed[v] || t == state.sequence[p]) continue;
      TokenIds c = state.sequence;
      c[p] = t;
      set.sequences.push_back(std::move(c));
    }
  }
  set.sequences.push_back(state.sequence);
  const auto feasible = feasible_candidates(obj, set, cfg.ppl_threshold);
  std::vector<double> values;
  for (std::size_t i : feasible) {
    values.push_back(batch_loss(obj, set.sequences[i], obj.encode(set.sequences[i]), alphas, mode.kind).objective);
  }
  const std::size_t pick = argmin_earliest(values);
  return {set.sequences[feasible[pick]], values[pick], feasible[pick]};
}

inline nlohmann::json to_json(const TraceRow& r) {
  nlohmann::json j{{"step", r.step},
                   {"l_ret", r.l_ret},
                   {"l_gen", r.l_gen},
                   {"l_joint", r.l_joint},
                   {"alpha", r.alpha},
                   {"rank", r.rank ? nlohmann::json(*r.rank) : nlohmann::json(nullptr)},
                   {"retrieved_count", r.retrieved_count},
                   {"sequence", r.sequence},
                   {"objective", r.objective},
                   {"incumbent_objective", r.incumbent_objective},
                   {"best_objective", r.best_objective},
                   {"success_rate", r.success_rate},
                   {"accepted", r.accepted},
                   {"candidates", r.candidates}};
  if (r.perplexity) j["perplexity"] = *r.perplexity;
  return j;
}

inline void write_trace_jsonl(std::ostream& out, const std::vector<TraceRow>& trace) {
  for (const auto& r : trace) out << to_json(r).dump() << '\n';
}

}  // namespace jointgcg
