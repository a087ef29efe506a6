#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

using namespace jointgcg;
using jointgcg::testing::bang_sequence;
using jointgcg::testing::make_tiny_world;

namespace {

std::string payload_for(const QueryTarget& t) { return " " + t.query + " " + default_misinformation(t.target); }

AttackConfig exhaustive_config(std::size_t vocab) {
  AttackConfig cfg;
  cfg.candidates.sampling = SamplingLaw::Exhaustive;
  cfg.candidates.top_n = vocab;
  cfg.steps = 4;
  return cfg;
}

}  // namespace

TEST(Attack, ParseModes) {
  EXPECT_EQ(parse_mode("full").kind, AttackMode::Full);
  EXPECT_EQ(parse_mode("no_ret_loss").kind, AttackMode::NoRetLoss);
  EXPECT_EQ(parse_mode("no_cvp_gta").kind, AttackMode::NoCvpGta);
  EXPECT_DOUBLE_EQ(parse_mode("fixed_alpha:0.25").fixed_alpha, 0.25);
  EXPECT_EQ(to_string(parse_mode("fixed_alpha:0.25")), "fixed_alpha:0.25");
  EXPECT_THROW(parse_mode("fixed_alpha:2"), Error);
  EXPECT_THROW(parse_mode("bogus"), Error);
}

TEST(Attack, TopTokensBreakTiesByLowestId) {
  Matrix g(1, 5);
  g << 0.0, -1.0, -1.0, 2.0, -3.0;
  const std::vector<bool> allowed{true, true, true, true, false};
  const auto top = top_tokens(g, allowed, 2);
  ASSERT_EQ(top[0].size(), 2u);
  EXPECT_EQ(top[0][0], 1);
  EXPECT_EQ(top[0][1], 2);
}

TEST(Attack, AdversarialMaskExcludesEndOfSequence) {
  const auto mask = adversarial_mask(jointgcg::testing::tiny_generator_vocabulary());
  EXPECT_FALSE(mask[GeneratorModel::kEndOfSequence]);
  EXPECT_TRUE(mask[1]);
}

TEST(Attack, ExhaustiveCandidatesArePositionMajorAscending) {
  Matrix g = Matrix::Zero(2, 4);
  const std::vector<bool> allowed{false, true, true, true};
  CandidateConfig cfg;
  cfg.sampling = SamplingLaw::Exhaustive;
  cfg.top_n = 3;
  Rng rng(1);
  const TokenIds seq{1, 2};
  const auto set = propose_candidates(g, seq, cfg, allowed, rng);
  const std::vector<TokenIds> expected{{2, 2}, {3, 2}, {1, 1}, {1, 3}, {1, 2}};
  EXPECT_EQ(set.sequences, expected);
  EXPECT_EQ(set.incumbent_index(), 4u);
}

TEST(Attack, RandomCandidatesRespectTopSetAndSubstitutions) {
  Rng grng(3);
  const Matrix g = jointgcg::testing::random_matrix(6, 10, 1.0, grng);
  std::vector<bool> allowed(10, true);
  allowed[0] = false;
  CandidateConfig cfg;
  cfg.top_n = 3;
  cfg.batch_b = 50;
  cfg.substitutions = 2;
  cfg.positions_m = 4;
  const TokenIds seq(6, 5);
  const auto top = top_tokens(g, allowed, 3);
  Rng rng(7);
  const auto set = propose_candidates(g, seq, cfg, allowed, rng);
  ASSERT_EQ(set.sequences.size(), 51u);
  EXPECT_EQ(set.sequences.back(), seq);
  std::set<std::size_t> touched;
  for (std::size_t b = 0; b < 50; ++b) {
    std::size_t changed = 0;
    for (std::size_t p = 0; p < seq.size(); ++p) {
      const TokenId t = set.sequences[b][p];
      if (t == seq[p]) continue;
      ++changed;
      touched.insert(p);
      EXPECT_NE(std::find(top[p].begin(), top[p].end(), t), top[p].end());
    }
    EXPECT_LE(changed, 2u);
  }
  EXPECT_LE(touched.size(), 4u);
}

TEST(Attack, CandidateConfigValidation) {
  CandidateConfig cfg;
  cfg.top_n = 0;
  EXPECT_THROW(cfg.validate(10, 4), Error);
  cfg.top_n = 3;
  cfg.positions_m = 5;
  EXPECT_THROW(cfg.validate(10, 4), Error);
  cfg.positions_m = 2;
  cfg.substitutions = 3;
  EXPECT_THROW(cfg.validate(10, 4), Error);
  cfg.substitutions = 2;
  cfg.sampling = SamplingLaw::Exhaustive;
  EXPECT_THROW(cfg.validate(10, 4), Error);
}

TEST(Attack, ArgminTiesGoToEarliest) {
  EXPECT_EQ(argmin_earliest({3.0, 1.0, 1.0, 2.0}), 1u);
  EXPECT_EQ(argmin_earliest({1.0}), 0u);
}

TEST(Attack, StepMatchesBruteForceOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto w = make_tiny_world(seed);
    const JointObjective obj(*w.env, {w.target}, payload_for(w.target), &w.projection);
    const AttackConfig cfg = exhaustive_config(w.generator->model.vocab_size());
    AttackState state;
    state.sequence = bang_sequence(w, 1 + seed % 6);
    Rng rng(seed);
    for (int s = 0; s < 3; ++s) {
      const auto oracle = brute_force_step_oracle(state, obj, cfg, cfg.mode);
      const auto report = step(state, obj, cfg, cfg.mode, rng);
      EXPECT_EQ(state.sequence, oracle.sequence) << "seed " << seed << " step " << s;
      EXPECT_EQ(state.trace.back().objective, oracle.objective);
      EXPECT_EQ(report.selected, oracle.index);
    }
  }
}

TEST(Attack, OracleGuardrail) {
  const auto w = make_tiny_world(1);
  const JointObjective obj(*w.env, {w.target}, payload_for(w.target), &w.projection);
  AttackState state;
  state.sequence = bang_sequence(w, 9);
  EXPECT_THROW(brute_force_step_oracle(state, obj, AttackConfig{}, ModeSpec{}), Error);
}

TEST(Attack, GatedLossOutsideTopK) {
  std::size_t outside = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto w = make_tiny_world(seed, false, 1);
    const JointObjective obj(*w.env, {w.target}, payload_for(w.target), &w.projection);
    AttackConfig cfg;
    cfg.steps = 8;
    cfg.candidates.batch_b = 16;
    cfg.seed = seed;
    const auto r = run_attack(obj, bang_sequence(w, 4), cfg);
    for (const auto& row : r.trace) {
      if (row.rank) continue;
      ++outside;
      EXPECT_LE(std::abs(row.l_joint - row.alpha * row.l_ret), 1e-12);
    }
  }
  EXPECT_GT(outside, 0u);
}

TEST(Attack, BestObjectiveNeverIncreases) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto w = make_tiny_world(seed);
    const JointObjective obj(*w.env, {w.target}, payload_for(w.target), &w.projection);
    AttackConfig cfg;
    cfg.steps = 10;
    cfg.candidates.batch_b = 16;
    cfg.seed = seed;
    const auto r = run_attack(obj, bang_sequence(w, 5), cfg);
    ASSERT_EQ(r.trace.size(), 11u);
    for (std::size_t i = 1; i < r.trace.size(); ++i) {
      EXPECT_LE(r.trace[i].best_objective, r.trace[i - 1].best_objective);
      EXPECT_LE(r.trace[i].objective, r.trace[i].incumbent_objective);
    }
  }
}

TEST(Attack, JointGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto w = make_tiny_world(seed, true);
    const JointObjective obj(*w.env, {w.target}, payload_for(w.target), &w.projection);
    const TokenIds s_adv = bang_sequence(w, 4);
    const PoisonTokens p = obj.encode(s_adv);
    ASSERT_EQ(p.ret_adv_count, s_adv.size());
    const Placement pl = obj.place(0, p);
    const double alpha = 0.3;
    Span span;
    const TokenIds prompt = obj.prompt_ids(0, s_adv, pl.context_rank, &span);
    const TokenIds target = w.generator->tokenizer.tokenize(w.target.target).token_ids;
    const Vector q = w.retriever->embed_text(w.target.query);
    const auto loss = [&](const Matrix& x) {
      const RelaxedRows gen_rows{span.start, x};
      const RelaxedRows ret_rows{0, x};
      const double l_gen = generation_loss(w.generator->model, prompt, target, &gen_rows);
      const double l_ret = -q.dot(embed(w.retriever->model, p.ret_ids, &ret_rows));
      return (pl.retrieved ? 1.0 - alpha : 0.0) * l_gen + alpha * l_ret;
    };
    const auto grad = [&](const Matrix&) { return obj.gradient(0, s_adv, p, alpha, ModeSpec{}); };
    Rng rng(seed);
    const Matrix point = one_hot_rows(s_adv, {0, s_adv.size()}, w.generator->model.vocab_size());
    const auto report = finite_difference_check(loss, grad, point, 1e-5, 100, rng);
    EXPECT_LE(report.max_rel_err, 1e-4) << "seed " << seed;
  }
}

TEST(Attack, ModesChangeObjectiveAndGradient) {
  const auto w = make_tiny_world(2);
  const JointObjective obj(*w.env, {w.target}, payload_for(w.target), &w.projection);
  const TokenIds s = bang_sequence(w, 4);
  const PoisonTokens p = obj.encode(s);
  const Placement pl = obj.place(0, p);
  EXPECT_DOUBLE_EQ(obj.alpha(0, pl, parse_mode("no_ret_loss")), 0.0);
  EXPECT_DOUBLE_EQ(obj.alpha(0, pl, parse_mode("fixed_alpha:0.7")), 0.7);
  const auto l = obj.loss(0, s, p, 0.0, AttackMode::NoRetLoss);
  EXPECT_DOUBLE_EQ(l.objective, l.l_gen);
  const Matrix g_gen = obj.generator_gradient(0, s, pl.context_rank);
  EXPECT_TRUE(obj.gradient(0, s, p, 0.5, parse_mode("no_cvp_gta")).isApprox(g_gen));
  EXPECT_TRUE(obj.gradient(0, s, p, 0.0, parse_mode("no_ret_loss")).isApprox(g_gen));
}

TEST(Attack, DuplicatedQueryBatchEqualsSingle) {
  const auto w = make_tiny_world(4);
  const JointObjective one(*w.env, {w.target}, payload_for(w.target), &w.projection);
  const JointObjective two(*w.env, {w.target, w.target}, payload_for(w.target), &w.projection);
  AttackConfig cfg;
  cfg.steps = 5;
  cfg.candidates.batch_b = 16;
  cfg.seed = 11;
  const auto a = run_attack(one, bang_sequence(w, 4), cfg);
  const auto b = run_batch_attack(two, bang_sequence(w, 4), cfg);
  EXPECT_EQ(a.sequence, b.sequence);
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_NEAR(a.trace[i].objective, b.trace[i].objective, 1e-12);
}

TEST(Attack, ConstrainedStepsStayUnderThreshold) {
  const auto w = make_tiny_world(5);
  const JointObjective obj(*w.env, {w.target}, payload_for(w.target), &w.projection);
  AttackConfig cfg;
  cfg.steps = 6;
  cfg.candidates.batch_b = 32;
  const TokenIds init = bang_sequence(w, 4);
  cfg.ppl_threshold = perplexity(*w.generator, obj.poison_text(init)) * 1.01;
  const auto r = run_attack(obj, init, cfg);
  for (std::size_t i = 1; i < r.trace.size(); ++i) {
    ASSERT_TRUE(r.trace[i].perplexity.has_value());
    if (r.trace[i].accepted) {
      EXPECT_LE(*r.trace[i].perplexity, *cfg.ppl_threshold);
    }
  }
}

TEST(Attack, SeededRunsRepeat) {
  const auto w = make_tiny_world(6);
  const JointObjective obj(*w.env, {w.target}, payload_for(w.target), &w.projection);
  AttackConfig cfg;
  cfg.steps = 6;
  cfg.candidates.batch_b = 8;
  cfg.candidates.positions_m = 2;
  cfg.seed = 99;
  std::ostringstream a, b;
  write_trace_jsonl(a, run_attack(obj, bang_sequence(w, 5), cfg).trace);
  write_trace_jsonl(b, run_attack(obj, bang_sequence(w, 5), cfg).trace);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Attack, RecordedRngTrace) {
  Rng rng(20240611);
  std::ostringstream s;
  for (int i = 0; i < 4; ++i) s << rng.uniform_index(1000) << ' ';
  for (std::size_t v : rng.sample_distinct(10, 3)) s << v << ' ';
  EXPECT_EQ(s.str(), "285 256 593 959 6 4 2 ");
}

TEST(Attack, RejectsInvalidInitialTokens) {
  const auto w = make_tiny_world(1);
  const JointObjective obj(*w.env, {w.target}, payload_for(w.target), &w.projection);
  EXPECT_THROW(run_attack(obj, TokenIds{GeneratorModel::kEndOfSequence}, AttackConfig{}), Error);
  EXPECT_THROW(JointObjective(*w.env, {}, "x", &w.projection), Error);
}

TEST(Attack, FusionGapCanExcludeThePoison) {
  const auto w = make_tiny_world(3, false, 3);
  JointObjective obj(*w.env, {w.target}, " " + w.target.query, &w.projection);
  const TokenIds s = bang_sequence(w, 1);
  const PoisonTokens p = obj.encode(s);
  const Placement pl = obj.place(0, p);
  ASSERT_TRUE(pl.retrieved);
  const auto benign = w.env->retrieve(w.target.query).scores();
  std::vector<double> with = benign;
  with.insert(with.begin() + static_cast<std::ptrdiff_t>(*pl.rank - 1), pl.score);
  with.resize(3);
  const double best = benign.front();
  EXPECT_DOUBLE_EQ(obj.alpha(0, pl, ModeSpec{}), fusion_weight(stability({pl.score, best, with})).alpha);
  obj.set_gap_includes_poison(false);
  EXPECT_DOUBLE_EQ(obj.alpha(0, pl, ModeSpec{}), fusion_weight(stability({pl.score, best, benign})).alpha);
}
