// Builds the toy world, attacks one query with the joint objective and prints the trace.

#include "jointgcg/jointgcg.hpp"

#include <iostream>

int main() {
  using namespace jointgcg;
  ToyWorldConfig wc;
  wc.subject_count = 6;
  const ToyWorld world = build_toy_world(wc);
  const auto& retriever = world.retrievers.at(0).bundle;
  const auto& generator = world.generators.at(0).bundle;
  const RagEnvironment env(retriever, generator, world.corpus, 5);
  const CvpBundle cvp = build_cvp(*retriever, *generator, CvpTrainConfig{});
  std::cout << "projection err " << format_double(cvp.report.err_proj) << ", recall@1 "
            << format_double(cvp.report.recall_at(1)) << " over " << cvp.shared.size() << " shared tokens\n";

  const QueryTarget target = world.targets().front();
  PoisonSpec spec;
  spec.n_adv = 16;
  const PoisonDocument poison = build_poison(generator->tokenizer, target.query, target.target, spec);
  const JointObjective objective(env, {target}, poison.payload, &cvp.projection);
  AttackConfig cfg;
  cfg.steps = 24;
  cfg.seed = 7;
  const AttackResult result = run_attack(objective, poison.s_adv, cfg);

  std::cout << "query: " << target.query << "\ntarget: " << target.target << '\n';
  for (const auto& row : result.trace) {
    std::cout << "step " << row.step << " l_joint " << format_double(row.l_joint) << " alpha "
              << format_double(row.alpha) << " rank " << (row.rank ? std::to_string(*row.rank) : "-") << '\n';
  }
  const auto& o = result.outcomes.front();
  std::cout << "poison: " << result.poison_text << "\nanswer: " << o.output << "\nsuccess: " << (o.success ? "yes" : "no")
            << '\n';
}
