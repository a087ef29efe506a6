// Acceptance checks 1-11: one PASS/FAIL line each, non-zero exit if any fails.

#include "fixtures.hpp"
#include "gta_oracle.hpp"

#include "json.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

using namespace jointgcg;
using jointgcg::testing::bang_sequence;
using jointgcg::testing::make_tiny_world;

namespace {

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << detail << std::endl;
  if (!pass) ++failures;
}

std::string fmt(double v) { return format_double(v); }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_root() {
  const auto root = std::filesystem::temp_directory_path() / "jointgcg_acceptance";
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root);
  return root;
}

RunRecord run_config(const std::string& text, const std::filesystem::path& root) {
  return run_scenario(ExperimentConfig::from(KeyValueConfig::parse(text)), root);
}

const SummaryRow& row_of(const RunRecord& run, const std::string& label) {
  for (const auto& r : run.summary) {
    if (r.label == label) return r;
  }
  fail(ErrorCode::InvalidArgument, "missing summary row " + label);
}

std::vector<nlohmann::json> parse_trace(const RunRecord& run) {
  std::vector<nlohmann::json> rows;
  for (const auto& line : run.trace_lines) rows.push_back(nlohmann::json::parse(line));
  return rows;
}

void gradient_check() {
  const ToyWorld world = build_toy_world(ToyWorldConfig{});
  double worst = 0.0, seconds = 0.0;
  std::size_t compared = 0, instances = 0;
  for (std::size_t i = 0; i < world.retrievers.size(); ++i) {
    const auto f = gradient_fidelity(world.retrievers[i].bundle->model, world.generators[i].bundle->model, 10, 100,
                                     1e-5, 1000 + i);
    worst = std::max({worst, f.retriever.max_rel_err, f.generator.max_rel_err});
    compared += f.retriever.compared + f.generator.compared;
    instances += 2 * f.instances;
    seconds += f.seconds;
  }
  report(1, "gradient finite differences", worst <= 1e-4 && seconds < 60.0,
         "max_rel_err " + fmt(worst) + " over " + std::to_string(compared) + " coordinates on " +
             std::to_string(instances) + " instances in " + fmt(seconds) + " s");
}

void gta_check() {
  double worst = 0.0, worst_sum = 0.0;
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    const auto c = jointgcg::testing::random_tokenizer_pair(seed);
    const auto g = c.gen.tokenize(c.text).offsets;
    const auto r = c.ret.tokenize(c.text).offsets;
    Rng rng(seed);
    const Matrix projected = jointgcg::testing::random_matrix(static_cast<Eigen::Index>(r.size()), 7, 1.0, rng);
    const AlignmentMap map = build_alignment(g, r);
    worst = std::max(worst, (align_gradients(map, projected) - jointgcg::testing::character_alignment_oracle(g, r, projected))
                                .cwiseAbs()
                                .maxCoeff());
    for (const auto& entries : map) {
      double sum = 0.0;
      for (const auto& e : entries) sum += e.weight;
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    }
  }
  report(2, "token alignment oracle", worst <= 1e-10 && worst_sum <= 1e-12,
         "200 pairs, max |GTA - oracle| " + fmt(worst) + ", max |sum w - 1| " + fmt(worst_sum));
}

void cvp_check() {
  CvpTrainConfig cfg;
  cfg.normalize_embeddings = true;
  cfg.seed = 1;
  const RotationCheck rc = rotation_round_trip(4, 200, cfg, 1000, 3);
  const bool pass = rc.report.recall_at(1) >= 0.95 && rc.report.err_proj <= 1e-2 && rc.ls_wins == rc.perturbations;
  report(3, "vocabulary projection on a rotation", pass,
         "D=4 V=200 recall@1 " + fmt(rc.report.recall_at(1)) + ", err_proj " + fmt(rc.report.err_proj) +
             ", least squares beat " + std::to_string(rc.ls_wins) + "/" + std::to_string(rc.perturbations) +
             " perturbations");
}

void oracle_check() {
  std::size_t agree = 0, instances = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const auto w = make_tiny_world(seed);
    const QueryTarget& t = w.target;
    const JointObjective obj(*w.env, {t}, " " + t.query + " " + default_misinformation(t.target), &w.projection);
    AttackConfig cfg;
    cfg.candidates.sampling = SamplingLaw::Exhaustive;
    cfg.candidates.top_n = w.generator->model.vocab_size();
    AttackState state;
    state.sequence = bang_sequence(w, 1 + (seed - 1) % 6);
    Rng rng(seed);
    const auto oracle = brute_force_step_oracle(state, obj, cfg, cfg.mode);
    step(state, obj, cfg, cfg.mode, rng);
    ++instances;
    if (state.sequence == oracle.sequence && state.trace.back().objective == oracle.objective) ++agree;
  }
  report(4, "greedy step equals exhaustive oracle", agree == instances,
         std::to_string(agree) + "/" + std::to_string(instances) + " instances, V_gen 43, n_adv 1..6");
}

void awf_check() {
  const bool zero = fusion_weight(0.0).alpha == 0.5;
  bool decreasing = true;
  double prev = fusion_weight(-10.0).alpha;
  for (int i = 1; i < 1000; ++i) {
    const double a = fusion_weight(-10.0 + 20.0 * i / 999.0).alpha;
    decreasing = decreasing && a < prev;
    prev = a;
  }
  const std::vector<double> topk{0.9, 0.8, 0.6, 0.5, 0.3};
  const double gap = average_gap(topk);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", gap);
  report(5, "fusion weight analytics", zero && decreasing && gap == 0.15,
         std::string("alpha(0) == 0.5: ") + (zero ? "yes" : "no") + ", strictly decreasing on 1000 points: " +
             (decreasing ? "yes" : "no") + ", D_avg == 0.15: " + (gap == 0.15 ? "yes" : "no") + " (computed " + buf +
             ")");
}

void trace_checks(const std::vector<const RunRecord*>& runs) {
  std::size_t outside = 0, bad_gate = 0, rows = 0, bad_mono = 0;
  double worst_gate = 0.0;
  for (const auto* run : runs) {
    std::map<std::string, double> last_best;
    for (const auto& j : parse_trace(*run)) {
      ++rows;
      if (j["rank"].is_null()) {
        ++outside;
        const double diff = std::abs(j["l_joint"].get<double>() - j["alpha"].get<double>() * j["l_ret"].get<double>());
        worst_gate = std::max(worst_gate, diff);
        if (diff > 1e-12) ++bad_gate;
      }
      const std::string key = j["label"].get<std::string>() + "|" + j["pair"].get<std::string>() + "|" +
                              std::to_string(j["repeat"].get<std::size_t>()) + "|" + j["query"].get<std::string>();
      const double best = j["best_objective"].get<double>();
      if (j["step"].get<std::size_t>() > 0) {
        if (best > last_best.at(key)) ++bad_mono;
      }
      last_best[key] = best;
    }
  }
  report(6, "gated loss outside top-k", bad_gate == 0 && outside > 0,
         std::to_string(outside) + " rows outside top-k, max |l_joint - alpha l_ret| " + fmt(worst_gate));
  report(7, "best-so-far objective non-increasing", bad_mono == 0 && rows > 0,
         std::to_string(rows - bad_mono) + "/" + std::to_string(rows) + " trace rows");
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto root = scratch_root();
  try {
    gradient_check();
    gta_check();
    cvp_check();
    oracle_check();
    awf_check();

    const RunRecord suite = run_config(
        "scenario = attack\nseed = 1\nrepeats = 3\nsteps = 64\nmodes = full, no_ret_loss, no_cvp_gta\n", root / "suite");
    const RunRecord sweep = run_config("scenario = position-sweep\nseed = 2\nrepeats = 1\nsteps = 64\nranks = 1, 5\n",
                                       root / "sweep");
    const RunRecord defend = run_config(
        "scenario = defend\nseed = 3\nrepeats = 1\nqueries = 8\nsteps = 32\n", root / "defend");
    trace_checks({&suite, &defend});

    const auto& full = row_of(suite, "full");
    const auto& nrl = row_of(suite, "no_ret_loss");
    const auto& ncg = row_of(suite, "no_cvp_gta");
    const bool c8 = full.runs >= 20 && full.metrics.asr_gen >= nrl.metrics.asr_gen &&
                    full.metrics.asr_ret >= nrl.metrics.asr_ret &&
                    full.median_first_success <= nrl.median_first_success &&
                    full.metrics.asr_gen >= ncg.metrics.asr_gen;
    std::ostringstream d8;
    for (const auto* r : {&full, &nrl, &ncg}) {
      d8 << r->label << " asr_gen " << fmt(r->metrics.asr_gen) << " asr_ret " << fmt(r->metrics.asr_ret)
         << " median_steps " << fmt(r->median_first_success) << "; ";
    }
    d8 << full.runs << " scenarios per mode at 64 steps";
    report(8, "ablation ordering", c8, d8.str());

    // Criterion 9: compliance audit over accepted rows, swap counts, perplexity identity.
    std::size_t accepted = 0, violations = 0;
    double threshold = 0.0;
    {
      std::istringstream table(defend.tables.at(0).content);
      std::string line;
      std::getline(table, line);
      while (std::getline(table, line)) {
        const auto cells = split_csv_line(line);
        if (cells[0] != "ppl_constrained") continue;
        threshold = parse_double(cells[1]);
      }
      for (const auto& j : parse_trace(defend)) {
        if (j["label"] != "ppl_constrained" || !j["accepted"].get<bool>()) continue;
        ++accepted;
        if (j["perplexity"].get<double>() > threshold) ++violations;
      }
    }
    std::size_t swap_bad = 0;
    Rng rng(9);
    for (int i = 0; i < 500; ++i) {
      std::string text(1 + rng.uniform_index(400), ' ');
      for (auto& c : text) c = static_cast<char>(0x20 + rng.uniform_index(95));
      const std::string out = swap_perturb(text, 0.05, rng.next());
      std::size_t diff = 0;
      for (std::size_t p = 0; p < text.size(); ++p) diff += out[p] != text[p] ? 1 : 0;
      if (diff != static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(text.size())))) ++swap_bad;
    }
    const ToyWorld world = build_toy_world(ToyWorldConfig{});
    double worst_ppl = 0.0;
    for (const auto& gv : world.generators) {
      for (const auto& d : world.corpus->documents()) {
        const auto ids = gv.bundle->tokenizer.tokenize(d.text).token_ids;
        double sum = 0.0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          const TokenIds prefix(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(p));
          const TokenIds one{ids[p]};
          sum += generation_loss(gv.bundle->model, prefix, one);
        }
        worst_ppl = std::max(worst_ppl, std::abs(perplexity(*gv.bundle, d.text) - std::exp(sum / static_cast<double>(ids.size()))));
      }
    }
    report(9, "defense harness", accepted > 0 && violations == 0 && swap_bad == 0 && worst_ppl <= 1e-9,
           std::to_string(accepted - violations) + "/" + std::to_string(accepted) + " accepted steps under threshold " +
               fmt(threshold) + ", swap count mismatches " + std::to_string(swap_bad) + "/500, max |ppl - exp(mean loss)| " +
               fmt(worst_ppl));

    const std::string small = "scenario = attack\nseed = 4\nrepeats = 1\nqueries = 3\nsteps = 8\nbatch_b = 32\n";
    const RunRecord a = run_config(small, root / "det_a");
    const RunRecord b = run_config(small, root / "det_b");
    std::size_t same = 0, files = 0;
    for (const char* f : {"config.txt", "metrics.jsonl", "summary.csv", "trace.jsonl"}) {
      ++files;
      const std::string x = slurp(a.directory / f);
      if (!x.empty() && x == slurp(b.directory / f)) ++same;
    }
    report(10, "determinism", same == files,
           std::to_string(same) + "/" + std::to_string(files) + " metric files byte-identical across two runs");

    const auto& r1 = row_of(sweep, "rank=1");
    const auto& rk = row_of(sweep, "rank=5");
    report(11, "position sweep", r1.metrics.asr_gen >= rk.metrics.asr_gen,
           "ASR_gen rank 1 " + fmt(r1.metrics.asr_gen) + ", rank k=5 " + fmt(rk.metrics.asr_gen) + " over " +
               std::to_string(r1.runs) + " queries");
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance aborted: " << e.what() << std::endl;
    ++failures;
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << " in "
            << fmt(seconds) << " s" << std::endl;
  return failures == 0 ? 0 : 1;
}
