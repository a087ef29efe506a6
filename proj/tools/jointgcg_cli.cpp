// Command-line front end: one verb per scenario kind, plus report and make-suite.

#include "jointgcg/jointgcg.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace {

struct ScenarioArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
};

int run_verb(const std::string& verb, const ScenarioArgs& args) {
  jointgcg::KeyValueConfig kv = args.config.empty() ? jointgcg::KeyValueConfig::parse("seed = 0\n")
                                                    : jointgcg::KeyValueConfig::load(args.config);
  for (const auto& o : args.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) jointgcg::fail(jointgcg::ErrorCode::ConfigInvalid, "--set expects key=value");
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  if (kv.has("scenario") && kv.text("scenario", "") != verb) {
    jointgcg::fail(jointgcg::ErrorCode::ConfigInvalid,
                   "config scenario '" + kv.text("scenario", "") + "' does not match verb '" + verb + "'");
  }
  if (!kv.has("scenario")) kv.set("scenario", verb);
  const auto cfg = jointgcg::ExperimentConfig::from(kv);
  const auto run = jointgcg::run_scenario(cfg, jointgcg::output_root(args.out));
  std::cout << jointgcg::summary_csv(run.summary);
  for (const auto& t : run.tables) std::cout << "\n# " << t.name << '\n' << t.content;
  std::cout << "\nrun directory: " << run.directory.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Corpus-poisoning attack workbench for retrieval-augmented generation"};
  app.require_subcommand(1);

  ScenarioArgs args;
  const std::vector<std::pair<std::string, std::string>> verbs = {
      {"attack", "targeted attack on every configured query"},
      {"batch-attack", "one trigger poison against the trigger query set"},
      {"ablate", "full, no_cvp_gta, no_ret_loss and the unoptimized baseline"},
      {"sweep-alpha", "fixed fusion weights against adaptive fusion"},
      {"transfer", "optimize on surrogate pairs, evaluate on victim pairs"},
      {"position-sweep", "success rate with the poison forced to each rank"},
      {"defend", "perplexity-constrained attack and swap-perturbed generation"},
      {"eval-cvp", "projection error and recall of the vocabulary projection"},
      {"grad-check", "finite-difference check of the analytic gradients"}};
  for (const auto& [name, help] : verbs) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", args.config, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", args.overrides, "override a config key (key=value), repeatable");
    sub->add_option("-o,--out", args.out, "output root (default: $JOINTGCG_OUT or ./runs)");
  }

  std::vector<std::string> run_dirs;
  std::string report_out;
  auto* report = app.add_subcommand("report", "aggregate summary.csv files of finished runs");
  report->add_option("runs", run_dirs, "run directories")->required()->check(CLI::ExistingDirectory);
  report->add_option("-o,--output", report_out, "write the table here instead of stdout");

  std::string suite_dir;
  std::size_t world_seed = jointgcg::ToyWorldConfig{}.seed;
  auto* suite = app.add_subcommand("make-suite", "export the toy corpora and model files");
  suite->add_option("dir", suite_dir, "destination directory")->required();
  suite->add_option("--world-seed", world_seed, "toy world seed");

  CLI11_PARSE(app, argc, argv);
  try {
    for (const auto& [name, help] : verbs) {
      if (app.got_subcommand(name)) return run_verb(name, args);
    }
    if (app.got_subcommand(report)) {
      std::vector<jointgcg::ReportRow> rows;
      for (const auto& d : run_dirs) {
        const auto part = jointgcg::read_summary_csv(std::filesystem::path(d) / "summary.csv");
        rows.insert(rows.end(), part.begin(), part.end());
      }
      const std::string table = jointgcg::report_csv(jointgcg::aggregate(rows));
      if (report_out.empty()) std::cout << table;
      else jointgcg::write_text(report_out, table);
      return 0;
    }
    if (app.got_subcommand(suite)) {
      jointgcg::ToyWorldConfig wc;
      wc.seed = world_seed;
      jointgcg::export_world(jointgcg::build_toy_world(wc), suite_dir);
      std::cout << "wrote " << suite_dir << '\n';
      return 0;
    }
  } catch (const jointgcg::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
