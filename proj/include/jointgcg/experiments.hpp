#pragma once

// Declarative scenarios: key = value configs, seeded fan-out, run directories and reports.

#include "jointgcg/attack.hpp"
#include "jointgcg/core.hpp"
#include "jointgcg/cvp.hpp"
#include "jointgcg/defenses.hpp"
#include "jointgcg/model_io.hpp"
#include "jointgcg/rag_env.hpp"
#include "jointgcg/toy_suite.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace jointgcg {

// ---------------------------------------------------------------------------
// Plain-text configuration.

/// `key = value` lines. `#` starts a comment; blank lines are ignored; a key may appear once.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, std::string_view origin = "config") {
    KeyValueConfig cfg;
    cfg.raw_ = std::string(text);
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = std::string(origin) + ":" + std::to_string(number);
      if (eq == std::string::npos) fail(ErrorCode::ConfigInvalid, where + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) fail(ErrorCode::ConfigInvalid, where + ": empty key");
      if (!cfg.values_.emplace(key, value).second) fail(ErrorCode::ConfigInvalid, where + ": duplicate key '" + key + "'");
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::ConfigInvalid, "cannot read config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  /// Overrides or adds a key; the override is appended to the raw text so the digest changes.
  void set(const std::string& key, const std::string& value) {
    if (trim(key).empty()) fail(ErrorCode::ConfigInvalid, "empty key");
    values_[trim(key)] = trim(value);
    if (!raw_.empty() && raw_.back() != '\n') raw_ += '\n';
    raw_ += trim(key) + " = " + trim(value) + "  # override\n";
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& raw() const { return raw_; }
  std::string digest() const { return fnv1a_hex(raw_); }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string text(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double number(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return parse_double(it->second);
    } catch (const Error&) {
      fail(ErrorCode::ConfigInvalid, key + ": not a number '" + it->second + "'");
    }
  }

  std::size_t count(const std::string& key, std::size_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_unsigned(key, it->second);
  }

  std::uint64_t seed(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) fail(ErrorCode::ConfigInvalid, "missing required key '" + key + "'");
    return parse_unsigned(key, it->second);
  }

  bool flag(const std::string& key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    fail(ErrorCode::ConfigInvalid, key + ": expected true or false");
  }

  /// Comma-separated items, trimmed; an absent key yields `fallback`.
  std::vector<std::string> list(const std::string& key, std::vector<std::string> fallback = {}) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<std::string> out;
    std::istringstream in(it->second);
    std::string item;
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  static std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
  }

 private:
  static std::uint64_t parse_unsigned(const std::string& key, const std::string& value) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
      fail(ErrorCode::ConfigInvalid, key + ": expected a non-negative integer, got '" + value + "'");
    }
    return v;
  }

  std::map<std::string, std::string> values_;
  std::string raw_;
};

struct ModelPair {
  std::string retriever = "ret-a";
  std::string generator = "gen-a";

  std::string label() const { return retriever + "/" + generator; }
  bool operator==(const ModelPair&) const = default;
};

inline ModelPair parse_pair(const std::string& text) {
  const auto slash = text.find('/');
  if (slash == std::string::npos || slash == 0 || slash + 1 == text.size()) {
    fail(ErrorCode::ConfigInvalid, "model pair must read retriever/generator, got '" + text + "'");
  }
  return {text.substr(0, slash), text.substr(slash + 1)};
}

inline const std::vector<std::string>& scenario_kinds() {
  static const std::vector<std::string> kinds = {"attack",         "batch-attack", "ablate",   "sweep-alpha", "transfer",
                                                 "position-sweep", "defend",       "eval-cvp", "grad-check"};
  return kinds;
}

inline const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = {
      "scenario", "seed", "repeats", "queries", "k", "max_new_tokens", "n_adv", "n_ret", "steps", "warmup_steps",
      "top_n", "positions_m", "batch_b", "substitutions", "sampling", "mode", "modes", "alphas", "unit_fusion",
      "pair", "surrogates", "victims", "awf_corpus", "awf_gap_includes_poison", "ranks", "ppl_percentile", "histogram_bins", "swap_ratio",
      "swap_copies", "cvp_epochs", "cvp_learning_rate", "cvp_batch_size", "cvp_patience", "cvp_weight_decay",
      "cvp_normalize", "cvp_seed", "synthetic_dim", "synthetic_vocab", "fd_instances", "fd_coordinates",
      "fd_epsilon", "corpus", "synthetic_corpus", "model_dir", "world_seed", "world_subjects", "world_benign_docs",
      "world_distractor_docs", "world_output_scale", "world_position_decay"};
  return keys;
}

/// Everything a scenario needs, read from a KeyValueConfig.
struct ExperimentConfig {
  std::string scenario = "attack";
  std::uint64_t seed = 0;
  std::size_t repeats = 3;
  std::size_t queries = 0;  // 0 attacks every subject
  std::size_t k = 5;
  std::size_t max_new_tokens = 4;
  std::size_t n_adv = 32;
  std::size_t n_ret = 16;  // batch layout
  AttackConfig attack;
  std::vector<ModeSpec> modes;
  std::vector<double> alphas;
  ModelPair pair;
  std::vector<ModelPair> surrogates;
  std::vector<ModelPair> victims;
  bool synthetic_awf = false;
  bool gap_includes_poison = true;
  std::vector<std::size_t> ranks;
  double ppl_percentile = 95.0;
  std::size_t histogram_bins = 10;
  double swap_ratio = 0.05;
  std::size_t swap_copies = 1;
  CvpTrainConfig cvp;
  std::size_t synthetic_dim = 4;
  std::size_t synthetic_vocab = 200;
  std::size_t fd_instances = 10;
  std::size_t fd_coordinates = 100;
  double fd_epsilon = 1e-5;
  std::string corpus_path;
  std::string synthetic_path;
  std::string model_dir;
  ToyWorldConfig world;
  KeyValueConfig source;

  static ExperimentConfig from(const KeyValueConfig& kv) {
    const auto& known = known_config_keys();
    for (const auto& [key, value] : kv.entries()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        fail(ErrorCode::ConfigInvalid, "unknown config key '" + key + "'");
      }
    }
    ExperimentConfig c;
    c.source = kv;
    c.scenario = kv.text("scenario", c.scenario);
    c.seed = kv.seed("seed");
    c.repeats = kv.count("repeats", c.repeats);
    c.queries = kv.count("queries", c.queries);
    c.k = kv.count("k", c.k);
    c.max_new_tokens = kv.count("max_new_tokens", c.max_new_tokens);
    c.n_adv = kv.count("n_adv", c.n_adv);
    c.n_ret = kv.count("n_ret", c.n_adv / 2);
    c.attack.steps = kv.count("steps", c.attack.steps);
    c.attack.warmup_steps = kv.count("warmup_steps", c.attack.warmup_steps);
    c.attack.candidates.top_n = kv.count("top_n", c.attack.candidates.top_n);
    c.attack.candidates.positions_m = kv.count("positions_m", c.attack.candidates.positions_m);
    c.attack.candidates.batch_b = kv.count("batch_b", c.attack.candidates.batch_b);
    c.attack.candidates.substitutions = kv.count("substitutions", c.attack.candidates.substitutions);
    const std::string sampling = kv.text("sampling", "random");
    if (sampling == "random") c.attack.candidates.sampling = SamplingLaw::Random;
    else if (sampling == "exhaustive") c.attack.candidates.sampling = SamplingLaw::Exhaustive;
    else fail(ErrorCode::ConfigInvalid, "sampling must be random or exhaustive");
    c.attack.mode = parse_mode(kv.text("mode", "full"));
    c.attack.unit_fusion = kv.flag("unit_fusion", false);
    for (const auto& m : kv.list("modes")) c.modes.push_back(parse_mode(m));
    for (const auto& a : kv.list("alphas", {"0.1", "0.3", "0.5", "0.7", "0.9"})) {
      c.alphas.push_back(parse_mode("fixed_alpha:" + a).fixed_alpha);
    }
    c.pair = parse_pair(kv.text("pair", c.pair.label()));
    for (const auto& p : kv.list("surrogates", {c.pair.label()})) c.surrogates.push_back(parse_pair(p));
    for (const auto& p : kv.list("victims", {c.pair.label()})) c.victims.push_back(parse_pair(p));
    const std::string awf = kv.text("awf_corpus", "main");
    if (awf != "main" && awf != "synthetic") fail(ErrorCode::ConfigInvalid, "awf_corpus must be main or synthetic");
    c.synthetic_awf = awf == "synthetic";
    c.gap_includes_poison = kv.flag("awf_gap_includes_poison", c.gap_includes_poison);
    c.ppl_percentile = kv.number("ppl_percentile", c.ppl_percentile);
    c.histogram_bins = kv.count("histogram_bins", c.histogram_bins);
    c.swap_ratio = kv.number("swap_ratio", c.swap_ratio);
    c.swap_copies = kv.count("swap_copies", c.swap_copies);
    c.cvp.max_epochs = kv.count("cvp_epochs", c.cvp.max_epochs);
    c.cvp.learning_rate = kv.number("cvp_learning_rate", c.cvp.learning_rate);
    c.cvp.batch_size = kv.count("cvp_batch_size", c.cvp.batch_size);
    c.cvp.patience = kv.count("cvp_patience", c.cvp.patience);
    c.cvp.weight_decay = kv.number("cvp_weight_decay", c.cvp.weight_decay);
    c.cvp.normalize_embeddings = kv.flag("cvp_normalize", c.cvp.normalize_embeddings);
    c.cvp.seed = kv.count("cvp_seed", 1);
    c.synthetic_dim = kv.count("synthetic_dim", c.synthetic_dim);
    c.synthetic_vocab = kv.count("synthetic_vocab", c.synthetic_vocab);
    c.fd_instances = kv.count("fd_instances", c.fd_instances);
    c.fd_coordinates = kv.count("fd_coordinates", c.fd_coordinates);
    c.fd_epsilon = kv.number("fd_epsilon", c.fd_epsilon);
    c.corpus_path = kv.text("corpus", "");
    c.synthetic_path = kv.text("synthetic_corpus", "");
    c.model_dir = kv.text("model_dir", "");
    c.world.seed = kv.count("world_seed", c.world.seed);
    c.world.subject_count = kv.count("world_subjects", c.world.subject_count);
    c.world.benign_docs = kv.count("world_benign_docs", c.world.benign_docs);
    c.world.distractor_docs = kv.count("world_distractor_docs", c.world.distractor_docs);
    c.world.output_scale = kv.number("world_output_scale", c.world.output_scale);
    c.world.position_decay = kv.number("world_position_decay", c.world.position_decay);
    if (kv.has("ranks")) {
      for (const auto& r : kv.list("ranks")) c.ranks.push_back(KeyValueConfig::parse("r=" + r).count("r", 0));
    } else {
      for (std::size_t r = 1; r <= c.k; ++r) c.ranks.push_back(r);
    }
    c.validate();
    return c;
  }

  void validate() const {
    const auto& kinds = scenario_kinds();
    if (std::find(kinds.begin(), kinds.end(), scenario) == kinds.end()) {
      fail(ErrorCode::ConfigInvalid, "unknown scenario '" + scenario + "'");
    }
    if (repeats < 1) fail(ErrorCode::ConfigInvalid, "repeats must be >= 1");
    if (k < 1) fail(ErrorCode::ConfigInvalid, "k must be >= 1");
    if (max_new_tokens < 1) fail(ErrorCode::ConfigInvalid, "max_new_tokens must be >= 1");
    if (n_adv < 1) fail(ErrorCode::ConfigInvalid, "n_adv must be >= 1");
    if (n_ret > n_adv) fail(ErrorCode::ConfigInvalid, "n_ret must not exceed n_adv");
    if (!(swap_ratio >= 0.0 && swap_ratio <= 1.0)) fail(ErrorCode::ConfigInvalid, "swap_ratio must be in [0, 1]");
    if (swap_copies < 1) fail(ErrorCode::ConfigInvalid, "swap_copies must be >= 1");
    if (!(ppl_percentile > 0.0 && ppl_percentile <= 100.0)) fail(ErrorCode::ConfigInvalid, "ppl_percentile in (0, 100]");
    if (histogram_bins < 1) fail(ErrorCode::ConfigInvalid, "histogram_bins must be >= 1");
    for (std::size_t r : ranks) {
      if (r < 1 || r > k) fail(ErrorCode::RankOutOfRange, "rank " + std::to_string(r) + " outside [1, k]");
    }
    if (!(fd_epsilon > 0.0)) fail(ErrorCode::ConfigInvalid, "fd_epsilon must be positive");
    cvp.validate();
    for (const auto& path : {corpus_path, synthetic_path, model_dir}) {
      if (!path.empty() && !std::filesystem::exists(path)) fail(ErrorCode::ConfigInvalid, "missing file " + path);
    }
  }

  std::string digest() const { return source.digest(); }
};

// ---------------------------------------------------------------------------
// Models, corpora and per-pair environments.

inline void save_retriever(const std::string& stem, const RetrieverBundle& b) {
  save_parameter_file(stem + ".params", b.model.to_parameters());
  b.model.vocabulary().save(stem + ".vocab");
  std::ofstream(stem + ".tokenizer") << to_string(b.tokenizer.kind()) << '\n';
}

inline void save_generator(const std::string& stem, const GeneratorBundle& b) {
  save_parameter_file(stem + ".params", b.model.to_parameters());
  b.model.vocabulary().save(stem + ".vocab");
  std::ofstream(stem + ".tokenizer") << to_string(b.tokenizer.kind()) << '\n';
}

inline TokenizerKind load_tokenizer_kind(const std::string& stem) {
  std::ifstream in(stem + ".tokenizer");
  if (!in) fail(ErrorCode::ModelLoadError, "missing " + stem + ".tokenizer");
  std::string name;
  in >> name;
  return parse_tokenizer_kind(name);
}

inline std::shared_ptr<const RetrieverBundle> load_retriever(const std::string& stem) {
  Vocabulary vocab = Vocabulary::load(stem + ".vocab");
  RetrieverModel model = RetrieverModel::from_parameters(vocab, load_parameter_file(stem + ".params"));
  return std::make_shared<const RetrieverBundle>(RetrieverBundle{std::move(model), Tokenizer(load_tokenizer_kind(stem), vocab)});
}

inline std::shared_ptr<const GeneratorBundle> load_generator(const std::string& stem) {
  Vocabulary vocab = Vocabulary::load(stem + ".vocab");
  GeneratorModel model = GeneratorModel::from_parameters(vocab, load_parameter_file(stem + ".params"));
  return std::make_shared<const GeneratorBundle>(GeneratorBundle{std::move(model), Tokenizer(load_tokenizer_kind(stem), vocab)});
}

/// Writes corpora and every model variant of `world` under `dir`.
inline void export_world(const ToyWorld& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "models");
  world.corpus->save_jsonl((dir / "corpus.jsonl").string());
  world.synthetic->save_jsonl((dir / "synthetic.jsonl").string());
  for (const auto& r : world.retrievers) save_retriever((dir / "models" / r.name).string(), *r.bundle);
  for (const auto& g : world.generators) save_generator((dir / "models" / g.name).string(), *g.bundle);
  nlohmann::json subjects = nlohmann::json::array();
  for (const auto& s : world.subjects) {
    subjects.push_back({{"query", s.query}, {"target", s.target}, {"misinformation", s.misinformation}});
  }
  std::ofstream(dir / "subjects.json") << subjects.dump(2) << '\n';
}

struct ScenarioTarget {
  QueryTarget query;
  std::string misinformation;
};

/// Built environment of one retriever/generator pair.
struct PairContext {
  ModelPair names;
  std::shared_ptr<const RagEnvironment> env;      // main corpus
  std::shared_ptr<const RagEnvironment> awf_env;  // corpus the attack optimizes against
  CvpBundle cvp;
};

class Workbench {
 public:
  explicit Workbench(ExperimentConfig cfg) : cfg_(std::move(cfg)), world_(build_toy_world(cfg_.world)) {
    corpus_ = cfg_.corpus_path.empty() ? world_.corpus
                                       : std::make_shared<const Corpus>(Corpus::load_jsonl(cfg_.corpus_path));
    synthetic_ = cfg_.synthetic_path.empty() ? world_.synthetic
                                             : std::make_shared<const Corpus>(Corpus::load_jsonl(cfg_.synthetic_path));
  }

  const ExperimentConfig& config() const { return cfg_; }
  const ToyWorld& world() const { return world_; }
  const Corpus& corpus() const { return *corpus_; }

  std::shared_ptr<const RetrieverBundle> retriever(const std::string& name) const {
    if (!cfg_.model_dir.empty()) return load_retriever((std::filesystem::path(cfg_.model_dir) / name).string());
    for (const auto& r : world_.retrievers) {
      if (r.name == name) return r.bundle;
    }
    fail(ErrorCode::ConfigInvalid, "unknown retriever '" + name + "'");
  }

  std::shared_ptr<const GeneratorBundle> generator(const std::string& name) const {
    if (!cfg_.model_dir.empty()) return load_generator((std::filesystem::path(cfg_.model_dir) / name).string());
    for (const auto& g : world_.generators) {
      if (g.name == name) return g.bundle;
    }
    fail(ErrorCode::ConfigInvalid, "unknown generator '" + name + "'");
  }

  const PairContext& pair(const ModelPair& names) {
    const std::string key = names.label();
    if (auto it = pairs_.find(key); it != pairs_.end()) return *it->second;
    auto ctx = std::make_unique<PairContext>();
    ctx->names = names;
    const auto r = retriever(names.retriever);
    const auto g = generator(names.generator);
    ctx->env = std::make_shared<const RagEnvironment>(r, g, corpus_, cfg_.k, cfg_.max_new_tokens);
    ctx->awf_env = cfg_.synthetic_awf ? std::make_shared<const RagEnvironment>(r, g, synthetic_, cfg_.k, cfg_.max_new_tokens)
                                      : ctx->env;
    ctx->cvp = build_cvp(*r, *g, cfg_.cvp);
    return *pairs_.emplace(key, std::move(ctx)).first->second;
  }

  /// The first `queries` subjects (all when 0).
  std::vector<ScenarioTarget> targets() const {
    std::vector<ScenarioTarget> out;
    const std::size_t n = cfg_.queries == 0 ? world_.subjects.size() : std::min(cfg_.queries, world_.subjects.size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = world_.subjects[i];
      out.push_back({{s.query, s.target}, s.misinformation});
    }
    return out;
  }

 private:
  ExperimentConfig cfg_;
  ToyWorld world_;
  std::shared_ptr<const Corpus> corpus_;
  std::shared_ptr<const Corpus> synthetic_;
  std::map<std::string, std::unique_ptr<PairContext>> pairs_;
};

// ---------------------------------------------------------------------------
// Records.

struct QueryRecord {
  std::string label;
  std::string pair;
  std::string mode;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  std::string query;
  std::string target;
  QueryOutcome outcome;
  std::optional<std::size_t> first_success_step;
  std::size_t steps = 0;
  std::string poison;
};

struct SummaryRow {
  std::string label;
  std::string pair;
  std::string mode;
  AttackMetrics metrics;
  double median_first_success = 0.0;  // runs without success count as steps + 1
  std::size_t runs = 0;
};

struct TableFile {
  std::string name;
  std::string content;
};

struct RunRecord {
  std::string scenario;
  std::string digest;
  std::uint64_t seed = 0;
  std::vector<QueryRecord> queries;
  std::vector<SummaryRow> summary;
  std::vector<std::string> trace_lines;
  std::vector<TableFile> tables;
  double wall_clock_seconds = 0.0;
  std::filesystem::path directory;
};

inline double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

/// One summary row per label, in order of first appearance; outcomes are pooled over repeats.
inline std::vector<SummaryRow> summarize_records(const std::vector<QueryRecord>& records) {
  std::vector<SummaryRow> rows;
  std::vector<std::vector<const QueryRecord*>> groups;
  for (const auto& r : records) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const SummaryRow& s) { return s.label == r.label; });
    if (it == rows.end()) {
      rows.push_back({r.label, r.pair, r.mode, {}, 0.0, 0});
      groups.emplace_back();
      it = rows.end() - 1;
    }
    groups[static_cast<std::size_t>(it - rows.begin())].push_back(&r);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<QueryOutcome> outcomes;
    std::vector<double> firsts;
    for (const auto* r : groups[i]) {
      outcomes.push_back(r->outcome);
      firsts.push_back(static_cast<double>(r->first_success_step ? *r->first_success_step : r->steps + 1));
    }
    rows[i].metrics = summarize(outcomes);
    rows[i].median_first_success = median(firsts);
    rows[i].runs = outcomes.size();
  }
  return rows;
}

inline std::string summary_header() { return "label,pair,mode,asr_ret,asr_gen,pos_p,pos_p_count,median_first_success,runs"; }

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream out;
  out << summary_header() << '\n';
  for (const auto& r : rows) {
    out << r.label << ',' << r.pair << ',' << r.mode << ',' << format_double(r.metrics.asr_ret) << ','
        << format_double(r.metrics.asr_gen) << ',' << (r.metrics.pos_p ? format_double(*r.metrics.pos_p) : "") << ','
        << r.metrics.retrieved_count << ',' << format_double(r.median_first_success) << ',' << r.runs << '\n';
  }
  return out.str();
}

inline nlohmann::json to_json(const QueryRecord& r) {
  nlohmann::json j;
  j["label"] = r.label;
  j["pair"] = r.pair;
  j["mode"] = r.mode;
  j["repeat"] = r.repeat;
  j["seed"] = r.seed;
  j["query"] = r.query;
  j["target"] = r.target;
  j["retrieved"] = r.outcome.retrieved;
  j["rank"] = r.outcome.rank ? nlohmann::json(*r.outcome.rank) : nlohmann::json(nullptr);
  j["success"] = r.outcome.success;
  j["output"] = r.outcome.output;
  j["first_success_step"] = r.first_success_step ? nlohmann::json(*r.first_success_step) : nlohmann::json(nullptr);
  j["steps"] = r.steps;
  j["poison"] = r.poison;
  return j;
}

inline std::filesystem::path output_root(const std::string& override_dir = {}) {
  if (!override_dir.empty()) return override_dir;
  if (const char* env = std::getenv("JOINTGCG_OUT"); env && *env) return env;
  return "runs";
}

inline std::string run_directory_name(const std::string& scenario, const std::string& digest, std::uint64_t seed) {
  return scenario + "-" + digest + "-seed" + std::to_string(seed);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
}

/// Writes config.txt, metrics.jsonl, summary.csv, trace.jsonl, scenario tables and run.json.
inline void write_run(RunRecord& run, const ExperimentConfig& cfg, const std::filesystem::path& root) {
  run.directory = root / run_directory_name(run.scenario, run.digest, run.seed);
  std::filesystem::create_directories(run.directory);
  write_text(run.directory / "config.txt", cfg.source.raw());
  std::string metrics;
  for (const auto& q : run.queries) metrics += to_json(q).dump() + '\n';
  write_text(run.directory / "metrics.jsonl", metrics);
  write_text(run.directory / "summary.csv", summary_csv(run.summary));
  std::string trace;
  for (const auto& line : run.trace_lines) trace += line + '\n';
  write_text(run.directory / "trace.jsonl", trace);
  nlohmann::json files = {"config.txt", "metrics.jsonl", "summary.csv", "trace.jsonl"};
  for (const auto& t : run.tables) {
    write_text(run.directory / t.name, t.content);
    files.push_back(t.name);
  }
  nlohmann::json record = {{"scenario", run.scenario},
                           {"config_digest", run.digest},
                           {"seed", run.seed},
                           {"queries", run.queries.size()},
                           {"wall_clock_seconds", run.wall_clock_seconds},
                           {"files", files}};
  write_text(run.directory / "run.json", record.dump(2) + '\n');
}

// ---------------------------------------------------------------------------
// Verification drivers shared by the CLI and the acceptance checks.

struct GradientFidelity {
  FdReport retriever;
  FdReport generator;
  std::size_t instances = 0;
  double seconds = 0.0;
};

/// Central differences against analytic one-hot gradients on random token instances.
inline GradientFidelity gradient_fidelity(const RetrieverModel& ret, const GeneratorModel& gen, std::size_t instances,
                                          std::size_t coordinates, double epsilon, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  GradientFidelity out;
  out.instances = instances;
  Rng rng(seed);
  auto random_ids = [&](std::size_t vocab, std::size_t lo, std::size_t hi, bool avoid_zero) {
    TokenIds ids(lo + rng.uniform_index(hi - lo + 1));
    for (auto& t : ids) t = static_cast<TokenId>((avoid_zero ? 1 : 0) + rng.uniform_index(vocab - (avoid_zero ? 1 : 0)));
    return ids;
  };
  double ret_sum = 0.0, gen_sum = 0.0;
  for (std::size_t i = 0; i < instances; ++i) {
    const TokenIds q = random_ids(ret.vocab_size(), 2, 8, false);
    const TokenIds d = random_ids(ret.vocab_size(), 4, 16, false);
    const std::size_t a = rng.uniform_index(d.size());
    const PositionRange rs{a, a + 1 + rng.uniform_index(d.size() - a)};
    const Matrix rpoint = one_hot_rows(d, rs, ret.vocab_size());
    const auto rrep = finite_difference_check(
        [&](const Matrix& x) {
          const RelaxedRows rr{rs.start, x};
          return retrieval_loss(ret, q, d, &rr);
        },
        [&](const Matrix&) { return retrieval_grad(ret, q, d, rs); }, rpoint, epsilon, coordinates, rng);
    out.retriever.max_rel_err = std::max(out.retriever.max_rel_err, rrep.max_rel_err);
    out.retriever.compared += rrep.compared;
    ret_sum += rrep.mean_rel_err * static_cast<double>(rrep.compared);

    const TokenIds ctx = random_ids(gen.vocab_size(), 4, 20, true);
    const TokenIds tgt = random_ids(gen.vocab_size(), 1, 3, true);
    const std::size_t b = rng.uniform_index(ctx.size());
    const PositionRange gs{b, b + 1 + rng.uniform_index(ctx.size() - b)};
    const Matrix gpoint = one_hot_rows(ctx, gs, gen.vocab_size());
    const auto grep = finite_difference_check(
        [&](const Matrix& x) {
          const RelaxedRows rr{gs.start, x};
          return generation_loss(gen, ctx, tgt, &rr);
        },
        [&](const Matrix&) { return generation_grad(gen, ctx, tgt, gs); }, gpoint, epsilon, coordinates, rng);
    out.generator.max_rel_err = std::max(out.generator.max_rel_err, grep.max_rel_err);
    out.generator.compared += grep.compared;
    gen_sum += grep.mean_rel_err * static_cast<double>(grep.compared);
  }
  if (out.retriever.compared > 0) out.retriever.mean_rel_err = ret_sum / static_cast<double>(out.retriever.compared);
  if (out.generator.compared > 0) out.generator.mean_rel_err = gen_sum / static_cast<double>(out.generator.compared);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

/// Paired embeddings with E_ret = R E_gen for a random rotation R; rows are unit-normalized.
struct RotationPair {
  Matrix gen;
  Matrix ret;
  Matrix rotation;
};

inline RotationPair make_rotation_pair(std::size_t dim, std::size_t vocab, std::uint64_t seed) {
  if (dim < 1 || vocab < 2) fail(ErrorCode::InvalidArgument, "rotation pair needs dim >= 1 and vocab >= 2");
  Rng rng(seed);
  const auto d = static_cast<Eigen::Index>(dim);
  Matrix a(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) a(i, j) = rng.normal();
  }
  RotationPair p;
  p.rotation = Eigen::HouseholderQR<Matrix>(a).householderQ();
  p.gen.resize(static_cast<Eigen::Index>(vocab), d);
  for (Eigen::Index i = 0; i < p.gen.rows(); ++i) {
    for (Eigen::Index j = 0; j < d; ++j) p.gen(i, j) = rng.normal();
  }
  p.gen = normalize_rows(p.gen);
  p.ret = p.gen * p.rotation.transpose();
  return p;
}

struct RotationCheck {
  CvpReport report;
  double ls_residual = 0.0;
  double min_perturbed_residual = 0.0;
  std::size_t perturbations = 0;
  std::size_t ls_wins = 0;
};

/// Trains CVP on a rotation pair and compares the least-squares map against random perturbations of it.
inline RotationCheck rotation_round_trip(std::size_t dim, std::size_t vocab, const CvpTrainConfig& cfg,
                                         std::size_t perturbations, std::uint64_t seed) {
  const RotationPair pair = make_rotation_pair(dim, vocab, seed);
  const CvpTraining t = train_autoencoder(pair.gen, pair.ret, cfg);
  RotationCheck out;
  const std::array<std::size_t, 3> ks{1, 5, 10};
  out.report = evaluate_cvp(t.params, select_rows(pair.gen, t.val_rows), select_rows(pair.ret, t.val_rows), ks);
  const Matrix encoded = encode_rows(t.params, pair.gen);
  const ProjectionMatrix w = solve_projection(encoded, pair.ret);
  // solve_projection fits encoded^T W = ret^T over the embedding axis.
  auto residual = [&](const Matrix& m) { return (encoded.transpose() * m.transpose() - pair.ret.transpose()).norm(); };
  out.ls_residual = residual(w.values);
  out.perturbations = perturbations;
  out.min_perturbed_residual = std::numeric_limits<double>::infinity();
  Rng rng(derive_seed(seed, 1));
  for (std::size_t i = 0; i < perturbations; ++i) {
    Matrix delta(w.values.rows(), w.values.cols());
    for (Eigen::Index r = 0; r < delta.rows(); ++r) {
      for (Eigen::Index c = 0; c < delta.cols(); ++c) delta(r, c) = 1e-3 * rng.normal();
    }
    const double res = residual(w.values + delta);
    out.min_perturbed_residual = std::min(out.min_perturbed_residual, res);
    if (out.ls_residual < res) ++out.ls_wins;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenario runners.

struct AttackJob {
  std::string label;
  ModeSpec mode;
  std::size_t steps = 0;
  std::optional<double> ppl_threshold;
};

struct QueryRun {
  AttackResult result;
  QueryOutcome outcome;  // on the main corpus
};

class ScenarioRunner {
 public:
  explicit ScenarioRunner(const ExperimentConfig& cfg) : bench_(cfg) {}

  Workbench& bench() { return bench_; }
  const ExperimentConfig& config() const { return bench_.config(); }

  std::uint64_t query_seed(std::size_t repeat, std::size_t query) const {
    return derive_seed(derive_seed(config().seed, repeat), query);
  }

  /// Attacks one target; AWF sees the pair's attack corpus, metrics come from the main corpus.
  QueryRun attack_query(const PairContext& pc, const ScenarioTarget& t, const AttackJob& job, std::uint64_t seed) const {
    const auto& cfg = config();
    PoisonSpec spec;
    spec.n_adv = cfg.n_adv;
    spec.misinformation = t.misinformation;
    const PoisonDocument poison = build_poison(pc.env->generator().tokenizer, t.query.query, t.query.target, spec);
    JointObjective obj(*pc.awf_env, {t.query}, poison.payload, &pc.cvp.projection);
    obj.set_gap_includes_poison(cfg.gap_includes_poison);
    AttackConfig ac = cfg.attack;
    ac.mode = job.mode;
    ac.steps = job.steps;
    ac.ppl_threshold = job.ppl_threshold;
    ac.seed = seed;
    QueryRun run;
    run.result = run_attack(obj, poison.s_adv, ac);
    run.outcome = pc.env->evaluate(t.query.query, t.query.target, {obj.poison_id(), run.result.poison_text});
    return run;
  }

  void append_trace(RunRecord& run, const QueryRecord& rec, const std::vector<TraceRow>& trace) const {
    for (const auto& row : trace) {
      nlohmann::json j = to_json(row);
      j["label"] = rec.label;
      j["pair"] = rec.pair;
      j["repeat"] = rec.repeat;
      j["query"] = rec.query;
      run.trace_lines.push_back(j.dump());
    }
  }

  QueryRecord record(const std::string& label, const PairContext& pc, const AttackJob& job, std::size_t repeat,
                     std::uint64_t seed, const ScenarioTarget& t, const QueryRun& qr) const {
    QueryRecord rec;
    rec.label = label;
    rec.pair = pc.names.label();
    rec.mode = to_string(job.mode);
    rec.repeat = repeat;
    rec.seed = seed;
    rec.query = t.query.query;
    rec.target = t.query.target;
    rec.outcome = qr.outcome;
    rec.first_success_step = qr.result.first_success_step;
    rec.steps = job.steps;
    rec.poison = qr.result.poison_text;
    return rec;
  }

  /// Every job over every repeat and target, on one pair.
  void run_jobs(RunRecord& run, const ModelPair& names, const std::vector<AttackJob>& jobs) {
    const PairContext& pc = bench_.pair(names);
    const auto targets = bench_.targets();
    for (const auto& job : jobs) {
      for (std::size_t r = 0; r < config().repeats; ++r) {
        for (std::size_t i = 0; i < targets.size(); ++i) {
          const std::uint64_t seed = query_seed(r, i);
          const QueryRun qr = attack_query(pc, targets[i], job, seed);
          run.queries.push_back(record(job.label, pc, job, r, seed, targets[i], qr));
          append_trace(run, run.queries.back(), qr.result.trace);
        }
      }
    }
  }

  RunRecord run() {
    const auto start = std::chrono::steady_clock::now();
    const auto& cfg = config();
    RunRecord run;
    run.scenario = cfg.scenario;
    run.digest = cfg.digest();
    run.seed = cfg.seed;
    if (cfg.scenario == "attack") run_attack_scenario(run);
    else if (cfg.scenario == "ablate") run_ablation(run);
    else if (cfg.scenario == "sweep-alpha") run_alpha_sweep(run);
    else if (cfg.scenario == "batch-attack") run_batch(run);
    else if (cfg.scenario == "transfer") run_transfer(run);
    else if (cfg.scenario == "position-sweep") run_position_sweep(run);
    else if (cfg.scenario == "defend") run_defense(run);
    else if (cfg.scenario == "eval-cvp") run_eval_cvp(run);
    else if (cfg.scenario == "grad-check") run_grad_check(run);
    run.summary = summarize_records(run.queries);
    run.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return run;
  }

  void run_attack_scenario(RunRecord& run) {
    const auto& cfg = config();
    std::vector<AttackJob> jobs;
    const auto modes = cfg.modes.empty() ? std::vector<ModeSpec>{cfg.attack.mode} : cfg.modes;
    for (const auto& m : modes) jobs.push_back({to_string(m), m, cfg.attack.steps, {}});
    run_jobs(run, cfg.pair, jobs);
  }

  /// full, no_cvp_gta, no_ret_loss, and the unoptimized baseline.
  void run_ablation(RunRecord& run) {
    const auto& cfg = config();
    run_jobs(run, cfg.pair,
             {{"full", parse_mode("full"), cfg.attack.steps, {}},
              {"no_cvp_gta", parse_mode("no_cvp_gta"), cfg.attack.steps, {}},
              {"no_ret_loss", parse_mode("no_ret_loss"), cfg.attack.steps, {}},
              {"base", parse_mode("full"), 0, {}}});
  }

  void run_alpha_sweep(RunRecord& run) {
    const auto& cfg = config();
    std::vector<AttackJob> jobs;
    for (double a : cfg.alphas) {
      const ModeSpec m{AttackMode::FixedAlpha, a};
      jobs.push_back({to_string(m), m, cfg.attack.steps, {}});
    }
    jobs.push_back({"full", parse_mode("full"), cfg.attack.steps, {}});
    run_jobs(run, cfg.pair, jobs);
  }

  /// One shared poison per repeat against the whole trigger query set.
  void run_batch(RunRecord& run) {
    const auto& cfg = config();
    const PairContext& pc = bench_.pair(cfg.pair);
    const auto& world = bench_.world();
    if (world.trigger_set.empty()) fail(ErrorCode::EmptyQuerySet, "world has no trigger queries");
    PoisonSpec spec;
    spec.layout = PoisonLayout::Batch;
    spec.n_adv = cfg.n_adv;
    spec.n_ret = cfg.n_ret;
    spec.command = world.trigger_command;
    const PoisonDocument poison = build_poison(pc.env->generator().tokenizer, "", "", spec);
    JointObjective obj(*pc.awf_env, world.trigger_set, poison.payload, &pc.cvp.projection);
    obj.set_gap_includes_poison(cfg.gap_includes_poison);
    const AttackJob job{"batch:" + to_string(cfg.attack.mode), cfg.attack.mode, cfg.attack.steps, {}};
    for (std::size_t r = 0; r < cfg.repeats; ++r) {
      AttackConfig ac = cfg.attack;
      ac.seed = derive_seed(cfg.seed, r);
      const AttackResult res = run_batch_attack(obj, poison.s_adv, ac);
      for (std::size_t q = 0; q < world.trigger_set.size(); ++q) {
        ScenarioTarget t{world.trigger_set[q], ""};
        QueryRun qr;
        qr.result = res;
        qr.outcome = pc.env->evaluate(t.query.query, t.query.target, {obj.poison_id(), res.poison_text});
        run.queries.push_back(record(job.label, pc, job, r, ac.seed, t, qr));
      }
      QueryRecord head = run.queries.back();
      head.query = "*";
      append_trace(run, head, res.trace);
    }
  }

  /// Optimizes on each surrogate (plus the unoptimized "none") and evaluates unchanged on each victim.
  void run_transfer(RunRecord& run) {
    const auto& cfg = config();
    const auto targets = bench_.targets();
    std::vector<std::optional<ModelPair>> surrogates{std::nullopt};
    for (const auto& s : cfg.surrogates) surrogates.emplace_back(s);
    std::ostringstream table;
    table << "surrogate,victim,asr_ret,asr_gen,pos_p,pos_p_count,runs\n";
    for (const auto& surrogate : surrogates) {
      const ModelPair source = surrogate.value_or(cfg.pair);
      const std::string source_label = surrogate ? source.label() : "none";
      const AttackJob job{source_label, surrogate ? cfg.attack.mode : parse_mode("full"),
                          surrogate ? cfg.attack.steps : 0, {}};
      std::vector<std::vector<std::string>> poisons(cfg.repeats, std::vector<std::string>(targets.size()));
      std::vector<std::vector<std::optional<std::size_t>>> firsts(cfg.repeats,
                                                                  std::vector<std::optional<std::size_t>>(targets.size()));
      const PairContext& spc = bench_.pair(source);
      for (std::size_t r = 0; r < cfg.repeats; ++r) {
        for (std::size_t i = 0; i < targets.size(); ++i) {
          const QueryRun qr = attack_query(spc, targets[i], job, query_seed(r, i));
          poisons[r][i] = qr.result.poison_text;
          firsts[r][i] = qr.result.first_success_step;
        }
      }
      for (const auto& victim : cfg.victims) {
        const PairContext& vpc = bench_.pair(victim);
        std::vector<QueryOutcome> outcomes;
        for (std::size_t r = 0; r < cfg.repeats; ++r) {
          for (std::size_t i = 0; i < targets.size(); ++i) {
            QueryRun qr;
            qr.result.poison_text = poisons[r][i];
            qr.result.first_success_step = firsts[r][i];
            qr.outcome = vpc.env->evaluate(targets[i].query.query, targets[i].query.target, {"poison", poisons[r][i]});
            outcomes.push_back(qr.outcome);
            QueryRecord rec = record(source_label + "->" + victim.label(), vpc, job, r, query_seed(r, i), targets[i], qr);
            run.queries.push_back(std::move(rec));
          }
        }
        const AttackMetrics m = summarize(outcomes);
        table << source_label << ',' << victim.label() << ',' << format_double(m.asr_ret) << ','
              << format_double(m.asr_gen) << ',' << (m.pos_p ? format_double(*m.pos_p) : "") << ','
              << m.retrieved_count << ',' << m.total << '\n';
      }
    }
    run.tables.push_back({"transfer_matrix.csv", table.str()});
  }

  /// Optimized poisons spliced into the benign top-k at each configured rank.
  void run_position_sweep(RunRecord& run) {
    const auto& cfg = config();
    const PairContext& pc = bench_.pair(cfg.pair);
    const auto targets = bench_.targets();
    const AttackJob job{"optimize", cfg.attack.mode, cfg.attack.steps, {}};
    std::vector<std::vector<QueryOutcome>> by_rank(cfg.ranks.size());
    for (std::size_t r = 0; r < cfg.repeats; ++r) {
      for (std::size_t i = 0; i < targets.size(); ++i) {
        const std::uint64_t seed = query_seed(r, i);
        const QueryRun qr = attack_query(pc, targets[i], job, seed);
        const auto& t = targets[i].query;
        const std::array<OverlayDocument, 1> overlay{OverlayDocument{"poison", qr.result.poison_text}};
        const RetrievalResult benign = pc.env->retrieve(t.query);
        for (std::size_t j = 0; j < cfg.ranks.size(); ++j) {
          const RetrievalResult forced = force_rank_insert(benign, {"poison", 0.0}, cfg.ranks[j]);
          QueryRun at = qr;
          at.outcome.rank = forced.rank_of("poison");
          at.outcome.retrieved = at.outcome.rank.has_value();
          at.outcome.output = pc.env->answer(t.query, pc.env->context_texts(forced, overlay));
          at.outcome.success = at.outcome.output.find(t.target) != std::string::npos;
          by_rank[j].push_back(at.outcome);
          const AttackJob labelled{"rank=" + std::to_string(cfg.ranks[j]), job.mode, job.steps, {}};
          run.queries.push_back(record(labelled.label, pc, labelled, r, seed, targets[i], at));
        }
      }
    }
    std::ostringstream table;
    table << "rank,asr_gen,runs\n";
    for (std::size_t j = 0; j < cfg.ranks.size(); ++j) {
      const AttackMetrics m = summarize(by_rank[j]);
      table << cfg.ranks[j] << ',' << format_double(m.asr_gen) << ',' << m.total << '\n';
    }
    run.tables.push_back({"position_sweep.csv", table.str()});
  }

  /// Perplexity-constrained attack with a post hoc compliance audit, plus swap-perturbed generation.
  void run_defense(RunRecord& run) {
    const auto& cfg = config();
    const PairContext& pc = bench_.pair(cfg.pair);
    const auto& gen = pc.env->generator();
    const PplThreshold threshold = fit_threshold(gen, bench_.corpus(), cfg.ppl_percentile);
    const auto targets = bench_.targets();
    const std::vector<AttackJob> jobs = {{"undefended", cfg.attack.mode, cfg.attack.steps, {}},
                                         {"ppl_constrained", cfg.attack.mode, cfg.attack.steps, threshold.threshold}};
    std::ostringstream table;
    table << "label,threshold,accepted_steps,violations,compliance,asr_gen,asr_gen_swap,ratio,copies\n";
    std::vector<double> poison_ppl;
    for (const auto& job : jobs) {
      std::size_t accepted = 0, violations = 0, hits = 0, swap_hits = 0, total = 0;
      for (std::size_t r = 0; r < cfg.repeats; ++r) {
        for (std::size_t i = 0; i < targets.size(); ++i) {
          const std::uint64_t seed = query_seed(r, i);
          const QueryRun qr = attack_query(pc, targets[i], job, seed);
          for (const auto& row : qr.result.trace) {
            if (!row.accepted) continue;
            ++accepted;
            const double ppl = row.perplexity ? *row.perplexity : perplexity(gen, qr.result.poison_text);
            if (job.ppl_threshold && ppl > *job.ppl_threshold) ++violations;
          }
          poison_ppl.push_back(perplexity(gen, qr.result.poison_text));
          const std::array<OverlayDocument, 1> overlay{OverlayDocument{"poison", qr.result.poison_text}};
          const DefendedAnswer d = defended_generate(*pc.env, targets[i].query.query, overlay, cfg.swap_ratio,
                                                     cfg.swap_copies, derive_seed(seed, 7));
          ++total;
          hits += qr.outcome.success ? 1 : 0;
          swap_hits += d.answer.find(targets[i].query.target) != std::string::npos ? 1 : 0;
          run.queries.push_back(record(job.label, pc, job, r, seed, targets[i], qr));
          append_trace(run, run.queries.back(), qr.result.trace);
        }
      }
      const double compliance = accepted == 0 ? 1.0 : 1.0 - static_cast<double>(violations) / static_cast<double>(accepted);
      table << job.label << ',' << (job.ppl_threshold ? format_double(*job.ppl_threshold) : "") << ',' << accepted << ','
            << violations << ',' << format_double(compliance) << ','
            << format_double(static_cast<double>(hits) / static_cast<double>(total)) << ','
            << format_double(static_cast<double>(swap_hits) / static_cast<double>(total)) << ','
            << format_double(cfg.swap_ratio) << ',' << cfg.swap_copies << '\n';
    }
    run.tables.push_back({"defense.csv", table.str()});
    const auto benign = corpus_perplexities(gen, bench_.corpus());
    std::ostringstream hist;
    hist << "source,bin_lo,bin_hi,count\n";
    for (const auto& [name, values] : {std::pair{"benign", benign}, std::pair{"poison", poison_ppl}}) {
      for (const auto& b : histogram(values, cfg.histogram_bins)) {
        hist << name << ',' << format_double(b.lo) << ',' << format_double(b.hi) << ',' << b.count << '\n';
      }
    }
    run.tables.push_back({"perplexity_histogram.csv", hist.str()});
  }

  void run_eval_cvp(RunRecord& run) {
    const auto& cfg = config();
    std::vector<ModelPair> pairs{cfg.pair};
    for (const auto& v : cfg.victims) {
      if (std::find(pairs.begin(), pairs.end(), v) == pairs.end()) pairs.push_back(v);
    }
    std::ostringstream table;
    table << "pair,shared_tokens,best_epoch,err_proj,recall_at_1,recall_at_5,recall_at_10\n";
    for (const auto& p : pairs) {
      const PairContext& pc = bench_.pair(p);
      const CvpReport& rep = pc.cvp.report;
      table << p.label() << ',' << pc.cvp.shared.size() << ',' << pc.cvp.training.best_epoch << ','
            << format_double(rep.err_proj) << ',' << format_double(rep.recall_at(1)) << ','
            << format_double(rep.recall_at(5)) << ',' << format_double(rep.recall_at(10)) << '\n';
    }
    CvpTrainConfig rot = cfg.cvp;
    rot.normalize_embeddings = true;
    const RotationCheck rc = rotation_round_trip(cfg.synthetic_dim, cfg.synthetic_vocab, rot, 1000, cfg.seed);
    table << "rotation/d" << cfg.synthetic_dim << ',' << cfg.synthetic_vocab << ",," << format_double(rc.report.err_proj)
          << ',' << format_double(rc.report.recall_at(1)) << ',' << format_double(rc.report.recall_at(5)) << ','
          << format_double(rc.report.recall_at(10)) << '\n';
    run.tables.push_back({"cvp_report.csv", table.str()});
    std::ostringstream ls;
    ls << "ls_residual,min_perturbed_residual,perturbations,ls_wins\n"
       << format_double(rc.ls_residual) << ',' << format_double(rc.min_perturbed_residual) << ',' << rc.perturbations
       << ',' << rc.ls_wins << '\n';
    run.tables.push_back({"least_squares_check.csv", ls.str()});
  }

  void run_grad_check(RunRecord& run) {
    const auto& cfg = config();
    const auto r = bench_.retriever(cfg.pair.retriever);
    const auto g = bench_.generator(cfg.pair.generator);
    const GradientFidelity f =
        gradient_fidelity(r->model, g->model, cfg.fd_instances, cfg.fd_coordinates, cfg.fd_epsilon, cfg.seed);
    std::ostringstream table;
    table << "model,instances,coordinates,max_rel_err,mean_rel_err\n";
    table << "retriever," << f.instances << ',' << f.retriever.compared << ',' << format_double(f.retriever.max_rel_err)
          << ',' << format_double(f.retriever.mean_rel_err) << '\n';
    table << "generator," << f.instances << ',' << f.generator.compared << ',' << format_double(f.generator.max_rel_err)
          << ',' << format_double(f.generator.mean_rel_err) << '\n';
    run.tables.push_back({"grad_check.csv", table.str()});
  }

 private:
  Workbench bench_;
};

inline RunRecord run_scenario(const ExperimentConfig& cfg, const std::filesystem::path& root) {
  ScenarioRunner runner(cfg);
  RunRecord run = runner.run();
  write_run(run, cfg, root);
  return run;
}

// ---------------------------------------------------------------------------
// Reports.

struct ReportRow {
  std::string label;
  std::string pair;
  std::string mode;
  double asr_ret = 0.0;
  double asr_gen = 0.0;
  std::optional<double> pos_p;
  double median_first_success = 0.0;
  std::size_t runs = 0;
  std::size_t records = 0;  // summary rows merged
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::vector<ReportRow> read_summary_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (KeyValueConfig::trim(line) != summary_header()) fail(ErrorCode::ConfigInvalid, "unexpected header in " + path.string());
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (KeyValueConfig::trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 9) fail(ErrorCode::ConfigInvalid, "malformed row in " + path.string());
    ReportRow r;
    r.label = cells[0];
    r.pair = cells[1];
    r.mode = cells[2];
    r.asr_ret = parse_double(cells[3]);
    r.asr_gen = parse_double(cells[4]);
    if (!cells[5].empty()) r.pos_p = parse_double(cells[5]);
    r.median_first_success = parse_double(cells[7]);
    r.runs = static_cast<std::size_t>(parse_double(cells[8]));
    r.records = 1;
    rows.push_back(r);
  }
  return rows;
}

/// Unweighted mean per (label, pair, mode) across records, in order of first appearance.
inline std::vector<ReportRow> aggregate(const std::vector<ReportRow>& rows) {
  std::vector<ReportRow> out;
  std::vector<std::size_t> pos_counts;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const ReportRow& o) { return o.label == r.label && o.pair == r.pair && o.mode == r.mode; });
    if (it == out.end()) {
      ReportRow fresh = r;
      fresh.asr_ret = fresh.asr_gen = fresh.median_first_success = 0.0;
      fresh.pos_p.reset();
      fresh.runs = fresh.records = 0;
      out.push_back(fresh);
      pos_counts.push_back(0);
      it = out.end() - 1;
    }
    const auto idx = static_cast<std::size_t>(it - out.begin());
    it->asr_ret += r.asr_ret;
    it->asr_gen += r.asr_gen;
    it->median_first_success += r.median_first_success;
    if (r.pos_p) {
      it->pos_p = it->pos_p.value_or(0.0) + *r.pos_p;
      ++pos_counts[idx];
    }
    it->runs += r.runs;
    ++it->records;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto n = static_cast<double>(out[i].records);
    out[i].asr_ret /= n;
    out[i].asr_gen /= n;
    out[i].median_first_success /= n;
    if (out[i].pos_p) *out[i].pos_p /= static_cast<double>(pos_counts[i]);
  }
  return out;
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out << "label,pair,mode,asr_ret,asr_gen,pos_p,median_first_success,runs,records\n";
  for (const auto& r : rows) {
    out << r.label << ',' << r.pair << ',' << r.mode << ',' << format_double(r.asr_ret) << ','
        << format_double(r.asr_gen) << ',' << (r.pos_p ? format_double(*r.pos_p) : "") << ','
        << format_double(r.median_first_success) << ',' << r.runs << ',' << r.records << '\n';
  }
  return out.str();
}

}  // namespace jointgcg
