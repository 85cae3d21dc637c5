#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nmg/config.hpp"
#include "nmg/error.hpp"
#include "nmg/meta.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string run_dir;
  std::optional<std::size_t> threads;
};

nmg::RunConfig resolve_config(const GlobalOptions& g, const fs::path& fallback = {}) {
  nmg::RunConfig config;
  if (!g.config_path.empty()) {
    config = nmg::load_config(g.config_path);
  } else if (!fallback.empty() && fs::exists(fallback)) {
    config = nmg::load_config(fallback);
  } else {
    json j = json::object();
    nmg::apply_env_overrides(j, nmg::nmg_environment());
    config = nmg::RunConfig::from_json(j);
  }
  if (g.seed) config.seed = *g.seed;
  if (g.threads) config.threads = *g.threads;
  config.validate();
  return config;
}

fs::path require_run_dir(const GlobalOptions& g) {
  if (g.run_dir.empty()) throw nmg::ConfigError("--run-dir is required");
  return g.run_dir;
}

nmg::LoadedTask load_split(const fs::path& data_dir, const char* split, nmg::TaskKind kind) {
  return nmg::load_jsonl(data_dir / (std::string(split) + ".jsonl"), kind);
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw nmg::Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

ordered_json result_row(const nmg::MetaTestResult& r) {
  ordered_json row;
  row["strategy"] = r.strategy;
  row["seed"] = r.seed;
  row["em"] = r.metrics.em;
  row["f1"] = r.metrics.f1;
  row["accuracy"] = r.metrics.acc;
  row["score"] = r.score;
  row["count"] = r.metrics.count;
  return row;
}

void print_rows(const std::vector<nmg::MetaTestResult>& rows) {
  std::printf("%-10s %20s %8s %8s %8s\n", "strategy", "seed", "EM", "F1", "Acc");
  for (const auto& r : rows) {
    std::printf("%-10s %20llu %8.2f %8.2f %8.2f\n", r.strategy.c_str(), static_cast<unsigned long long>(r.seed),
                100.0 * r.metrics.em, 100.0 * r.metrics.f1, 100.0 * r.metrics.acc);
  }
}

// gen-corpus -----------------------------------------------------------------

int cmd_gen_corpus(const GlobalOptions& g, const std::string& out_dir) {
  const auto config = resolve_config(g);
  nmg::SyntheticConfig train_cfg = config.synthetic;
  nmg::SyntheticConfig test_cfg = config.synthetic;
  test_cfg.n_contexts = config.synthetic_test_contexts;
  fs::create_directories(out_dir);
  nmg::write_jsonl(fs::path(out_dir) / "train.jsonl", nmg::gen_synthetic_task(train_cfg, nmg::mix_seed(config.seed, 1)));
  nmg::write_jsonl(fs::path(out_dir) / "test.jsonl", nmg::gen_synthetic_task(test_cfg, nmg::mix_seed(config.seed, 2)));
  std::printf("wrote %s/train.jsonl (%zu contexts) and %s/test.jsonl (%zu contexts)\n", out_dir.c_str(),
              train_cfg.n_contexts, out_dir.c_str(), test_cfg.n_contexts);
  return 0;
}

// meta-train -----------------------------------------------------------------

int cmd_meta_train(const GlobalOptions& g, const std::string& data_dir, bool fresh, std::optional<std::size_t> stop_after,
                   bool quiet) {
  const fs::path run_dir = require_run_dir(g);
  const auto config = resolve_config(g);
  const auto task = load_split(data_dir, "train", config.task);
  nmg::MetaTrainOptions options;
  options.run_dir = run_dir;
  options.resume = !fresh;
  options.stop_after = stop_after;
  if (!quiet) {
    std::printf("%7s %8s %8s %8s %6s %8s %8s\n", "episode", "r", "r_rand", "r_opp", "regret", "entropy", "mass");
    options.on_episode = [](const nmg::MetricsRecord& m) {
      std::printf("%7zu %8.4f %8.4f %8.4f %6zu %8.4f %8.4f\n", m.episode, m.r_neural, m.r_random, m.r_opponent,
                  m.cum_regret, m.entropy, m.answer_mass);
      std::fflush(stdout);
    };
  }
  const auto result = nmg::meta_train(task, config, options);
  std::printf("%s after %zu episodes; run directory %s\n", result.finished ? "finished" : "stopped",
              result.metrics.size(), run_dir.c_str());
  return 0;
}

// meta-test ------------------------------------------------------------------

struct TestSetup {
  nmg::RunConfig config;
  nmg::PreparedTask train;
  std::vector<nmg::TaskInstance> test;
};

TestSetup load_test_setup(const GlobalOptions& g, const fs::path& run_dir, const std::string& data_dir) {
  TestSetup s{resolve_config(g, run_dir / "config.json"), {}, {}};
  const auto train = load_split(data_dir, "train", s.config.task);
  const auto test = load_split(data_dir, "test", s.config.task);
  const fs::path vocab_path = run_dir / "vocab.json";
  const nmg::Vocab vocab = fs::exists(vocab_path) ? nmg::load_vocab(vocab_path)
                                                  : nmg::build_task_vocab(train, s.config.vocab);
  if (!fs::exists(vocab_path)) {
    fs::create_directories(run_dir);
    nmg::save_vocab(vocab, vocab_path);
  }
  s.train = nmg::prepare_task(train, vocab, s.config.model.lm.max_seq_len, 0, 0);
  s.test = nmg::test_instances(test, vocab, s.config.model.lm.max_seq_len);
  return s;
}

nmg::LmCheckpoint load_or_create_initial(const TestSetup& s, const fs::path& run_dir) {
  const fs::path path = run_dir / "checkpoints" / "lm-initial.bin";
  if (fs::exists(path)) return nmg::LmCheckpoint::load(path);
  auto lm = nmg::initial_checkpoint(s.train, s.config);
  fs::create_directories(path.parent_path());
  lm.save(path);
  return lm;
}

std::vector<std::uint64_t> test_seeds(const nmg::RunConfig& config) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < config.meta_test.seeds; ++i) seeds.push_back(nmg::mix_seed(config.seed, 0x7E57, i));
  return seeds;
}

int cmd_meta_test(const GlobalOptions& g, const std::string& data_dir, const std::string& checkpoint,
                  bool with_random) {
  const fs::path run_dir = require_run_dir(g);
  const auto setup = load_test_setup(g, run_dir, data_dir);
  const nmg::LmCheckpoint theta = checkpoint == "final" ? nmg::LmCheckpoint::load(run_dir / "lm-final.bin")
                                                        : nmg::LmCheckpoint::load(run_dir / "checkpoints" / "lm-initial.bin");
  const fs::path agent_path = run_dir / "agent-final.bin";
  if (!fs::exists(agent_path)) throw nmg::DataError(agent_path.string() + " not found; run meta-train first");
  const auto agent = nmg::AgentParams::load(agent_path);
  std::vector<nmg::MetaTestResult> rows;
  for (auto seed : test_seeds(setup.config)) {
    rows.push_back(nmg::meta_test(setup.train, setup.test, theta, nmg::MaskingPolicy::neural(agent, true),
                                  setup.config.meta_test, seed));
    if (with_random) {
      rows.push_back(nmg::meta_test(setup.train, setup.test, theta, nmg::MaskingPolicy::uniform(),
                                    setup.config.meta_test, seed));
    }
  }
  ordered_json report;
  report["checkpoint"] = checkpoint;
  report["rows"] = ordered_json::array();
  for (const auto& r : rows) report["rows"].push_back(result_row(r));
  write_json(run_dir / "meta_test.json", report);
  print_rows(rows);
  return 0;
}

// baseline -------------------------------------------------------------------

int cmd_baseline(const GlobalOptions& g, const std::string& data_dir, std::vector<std::string> strategies) {
  const fs::path run_dir = require_run_dir(g);
  const auto setup = load_test_setup(g, run_dir, data_dir);
  if (strategies.empty()) strategies = setup.config.meta_test.baseline_strategies;
  std::vector<nmg::MaskStrategy> parsed;
  for (const auto& name : strategies) {
    const auto s = nmg::parse_strategy(name);
    if (s == nmg::MaskStrategy::kNeural) throw nmg::ConfigError("baseline: use meta-test for the neural policy");
    parsed.push_back(s);
  }
  const auto theta = load_or_create_initial(setup, run_dir);
  std::vector<nmg::MetaTestResult> rows;
  for (auto s : parsed) {
    const auto policy = s == nmg::MaskStrategy::kNone ? nmg::MaskingPolicy::none() : nmg::MaskingPolicy::heuristic(s);
    for (auto seed : test_seeds(setup.config)) {
      rows.push_back(nmg::meta_test(setup.train, setup.test, theta, policy, setup.config.meta_test, seed));
    }
  }
  ordered_json report;
  report["rows"] = ordered_json::array();
  for (const auto& r : rows) report["rows"].push_back(result_row(r));
  write_json(run_dir / "baseline.json", report);
  print_rows(rows);
  return 0;
}

// analyze --------------------------------------------------------------------

int cmd_analyze(const GlobalOptions& g, std::size_t top_k) {
  const fs::path run_dir = require_run_dir(g);
  const auto records = nmg::read_metrics(run_dir / "metrics.jsonl");
  nmg::write_metrics_csv(records, run_dir / "curves.csv");
  {
    std::ofstream out(run_dir / "regret.csv", std::ios::trunc);
    out << "episode,cum_regret,worst_case\n";
    const auto regret = nmg::cumulative_regret(records);
    for (std::size_t i = 0; i < records.size(); ++i) {
      out << records[i].episode << ',' << regret[i] << ',' << (i + 1) << '\n';
    }
  }

  struct Totals {
    std::size_t total = 0;
    std::map<std::string, std::size_t> by_class;
    std::map<std::string, std::size_t> tokens;
  };
  std::map<std::string, Totals> per_agent;
  std::ifstream in(run_dir / "masks.jsonl");
  if (!in) throw nmg::DataError("cannot open " + (run_dir / "masks.jsonl").string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    auto& t = per_agent[j.at("agent").get<std::string>()];
    t.total += j.at("total").get<std::size_t>();
    for (const auto& [k, v] : j.at("by_class").items()) t.by_class[k] += v.get<std::size_t>();
    for (const auto& [k, v] : j.at("tokens").items()) t.tokens[k] += v.get<std::size_t>();
  }

  ordered_json report;
  report["episodes"] = records.size();
  report["agents"] = ordered_json::object();
  for (const auto& [agent, t] : per_agent) {
    ordered_json a;
    a["total"] = t.total;
    a["by_class"] = t.by_class;
    std::vector<std::pair<std::string, std::size_t>> top(t.tokens.begin(), t.tokens.end());
    std::stable_sort(top.begin(), top.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
    if (top.size() > top_k) top.resize(top_k);
    a["top_tokens"] = ordered_json::array();
    for (const auto& [tok, n] : top) a["top_tokens"].push_back({tok, n});
    report["agents"][agent] = a;
  }
  // Share of each class in the neural agent's masks minus the random agent's.
  if (per_agent.count("neural") && per_agent.count("random")) {
    const auto& n = per_agent["neural"];
    const auto& r = per_agent["random"];
    std::set<std::string> classes;
    for (const auto& [k, v] : n.by_class) classes.insert(k);
    for (const auto& [k, v] : r.by_class) classes.insert(k);
    ordered_json diff = ordered_json::object();
    for (const auto& c : classes) {
      const double pn = n.total ? static_cast<double>(n.by_class.count(c) ? n.by_class.at(c) : 0) / n.total : 0.0;
      const double pr = r.total ? static_cast<double>(r.by_class.count(c) ? r.by_class.at(c) : 0) / r.total : 0.0;
      diff[c] = pn - pr;
    }
    report["neural_minus_random"] = diff;
  }
  if (!records.empty()) {
    double neural = 0.0, random = 0.0;
    for (const auto& r : records) {
      neural += r.masked_accuracy;
      random += r.random_masked_accuracy;
    }
    report["masked_accuracy"] = {{"neural", neural / records.size()}, {"random", random / records.size()}};
  }
  write_json(run_dir / "analysis.json", report);

  std::printf("%-10s %8s", "agent", "total");
  for (const char* c : {"entity_candidate", "plain_word", "punctuation", "subword_piece"}) std::printf(" %17s", c);
  std::printf("\n");
  for (const auto& [agent, t] : per_agent) {
    std::printf("%-10s %8zu", agent.c_str(), t.total);
    for (const char* c : {"entity_candidate", "plain_word", "punctuation", "subword_piece"}) {
      const auto it = t.by_class.find(c);
      std::printf(" %17zu", it == t.by_class.end() ? std::size_t{0} : it->second);
    }
    std::printf("\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural mask generator: meta-training and evaluation of learned masking policies"};
  app.require_subcommand(1);
  GlobalOptions g;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  app.add_option("--config", g.config_path, "JSON run config")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--run-dir", g.run_dir, "Run directory");
  auto* threads_opt = app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  app.fallthrough();

  std::string out_dir, data_dir, checkpoint = "initial";
  bool fresh = false, quiet = false, no_random = false;
  std::size_t stop_after = 0, top_k = 10;
  std::vector<std::string> strategies;

  auto* gen = app.add_subcommand("gen-corpus", "Write a synthetic planted-marker task (train.jsonl, test.jsonl)");
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("meta-train", "Train the masking policy with self-play");
  train->add_option("--data", data_dir, "Directory with train.jsonl")->required();
  train->add_flag("--fresh", fresh, "Ignore any saved state in the run directory");
  auto* stop_opt = train->add_option("--stop-after", stop_after, "Stop after this many completed episodes");
  train->add_flag("--quiet", quiet, "No per-episode output");

  auto* test = app.add_subcommand("meta-test", "Evaluate the trained policy on the held-out test set");
  test->add_option("--data", data_dir, "Directory with train.jsonl and test.jsonl")->required();
  test->add_option("--checkpoint", checkpoint, "LM to start from")->check(CLI::IsMember({"initial", "final"}));
  test->add_flag("--no-random", no_random, "Skip the random-masking comparison rows");

  auto* base = app.add_subcommand("baseline", "Heuristic masking baselines");
  base->add_option("--data", data_dir, "Directory with train.jsonl and test.jsonl")->required();
  base->add_option("--strategy", strategies, "none, random, whole, span, entity or punct (repeatable)");

  auto* analyze = app.add_subcommand("analyze", "Mask statistics and learning-curve CSVs for a run");
  analyze->add_option("--top", top_k, "Most-masked tokens to report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  if (*seed_opt) g.seed = seed;
  if (*threads_opt) g.threads = threads;

  try {
    if (*gen) return cmd_gen_corpus(g, out_dir);
    if (*train) {
      return cmd_meta_train(g, data_dir, fresh, *stop_opt ? std::optional<std::size_t>(stop_after) : std::nullopt,
                            quiet);
    }
    if (*test) return cmd_meta_test(g, data_dir, checkpoint, !no_random);
    if (*base) return cmd_baseline(g, data_dir, strategies);
    if (*analyze) return cmd_analyze(g, top_k);
  } catch (const nmg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const nmg::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const nmg::Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
