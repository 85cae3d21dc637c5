#include "nmg/meta.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "nmg/error.hpp"

namespace nmg {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Task preparation

Vocab build_task_vocab(const LoadedTask& task, const VocabConfig& config) {
  std::vector<std::string> lines;
  lines.reserve(task.corpus.size() + task.dataset.size());
  for (const auto& d : task.corpus) lines.push_back(d.text);
  for (const auto& ex : task.dataset.examples) {
    if (!ex.question.empty()) lines.push_back(ex.question);
  }
  return build_vocab(lines, config.max_size, config.min_frequency);
}

void save_vocab(const Vocab& vocab, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << json{{"tokens", vocab.tokens()}}.dump() << '\n';
}

Vocab load_vocab(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  return Vocab(json::parse(in).at("tokens").get<std::vector<std::string>>());
}

std::vector<TokenizedContext> tokenize_corpus(const std::vector<Document>& corpus, const Vocab& vocab,
                                              std::size_t max_seq_len) {
  std::vector<TokenizedContext> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    out.push_back(tokenize(corpus[i].text, vocab, max_seq_len));
    out.back().context_index = i;
  }
  return out;
}

std::map<std::size_t, std::vector<std::size_t>> answer_positions(const TaskDataset& data,
                                                                 const std::vector<TokenizedContext>& contexts) {
  std::map<std::size_t, std::set<std::size_t>> found;
  if (data.kind != TaskKind::kSpanQa) return {};
  for (const auto& ex : data.examples) {
    const auto& ctx = contexts.at(ex.context_index);
    const int a = static_cast<int>(ex.answer_start);
    const int b = a + static_cast<int>(ex.answer_text.size());
    for (std::size_t t = 0; t < ctx.length(); ++t) {
      if (!ctx.maskable(t)) continue;
      if (ctx.offsets[t].begin < b && ctx.offsets[t].end > a) found[ex.context_index].insert(t);
    }
  }
  std::map<std::size_t, std::vector<std::size_t>> out;
  for (auto& [c, s] : found) out[c].assign(s.begin(), s.end());
  return out;
}

PreparedTask prepare_task(const LoadedTask& task, const Vocab& vocab, std::size_t max_seq_len,
                          std::size_t validation_size, std::uint64_t split_seed) {
  PreparedTask out;
  out.kind = task.dataset.kind;
  out.vocab = vocab;
  out.max_seq_len = max_seq_len;
  out.contexts = tokenize_corpus(task.corpus, vocab, max_seq_len);
  if (validation_size > 0) {
    auto [train, val] = split_holdout(task.dataset, validation_size, split_seed);
    out.train_pool = std::move(train);
    out.validation = std::move(val);
  } else {
    out.train_pool = task.dataset;
    out.validation = TaskDataset{task.dataset.kind, {}, task.dataset.label_names};
  }
  out.validation_instances = prepare_instances(out.validation, out.contexts, vocab, max_seq_len);
  out.num_labels = task.dataset.label_names.size();
  out.answers = answer_positions(task.dataset, out.contexts);
  return out;
}

std::vector<TaskInstance> test_instances(const LoadedTask& test, const Vocab& vocab, std::size_t max_seq_len) {
  return prepare_instances(test.dataset, tokenize_corpus(test.corpus, vocab, max_seq_len), vocab, max_seq_len);
}

const AgentState& StateCache::get(std::size_t context_index) {
  auto it = states_.find(context_index);
  if (it == states_.end()) {
    it = states_.emplace(context_index, agent_state(*lm_, contexts_->at(context_index))).first;
  }
  return it->second;
}

void StateCache::prefetch(const std::vector<std::size_t>& context_indices) {
  for (auto c : context_indices) get(c);
}

// ---------------------------------------------------------------------------
// Inner loop

namespace {

TrainOptions pretrain_options(const InnerLoopConfig& c, std::uint64_t seed) {
  return {c.pretrain_epochs, c.pretrain_learning_rate, c.pretrain_batch_size, c.weight_decay, seed};
}

TrainOptions finetune_options(const InnerLoopConfig& c, std::uint64_t seed) {
  return {c.finetune_epochs, c.finetune_learning_rate, c.finetune_batch_size, c.weight_decay, seed};
}

}  // namespace

InnerLoopResult inner_loop(const InnerLoopInput& input, const LmCheckpoint& theta, const MaskingPolicy& policy,
                           const InnerLoopConfig& config, const InnerLoopSeeds& seeds) {
  if (!input.task || !input.train || !input.eval) throw ConfigError("inner_loop: incomplete input");
  const PreparedTask& task = *input.task;
  const bool neural = policy.kind == PolicyKind::kNeuralSample || policy.kind == PolicyKind::kNeuralGreedy;
  if (neural && (!policy.agent || !input.states)) throw ConfigError("inner_loop: neural policy needs an agent and states");

  InnerLoopResult out;
  if (policy.kind == PolicyKind::kNone) {
    out.adapted = theta.clone();
  } else {
    std::vector<MaskedContext> masked;
    masked.reserve(input.pretrain_contexts.size());
    std::size_t mass_count = 0;
    for (const std::size_t ci : input.pretrain_contexts) {
      const TokenizedContext& ctx = task.contexts.at(ci);
      const std::uint64_t seed = mix_seed(seeds.mask, ci);
      MaskPlan plan;
      if (policy.kind == PolicyKind::kHeuristic) {
        plan = heuristic_mask(policy.strategy, ctx, config.mask_probability, seed);
      } else {
        const std::size_t budget = mask_count(ctx.maskable_count(), config.mask_probability);
        SampledActions chosen;
        if (policy.kind == PolicyKind::kUniform) {
          Rng rng(seed);
          chosen = uniform_actions(ctx.maskable_flags(), budget, rng);
        } else {
          const PolicyOutput po = policy_forward(*policy.agent, input.states->get(ci));
          if (policy.kind == PolicyKind::kNeuralSample) {
            Rng rng(seed);
            chosen = sample_actions(po, budget, rng);
          } else {
            chosen.actions = greedy_actions(po, budget);
            for (auto a : chosen.actions) chosen.behavior_probs.push_back(po.probabilities[a]);
          }
          out.mean_entropy += policy_entropy(po);
          if (const auto it = task.answers.find(ci); it != task.answers.end()) {
            for (auto pos : it->second) out.answer_mass += po.probabilities[pos];
            out.uniform_answer_mass +=
                static_cast<double>(it->second.size()) / static_cast<double>(ctx.maskable_count());
            ++mass_count;
          }
        }
        for (std::size_t t = 0; t < chosen.actions.size(); ++t) {
          out.episode.push_back({ci, chosen.actions[t], chosen.behavior_probs[t]});
        }
        std::vector<std::size_t> positions = chosen.actions;
        std::sort(positions.begin(), positions.end());
        plan = MaskPlan{ci, std::move(positions), config.mask_probability, budget};
      }
      masked.push_back(apply_mask_plan(ctx, plan));
      out.plans.push_back(std::move(plan));
    }
    if (neural && !input.pretrain_contexts.empty()) {
      out.mean_entropy /= static_cast<double>(input.pretrain_contexts.size());
    }
    if (mass_count > 0) {
      out.answer_mass /= static_cast<double>(mass_count);
      out.uniform_answer_mass /= static_cast<double>(mass_count);
    }
    PretrainReport report;
    out.adapted = pretrain_mlm(theta, masked, pretrain_options(config, seeds.pretrain), &report);
    out.masked_accuracy = report.masked_accuracy;
  }
  out.adapted.params.reset_optimizer();
  const auto tuned = fine_tune(out.adapted, task.kind, task.num_labels, *input.train,
                               finetune_options(config, seeds.finetune));
  out.metrics = evaluate_task(tuned.lm, tuned.head, *input.eval, task.vocab);
  out.score = out.metrics.score(task.kind);
  return out;
}

// ---------------------------------------------------------------------------
// Outer loop

OuterLoopStats outer_loop(ReplayBuffer& buffer, AgentParams& agent, const EpisodeBuffer& self,
                          const EpisodeBuffer& random, const EpisodeBuffer* opponent, double r, double r_random,
                          double r_opponent, StateCache& states, const RlConfig& rl, std::uint64_t seed) {
  auto replays = opponent ? assign_disjoint_rewards(self, random, *opponent, r, r_random, r_opponent)
                          : assign_random_only_rewards(self, random, r, r_random);
  OuterLoopStats stats;
  stats.replays = replays.size();
  std::vector<double> values;
  std::vector<std::size_t> freqs;
  std::map<std::size_t, double> value_of;
  for (auto& rep : replays) {
    const auto& ctx = states.contexts().at(rep.context_index);
    rep.token = ctx.ids.at(rep.position);
    auto it = value_of.find(rep.context_index);
    if (it == value_of.end()) {
      it = value_of.emplace(rep.context_index, value_forward(agent, states.get(rep.context_index)).item()).first;
    }
    values.push_back(it->second);
    freqs.push_back(token_frequency(ctx, rep.position));
  }
  push_replays(buffer, std::move(replays), values, freqs);
  AgentUpdateOptions update;
  update.epochs = rl.epochs;
  update.batch_size = rl.minibatch_size;
  update.lr = rl.learning_rate;
  update.alpha = rl.entropy_regularization;
  update.ratio_cap = rl.importance_ratio_cap;
  update.seed = seed;
  stats.update = update_agent(agent, buffer, update, states.lookup());
  return stats;
}

// ---------------------------------------------------------------------------
// Metrics

ordered_json MetricsRecord::to_json() const {
  ordered_json j;
  j["episode"] = episode;
  j["r_neural"] = r_neural;
  j["r_random"] = r_random;
  j["r_opponent"] = r_opponent;
  j["reward"] = reward;
  j["vs_opponent"] = vs_opponent;
  j["cum_regret"] = cum_regret;
  j["entropy"] = entropy;
  j["policy_loss"] = policy_loss;
  j["value_loss"] = value_loss;
  j["opponent_policy_loss"] = opponent_policy_loss;
  j["opponent_value_loss"] = opponent_value_loss;
  j["answer_mass"] = answer_mass;
  j["uniform_answer_mass"] = uniform_answer_mass;
  j["masked_accuracy"] = masked_accuracy;
  j["random_masked_accuracy"] = random_masked_accuracy;
  j["replays"] = replays;
  j["buffer_size"] = buffer_size;
  j["explore"] = explore;
  j["lm_hash"] = lm_hash;
  j["wall_time"] = wall_time;
  return j;
}

MetricsRecord MetricsRecord::from_json(const json& j) {
  MetricsRecord m;
  m.episode = j.at("episode").get<std::size_t>();
  m.r_neural = j.at("r_neural").get<double>();
  m.r_random = j.at("r_random").get<double>();
  m.r_opponent = j.at("r_opponent").get<double>();
  m.reward = j.at("reward").get<int>();
  m.vs_opponent = j.at("vs_opponent").get<int>();
  m.cum_regret = j.at("cum_regret").get<std::size_t>();
  m.entropy = j.at("entropy").get<double>();
  m.policy_loss = j.at("policy_loss").get<double>();
  m.value_loss = j.at("value_loss").get<double>();
  m.opponent_policy_loss = j.value("opponent_policy_loss", 0.0);
  m.opponent_value_loss = j.value("opponent_value_loss", 0.0);
  m.answer_mass = j.value("answer_mass", 0.0);
  m.uniform_answer_mass = j.value("uniform_answer_mass", 0.0);
  m.masked_accuracy = j.value("masked_accuracy", 0.0);
  m.random_masked_accuracy = j.value("random_masked_accuracy", 0.0);
  m.replays = j.value("replays", std::size_t{0});
  m.buffer_size = j.value("buffer_size", std::size_t{0});
  m.explore = j.value("explore", false);
  m.lm_hash = j.value("lm_hash", "");
  m.wall_time = j.value("wall_time", 0.0);
  return m;
}

std::vector<std::size_t> cumulative_regret(const std::vector<MetricsRecord>& records) {
  std::vector<std::size_t> out;
  std::size_t regret = 0;
  for (const auto& r : records) {
    if (r.r_neural < r.r_random) ++regret;
    out.push_back(regret);
  }
  return out;
}

std::vector<MetricsRecord> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open metrics file " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(MetricsRecord::from_json(json::parse(line)));
  }
  return out;
}

void write_metrics_csv(const std::vector<MetricsRecord>& records, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "episode,r_neural,r_random,r_opponent,reward,entropy,policy_loss,value_loss,cum_regret\n";
  out << std::setprecision(10);
  const auto regret = cumulative_regret(records);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    out << r.episode << ',' << r.r_neural << ',' << r.r_random << ',' << r.r_opponent << ',' << r.reward << ','
        << r.entropy << ',' << r.policy_loss << ',' << r.value_loss << ',' << regret[i] << '\n';
  }
}

// ---------------------------------------------------------------------------
// Meta-training

namespace {

enum Role : std::uint64_t {
  kSubtaskSeed = 1,
  kRandomMaskSeed,
  kOpponentMaskSeed,
  kNeuralMaskSeed,
  kPretrainSeed,
  kFinetuneSeed,
  kOpponentUpdateSeed,
  kNeuralUpdateSeed,
};

constexpr std::uint64_t kSplitTag = 0x5EED'0001;
constexpr std::uint64_t kLmInitTag = 0x5EED'0002;
constexpr std::uint64_t kAgentInitTag = 0x5EED'0003;
constexpr std::uint64_t kOpponentInitTag = 0x5EED'0004;
constexpr std::uint64_t kBasePretrainTag = 0x5EED'0005;
constexpr double kBaseMaskProbability = 0.15;

void write_file_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Keep only the JSON lines whose "episode" is below `episodes`.
void truncate_episode_log(const fs::path& path, std::size_t episodes) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string kept, line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (json::parse(line).at("episode").get<std::size_t>() < episodes) kept += line + '\n';
  }
  in.close();
  write_file_atomic(path, kept);
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw Error("cannot append to " + path.string());
  out << line << '\n';
}

fs::path checkpoint_path(const fs::path& run_dir, const std::string& role, std::size_t episode) {
  return run_dir / "checkpoints" / (role + "-" + std::to_string(episode) + ".bin");
}

void remove_checkpoint(const fs::path& path) {
  fs::remove(path);
  fs::remove(path.string() + ".json");
}

ordered_json mask_record(std::size_t episode, const char* agent, const InnerLoopResult& result,
                         const PreparedTask& task) {
  const auto stats = mask_stats(result.plans, task.contexts, task.vocab, std::numeric_limits<std::size_t>::max());
  ordered_json j;
  j["episode"] = episode;
  j["agent"] = agent;
  j["total"] = stats.total;
  j["by_class"] = stats.by_class;
  ordered_json tokens = ordered_json::object();
  for (const auto& [tok, n] : stats.top_tokens) tokens[tok] = n;
  j["tokens"] = tokens;
  return j;
}

}  // namespace

LmCheckpoint initial_checkpoint(const PreparedTask& task, const RunConfig& config) {
  LmConfig lm_config = config.model.lm;
  lm_config.vocab_size = task.vocab.size();
  LmCheckpoint lm = init_language_model(lm_config, mix_seed(config.seed, kLmInitTag));
  if (config.model.base_pretrain_epochs > 0) {
    const std::uint64_t base_seed = mix_seed(config.seed, kBasePretrainTag);
    const auto corpus = [&task, base_seed](std::size_t epoch) {
      std::vector<MaskedContext> out;
      for (const auto& ctx : task.contexts) {
        if (ctx.maskable_count() == 0) continue;
        const auto plan = random_mask(ctx, kBaseMaskProbability, mix_seed(base_seed, epoch, ctx.context_index));
        out.push_back(apply_mask_plan(ctx, plan));
      }
      return out;
    };
    TrainOptions options;
    options.epochs = config.model.base_pretrain_epochs;
    options.lr = config.model.base_pretrain_learning_rate;
    options.batch_size = config.meta_train.pretrain_batch_size;
    options.weight_decay = config.meta_train.weight_decay;
    options.seed = base_seed;
    lm = pretrain_mlm(lm, corpus, options);
  }
  lm.params.reset_optimizer();
  lm.episode = 0;
  return lm;
}

MetaTrainResult meta_train(const LoadedTask& task, const RunConfig& config, const MetaTrainOptions& options) {
  config.validate();
  if (options.run_dir.empty()) throw ConfigError("meta_train: run directory required");
  if (task.dataset.kind != config.task) throw ConfigError("meta_train: data kind does not match the config's task");
  const fs::path& dir = options.run_dir;
  fs::create_directories(dir / "checkpoints");
  const fs::path config_path = dir / "config.json";
  const fs::path state_path = dir / "state.json";
  const fs::path metrics_path = dir / "metrics.jsonl";
  const fs::path masks_path = dir / "masks.jsonl";
  const fs::path vocab_path = dir / "vocab.json";
  const fs::path replay_path = dir / "replay.jsonl";
  const fs::path opponent_replay_path = dir / "replay-opponent.jsonl";
  const std::string config_text = config.to_json().dump(2) + "\n";

  const bool resuming = options.resume && fs::exists(state_path);
  if (resuming && read_file(config_path) != config_text) {
    throw ConfigError("meta_train: " + dir.string() + " was created with a different config");
  }

  const Vocab vocab = resuming ? load_vocab(vocab_path) : build_task_vocab(task, config.vocab);
  const PreparedTask prepared = prepare_task(task, vocab, config.model.lm.max_seq_len,
                                             config.meta_train.validation_size, mix_seed(config.seed, kSplitTag));
  if (config.meta_train.sampled_pretrain_size > prepared.contexts.size()) {
    throw ConfigError("meta_train: sampled_pretrain_size " + std::to_string(config.meta_train.sampled_pretrain_size) +
                      " exceeds the corpus (" + std::to_string(prepared.contexts.size()) + " contexts)");
  }
  for (const auto& ctx : prepared.contexts) {
    if (ctx.maskable_count() == 0) throw DataError("meta_train: context " + std::to_string(ctx.context_index) + " is empty");
  }

  MetaTrainResult result;
  ReplayBuffer buffer(config.rl.replay_buffer_size);
  ReplayBuffer opponent_buffer(config.rl.replay_buffer_size);
  std::size_t start_episode = 0;
  const fs::path initial_path = dir / "checkpoints" / "lm-initial.bin";

  if (resuming) {
    const json state = json::parse(read_file(state_path));
    start_episode = state.at("episodes_completed").get<std::size_t>();
    result.initial_lm = LmCheckpoint::load(initial_path);
    if (start_episode == 0) {
      result.lm = result.initial_lm.clone();
      result.agent = init_agent(config.model.lm.model_dim, config.model.lm.heads, config.rl.hidden_size,
                                mix_seed(config.seed, kAgentInitTag));
      result.opponent = init_agent(config.model.lm.model_dim, config.model.lm.heads, config.rl.hidden_size,
                                   mix_seed(config.seed, kOpponentInitTag));
    } else {
      const std::size_t last = start_episode - 1;
      result.lm = LmCheckpoint::load(checkpoint_path(dir, "lm", last));
      result.agent = AgentParams::load(checkpoint_path(dir, "agent", last));
      result.opponent = AgentParams::load(checkpoint_path(dir, "opponent", last));
      buffer = ReplayBuffer::import_jsonl(replay_path, config.rl.replay_buffer_size);
      opponent_buffer = ReplayBuffer::import_jsonl(opponent_replay_path, config.rl.replay_buffer_size);
    }
    if (hash_hex(result.lm.hash()) != state.at("lm_hash").get<std::string>() ||
        hash_hex(result.agent.hash()) != state.at("agent_hash").get<std::string>()) {
      throw DataError("meta_train: checkpoints in " + dir.string() + " do not match state.json");
    }
    truncate_episode_log(metrics_path, start_episode);
    truncate_episode_log(masks_path, start_episode);
    if (fs::exists(metrics_path)) result.metrics = read_metrics(metrics_path);
  } else {
    for (const auto& p : {state_path, metrics_path, masks_path, replay_path, opponent_replay_path}) fs::remove(p);
    fs::remove_all(dir / "checkpoints");
    fs::create_directories(dir / "checkpoints");
    write_file_atomic(config_path, config_text);
    save_vocab(vocab, vocab_path);
    result.initial_lm = initial_checkpoint(prepared, config);
    result.initial_lm.save(initial_path);
    result.lm = result.initial_lm.clone();
    result.agent = init_agent(config.model.lm.model_dim, config.model.lm.heads, config.rl.hidden_size,
                              mix_seed(config.seed, kAgentInitTag));
    result.opponent = init_agent(config.model.lm.model_dim, config.model.lm.heads, config.rl.hidden_size,
                                 mix_seed(config.seed, kOpponentInitTag));
    write_file_atomic(state_path, json{{"episodes_completed", 0},
                                       {"lm_hash", hash_hex(result.lm.hash())},
                                       {"agent_hash", hash_hex(result.agent.hash())},
                                       {"opponent_hash", hash_hex(result.opponent.hash())}}
                                          .dump() +
                                      "\n");
  }

  std::size_t regret = result.metrics.empty() ? 0 : result.metrics.back().cum_regret;
  const SubTaskSizes sizes{config.meta_train.sampled_pretrain_size, config.meta_train.max_train_size};

  for (std::size_t episode = start_episode; episode < config.rl.max_episodes; ++episode) {
    if (options.stop_after && episode >= *options.stop_after) return result;
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t s = config.seed;
    const SubTask sub = sample_subtask(prepared.contexts.size(), prepared.train_pool, prepared.validation, sizes,
                                       mix_seed(s, episode, kSubtaskSeed));
    const auto train = prepare_instances(sub.train, prepared.contexts, vocab, prepared.max_seq_len);
    const LmCheckpoint theta = result.lm.clone();
    StateCache states(theta, prepared.contexts);
    states.prefetch(sub.contexts);

    InnerLoopInput input{&prepared, sub.contexts, &train, &prepared.validation_instances, &states};
    const bool explore = episode < config.warmup_episodes;
    auto seeds_for = [&](Role role) {
      return InnerLoopSeeds{mix_seed(s, episode, role), mix_seed(s, episode, kPretrainSeed),
                            mix_seed(s, episode, kFinetuneSeed)};
    };
    const bool greedy = !config.rl.stochastic_actions;
    const MaskingPolicy neural_policy = explore ? MaskingPolicy::uniform() : MaskingPolicy::neural(result.agent, greedy);
    const MaskingPolicy opponent_policy =
        explore ? MaskingPolicy::uniform() : MaskingPolicy::neural(result.opponent, greedy);

    auto run_random = [&] { return inner_loop(input, theta, MaskingPolicy::uniform(), config.meta_train, seeds_for(kRandomMaskSeed)); };
    auto run_opponent = [&] { return inner_loop(input, theta, opponent_policy, config.meta_train, seeds_for(kOpponentMaskSeed)); };
    auto run_neural = [&] { return inner_loop(input, theta, neural_policy, config.meta_train, seeds_for(kNeuralMaskSeed)); };

    InnerLoopResult random_run, opponent_run, neural_run;
    if (config.threads > 1) {
      auto f_random = std::async(std::launch::async, run_random);
      auto f_opponent = config.self_play ? std::async(std::launch::async, run_opponent) : std::future<InnerLoopResult>{};
      neural_run = run_neural();
      random_run = f_random.get();
      if (config.self_play) opponent_run = f_opponent.get();
    } else {
      random_run = run_random();
      if (config.self_play) opponent_run = run_opponent();
      neural_run = run_neural();
    }

    // Entropy and answer mass are tracked even while exploring.
    double entropy = neural_run.mean_entropy;
    double answer_mass = neural_run.answer_mass;
    double uniform_mass = neural_run.uniform_answer_mass;
    if (explore) {
      std::size_t mass_count = 0;
      entropy = answer_mass = uniform_mass = 0.0;
      for (auto ci : sub.contexts) {
        const PolicyOutput po = policy_forward(result.agent, states.get(ci));
        entropy += policy_entropy(po);
        if (const auto it = prepared.answers.find(ci); it != prepared.answers.end()) {
          for (auto pos : it->second) answer_mass += po.probabilities[pos];
          uniform_mass += static_cast<double>(it->second.size()) /
                          static_cast<double>(prepared.contexts[ci].maskable_count());
          ++mass_count;
        }
      }
      entropy /= static_cast<double>(sub.contexts.size());
      if (mass_count > 0) {
        answer_mass /= static_cast<double>(mass_count);
        uniform_mass /= static_cast<double>(mass_count);
      }
    }

    OuterLoopStats opponent_stats;
    if (config.self_play) {
      opponent_stats = outer_loop(opponent_buffer, result.opponent, opponent_run.episode, random_run.episode,
                                  &neural_run.episode, opponent_run.score, random_run.score, neural_run.score, states,
                                  config.rl, mix_seed(s, episode, kOpponentUpdateSeed));
    }
    const OuterLoopStats neural_stats =
        outer_loop(buffer, result.agent, neural_run.episode, random_run.episode,
                   config.self_play ? &opponent_run.episode : nullptr, neural_run.score, random_run.score,
                   opponent_run.score, states, config.rl, mix_seed(s, episode, kNeuralUpdateSeed));

    result.lm = config.continual ? std::move(neural_run.adapted) : result.initial_lm.clone();
    result.lm.params.reset_optimizer();
    result.lm.episode = episode + 1;

    MetricsRecord m;
    m.episode = episode;
    m.r_neural = neural_run.score;
    m.r_random = random_run.score;
    m.r_opponent = config.self_play ? opponent_run.score : 0.0;
    m.reward = compute_reward(neural_run.score, random_run.score);
    m.vs_opponent = config.self_play ? compute_reward(neural_run.score, opponent_run.score) : 0;
    if (neural_run.score < random_run.score) ++regret;
    m.cum_regret = regret;
    m.entropy = entropy;
    m.policy_loss = neural_stats.update.policy_loss;
    m.value_loss = neural_stats.update.value_loss;
    m.opponent_policy_loss = opponent_stats.update.policy_loss;
    m.opponent_value_loss = opponent_stats.update.value_loss;
    m.answer_mass = answer_mass;
    m.uniform_answer_mass = uniform_mass;
    m.masked_accuracy = neural_run.masked_accuracy;
    m.random_masked_accuracy = random_run.masked_accuracy;
    m.replays = neural_stats.replays;
    m.buffer_size = buffer.size();
    m.explore = explore;
    m.lm_hash = hash_hex(theta.hash());
    m.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    // Persist: checkpoints and buffers first, then logs, then the state marker.
    result.lm.save(checkpoint_path(dir, "lm", episode));
    result.agent.save(checkpoint_path(dir, "agent", episode), episode, "primary");
    result.opponent.save(checkpoint_path(dir, "opponent", episode), episode, "opponent");
    buffer.export_jsonl(replay_path);
    opponent_buffer.export_jsonl(opponent_replay_path);
    append_line(metrics_path, m.to_json().dump());
    append_line(masks_path, mask_record(episode, "neural", neural_run, prepared).dump());
    append_line(masks_path, mask_record(episode, "random", random_run, prepared).dump());
    if (config.self_play) append_line(masks_path, mask_record(episode, "opponent", opponent_run, prepared).dump());
    write_file_atomic(state_path, json{{"episodes_completed", episode + 1},
                                       {"lm_hash", hash_hex(result.lm.hash())},
                                       {"agent_hash", hash_hex(result.agent.hash())},
                                       {"opponent_hash", hash_hex(result.opponent.hash())}}
                                          .dump() +
                                      "\n");
    if (episode >= config.keep_checkpoints) {
      for (const char* role : {"lm", "agent", "opponent"}) {
        remove_checkpoint(checkpoint_path(dir, role, episode - config.keep_checkpoints));
      }
    }
    result.metrics.push_back(m);
    if (options.on_episode) options.on_episode(m);
  }

  result.finished = true;
  result.agent.save(dir / "agent-final.bin", config.rl.max_episodes, "primary");
  result.opponent.save(dir / "opponent-final.bin", config.rl.max_episodes, "opponent");
  result.lm.save(dir / "lm-final.bin");
  write_metrics_csv(result.metrics, dir / "metrics.csv");

  ordered_json report;
  report["episodes"] = result.metrics.size();
  const auto regret_series = cumulative_regret(result.metrics);
  report["cumulative_regret"] = regret_series.empty() ? 0 : regret_series.back();
  std::size_t wins = 0, losses = 0, ties = 0;
  for (const auto& m : result.metrics) {
    (m.reward > 0 ? wins : m.reward < 0 ? losses : ties)++;
  }
  report["vs_random"] = {{"wins", wins}, {"losses", losses}, {"ties", ties}};
  report["agent_hash"] = hash_hex(result.agent.hash());
  report["opponent_hash"] = hash_hex(result.opponent.hash());
  report["lm_hash"] = hash_hex(result.lm.hash());
  write_file_atomic(dir / "report.json", report.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------
// Meta-testing

MetaTestResult meta_test(const PreparedTask& train, const std::vector<TaskInstance>& test,
                         const LmCheckpoint& theta, const MaskingPolicy& policy, const MetaTestConfig& config,
                         std::uint64_t seed) {
  if (test.empty()) throw DataError("meta_test: empty test set");
  const auto train_instances = prepare_instances(train.train_pool, train.contexts, train.vocab, train.max_seq_len);
  std::vector<std::size_t> all(train.contexts.size());
  std::iota(all.begin(), all.end(), 0);
  StateCache states(theta, train.contexts);
  InnerLoopInput input{&train, all, &train_instances, &test, &states};
  const InnerLoopSeeds seeds{mix_seed(seed, 0x7E57, 1), mix_seed(seed, 0x7E57, 2), mix_seed(seed, 0x7E57, 3)};
  auto run = inner_loop(input, theta, policy, config, seeds);
  MetaTestResult out;
  switch (policy.kind) {
    case PolicyKind::kNone: out.strategy = "none"; break;
    case PolicyKind::kUniform: out.strategy = "random"; break;
    case PolicyKind::kHeuristic: out.strategy = strategy_name(policy.strategy); break;
    default: out.strategy = "neural"; break;
  }
  out.seed = seed;
  out.metrics = run.metrics;
  out.score = run.score;
  out.plans = std::move(run.plans);
  return out;
}

}  // namespace nmg
