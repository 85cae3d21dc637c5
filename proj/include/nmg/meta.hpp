#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmg/agent.hpp"
#include "nmg/config.hpp"
#include "nmg/language_model.hpp"
#include "nmg/masking.hpp"
#include "nmg/rl.hpp"
#include "nmg/text.hpp"

namespace nmg {

// Vocabulary over every context and question of a task.
Vocab build_task_vocab(const LoadedTask& task, const VocabConfig& config);
void save_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab load_vocab(const std::filesystem::path& path);

std::vector<TokenizedContext> tokenize_corpus(const std::vector<Document>& corpus, const Vocab& vocab,
                                              std::size_t max_seq_len);

// Token positions covered by gold answers, per context (span QA only).
std::map<std::size_t, std::vector<std::size_t>> answer_positions(const TaskDataset& data,
                                                                 const std::vector<TokenizedContext>& contexts);

// Everything an inner loop reads: the tokenized corpus plus labelled data.
struct PreparedTask {
  TaskKind kind = TaskKind::kSpanQa;
  Vocab vocab;
  std::vector<TokenizedContext> contexts;
  TaskDataset train_pool;  // D_tr with the hold-out removed
  TaskDataset validation;  // D_val
  std::vector<TaskInstance> validation_instances;
  std::size_t num_labels = 0;
  std::size_t max_seq_len = 128;
  std::map<std::size_t, std::vector<std::size_t>> answers;
};

// validation_size = 0 keeps every example in train_pool.
PreparedTask prepare_task(const LoadedTask& task, const Vocab& vocab, std::size_t max_seq_len,
                          std::size_t validation_size, std::uint64_t split_seed);

// Frozen LM features per context, computed on first use. Not thread-safe
// while filling; call prefetch before sharing across threads.
class StateCache {
 public:
  StateCache(const LmCheckpoint& lm, const std::vector<TokenizedContext>& contexts) : lm_(&lm), contexts_(&contexts) {}

  const AgentState& get(std::size_t context_index);
  void prefetch(const std::vector<std::size_t>& context_indices);
  const std::vector<TokenizedContext>& contexts() const { return *contexts_; }
  StateLookup lookup() {
    return [this](std::size_t i) -> const AgentState& { return get(i); };
  }

 private:
  const LmCheckpoint* lm_;
  const std::vector<TokenizedContext>* contexts_;
  std::map<std::size_t, AgentState> states_;
};

enum class PolicyKind { kNone, kHeuristic, kUniform, kNeuralSample, kNeuralGreedy };

struct MaskingPolicy {
  PolicyKind kind = PolicyKind::kUniform;
  MaskStrategy strategy = MaskStrategy::kRandom;  // kHeuristic only
  const AgentParams* agent = nullptr;             // neural kinds only

  static MaskingPolicy none() { return {PolicyKind::kNone, MaskStrategy::kNone, nullptr}; }
  static MaskingPolicy uniform() { return {PolicyKind::kUniform, MaskStrategy::kRandom, nullptr}; }
  static MaskingPolicy heuristic(MaskStrategy s) { return {PolicyKind::kHeuristic, s, nullptr}; }
  static MaskingPolicy neural(const AgentParams& agent, bool greedy) {
    return {greedy ? PolicyKind::kNeuralGreedy : PolicyKind::kNeuralSample, MaskStrategy::kNeural, &agent};
  }
};

struct InnerLoopSeeds {
  std::uint64_t mask = 0;
  std::uint64_t pretrain = 0;
  std::uint64_t finetune = 0;
};

struct InnerLoopInput {
  const PreparedTask* task = nullptr;
  std::vector<std::size_t> pretrain_contexts;  // S'
  const std::vector<TaskInstance>* train = nullptr;
  const std::vector<TaskInstance>* eval = nullptr;
  StateCache* states = nullptr;  // required for neural policies
};

struct InnerLoopResult {
  double score = 0.0;
  TaskMetrics metrics;
  EpisodeBuffer episode;
  LmCheckpoint adapted;  // post-pre-training, pre-fine-tuning
  std::vector<MaskPlan> plans;
  // Neural policies only: mean entropy and mass on answer positions over S'.
  double mean_entropy = 0.0;
  double answer_mass = 0.0;
  double uniform_answer_mass = 0.0;
  double masked_accuracy = 0.0;  // MLM recovery of the masked tokens, last pre-training epoch
};

InnerLoopResult inner_loop(const InnerLoopInput& input, const LmCheckpoint& theta, const MaskingPolicy& policy,
                           const InnerLoopConfig& config, const InnerLoopSeeds& seeds);

struct OuterLoopStats {
  std::size_t replays = 0;
  AgentUpdateStats update;
};

// assign_disjoint_rewards -> push_replays -> update_agent. `opponent` may be
// null when self-play is disabled.
OuterLoopStats outer_loop(ReplayBuffer& buffer, AgentParams& agent, const EpisodeBuffer& self,
                          const EpisodeBuffer& random, const EpisodeBuffer* opponent, double r, double r_random,
                          double r_opponent, StateCache& states, const RlConfig& rl, std::uint64_t seed);

struct MetricsRecord {
  std::size_t episode = 0;
  double r_neural = 0.0;
  double r_random = 0.0;
  double r_opponent = 0.0;
  int reward = 0;  // sgn(r_neural - r_random)
  int vs_opponent = 0;
  std::size_t cum_regret = 0;
  double entropy = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double opponent_policy_loss = 0.0;
  double opponent_value_loss = 0.0;
  double answer_mass = 0.0;
  double uniform_answer_mass = 0.0;
  double masked_accuracy = 0.0;         // neural inner loop
  double random_masked_accuracy = 0.0;  // random inner loop
  std::size_t replays = 0;
  std::size_t buffer_size = 0;
  bool explore = false;
  std::string lm_hash;  // episode-start checkpoint
  double wall_time = 0.0;

  nlohmann::ordered_json to_json() const;
  static MetricsRecord from_json(const nlohmann::json& j);
};

// regret_e = number of episodes i <= e with r_neural < r_random.
std::vector<std::size_t> cumulative_regret(const std::vector<MetricsRecord>& records);

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);
void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path);

struct MetaTrainOptions {
  std::filesystem::path run_dir;
  bool resume = true;
  std::optional<std::size_t> stop_after;  // stop once this many episodes are complete
  std::function<void(const MetricsRecord&)> on_episode;
};

struct MetaTrainResult {
  AgentParams agent;
  AgentParams opponent;
  LmCheckpoint lm;          // carried checkpoint after the last episode
  LmCheckpoint initial_lm;  // episode-0 checkpoint
  std::vector<MetricsRecord> metrics;
  bool finished = false;
};

// The run directory holds config.json, vocab.json, metrics.jsonl,
// masks.jsonl, state.json, replay snapshots and checkpoints/.
MetaTrainResult meta_train(const LoadedTask& task, const RunConfig& config, const MetaTrainOptions& options);

// Initial LM for a task: random init plus optional random-mask warm start.
LmCheckpoint initial_checkpoint(const PreparedTask& task, const RunConfig& config);

struct MetaTestResult {
  std::string strategy;
  std::uint64_t seed = 0;
  TaskMetrics metrics;
  double score = 0.0;
  std::vector<MaskPlan> plans;
};

// One inner loop over the full task: pre-train on every training context,
// fine-tune on all of D_tr and evaluate on the held-out test set.
MetaTestResult meta_test(const PreparedTask& train, const std::vector<TaskInstance>& test,
                         const LmCheckpoint& theta, const MaskingPolicy& policy, const MetaTestConfig& config,
                         std::uint64_t seed);

std::vector<TaskInstance> test_instances(const LoadedTask& test, const Vocab& vocab, std::size_t max_seq_len);

}  // namespace nmg
