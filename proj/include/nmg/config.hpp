#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmg/language_model.hpp"
#include "nmg/text.hpp"

namespace nmg {

struct RlConfig {
  double learning_rate = 1e-4;
  std::size_t epochs = 10;
  std::size_t minibatch_size = 64;
  std::size_t replay_buffer_size = 50000;
  double entropy_regularization = 0.01;
  std::size_t max_episodes = 200;
  std::optional<double> importance_ratio_cap;  // off unless set
  std::size_t hidden_size = 128;
  bool stochastic_actions = true;  // false: greedy actions during meta-training too
};

// Learning schedule for one inner loop (pre-training then fine-tuning).
struct InnerLoopConfig {
  double mask_probability = 0.05;
  double pretrain_learning_rate = 2e-5;
  std::size_t pretrain_epochs = 3;
  std::size_t pretrain_batch_size = 8;
  double finetune_learning_rate = 3e-5;
  std::size_t finetune_epochs = 1;
  std::size_t finetune_batch_size = 8;
  double weight_decay = 0.01;
};

struct MetaTrainConfig : InnerLoopConfig {
  std::size_t sampled_pretrain_size = 200;
  std::size_t max_train_size = 1000;
  std::size_t validation_size = 500;
};

struct MetaTestConfig : InnerLoopConfig {
  std::vector<std::string> baseline_strategies{"none", "random", "whole", "span", "entity", "punct"};
  std::size_t seeds = 3;
};

struct VocabConfig {
  std::size_t max_size = 30000;
  std::size_t min_frequency = 1;
};

// LM shape plus an optional warm start: a few epochs of random-mask MLM on
// the task corpus before meta-training, standing in for a pretrained LM.
struct ModelConfig {
  LmConfig lm;
  std::size_t base_pretrain_epochs = 0;
  double base_pretrain_learning_rate = 1e-3;
};

struct RunConfig {
  std::uint64_t seed = 0;
  TaskKind task = TaskKind::kSpanQa;
  ModelConfig model;
  VocabConfig vocab;
  RlConfig rl;
  MetaTrainConfig meta_train;
  MetaTestConfig meta_test;
  SyntheticConfig synthetic;
  std::size_t synthetic_test_contexts = 200;
  std::size_t warmup_episodes = 10;
  bool continual = true;
  bool self_play = true;
  std::size_t threads = 1;
  std::size_t keep_checkpoints = 3;

  // Task-dependent defaults (fine-tuning schedule differs for classification).
  static RunConfig defaults(TaskKind task = TaskKind::kSpanQa);

  void validate() const;
  nlohmann::ordered_json to_json() const;
  // Unknown keys are rejected; missing keys keep their defaults.
  static RunConfig from_json(const nlohmann::json& j);
};

RunConfig load_config(const std::filesystem::path& path);

// NMG_<SECTION>__<KEY>=value (case-insensitive key path, "__" separates levels);
// values are parsed as JSON when possible, else taken as strings.
void apply_env_overrides(nlohmann::json& j, const std::map<std::string, std::string>& env);
std::map<std::string, std::string> nmg_environment();

}  // namespace nmg
