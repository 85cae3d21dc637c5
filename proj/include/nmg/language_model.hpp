#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmg/autodiff.hpp"
#include "nmg/masking.hpp"
#include "nmg/parameters.hpp"
#include "nmg/text.hpp"

namespace nmg {

struct LmConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t model_dim = 64;
  std::size_t ff_dim = 128;
  std::size_t max_seq_len = 128;
  std::size_t vocab_size = 0;
  double dropout = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static LmConfig from_json(const nlohmann::json& j);
};

// Encoder parameters. The output projection of the MLM head is the token
// embedding table itself, so there is a single storage for e(w).
struct LmCheckpoint {
  LmConfig config;
  ParameterSet params;
  std::uint64_t episode = 0;

  std::uint64_t hash() const { return params.content_hash(); }
  LmCheckpoint clone() const { return {config, params.clone(), episode}; }

  void save(const std::filesystem::path& path) const;
  static LmCheckpoint load(const std::filesystem::path& path);
};

LmCheckpoint init_language_model(const LmConfig& config, std::uint64_t seed);

// Multi-head self-attention with residual and post-norm, parameters under
// `prefix` (.q .k .v .o weights/biases and .ln gain/bias).
Tensor self_attention_block(const ParameterSet& params, const std::string& prefix, const Tensor& x,
                            std::size_t heads, double dropout_rate, Rng* rng);
void add_self_attention_params(ParameterSet& params, const std::string& prefix, std::size_t dim, Rng& rng);

// Contextual states H [N, model_dim]. `train_rng` enables dropout; nullptr
// means eval mode (deterministic).
Tensor encode(const LmCheckpoint& lm, std::span<const int> ids, Rng* train_rng = nullptr);

// Mean negative log-likelihood over the masked positions of ŝ.
Tensor mlm_loss(const LmCheckpoint& lm, const MaskedContext& masked, Rng* train_rng = nullptr);

struct TrainOptions {
  std::size_t epochs = 1;
  double lr = 2e-5;
  std::size_t batch_size = 8;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
};

// Supplies the masked corpus for each epoch (fixed or re-sampled).
using MaskedCorpusFn = std::function<std::vector<MaskedContext>(std::size_t epoch)>;

// Mean training loss per epoch; `initial_loss` (when given) receives the
// eval-mode loss over the first epoch's corpus before any update.
// masked_accuracy: top-1 recovery of masked tokens during the last epoch.
struct PretrainReport {
  std::vector<double> epoch_losses;
  double initial_loss = 0.0;
  double masked_accuracy = 0.0;
};

LmCheckpoint pretrain_mlm(const LmCheckpoint& lm, const MaskedCorpusFn& corpus, const TrainOptions& options,
                          PretrainReport* report = nullptr);
LmCheckpoint pretrain_mlm(const LmCheckpoint& lm, const std::vector<MaskedContext>& corpus,
                          const TrainOptions& options, PretrainReport* report = nullptr);

// Eval-mode mean MLM loss over a corpus.
double mean_mlm_loss(const LmCheckpoint& lm, const std::vector<MaskedContext>& corpus);

// One supervised example laid out for the encoder:
// span_qa: [CLS] context [SEP] question [SEP]; classification: [CLS] text [SEP].
struct TaskInstance {
  std::vector<int> ids;
  std::size_t context_begin = 1;
  std::size_t context_end = 1;  // exclusive
  int start = -1;               // answer token range, -1 when truncated away
  int end = -1;
  int label = -1;
  std::string gold;
};

std::vector<TaskInstance> prepare_instances(const TaskDataset& data, const std::vector<TokenizedContext>& contexts,
                                            const Vocab& vocab, std::size_t max_seq_len);

struct TaskHead {
  TaskKind kind = TaskKind::kSpanQa;
  std::size_t num_labels = 0;
  ParameterSet params;
};

TaskHead init_task_head(TaskKind kind, std::size_t model_dim, std::size_t num_labels, std::uint64_t seed);

// Supervised loss of one instance: start+end cross-entropy or label
// cross-entropy.
Tensor task_loss(const LmCheckpoint& lm, const TaskHead& head, const TaskInstance& instance, Rng* train_rng);

struct FineTuneResult {
  LmCheckpoint lm;
  TaskHead head;
  std::vector<double> epoch_losses;
};

FineTuneResult fine_tune(const LmCheckpoint& lm, TaskKind kind, std::size_t num_labels,
                         const std::vector<TaskInstance>& train, const TrainOptions& options);

struct TaskMetrics {
  double em = 0.0;
  double f1 = 0.0;
  double acc = 0.0;
  std::size_t count = 0;

  // The scalar reward input: F1 for span QA, accuracy for classification.
  double score(TaskKind kind) const { return kind == TaskKind::kSpanQa ? f1 : acc; }
};

inline constexpr std::size_t kMaxAnswerTokens = 10;

// Predicted answer text (span QA) for one instance.
std::string predict_span(const LmCheckpoint& lm, const TaskHead& head, const TaskInstance& instance,
                         const Vocab& vocab);

TaskMetrics evaluate_task(const LmCheckpoint& lm, const TaskHead& head, const std::vector<TaskInstance>& data,
                          const Vocab& vocab);

}  // namespace nmg
