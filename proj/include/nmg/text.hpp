#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nmg/autodiff.hpp"

namespace nmg {

enum class TokenClass { kSpecial, kPunctuation, kEntityCandidate, kPlainWord, kSubwordPiece };

const char* token_class_name(TokenClass c);

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr const char* kContinuation = "##";
// Words carrying this leading character are always entity candidates.
inline constexpr char kEntitySigil = '@';

class Vocab {
 public:
  Vocab();
  explicit Vocab(std::vector<std::string> tokens);

  int id(const std::string& token) const;  // kUnkId when absent
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int add(const std::string& token);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Word-level vocabulary: words seen at least min_freq times are kept whole
// (most frequent first); the remaining budget holds single characters and
// frequent character n-grams, each in word-initial and "##" continuation form.
Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t max_vocab, std::size_t min_freq);

struct CharSpan {
  int begin = -1;  // -1 for special tokens
  int end = -1;
};

struct TokenizedContext {
  std::size_t context_index = 0;
  std::vector<int> ids;
  std::vector<bool> word_start;
  std::vector<TokenClass> token_class;
  std::vector<CharSpan> offsets;
  bool truncated = false;

  std::size_t length() const { return ids.size(); }
  bool maskable(std::size_t pos) const { return token_class[pos] != TokenClass::kSpecial; }
  std::vector<bool> maskable_flags() const;
  std::size_t maskable_count() const;
};

TokenizedContext tokenize(const std::string& text, const Vocab& vocab, std::size_t max_seq_len);
std::string detokenize(const TokenizedContext& context, const Vocab& vocab);
// Joins the surface text of tokens [begin, end] (inclusive), gluing pieces.
std::string detokenize_range(std::span<const int> ids, std::size_t begin, std::size_t end, const Vocab& vocab);

enum class TaskKind { kSpanQa, kClassification };

const char* task_kind_name(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

struct Document {
  std::string id;
  std::string text;
};

struct Example {
  std::string id;
  std::size_t context_index = 0;
  std::string question;      // span_qa
  std::size_t answer_start = 0;
  std::string answer_text;
  int label = -1;            // classification
};

struct TaskDataset {
  TaskKind kind = TaskKind::kSpanQa;
  std::vector<Example> examples;
  std::vector<std::string> label_names;  // classification only

  std::size_t size() const { return examples.size(); }
};

struct LoadedTask {
  std::vector<Document> corpus;
  TaskDataset dataset;
};

LoadedTask load_jsonl(const std::filesystem::path& path, TaskKind kind);
void write_jsonl(const std::filesystem::path& path, const LoadedTask& task);

// Deterministic, seeded split; the first element keeps |D| - val_size examples.
std::pair<TaskDataset, TaskDataset> split_holdout(const TaskDataset& data, std::size_t val_size, std::uint64_t seed);

struct SubTaskSizes {
  std::size_t sampled_pretrain_size = 200;
  std::size_t max_train_size = 1000;
};

struct SubTask {
  std::vector<std::size_t> contexts;  // S', indices into the corpus
  TaskDataset train;                  // D_tr'
  TaskDataset validation;             // D_val, frozen for the whole run
};

SubTask sample_subtask(std::size_t corpus_size, const TaskDataset& train_pool, const TaskDataset& validation,
                       const SubTaskSizes& sizes, std::uint64_t seed);

struct SyntheticConfig {
  std::size_t n_contexts = 600;
  std::size_t context_len = 24;        // words per context
  std::size_t marker_vocab_size = 120;
  std::size_t filler_vocab_size = 40;
  std::size_t markers_per_context = 2;
  std::size_t marker_families = 4;
  double cue_probability = 1.0;        // chance a marker is preceded by its family cue
  std::size_t asked_families = 0;      // questions only about families [0, k); 0 asks about all
  TaskKind kind = TaskKind::kSpanQa;
};

// Contexts are filler words with planted capitalised marker words. Every
// question names a marker family; its answer is the marker of that family.
LoadedTask gen_synthetic_task(const SyntheticConfig& config, std::uint64_t seed);

std::vector<std::string> synthetic_filler_words(std::size_t n);
std::vector<std::string> synthetic_marker_words(std::size_t n);
std::vector<std::string> synthetic_family_words(std::size_t n);

// splitmix64 finaliser; derives independent seeds from a base seed and tags.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace nmg
