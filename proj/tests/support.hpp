#pragma once

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "nmg/config.hpp"
#include "nmg/text.hpp"

namespace nmg::test {

// Random annotated context: [CLS] body [SEP] with mixed classes and some
// multi-piece words. Token ids are arbitrary but valid for a vocab of `vocab`.
inline TokenizedContext random_context(Rng& rng, std::size_t min_len = 3, std::size_t max_len = 60,
                                       int vocab = 50) {
  std::uniform_int_distribution<std::size_t> len_dist(min_len, max_len);
  std::uniform_int_distribution<int> id_dist(5, vocab - 1);
  std::uniform_int_distribution<int> class_dist(0, 9);
  const std::size_t body = len_dist(rng);
  TokenizedContext c;
  auto push = [&c](int id, bool start, TokenClass cls) {
    c.ids.push_back(id);
    c.word_start.push_back(start);
    c.token_class.push_back(cls);
    c.offsets.push_back({});
  };
  push(kClsId, false, TokenClass::kSpecial);
  for (std::size_t i = 0; i < body; ++i) {
    const int k = class_dist(rng);
    if (i > 0 && k == 0) {
      push(id_dist(rng), false, TokenClass::kSubwordPiece);
    } else if (k == 1) {
      push(id_dist(rng), true, TokenClass::kPunctuation);
    } else if (k == 2) {
      push(id_dist(rng), true, TokenClass::kEntityCandidate);
    } else {
      push(id_dist(rng), true, TokenClass::kPlainWord);
    }
  }
  push(kSepId, false, TokenClass::kSpecial);
  return c;
}

// Small enough for a full meta-training episode in well under a second.
inline RunConfig tiny_run_config(std::uint64_t seed = 1) {
  RunConfig c;
  c.seed = seed;
  c.model.lm.layers = 1;
  c.model.lm.heads = 2;
  c.model.lm.model_dim = 16;
  c.model.lm.ff_dim = 32;
  c.model.lm.max_seq_len = 32;
  c.model.lm.dropout = 0.0;
  c.synthetic.n_contexts = 40;
  c.synthetic.context_len = 12;
  c.synthetic.marker_vocab_size = 20;
  c.synthetic.filler_vocab_size = 20;
  c.synthetic.marker_families = 2;
  c.synthetic_test_contexts = 20;
  c.rl.hidden_size = 16;
  c.rl.max_episodes = 4;
  c.rl.epochs = 2;
  c.rl.minibatch_size = 8;
  c.rl.learning_rate = 1e-3;
  c.warmup_episodes = 1;
  c.meta_train.sampled_pretrain_size = 10;
  c.meta_train.max_train_size = 20;
  c.meta_train.validation_size = 10;
  c.meta_train.pretrain_epochs = 1;
  c.meta_train.pretrain_learning_rate = 1e-3;
  c.meta_train.finetune_learning_rate = 1e-3;
  c.meta_test.pretrain_epochs = 1;
  c.meta_test.finetune_epochs = 1;
  c.meta_test.seeds = 1;
  c.meta_test.baseline_strategies = {"none", "random"};
  return c;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("nmg_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  static int& counter() {
    static int n = 0;
    return n;
  }
  std::filesystem::path path_;
};

}  // namespace nmg::test
