#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "nmg/error.hpp"
#include "nmg/text.hpp"

using namespace nmg;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("nmg_text_" + std::to_string(::getpid()) + "_" + name);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST(Vocab, SpecialsFirst) {
  Vocab v;
  EXPECT_EQ(v.size(), 5u);
  EXPECT_EQ(v.token(kMaskId), "[MASK]");
  EXPECT_EQ(v.id("nope"), kUnkId);
  EXPECT_EQ(v.add("a"), 5);
  EXPECT_EQ(v.add("a"), 5);
  EXPECT_THROW(v.token(99), DataError);
  EXPECT_THROW(Vocab({"a", "b"}), DataError);
}

TEST(Vocab, FrequentWordsFirstThenPieces) {
  auto v = build_vocab({"the cat the dog the", "cat"}, 100, 1);
  EXPECT_EQ(v.token(5), "the");
  EXPECT_EQ(v.token(6), "cat");
  EXPECT_TRUE(v.contains("t"));
  EXPECT_TRUE(v.contains("##g"));
  EXPECT_THROW(build_vocab({}, 100, 1), DataError);
  EXPECT_THROW(build_vocab({"a"}, 5, 1), ConfigError);
}

TEST(Vocab, MinFrequencyPushesWordsToPieces) {
  auto v = build_vocab({"aa aa bb"}, 100, 2);
  EXPECT_TRUE(v.contains("aa"));
  EXPECT_FALSE(v.contains("bb"));
  auto t = tokenize("bb", v, 16);
  ASSERT_EQ(t.length(), 4u);
  EXPECT_EQ(v.token(t.ids[1]), "b");
  EXPECT_EQ(v.token(t.ids[2]), "##b");
  EXPECT_EQ(t.token_class[2], TokenClass::kSubwordPiece);
  EXPECT_FALSE(t.word_start[2]);
}

TEST(Tokenize, ClassesAndOffsets) {
  auto v = build_vocab({"Hello there , Bob met @acme today ."}, 200, 1);
  const std::string text = "Hello there , Bob met @acme today .";
  auto t = tokenize(text, v, 64);
  ASSERT_EQ(t.length(), 10u);
  EXPECT_EQ(t.ids.front(), kClsId);
  EXPECT_EQ(t.ids.back(), kSepId);
  EXPECT_EQ(t.token_class[0], TokenClass::kSpecial);
  EXPECT_EQ(t.token_class[1], TokenClass::kPlainWord);  // sentence-initial capital
  EXPECT_EQ(t.token_class[3], TokenClass::kPunctuation);
  EXPECT_EQ(t.token_class[4], TokenClass::kEntityCandidate);
  EXPECT_EQ(t.token_class[6], TokenClass::kEntityCandidate);  // sigil
  EXPECT_EQ(t.maskable_count(), 8u);
  for (std::size_t i = 1; i + 1 < t.length(); ++i) {
    const auto& span = t.offsets[i];
    EXPECT_EQ(text.substr(span.begin, span.end - span.begin), v.token(t.ids[i]));
  }
  EXPECT_EQ(detokenize(t, v), text);
  EXPECT_EQ(detokenize_range(t.ids, 4, 5, v), "Bob met");
}

TEST(Tokenize, DeterministicAndTruncates) {
  auto v = build_vocab({"a b c d e f"}, 100, 1);
  auto a = tokenize("a b c d e f", v, 5);
  auto b = tokenize("a b c d e f", v, 5);
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_TRUE(a.truncated);
  EXPECT_EQ(a.length(), 5u);
  EXPECT_EQ(a.ids.back(), kSepId);
  EXPECT_THROW(tokenize("a", v, 2), ConfigError);
}

TEST(Tokenize, UnknownCharactersBecomeUnk) {
  auto v = build_vocab({"abc"}, 100, 1);
  auto t = tokenize("xyz abc", v, 16);
  EXPECT_EQ(t.ids[1], kUnkId);
  EXPECT_EQ(v.token(t.ids[2]), "abc");
}

TEST(Jsonl, SpanQaRoundTrip) {
  auto path = temp_file("qa.jsonl");
  write_file(path,
             R"({"id":"d1","context":"the cat sat","qas":[{"question":"who ?","answer_start":4,"answer_text":"cat"}]})"
             "\n\n"
             R"({"id":"d2","context":"a dog ran","qas":[]})"
             "\n");
  auto task = load_jsonl(path, TaskKind::kSpanQa);
  ASSERT_EQ(task.corpus.size(), 2u);
  ASSERT_EQ(task.dataset.size(), 1u);
  EXPECT_EQ(task.dataset.examples[0].answer_text, "cat");
  EXPECT_EQ(task.dataset.examples[0].id, "d1#0");
  auto out = temp_file("qa2.jsonl");
  write_jsonl(out, task);
  auto again = load_jsonl(out, TaskKind::kSpanQa);
  write_jsonl(temp_file("qa3.jsonl"), again);
  EXPECT_EQ(slurp(out), slurp(temp_file("qa3.jsonl")));
  for (auto* n : {"qa.jsonl", "qa2.jsonl", "qa3.jsonl"}) fs::remove(temp_file(n));
}

TEST(Jsonl, ClassificationLabels) {
  auto path = temp_file("tc.jsonl");
  write_file(path, R"({"id":"a","text":"x y","label":"pos"})"
                   "\n"
                   R"({"id":"b","text":"y z","label":"neg"})"
                   "\n"
                   R"({"id":"c","text":"z","label":"pos"})"
                   "\n");
  auto task = load_jsonl(path, TaskKind::kClassification);
  EXPECT_EQ(task.dataset.label_names, (std::vector<std::string>{"pos", "neg"}));
  EXPECT_EQ(task.dataset.examples[2].label, 0);
  fs::remove(path);
}

TEST(Jsonl, ErrorsNameTheLine) {
  auto path = temp_file("bad.jsonl");
  auto expect_error = [&](const std::string& body, const std::string& needle) {
    write_file(path, body);
    try {
      load_jsonl(path, TaskKind::kSpanQa);
      FAIL() << "expected DataError for " << body;
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error("{\"id\":\"x\"}\n", ":1: missing required field \"context\"");
  expect_error("{\"id\":\"x\",\"context\":\"ab\",\"qas\":[]}\nnot json\n", ":2: malformed JSON");
  expect_error(R"({"id":"x","context":"ab","qas":[{"question":"q","answer_start":1,"answer_text":"bcd"}]})", "outside");
  expect_error(R"({"id":"x","context":"ab","qas":[{"question":"q","answer_start":0,"answer_text":"b"}]})",
               "does not match");
  expect_error("", "no records");
  EXPECT_THROW(load_jsonl(temp_file("missing"), TaskKind::kSpanQa), DataError);
  fs::remove(path);
}

TEST(Splits, HoldoutIsDeterministicAndDisjoint) {
  TaskDataset d;
  for (int i = 0; i < 20; ++i) d.examples.push_back({"e" + std::to_string(i)});
  auto [tr, va] = split_holdout(d, 5, 9);
  auto [tr2, va2] = split_holdout(d, 5, 9);
  EXPECT_EQ(va.size(), 5u);
  EXPECT_EQ(tr.size(), 15u);
  std::set<std::string> ids;
  for (auto& e : tr.examples) ids.insert(e.id);
  for (auto& e : va.examples) EXPECT_TRUE(ids.insert(e.id).second);
  for (std::size_t i = 0; i < va.size(); ++i) EXPECT_EQ(va.examples[i].id, va2.examples[i].id);
  EXPECT_THROW(split_holdout(d, 20, 1), ConfigError);
}

TEST(Splits, SubtaskSamplingReproducible) {
  TaskDataset pool, val;
  for (int i = 0; i < 30; ++i) pool.examples.push_back({"p" + std::to_string(i)});
  val.examples.push_back({"v"});
  auto a = sample_subtask(50, pool, val, {10, 8}, 3);
  auto b = sample_subtask(50, pool, val, {10, 8}, 3);
  auto c = sample_subtask(50, pool, val, {10, 8}, 4);
  EXPECT_EQ(a.contexts, b.contexts);
  EXPECT_NE(a.contexts, c.contexts);
  EXPECT_EQ(std::set<std::size_t>(a.contexts.begin(), a.contexts.end()).size(), 10u);
  EXPECT_EQ(a.train.size(), 8u);
  EXPECT_EQ(a.validation.examples[0].id, "v");
  EXPECT_EQ(sample_subtask(50, pool, val, {10, 100}, 3).train.size(), 30u);
  EXPECT_THROW(sample_subtask(5, pool, val, {10, 8}, 3), ConfigError);
  EXPECT_THROW(sample_subtask(50, TaskDataset{}, val, {10, 8}, 3), ConfigError);
}

TEST(Synthetic, MarkersAreAnswersAndSparse) {
  SyntheticConfig cfg;
  cfg.n_contexts = 100;
  cfg.context_len = 50;
  cfg.marker_vocab_size = 20;
  auto task = gen_synthetic_task(cfg, 5);
  ASSERT_EQ(task.corpus.size(), 100u);
  auto markers = synthetic_marker_words(20);
  std::set<std::string> marker_set(markers.begin(), markers.end());
  std::vector<int> questions(100, 0);
  for (const auto& ex : task.dataset.examples) {
    ++questions[ex.context_index];
    EXPECT_TRUE(marker_set.count(ex.answer_text)) << ex.answer_text;
    EXPECT_EQ(task.corpus[ex.context_index].text.substr(ex.answer_start, ex.answer_text.size()), ex.answer_text);
  }
  auto v = build_vocab({task.corpus[0].text}, 1000, 1);
  for (std::size_t c = 0; c < 100; ++c) {
    EXPECT_GE(questions[c], 1);
    std::istringstream words(task.corpus[c].text);
    std::string w;
    std::size_t n = 0, m = 0;
    while (words >> w) {
      ++n;
      m += marker_set.count(w);
    }
    EXPECT_LT(static_cast<double>(m) / static_cast<double>(n), 0.2);
  }
}

TEST(Synthetic, FixedSeedIsByteIdentical) {
  SyntheticConfig cfg;
  cfg.n_contexts = 30;
  auto a = temp_file("s1.jsonl"), b = temp_file("s2.jsonl");
  write_jsonl(a, gen_synthetic_task(cfg, 11));
  write_jsonl(b, gen_synthetic_task(cfg, 11));
  EXPECT_EQ(slurp(a), slurp(b));
  write_jsonl(b, gen_synthetic_task(cfg, 12));
  EXPECT_NE(slurp(a), slurp(b));
  fs::remove(a);
  fs::remove(b);
}

TEST(Synthetic, AskedFamiliesRestrictQuestions) {
  SyntheticConfig cfg;
  cfg.n_contexts = 50;
  cfg.marker_families = 3;
  cfg.asked_families = 1;
  auto task = gen_synthetic_task(cfg, 2);
  std::set<std::size_t> covered;
  for (const auto& ex : task.dataset.examples) {
    EXPECT_EQ(ex.question, "which alpha ?");
    covered.insert(ex.context_index);
  }
  EXPECT_EQ(covered.size(), 50u);
}

TEST(Synthetic, ClassificationUsesMajorityFamily) {
  SyntheticConfig cfg;
  cfg.kind = TaskKind::kClassification;
  cfg.n_contexts = 20;
  cfg.markers_per_context = 3;
  cfg.context_len = 30;
  auto task = gen_synthetic_task(cfg, 3);
  ASSERT_EQ(task.dataset.size(), 20u);
  auto markers = synthetic_marker_words(cfg.marker_vocab_size);
  for (const auto& ex : task.dataset.examples) {
    std::istringstream words(task.corpus[ex.context_index].text);
    std::string w;
    std::vector<int> counts(cfg.marker_families, 0);
    while (words >> w) {
      auto it = std::find(markers.begin(), markers.end(), w);
      if (it != markers.end()) ++counts[static_cast<std::size_t>(it - markers.begin()) % cfg.marker_families];
    }
    EXPECT_GE(counts[static_cast<std::size_t>(ex.label)], 2);
  }
}

TEST(Synthetic, RejectsBadConfigs) {
  SyntheticConfig cfg;
  cfg.marker_vocab_size = 1;
  EXPECT_THROW(gen_synthetic_task(cfg, 1), ConfigError);
  cfg = {};
  cfg.markers_per_context = 5;
  EXPECT_THROW(gen_synthetic_task(cfg, 1), ConfigError);
  cfg = {};
  cfg.context_len = 10;
  EXPECT_THROW(gen_synthetic_task(cfg, 1), ConfigError);
  cfg = {};
  cfg.asked_families = 9;
  EXPECT_THROW(gen_synthetic_task(cfg, 1), ConfigError);
}

TEST(Seeds, MixSeedSeparatesTags) {
  EXPECT_EQ(mix_seed(1, 2, 3), mix_seed(1, 2, 3));
  EXPECT_NE(mix_seed(1, 2, 3), mix_seed(1, 3, 2));
  EXPECT_NE(mix_seed(1, 2), mix_seed(2, 2));
}

TEST(Names, TaskKinds) {
  EXPECT_EQ(parse_task_kind("span_qa"), TaskKind::kSpanQa);
  EXPECT_STREQ(task_kind_name(TaskKind::kClassification), "classification");
  EXPECT_THROW(parse_task_kind("ner"), ConfigError);
  EXPECT_STREQ(token_class_name(TokenClass::kEntityCandidate), "entity_candidate");
}
