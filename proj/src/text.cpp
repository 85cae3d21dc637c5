#include "nmg/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "nmg/error.hpp"

namespace nmg {

namespace {

const std::vector<std::string> kSpecialTokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

std::vector<std::pair<std::size_t, std::size_t>> split_words(const std::string& text) {
  std::vector<std::pair<std::size_t, std::size_t>> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i >= text.size()) break;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    words.emplace_back(i, j);
    i = j;
  }
  return words;
}

bool all_non_alnum(const std::string& s) {
  if (s.empty()) return false;
  return std::none_of(s.begin(), s.end(), [](unsigned char c) { return std::isalnum(c); });
}

bool is_sentence_end(const std::string& word) { return word == "." || word == "!" || word == "?"; }

}  // namespace

const char* token_class_name(TokenClass c) {
  switch (c) {
    case TokenClass::kSpecial: return "special";
    case TokenClass::kPunctuation: return "punctuation";
    case TokenClass::kEntityCandidate: return "entity_candidate";
    case TokenClass::kPlainWord: return "plain_word";
    case TokenClass::kSubwordPiece: return "subword_piece";
  }
  return "unknown";
}

const char* task_kind_name(TaskKind kind) {
  return kind == TaskKind::kSpanQa ? "span_qa" : "classification";
}

TaskKind parse_task_kind(const std::string& name) {
  if (name == "span_qa") return TaskKind::kSpanQa;
  if (name == "classification") return TaskKind::kClassification;
  throw ConfigError("unknown task kind '" + name + "' (expected span_qa or classification)");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto step = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return step(step(step(seed) ^ a) ^ (b * 0x2545f4914f6cdd1dull));
}

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() {
  for (const auto& s : kSpecialTokens) add(s);
}

Vocab::Vocab(std::vector<std::string> tokens) {
  if (tokens.size() < kSpecialTokens.size() ||
      !std::equal(kSpecialTokens.begin(), kSpecialTokens.end(), tokens.begin())) {
    throw DataError("vocab must start with the five special tokens");
  }
  for (const auto& t : tokens) {
    if (index_.count(t)) throw DataError("duplicate vocab entry: " + t);
    add(t);
  }
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " outside vocab of size " + std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

int Vocab::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t max_vocab, std::size_t min_freq) {
  std::map<std::string, std::size_t> freq;
  for (const auto& line : corpus) {
    for (auto [b, e] : split_words(line)) ++freq[line.substr(b, e - b)];
  }
  if (freq.empty()) throw DataError("build_vocab: empty corpus");
  if (max_vocab <= kSpecialTokens.size()) throw ConfigError("build_vocab: max_vocab too small");

  std::vector<std::pair<std::string, std::size_t>> words(freq.begin(), freq.end());
  std::stable_sort(words.begin(), words.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  // Character inventory comes first so every seen word stays representable.
  std::set<std::string> chars;
  for (const auto& [w, _] : words) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      std::string c(1, w[i]);
      chars.insert(i == 0 ? c : kContinuation + c);
    }
  }

  Vocab vocab;
  const std::size_t word_budget =
      max_vocab > kSpecialTokens.size() + chars.size() ? max_vocab - kSpecialTokens.size() - chars.size() : 0;
  std::vector<std::string> rare;
  std::size_t kept = 0;
  for (const auto& [w, n] : words) {
    if (n >= min_freq && kept < word_budget) {
      vocab.add(w);
      ++kept;
    } else {
      rare.push_back(w);
    }
  }
  for (const auto& c : chars) {
    if (vocab.size() >= max_vocab) break;
    vocab.add(c);
  }

  // Frequent n-grams (2..4 chars) from the rare words fill what is left.
  std::map<std::string, std::size_t> grams;
  for (const auto& w : rare) {
    const std::size_t n = freq[w];
    for (std::size_t len = 2; len <= 4; ++len) {
      for (std::size_t i = 0; i + len <= w.size(); ++i) {
        std::string g = w.substr(i, len);
        grams[i == 0 ? g : kContinuation + g] += n;
      }
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(grams.begin(), grams.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [g, n] : ranked) {
    if (vocab.size() >= max_vocab || n < 2) break;
    vocab.add(g);
  }
  return vocab;
}

// ---------------------------------------------------------------------------
// Tokenization

std::vector<bool> TokenizedContext::maskable_flags() const {
  std::vector<bool> flags(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) flags[i] = maskable(i);
  return flags;
}

std::size_t TokenizedContext::maskable_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) n += maskable(i) ? 1 : 0;
  return n;
}

TokenizedContext tokenize(const std::string& text, const Vocab& vocab, std::size_t max_seq_len) {
  if (max_seq_len < 3) throw ConfigError("tokenize: max_seq_len must be at least 3");
  TokenizedContext out;
  auto push = [&out](int id, bool start, TokenClass cls, CharSpan span) {
    out.ids.push_back(id);
    out.word_start.push_back(start);
    out.token_class.push_back(cls);
    out.offsets.push_back(span);
  };
  push(kClsId, false, TokenClass::kSpecial, {});

  const auto words = split_words(text);
  bool sentence_initial = true;
  for (auto [b, e] : words) {
    const std::string word = text.substr(b, e - b);
    std::vector<std::pair<int, CharSpan>> pieces;
    if (vocab.contains(word)) {
      pieces.push_back({vocab.id(word), {static_cast<int>(b), static_cast<int>(e)}});
    } else {
      // greedy longest match, falling back to a single UNK for the whole word
      std::size_t start = 0;
      bool ok = true;
      while (start < word.size()) {
        std::size_t end = word.size();
        int found = -1;
        while (end > start) {
          std::string piece = word.substr(start, end - start);
          if (start > 0) piece = kContinuation + piece;
          if (vocab.contains(piece)) {
            found = vocab.id(piece);
            break;
          }
          --end;
        }
        if (found < 0) {
          ok = false;
          break;
        }
        pieces.push_back({found, {static_cast<int>(b + start), static_cast<int>(b + end)}});
        start = end;
      }
      if (!ok) {
        pieces.clear();
        pieces.push_back({kUnkId, {static_cast<int>(b), static_cast<int>(e)}});
      }
    }

    TokenClass first_class = TokenClass::kPlainWord;
    if (all_non_alnum(word)) {
      first_class = TokenClass::kPunctuation;
    } else if (word[0] == kEntitySigil ||
               (!sentence_initial && std::isupper(static_cast<unsigned char>(word[0])))) {
      first_class = TokenClass::kEntityCandidate;
    }
    for (std::size_t k = 0; k < pieces.size(); ++k) {
      if (out.ids.size() + 1 >= max_seq_len) {
        out.truncated = true;
        break;
      }
      TokenClass cls = first_class;
      if (k > 0) {
        const auto& surface = vocab.token(pieces[k].first);
        cls = all_non_alnum(surface.substr(2)) ? TokenClass::kPunctuation : TokenClass::kSubwordPiece;
      }
      push(pieces[k].first, k == 0, cls, pieces[k].second);
    }
    if (out.truncated) break;
    sentence_initial = is_sentence_end(word);
  }
  push(kSepId, false, TokenClass::kSpecial, {});
  return out;
}

std::string detokenize_range(std::span<const int> ids, std::size_t begin, std::size_t end, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = begin; i <= end && i < ids.size(); ++i) {
    const int id = ids[i];
    if (id == kClsId || id == kSepId || id == kPadId) continue;
    const std::string& tok = vocab.token(id);
    if (tok.rfind(kContinuation, 0) == 0) {
      out += tok.substr(2);
    } else {
      if (!out.empty()) out += ' ';
      out += tok;
    }
  }
  return out;
}

std::string detokenize(const TokenizedContext& context, const Vocab& vocab) {
  if (context.ids.empty()) return {};
  return detokenize_range(context.ids, 0, context.ids.size() - 1, vocab);
}

// ---------------------------------------------------------------------------
// Datasets

LoadedTask load_jsonl(const std::filesystem::path& path, TaskKind kind) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  LoadedTask task;
  task.dataset.kind = kind;
  std::map<std::string, int> label_ids;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&path, &line_no](const std::string& what) {
    throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("malformed JSON: ") + e.what());
    }
    auto field = [&](const nlohmann::json& obj, const char* key) -> const nlohmann::json& {
      if (!obj.is_object() || !obj.contains(key)) fail(std::string("missing required field \"") + key + "\"");
      return obj.at(key);
    };
    try {
      const std::string id = field(rec, "id").get<std::string>();
      const std::size_t ctx_index = task.corpus.size();
      if (kind == TaskKind::kSpanQa) {
        const std::string context = field(rec, "context").get<std::string>();
        task.corpus.push_back({id, context});
        const auto& qas = field(rec, "qas");
        if (!qas.is_array()) fail("\"qas\" must be an array");
        std::size_t q = 0;
        for (const auto& qa : qas) {
          Example ex;
          ex.id = id + "#" + std::to_string(q++);
          ex.context_index = ctx_index;
          ex.question = field(qa, "question").get<std::string>();
          const auto start = field(qa, "answer_start").get<long long>();
          ex.answer_text = field(qa, "answer_text").get<std::string>();
          if (start < 0 || static_cast<std::size_t>(start) + ex.answer_text.size() > context.size()) {
            fail("answer span [" + std::to_string(start) + ", +" + std::to_string(ex.answer_text.size()) +
                 ") lies outside the context of length " + std::to_string(context.size()));
          }
          ex.answer_start = static_cast<std::size_t>(start);
          if (context.compare(ex.answer_start, ex.answer_text.size(), ex.answer_text) != 0) {
            fail("answer_text does not match the context at answer_start");
          }
          if (ex.answer_text.empty()) fail("empty answer_text");
          task.dataset.examples.push_back(std::move(ex));
        }
      } else {
        const std::string text = field(rec, "text").get<std::string>();
        const std::string label = field(rec, "label").get<std::string>();
        task.corpus.push_back({id, text});
        auto [it, inserted] = label_ids.emplace(label, static_cast<int>(task.dataset.label_names.size()));
        if (inserted) task.dataset.label_names.push_back(label);
        Example ex;
        ex.id = id;
        ex.context_index = ctx_index;
        ex.label = it->second;
        task.dataset.examples.push_back(std::move(ex));
      }
    } catch (const nlohmann::json::type_error& e) {
      fail(std::string("wrong field type: ") + e.what());
    }
  }
  if (task.corpus.empty()) throw DataError(path.string() + ": no records");
  return task;
}

void write_jsonl(const std::filesystem::path& path, const LoadedTask& task) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  std::vector<std::vector<const Example*>> by_context(task.corpus.size());
  for (const auto& ex : task.dataset.examples) by_context.at(ex.context_index).push_back(&ex);
  for (std::size_t c = 0; c < task.corpus.size(); ++c) {
    nlohmann::ordered_json rec;
    rec["id"] = task.corpus[c].id;
    if (task.dataset.kind == TaskKind::kSpanQa) {
      rec["context"] = task.corpus[c].text;
      rec["qas"] = nlohmann::ordered_json::array();
      for (const Example* ex : by_context[c]) {
        rec["qas"].push_back({{"question", ex->question},
                              {"answer_start", ex->answer_start},
                              {"answer_text", ex->answer_text}});
      }
    } else {
      rec["text"] = task.corpus[c].text;
      if (by_context[c].empty()) throw DataError("classification context without label: " + task.corpus[c].id);
      rec["label"] = task.dataset.label_names.at(by_context[c].front()->label);
    }
    out << rec.dump() << '\n';
  }
}

std::pair<TaskDataset, TaskDataset> split_holdout(const TaskDataset& data, std::size_t val_size, std::uint64_t seed) {
  if (val_size >= data.size()) {
    throw ConfigError("split_holdout: validation size " + std::to_string(val_size) +
                      " must be smaller than the training set (" + std::to_string(data.size()) + ")");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(val_size));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(val_size), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  TaskDataset a{data.kind, {}, data.label_names};
  TaskDataset b{data.kind, {}, data.label_names};
  for (auto i : train) a.examples.push_back(data.examples[i]);
  for (auto i : val) b.examples.push_back(data.examples[i]);
  return {std::move(a), std::move(b)};
}

SubTask sample_subtask(std::size_t corpus_size, const TaskDataset& train_pool, const TaskDataset& validation,
                       const SubTaskSizes& sizes, std::uint64_t seed) {
  if (sizes.sampled_pretrain_size == 0 || sizes.sampled_pretrain_size > corpus_size) {
    throw ConfigError("sample_subtask: need " + std::to_string(sizes.sampled_pretrain_size) +
                      " pre-training contexts, corpus has " + std::to_string(corpus_size));
  }
  if (train_pool.size() == 0 || sizes.max_train_size == 0) {
    throw ConfigError("sample_subtask: need at least 1 training example, pool has " +
                      std::to_string(train_pool.size()));
  }
  Rng rng(seed);
  std::vector<std::size_t> ctx(corpus_size);
  std::iota(ctx.begin(), ctx.end(), 0);
  std::shuffle(ctx.begin(), ctx.end(), rng);
  ctx.resize(sizes.sampled_pretrain_size);

  std::vector<std::size_t> tr(train_pool.size());
  std::iota(tr.begin(), tr.end(), 0);
  std::shuffle(tr.begin(), tr.end(), rng);
  tr.resize(std::min(sizes.max_train_size, tr.size()));
  std::sort(tr.begin(), tr.end());

  SubTask out;
  out.contexts = std::move(ctx);
  out.train = TaskDataset{train_pool.kind, {}, train_pool.label_names};
  for (auto i : tr) out.train.examples.push_back(train_pool.examples[i]);
  out.validation = validation;
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic planted-marker task

namespace {

const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "h"};
const char* kVowels[] = {"a", "e", "i", "o", "u"};
constexpr std::size_t kSyllables = 15 * 5;

std::string syllable(std::size_t i) { return std::string(kOnsets[i / 5]) + kVowels[i % 5]; }

}  // namespace

std::vector<std::string> synthetic_filler_words(std::size_t n) {
  if (n > kSyllables * kSyllables) throw ConfigError("filler_vocab_size too large");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(syllable(i % kSyllables) + syllable((i / kSyllables + 11) % kSyllables));
  return out;
}

std::vector<std::string> synthetic_marker_words(std::size_t n) {
  if (n > kSyllables * kSyllables) throw ConfigError("marker_vocab_size too large");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string w = syllable((i * 31 + 3) % kSyllables) + syllable(i / kSyllables) + "x";
    w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
    out.push_back(w + std::to_string(i % 10));
  }
  return out;
}

std::vector<std::string> synthetic_family_words(std::size_t n) {
  static const char* kNames[] = {"alpha", "beta",  "gamma", "delta", "omega", "zeta",
                                 "theta", "iota",  "kappa", "sigma", "tau",   "rho"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(i < std::size(kNames) ? std::string(kNames[i]) : "family" + std::to_string(i));
  }
  return out;
}

LoadedTask gen_synthetic_task(const SyntheticConfig& cfg, std::uint64_t seed) {
  if (cfg.marker_vocab_size < 2) throw ConfigError("gen_synthetic_task: marker_vocab_size must be at least 2");
  if (cfg.filler_vocab_size < 2) throw ConfigError("gen_synthetic_task: filler_vocab_size must be at least 2");
  if (cfg.marker_families < 1 || cfg.marker_families > cfg.marker_vocab_size) {
    throw ConfigError("gen_synthetic_task: marker_families must be in [1, marker_vocab_size]");
  }
  if (cfg.markers_per_context < 1 || cfg.markers_per_context > cfg.marker_families) {
    throw ConfigError("gen_synthetic_task: markers_per_context must be in [1, marker_families]");
  }
  if (cfg.asked_families > cfg.marker_families) {
    throw ConfigError("gen_synthetic_task: asked_families exceeds marker_families");
  }
  // markers (and their cues) must stay under a fifth of the context
  if (cfg.markers_per_context * 5 >= cfg.context_len) {
    throw ConfigError("gen_synthetic_task: context_len too short for markers_per_context");
  }
  const auto fillers = synthetic_filler_words(cfg.filler_vocab_size);
  const auto markers = synthetic_marker_words(cfg.marker_vocab_size);
  const auto families = synthetic_family_words(cfg.marker_families);

  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick_filler(0, fillers.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  LoadedTask task;
  task.dataset.kind = cfg.kind;
  if (cfg.kind == TaskKind::kClassification) task.dataset.label_names = families;

  for (std::size_t c = 0; c < cfg.n_contexts; ++c) {
    std::vector<std::size_t> fams(cfg.marker_families);
    std::iota(fams.begin(), fams.end(), 0);
    std::shuffle(fams.begin(), fams.end(), rng);
    std::vector<std::size_t> chosen_fams;
    if (cfg.kind == TaskKind::kClassification) {
      const std::size_t majority = cfg.markers_per_context / 2 + 1;
      for (std::size_t k = 0; k < majority; ++k) chosen_fams.push_back(fams[0]);
      for (std::size_t k = majority; k < cfg.markers_per_context; ++k) chosen_fams.push_back(fams[1 + (k - majority)]);
    } else {
      chosen_fams.assign(fams.begin(), fams.begin() + static_cast<std::ptrdiff_t>(cfg.markers_per_context));
      if (cfg.asked_families > 0 &&
          std::none_of(chosen_fams.begin(), chosen_fams.end(), [&](std::size_t f) { return f < cfg.asked_families; })) {
        std::uniform_int_distribution<std::size_t> pick_asked(0, cfg.asked_families - 1);
        chosen_fams[0] = pick_asked(rng);
      }
    }

    // positions 1.. are eligible; keep a gap so cue+marker pairs do not touch
    std::vector<std::string> words(cfg.context_len);
    for (auto& w : words) w = fillers[pick_filler(rng)];
    std::vector<std::size_t> slots;
    for (std::size_t p = 2; p < cfg.context_len; ++p) slots.push_back(p);
    std::vector<std::size_t> positions;
    while (positions.size() < chosen_fams.size()) {
      std::uniform_int_distribution<std::size_t> pick(0, slots.size() - 1);
      const std::size_t p = slots[pick(rng)];
      bool clear = std::all_of(positions.begin(), positions.end(),
                               [p](std::size_t q) { return p + 2 < q || q + 2 < p; });
      if (clear) positions.push_back(p);
    }
    std::vector<std::string> placed;
    for (std::size_t k = 0; k < chosen_fams.size(); ++k) {
      const std::size_t fam = chosen_fams[k];
      const std::size_t per_family = (cfg.marker_vocab_size - fam + cfg.marker_families - 1) / cfg.marker_families;
      std::uniform_int_distribution<std::size_t> pick_member(0, per_family - 1);
      const std::size_t marker = fam + cfg.marker_families * pick_member(rng);
      words[positions[k]] = markers[marker];
      if (unit(rng) < cfg.cue_probability) words[positions[k] - 1] = families[fam];
      placed.push_back(markers[marker]);
    }

    std::string text;
    std::vector<std::size_t> starts;
    for (const auto& w : words) {
      if (!text.empty()) text += ' ';
      starts.push_back(text.size());
      text += w;
    }
    task.corpus.push_back({"syn-" + std::to_string(c), text});
    if (cfg.kind == TaskKind::kSpanQa) {
      for (std::size_t k = 0; k < chosen_fams.size(); ++k) {
        if (cfg.asked_families > 0 && chosen_fams[k] >= cfg.asked_families) continue;
        Example ex;
        ex.id = "syn-" + std::to_string(c) + "#" + std::to_string(k);
        ex.context_index = c;
        ex.question = "which " + families[chosen_fams[k]] + " ?";
        ex.answer_start = starts[positions[k]];
        ex.answer_text = placed[k];
        task.dataset.examples.push_back(std::move(ex));
      }
    } else {
      Example ex;
      ex.id = "syn-" + std::to_string(c);
      ex.context_index = c;
      ex.label = static_cast<int>(chosen_fams[0]);
      task.dataset.examples.push_back(std::move(ex));
    }
  }
  return task;
}

}  // namespace nmg
