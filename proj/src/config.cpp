#include "nmg/config.hpp"

#include <algorithm>
#include <cctype>
#include <concepts>
#include <fstream>
#include <set>

#include "nmg/error.hpp"
#include "nmg/masking.hpp"

extern char** environ;

namespace nmg {

namespace {

using nlohmann::json;

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: " + label() + " must be an object");
  }

  template <std::unsigned_integral T>
  void read(const char* key, T& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<T>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "true or false");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void read(const char* key, std::optional<double>& out) {
    if (const json* v = take(key)) {
      if (v->is_null()) {
        out.reset();
      } else {
        if (!v->is_number()) fail(key, "a number or null");
        out = v->get<double>();
      }
    }
  }
  void read(const char* key, std::vector<std::string>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(key, "an array of strings");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_string()) fail(key, "an array of strings");
        out.push_back(e.get<std::string>());
      }
    }
  }

  // Nested object, or nothing when absent.
  std::optional<Section> child(const char* key) {
    const json* v = take(key);
    if (!v) return std::nullopt;
    return Section(*v, path_.empty() ? key : path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) {
        throw ConfigError("config: unknown key \"" + (path_.empty() ? k : path_ + "." + k) + "\"");
      }
    }
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const char* key, const char* expected) const {
    throw ConfigError("config: " + (path_.empty() ? std::string(key) : path_ + "." + key) + " must be " + expected);
  }
  std::string label() const { return path_.empty() ? "top level" : "\"" + path_ + "\""; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_inner(Section& s, InnerLoopConfig& c) {
  s.read("mask_probability", c.mask_probability);
  s.read("pretrain_learning_rate", c.pretrain_learning_rate);
  s.read("pretrain_epochs", c.pretrain_epochs);
  s.read("pretrain_batch_size", c.pretrain_batch_size);
  s.read("finetune_learning_rate", c.finetune_learning_rate);
  s.read("finetune_epochs", c.finetune_epochs);
  s.read("finetune_batch_size", c.finetune_batch_size);
  s.read("weight_decay", c.weight_decay);
}

void write_inner(nlohmann::ordered_json& j, const InnerLoopConfig& c) {
  j["mask_probability"] = c.mask_probability;
  j["pretrain_learning_rate"] = c.pretrain_learning_rate;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["pretrain_batch_size"] = c.pretrain_batch_size;
  j["finetune_learning_rate"] = c.finetune_learning_rate;
  j["finetune_epochs"] = c.finetune_epochs;
  j["finetune_batch_size"] = c.finetune_batch_size;
  j["weight_decay"] = c.weight_decay;
}

void validate_inner(const InnerLoopConfig& c, const std::string& name) {
  if (!(c.mask_probability > 0.0 && c.mask_probability < 1.0)) {
    throw ConfigError(name + ".mask_probability must lie in (0, 1)");
  }
  if (!(c.pretrain_learning_rate > 0.0) || !(c.finetune_learning_rate > 0.0)) {
    throw ConfigError(name + ": learning rates must be positive");
  }
  if (c.pretrain_batch_size == 0 || c.finetune_batch_size == 0) throw ConfigError(name + ": batch sizes must be positive");
  if (c.finetune_epochs == 0) throw ConfigError(name + ".finetune_epochs must be positive");
  if (c.weight_decay < 0.0) throw ConfigError(name + ".weight_decay must be non-negative");
}

}  // namespace

RunConfig RunConfig::defaults(TaskKind task) {
  RunConfig c;
  c.task = task;
  c.synthetic.kind = task;
  if (task == TaskKind::kClassification) {
    c.meta_train.finetune_learning_rate = 2e-5;
    c.meta_train.finetune_epochs = 5;
    c.meta_test.finetune_learning_rate = 2e-5;
    c.meta_test.finetune_epochs = 3;
  } else {
    c.meta_test.finetune_epochs = 2;
  }
  c.meta_test.pretrain_epochs = 1;
  c.meta_test.pretrain_batch_size = 12;
  c.meta_test.finetune_batch_size = 12;
  return c;
}

void RunConfig::validate() const {
  LmConfig lm = model.lm;
  if (lm.vocab_size == 0) lm.vocab_size = kMaskId + 1;  // filled in from the vocabulary later
  lm.validate();
  if (vocab.max_size <= static_cast<std::size_t>(kMaskId) + 1) throw ConfigError("vocab.max_size too small");
  if (vocab.min_frequency == 0) throw ConfigError("vocab.min_frequency must be positive");
  if (!(rl.learning_rate > 0.0)) throw ConfigError("rl.learning_rate must be positive");
  if (rl.minibatch_size == 0 || rl.replay_buffer_size == 0) throw ConfigError("rl: minibatch and buffer sizes must be positive");
  if (rl.max_episodes == 0) throw ConfigError("rl.max_episodes must be positive");
  if (rl.entropy_regularization < 0.0) throw ConfigError("rl.entropy_regularization must be non-negative");
  if (rl.importance_ratio_cap && !(*rl.importance_ratio_cap > 0.0)) {
    throw ConfigError("rl.importance_ratio_cap must be positive when set");
  }
  if (rl.hidden_size == 0) throw ConfigError("rl.hidden_size must be positive");
  validate_inner(meta_train, "meta_train");
  validate_inner(meta_test, "meta_test");
  if (meta_train.sampled_pretrain_size == 0) throw ConfigError("meta_train.sampled_pretrain_size must be positive");
  if (meta_train.max_train_size == 0) throw ConfigError("meta_train.max_train_size must be positive");
  if (meta_train.validation_size == 0) throw ConfigError("meta_train.validation_size must be positive");
  if (meta_test.seeds == 0) throw ConfigError("meta_test.seeds must be positive");
  for (const auto& s : meta_test.baseline_strategies) {
    if (parse_strategy(s) == MaskStrategy::kNeural) throw ConfigError("meta_test.baseline_strategies cannot list neural");
  }
  if (threads == 0) throw ConfigError("threads must be positive");
  if (keep_checkpoints == 0) throw ConfigError("keep_checkpoints must be positive");
  if (synthetic.kind != task) throw ConfigError("synthetic task kind must match the run's task");
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["task"] = task_kind_name(task);
  auto& m = j["model"];
  m["layers"] = model.lm.layers;
  m["heads"] = model.lm.heads;
  m["model_dim"] = model.lm.model_dim;
  m["ff_dim"] = model.lm.ff_dim;
  m["max_seq_len"] = model.lm.max_seq_len;
  m["dropout"] = model.lm.dropout;
  m["base_pretrain_epochs"] = model.base_pretrain_epochs;
  m["base_pretrain_learning_rate"] = model.base_pretrain_learning_rate;
  j["vocab"] = {{"max_size", vocab.max_size}, {"min_frequency", vocab.min_frequency}};
  auto& r = j["rl"];
  r["learning_rate"] = rl.learning_rate;
  r["epochs"] = rl.epochs;
  r["minibatch_size"] = rl.minibatch_size;
  r["replay_buffer_size"] = rl.replay_buffer_size;
  r["entropy_regularization"] = rl.entropy_regularization;
  r["max_episodes"] = rl.max_episodes;
  r["importance_ratio_cap"] = rl.importance_ratio_cap ? nlohmann::ordered_json(*rl.importance_ratio_cap) : nullptr;
  r["hidden_size"] = rl.hidden_size;
  r["stochastic_actions"] = rl.stochastic_actions;
  auto& mt = j["meta_train"];
  write_inner(mt, meta_train);
  mt["sampled_pretrain_size"] = meta_train.sampled_pretrain_size;
  mt["max_train_size"] = meta_train.max_train_size;
  mt["validation_size"] = meta_train.validation_size;
  auto& ms = j["meta_test"];
  write_inner(ms, meta_test);
  ms["baseline_strategies"] = meta_test.baseline_strategies;
  ms["seeds"] = meta_test.seeds;
  auto& s = j["synthetic"];
  s["contexts"] = synthetic.n_contexts;
  s["test_contexts"] = synthetic_test_contexts;
  s["context_len"] = synthetic.context_len;
  s["marker_vocab_size"] = synthetic.marker_vocab_size;
  s["filler_vocab_size"] = synthetic.filler_vocab_size;
  s["markers_per_context"] = synthetic.markers_per_context;
  s["marker_families"] = synthetic.marker_families;
  s["cue_probability"] = synthetic.cue_probability;
  s["asked_families"] = synthetic.asked_families;
  j["warmup_episodes"] = warmup_episodes;
  j["continual"] = continual;
  j["self_play"] = self_play;
  j["threads"] = threads;
  j["keep_checkpoints"] = keep_checkpoints;
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  Section top(j, "");
  std::string task_name = "span_qa";
  top.read("task", task_name);
  RunConfig c = defaults(parse_task_kind(task_name));
  top.read("seed", c.seed);
  if (auto m = top.child("model")) {
    m->read("layers", c.model.lm.layers);
    m->read("heads", c.model.lm.heads);
    m->read("model_dim", c.model.lm.model_dim);
    m->read("ff_dim", c.model.lm.ff_dim);
    m->read("max_seq_len", c.model.lm.max_seq_len);
    m->read("dropout", c.model.lm.dropout);
    m->read("base_pretrain_epochs", c.model.base_pretrain_epochs);
    m->read("base_pretrain_learning_rate", c.model.base_pretrain_learning_rate);
    m->finish();
  }
  if (auto v = top.child("vocab")) {
    v->read("max_size", c.vocab.max_size);
    v->read("min_frequency", c.vocab.min_frequency);
    v->finish();
  }
  if (auto r = top.child("rl")) {
    r->read("learning_rate", c.rl.learning_rate);
    r->read("epochs", c.rl.epochs);
    r->read("minibatch_size", c.rl.minibatch_size);
    r->read("replay_buffer_size", c.rl.replay_buffer_size);
    r->read("entropy_regularization", c.rl.entropy_regularization);
    r->read("max_episodes", c.rl.max_episodes);
    r->read("importance_ratio_cap", c.rl.importance_ratio_cap);
    r->read("hidden_size", c.rl.hidden_size);
    r->read("stochastic_actions", c.rl.stochastic_actions);
    r->finish();
  }
  if (auto mt = top.child("meta_train")) {
    read_inner(*mt, c.meta_train);
    mt->read("sampled_pretrain_size", c.meta_train.sampled_pretrain_size);
    mt->read("max_train_size", c.meta_train.max_train_size);
    mt->read("validation_size", c.meta_train.validation_size);
    mt->finish();
  }
  if (auto ms = top.child("meta_test")) {
    read_inner(*ms, c.meta_test);
    ms->read("baseline_strategies", c.meta_test.baseline_strategies);
    ms->read("seeds", c.meta_test.seeds);
    ms->finish();
  }
  if (auto s = top.child("synthetic")) {
    s->read("contexts", c.synthetic.n_contexts);
    s->read("test_contexts", c.synthetic_test_contexts);
    s->read("context_len", c.synthetic.context_len);
    s->read("marker_vocab_size", c.synthetic.marker_vocab_size);
    s->read("filler_vocab_size", c.synthetic.filler_vocab_size);
    s->read("markers_per_context", c.synthetic.markers_per_context);
    s->read("marker_families", c.synthetic.marker_families);
    s->read("cue_probability", c.synthetic.cue_probability);
    s->read("asked_families", c.synthetic.asked_families);
    s->finish();
  }
  top.read("warmup_episodes", c.warmup_episodes);
  top.read("continual", c.continual);
  top.read("self_play", c.self_play);
  top.read("threads", c.threads);
  top.read("keep_checkpoints", c.keep_checkpoints);
  top.finish();
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  apply_env_overrides(j, nmg_environment());
  return RunConfig::from_json(j);
}

void apply_env_overrides(nlohmann::json& j, const std::map<std::string, std::string>& env) {
  static const std::string kPrefix = "NMG_";
  for (const auto& [name, raw] : env) {
    if (name.rfind(kPrefix, 0) != 0) continue;
    std::string rest = name.substr(kPrefix.size());
    std::transform(rest.begin(), rest.end(), rest.begin(), [](unsigned char ch) { return std::tolower(ch); });
    std::vector<std::string> path;
    for (std::size_t pos = 0;;) {
      const auto next = rest.find("__", pos);
      path.push_back(rest.substr(pos, next - pos));
      if (next == std::string::npos) break;
      pos = next + 2;
    }
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
      value = raw;
    }
    if (!j.is_object()) j = nlohmann::json::object();
    nlohmann::json* node = &j;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      auto& next = (*node)[path[i]];
      if (next.is_null()) next = nlohmann::json::object();
      if (!next.is_object()) throw ConfigError("environment override " + name + ": " + path[i] + " is not a section");
      node = &next;
    }
    (*node)[path.back()] = value;
  }
}

std::map<std::string, std::string> nmg_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    if (entry.rfind("NMG_", 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    out.emplace(entry.substr(0, eq), entry.substr(eq + 1));
  }
  return out;
}

}  // namespace nmg
