#include "nmg/language_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nmg/error.hpp"
#include "nmg/scoring.hpp"

namespace nmg {

namespace {

constexpr double kInitStd = 0.02;

std::string layer_prefix(std::size_t layer) { return "layer" + std::to_string(layer); }

Tensor affine(const ParameterSet& p, const std::string& name, const Tensor& x) {
  return add(matmul(x, p.at(name + ".w")), p.at(name + ".b"));
}

void add_affine(ParameterSet& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  p.add_normal(name + ".w", {in, out}, kInitStd, rng);
  p.add_constant(name + ".b", {out}, 0.0);
}

void add_norm(ParameterSet& p, const std::string& name, std::size_t dim) {
  p.add_constant(name + ".gain", {dim}, 1.0);
  p.add_constant(name + ".bias", {dim}, 0.0);
}

Tensor norm(const ParameterSet& p, const std::string& name, const Tensor& x) {
  return layer_norm(x, p.at(name + ".gain"), p.at(name + ".bias"), kLayerNormEps);
}

Tensor maybe_dropout(const Tensor& x, double rate, Rng* rng) {
  return rng ? dropout(x, rate, *rng) : x;
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

AdamWOptions adamw_options(const TrainOptions& o) {
  AdamWOptions a;
  a.lr = o.lr;
  a.weight_decay = o.weight_decay;
  return a;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config and checkpoint

void LmConfig::validate() const {
  if (layers == 0 || heads == 0 || model_dim == 0 || ff_dim == 0) throw ConfigError("model dimensions must be positive");
  if (model_dim % heads != 0) throw ConfigError("model_dim must be divisible by heads");
  if (max_seq_len < 3) throw ConfigError("max_seq_len must be at least 3");
  if (vocab_size <= static_cast<std::size_t>(kMaskId)) throw ConfigError("vocab_size must include the special tokens");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
}

nlohmann::json LmConfig::to_json() const {
  return {{"layers", layers},           {"heads", heads},           {"model_dim", model_dim},
          {"ff_dim", ff_dim},           {"max_seq_len", max_seq_len}, {"vocab_size", vocab_size},
          {"dropout", dropout}};
}

LmConfig LmConfig::from_json(const nlohmann::json& j) {
  LmConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.model_dim = j.at("model_dim").get<std::size_t>();
  c.ff_dim = j.at("ff_dim").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.validate();
  return c;
}

void LmCheckpoint::save(const std::filesystem::path& path) const {
  params.save(path, {{"kind", "language_model"}, {"config", config.to_json()}, {"episode", episode}});
}

LmCheckpoint LmCheckpoint::load(const std::filesystem::path& path) {
  auto [params, meta] = ParameterSet::load(path);
  if (meta.value("kind", "") != "language_model") throw DataError(path.string() + " is not a language model checkpoint");
  LmCheckpoint lm{LmConfig::from_json(meta.at("config")), std::move(params), meta.value("episode", std::uint64_t{0})};
  return lm;
}

void add_self_attention_params(ParameterSet& params, const std::string& prefix, std::size_t dim, Rng& rng) {
  for (const char* proj : {".q", ".k", ".v", ".o"}) add_affine(params, prefix + proj, dim, dim, rng);
  add_norm(params, prefix + ".ln", dim);
}

LmCheckpoint init_language_model(const LmConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  LmCheckpoint lm;
  lm.config = config;
  auto& p = lm.params;
  const std::size_t d = config.model_dim;
  p.add_normal("embed.token", {config.vocab_size, d}, kInitStd, rng);
  p.add_normal("embed.position", {config.max_seq_len, d}, kInitStd, rng);
  add_norm(p, "embed.ln", d);
  for (std::size_t l = 0; l < config.layers; ++l) {
    const auto pre = layer_prefix(l);
    add_self_attention_params(p, pre + ".attn", d, rng);
    add_affine(p, pre + ".ff1", d, config.ff_dim, rng);
    add_affine(p, pre + ".ff2", config.ff_dim, d, rng);
    add_norm(p, pre + ".ff_ln", d);
  }
  p.add_constant("mlm.bias", {config.vocab_size}, 0.0);
  return lm;
}

// ---------------------------------------------------------------------------
// Forward

Tensor self_attention_block(const ParameterSet& p, const std::string& prefix, const Tensor& x, std::size_t heads,
                            double dropout_rate, Rng* rng) {
  const std::size_t d = x.cols();
  const std::size_t dh = d / heads;
  const Tensor q = affine(p, prefix + ".q", x);
  const Tensor k = affine(p, prefix + ".k", x);
  const Tensor v = affine(p, prefix + ".v", x);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    const Tensor weights = softmax(scale(matmul(qh, kh, true), inv_sqrt));
    outs.push_back(matmul(weights, vh));
  }
  const Tensor merged = heads == 1 ? outs.front() : concat_cols(outs);
  const Tensor projected = maybe_dropout(affine(p, prefix + ".o", merged), dropout_rate, rng);
  return norm(p, prefix + ".ln", add(x, projected));
}

Tensor encode(const LmCheckpoint& lm, std::span<const int> ids, Rng* train_rng) {
  const auto& cfg = lm.config;
  if (ids.empty()) throw DataError("encode: empty sequence");
  if (ids.size() > cfg.max_seq_len) {
    throw DataError("encode: sequence of length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                    std::to_string(cfg.max_seq_len));
  }
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw DataError("encode: token id " + std::to_string(id) + " does not fit the checkpoint vocabulary (" +
                      std::to_string(cfg.vocab_size) + ")");
    }
  }
  const auto& p = lm.params;
  std::vector<int> positions(ids.size());
  std::iota(positions.begin(), positions.end(), 0);
  Tensor x = add(embedding(p.at("embed.token"), ids), embedding(p.at("embed.position"), positions));
  x = maybe_dropout(norm(p, "embed.ln", x), cfg.dropout, train_rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto pre = layer_prefix(l);
    x = self_attention_block(p, pre + ".attn", x, cfg.heads, cfg.dropout, train_rng);
    const Tensor hidden = gelu(affine(p, pre + ".ff1", x));
    const Tensor ff = maybe_dropout(affine(p, pre + ".ff2", hidden), cfg.dropout, train_rng);
    x = norm(p, pre + ".ff_ln", add(x, ff));
  }
  return x;
}

namespace {

Tensor mlm_loss_counting(const LmCheckpoint& lm, const MaskedContext& masked, Rng* train_rng, std::size_t* hits) {
  if (masked.labels.empty()) throw DataError("mlm_loss: no masked positions");
  const Tensor h = encode(lm, masked.ids, train_rng);
  std::vector<int> rows, targets;
  for (const auto& [pos, id] : masked.labels) {
    rows.push_back(static_cast<int>(pos));
    targets.push_back(id);
  }
  const Tensor picked = embedding(h, rows);
  const Tensor logits = add(matmul(picked, lm.params.at("embed.token"), true), lm.params.at("mlm.bias"));
  if (hits) {
    const std::size_t vocab = logits.shape()[1];
    const auto data = logits.data();
    for (std::size_t r = 0; r < targets.size(); ++r) {
      const auto row = data.subspan(r * vocab, vocab);
      *hits += std::ranges::max_element(row) - row.begin() == targets[r];
    }
  }
  return cross_entropy(logits, targets);
}

}  // namespace

Tensor mlm_loss(const LmCheckpoint& lm, const MaskedContext& masked, Rng* train_rng) {
  return mlm_loss_counting(lm, masked, train_rng, nullptr);
}

double mean_mlm_loss(const LmCheckpoint& lm, const std::vector<MaskedContext>& corpus) {
  if (corpus.empty()) throw DataError("mean_mlm_loss: empty corpus");
  double total = 0.0;
  for (const auto& m : corpus) total += mlm_loss(lm, m).item();
  return total / static_cast<double>(corpus.size());
}

// ---------------------------------------------------------------------------
// Pre-training

LmCheckpoint pretrain_mlm(const LmCheckpoint& lm, const MaskedCorpusFn& corpus, const TrainOptions& options,
                          PretrainReport* report) {
  if (options.batch_size == 0) throw ConfigError("pretrain_mlm: batch size must be positive");
  LmCheckpoint out = lm.clone();
  out.params.reset_optimizer();
  if (options.epochs == 0) {
    if (report) report->epoch_losses.clear();
    return out;
  }
  Rng rng(options.seed);
  const auto opt = adamw_options(options);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    const auto data = corpus(epoch);
    if (data.empty()) throw DataError("pretrain_mlm: empty corpus");
    if (epoch == 0 && report) report->initial_loss = mean_mlm_loss(out, data);
    double total = 0.0;
    const bool last = epoch + 1 == options.epochs;
    std::size_t hits = 0, masked = 0;
    for (const auto& batch : batches(data.size(), options.batch_size, rng)) {
      out.params.zero_grad();
      for (auto i : batch) {
        masked += data[i].labels.size();
        const Tensor loss = scale(mlm_loss_counting(out, data[i], &rng, last ? &hits : nullptr),
                                  1.0 / static_cast<double>(batch.size()));
        total += loss.item() * static_cast<double>(batch.size());
        backward(loss);
      }
      out.params.adamw_step(opt);
    }
    out.params.zero_grad();
    if (report) {
      report->epoch_losses.push_back(total / static_cast<double>(data.size()));
      if (last) report->masked_accuracy = static_cast<double>(hits) / static_cast<double>(masked);
    }
  }
  return out;
}

LmCheckpoint pretrain_mlm(const LmCheckpoint& lm, const std::vector<MaskedContext>& corpus,
                          const TrainOptions& options, PretrainReport* report) {
  return pretrain_mlm(lm, [&corpus](std::size_t) { return corpus; }, options, report);
}

// ---------------------------------------------------------------------------
// Task fine-tuning

std::vector<TaskInstance> prepare_instances(const TaskDataset& data, const std::vector<TokenizedContext>& contexts,
                                            const Vocab& vocab, std::size_t max_seq_len) {
  std::vector<TaskInstance> out;
  out.reserve(data.size());
  for (const auto& ex : data.examples) {
    const auto& ctx = contexts.at(ex.context_index);
    TaskInstance inst;
    inst.ids.assign(ctx.ids.begin(), ctx.ids.end() - 1);  // drop trailing SEP
    inst.context_begin = 1;
    inst.context_end = inst.ids.size();
    if (data.kind == TaskKind::kSpanQa) {
      inst.gold = ex.answer_text;
      const int a = static_cast<int>(ex.answer_start);
      const int b = a + static_cast<int>(ex.answer_text.size());
      for (std::size_t t = inst.context_begin; t < inst.context_end; ++t) {
        const auto span = ctx.offsets[t];
        if (span.begin < b && span.end > a) {
          if (inst.start < 0) inst.start = static_cast<int>(t);
          inst.end = static_cast<int>(t);
        }
      }
      inst.ids.push_back(kSepId);
      const auto question = tokenize(ex.question, vocab, max_seq_len);
      for (std::size_t t = 1; t + 1 < question.ids.size() && inst.ids.size() + 1 < max_seq_len; ++t) {
        inst.ids.push_back(question.ids[t]);
      }
    } else {
      inst.label = ex.label;
    }
    inst.ids.push_back(kSepId);
    if (inst.ids.size() > max_seq_len) {
      // context filled the window; keep the tail separator inside it
      inst.ids.resize(max_seq_len);
      inst.ids.back() = kSepId;
      inst.context_end = std::min(inst.context_end, max_seq_len - 1);
      if (inst.end >= static_cast<int>(inst.context_end)) inst.start = inst.end = -1;
    }
    out.push_back(std::move(inst));
  }
  return out;
}

TaskHead init_task_head(TaskKind kind, std::size_t model_dim, std::size_t num_labels, std::uint64_t seed) {
  Rng rng(seed);
  TaskHead head;
  head.kind = kind;
  head.num_labels = num_labels;
  if (kind == TaskKind::kSpanQa) {
    add_affine(head.params, "qa", model_dim, 2, rng);
  } else {
    if (num_labels < 2) throw ConfigError("classification head needs at least 2 labels");
    add_affine(head.params, "cls", model_dim, num_labels, rng);
  }
  return head;
}

Tensor task_loss(const LmCheckpoint& lm, const TaskHead& head, const TaskInstance& inst, Rng* train_rng) {
  const Tensor h = encode(lm, inst.ids, train_rng);
  if (head.kind == TaskKind::kSpanQa) {
    if (inst.start < 0) throw DataError("task_loss: answer span not inside the encoded window");
    const Tensor logits = affine(head.params, "qa", h);  // [N, 2]
    const std::size_t n = h.rows();
    const Tensor start = reshape(slice_cols(logits, 0, 1), {1, n});
    const Tensor end = reshape(slice_cols(logits, 1, 2), {1, n});
    const int s[] = {inst.start};
    const int e[] = {inst.end};
    return add(cross_entropy(start, s), cross_entropy(end, e));
  }
  const int cls_row[] = {0};
  const Tensor logits = affine(head.params, "cls", embedding(h, cls_row));
  const int target[] = {inst.label};
  return cross_entropy(logits, target);
}

FineTuneResult fine_tune(const LmCheckpoint& lm, TaskKind kind, std::size_t num_labels,
                         const std::vector<TaskInstance>& train, const TrainOptions& options) {
  if (train.empty()) throw DataError("fine_tune: empty training set");
  if (options.batch_size == 0) throw ConfigError("fine_tune: batch size must be positive");
  FineTuneResult result{lm.clone(), init_task_head(kind, lm.config.model_dim, num_labels, options.seed), {}};
  result.lm.params.reset_optimizer();
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (kind != TaskKind::kSpanQa || train[i].start >= 0) usable.push_back(i);
  }
  if (usable.empty()) throw DataError("fine_tune: no training example has its answer inside the window");
  Rng rng(mix_seed(options.seed, 0xF17E));
  const auto opt = adamw_options(options);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& batch : batches(usable.size(), options.batch_size, rng)) {
      result.lm.params.zero_grad();
      result.head.params.zero_grad();
      for (auto b : batch) {
        const Tensor loss =
            scale(task_loss(result.lm, result.head, train[usable[b]], &rng), 1.0 / static_cast<double>(batch.size()));
        total += loss.item() * static_cast<double>(batch.size());
        backward(loss);
      }
      result.lm.params.adamw_step(opt);
      result.head.params.adamw_step(opt);
    }
    result.epoch_losses.push_back(total / static_cast<double>(usable.size()));
  }
  result.lm.params.zero_grad();
  result.head.params.zero_grad();
  return result;
}

std::string predict_span(const LmCheckpoint& lm, const TaskHead& head, const TaskInstance& inst, const Vocab& vocab) {
  const Tensor h = encode(lm, inst.ids);
  const Tensor logits = affine(head.params, "qa", h);
  double best = -INFINITY;
  std::size_t bs = inst.context_begin, be = inst.context_begin;
  for (std::size_t s = inst.context_begin; s < inst.context_end; ++s) {
    for (std::size_t e = s; e < inst.context_end && e < s + kMaxAnswerTokens; ++e) {
      const double v = logits.at(s, 0) + logits.at(e, 1);
      if (v > best) {
        best = v;
        bs = s;
        be = e;
      }
    }
  }
  return detokenize_range(inst.ids, bs, be, vocab);
}

TaskMetrics evaluate_task(const LmCheckpoint& lm, const TaskHead& head, const std::vector<TaskInstance>& data,
                          const Vocab& vocab) {
  if (data.empty()) throw DataError("evaluate_task: empty evaluation set");
  TaskMetrics m;
  std::vector<int> predicted, gold;
  for (const auto& inst : data) {
    if (head.kind == TaskKind::kSpanQa) {
      const std::string pred = predict_span(lm, head, inst, vocab);
      m.em += exact_match(pred, inst.gold);
      m.f1 += token_f1(pred, inst.gold);
    } else {
      const Tensor h = encode(lm, inst.ids);
      const int cls_row[] = {0};
      const Tensor logits = affine(head.params, "cls", embedding(h, cls_row));
      auto row = logits.data();
      const auto arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      predicted.push_back(arg);
      gold.push_back(inst.label);
    }
  }
  m.count = data.size();
  const double n = static_cast<double>(data.size());
  m.em /= n;
  m.f1 /= n;
  m.acc = head.kind == TaskKind::kSpanQa ? m.em : accuracy(predicted, gold);
  return m;
}

}  // namespace nmg
