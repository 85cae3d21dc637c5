#include "nmg/masking.hpp"

#include <algorithm>
#include <cmath>

#include "nmg/error.hpp"

namespace nmg {

namespace {

const std::vector<std::pair<MaskStrategy, std::string>> kNames = {
    {MaskStrategy::kNone, "none"},       {MaskStrategy::kRandom, "random"},
    {MaskStrategy::kWholeWord, "whole"}, {MaskStrategy::kSpan, "span"},
    {MaskStrategy::kEntity, "entity"},   {MaskStrategy::kPunctuation, "punct"},
    {MaskStrategy::kNeural, "neural"},
};

std::vector<std::size_t> maskable_positions(const TokenizedContext& context) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < context.length(); ++i) {
    if (context.maskable(i)) out.push_back(i);
  }
  return out;
}

MaskPlan make_plan(const TokenizedContext& context, double p, std::size_t budget, std::vector<std::size_t> positions) {
  std::sort(positions.begin(), positions.end());
  return MaskPlan{context.context_index, std::move(positions), p, budget};
}

}  // namespace

const char* strategy_name(MaskStrategy s) {
  for (const auto& [k, n] : kNames) {
    if (k == s) return n.c_str();
  }
  return "unknown";
}

MaskStrategy parse_strategy(const std::string& name) {
  for (const auto& [k, n] : kNames) {
    if (n == name) return k;
  }
  std::string valid;
  for (const auto& [_, n] : kNames) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown masking strategy '" + name + "' (valid: " + valid + ")");
}

const std::vector<std::string>& strategy_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [_, n] : kNames) out.push_back(n);
    return out;
  }();
  return names;
}

std::size_t mask_count(std::size_t maskable, double p) {
  if (maskable == 0) throw DataError("mask_count: context has no maskable positions");
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("mask_count: masking probability must lie in (0, 1)");
  const auto t = static_cast<std::size_t>(std::floor(p * static_cast<double>(maskable)));
  return std::min(maskable, std::max<std::size_t>(1, t));
}

MaskedContext apply_mask_plan(const TokenizedContext& context, const MaskPlan& plan) {
  MaskedContext out;
  out.ids = context.ids;
  std::size_t prev = 0;
  for (std::size_t k = 0; k < plan.positions.size(); ++k) {
    const std::size_t pos = plan.positions[k];
    if (pos >= context.length() || !context.maskable(pos)) {
      throw DataError("apply_mask_plan: position " + std::to_string(pos) + " is not maskable");
    }
    if (k > 0 && pos <= prev) throw DataError("apply_mask_plan: positions must be strictly increasing");
    prev = pos;
    out.labels.emplace_back(pos, context.ids[pos]);
    out.ids[pos] = kMaskId;
  }
  return out;
}

std::vector<int> restore(const MaskedContext& masked) {
  std::vector<int> ids = masked.ids;
  for (const auto& [pos, id] : masked.labels) ids[pos] = id;
  return ids;
}

MaskPlan random_mask(const TokenizedContext& context, double p, std::uint64_t seed) {
  auto positions = maskable_positions(context);
  const std::size_t budget = mask_count(positions.size(), p);
  Rng rng(seed);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < budget; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, positions.size() - 1);
    std::swap(positions[i], positions[pick(rng)]);
  }
  positions.resize(budget);
  return make_plan(context, p, budget, std::move(positions));
}

MaskPlan whole_word_mask(const TokenizedContext& context, double p, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> words;
  for (std::size_t i = 0; i < context.length(); ++i) {
    if (!context.maskable(i)) continue;
    if (words.empty() || context.word_start[i]) {
      words.push_back({i});
    } else {
      words.back().push_back(i);
    }
  }
  std::size_t maskable = 0;
  for (const auto& w : words) maskable += w.size();
  const std::size_t budget = mask_count(maskable, p);
  Rng rng(seed);
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < words.size() && positions.size() < budget; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, words.size() - 1);
    std::swap(words[i], words[pick(rng)]);
    positions.insert(positions.end(), words[i].begin(), words[i].end());
  }
  return make_plan(context, p, budget, std::move(positions));
}

std::size_t sample_span_length(Rng& rng) {
  std::geometric_distribution<std::size_t> geo(kSpanGeometricP);
  return std::min(kMaxSpanLength, geo(rng) + 1);
}

MaskPlan span_mask(const TokenizedContext& context, double p, std::uint64_t seed) {
  const std::size_t maskable = context.maskable_count();
  const std::size_t budget = mask_count(maskable, p);
  Rng rng(seed);
  std::vector<bool> taken(context.length(), false);
  std::vector<std::size_t> positions;
  while (positions.size() < budget) {
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < context.length(); ++i) {
      if (context.maskable(i) && !taken[i]) free.push_back(i);
    }
    std::uniform_int_distribution<std::size_t> pick(0, free.size() - 1);
    const std::size_t start = free[pick(rng)];
    const std::size_t length = sample_span_length(rng);
    for (std::size_t i = start; i < start + length && i < context.length() && context.maskable(i); ++i) {
      if (!taken[i]) {
        taken[i] = true;
        positions.push_back(i);
      }
    }
  }
  return make_plan(context, p, budget, std::move(positions));
}

MaskPlan priority_mask(const TokenizedContext& context, double p, std::uint64_t seed, TokenClass priority_class) {
  std::vector<std::size_t> preferred, rest;
  for (std::size_t i = 0; i < context.length(); ++i) {
    if (!context.maskable(i)) continue;
    (context.token_class[i] == priority_class ? preferred : rest).push_back(i);
  }
  if (preferred.empty()) return random_mask(context, p, seed);
  const std::size_t budget = mask_count(preferred.size() + rest.size(), p);
  Rng rng(seed);
  std::shuffle(preferred.begin(), preferred.end(), rng);
  std::vector<std::size_t> positions(preferred.begin(),
                                     preferred.begin() + static_cast<std::ptrdiff_t>(std::min(budget, preferred.size())));
  for (std::size_t i = 0; positions.size() < budget; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, rest.size() - 1);
    std::swap(rest[i], rest[pick(rng)]);
    positions.push_back(rest[i]);
  }
  return make_plan(context, p, budget, std::move(positions));
}

MaskPlan heuristic_mask(MaskStrategy strategy, const TokenizedContext& context, double p, std::uint64_t seed) {
  switch (strategy) {
    case MaskStrategy::kRandom: return random_mask(context, p, seed);
    case MaskStrategy::kWholeWord: return whole_word_mask(context, p, seed);
    case MaskStrategy::kSpan: return span_mask(context, p, seed);
    case MaskStrategy::kEntity: return priority_mask(context, p, seed, TokenClass::kEntityCandidate);
    case MaskStrategy::kPunctuation: return priority_mask(context, p, seed, TokenClass::kPunctuation);
    default: break;
  }
  throw ConfigError(std::string("heuristic_mask: '") + strategy_name(strategy) + "' is not a heuristic strategy");
}

MaskStats mask_stats(const std::vector<MaskPlan>& plans, const std::vector<TokenizedContext>& contexts,
                     const Vocab& vocab, std::size_t top_k) {
  MaskStats stats;
  std::map<std::string, std::size_t> surfaces;
  for (const auto& plan : plans) {
    const auto& ctx = contexts.at(plan.context_index);
    for (auto pos : plan.positions) {
      ++stats.by_class[token_class_name(ctx.token_class.at(pos))];
      ++surfaces[vocab.token(ctx.ids[pos])];
      ++stats.total;
    }
  }
  stats.top_tokens.assign(surfaces.begin(), surfaces.end());
  std::stable_sort(stats.top_tokens.begin(), stats.top_tokens.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (stats.top_tokens.size() > top_k) stats.top_tokens.resize(top_k);
  return stats;
}

}  // namespace nmg
