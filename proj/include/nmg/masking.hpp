#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nmg/text.hpp"

namespace nmg {

// Positions to mask in one context, strictly increasing.
struct MaskPlan {
  std::size_t context_index = 0;
  std::vector<std::size_t> positions;
  double probability = 0.0;
  std::size_t budget = 0;  // T
};

struct MaskedContext {
  std::vector<int> ids;                         // ŝ
  std::vector<std::pair<std::size_t, int>> labels;  // position -> original id, ascending
};

enum class MaskStrategy { kNone, kRandom, kWholeWord, kSpan, kEntity, kPunctuation, kNeural };

const char* strategy_name(MaskStrategy s);
// Accepts the CLI names none, random, whole, span, entity, punct, neural.
MaskStrategy parse_strategy(const std::string& name);
const std::vector<std::string>& strategy_names();

// T = max(1, floor(p * M)).
std::size_t mask_count(std::size_t maskable, double p);

MaskedContext apply_mask_plan(const TokenizedContext& context, const MaskPlan& plan);
// Inverse of apply_mask_plan.
std::vector<int> restore(const MaskedContext& masked);

MaskPlan random_mask(const TokenizedContext& context, double p, std::uint64_t seed);
MaskPlan whole_word_mask(const TokenizedContext& context, double p, std::uint64_t seed);
MaskPlan span_mask(const TokenizedContext& context, double p, std::uint64_t seed);
MaskPlan priority_mask(const TokenizedContext& context, double p, std::uint64_t seed, TokenClass priority_class);

// Heuristic strategies only; kNone and kNeural are handled by callers.
MaskPlan heuristic_mask(MaskStrategy strategy, const TokenizedContext& context, double p, std::uint64_t seed);

inline constexpr double kSpanGeometricP = 0.2;
inline constexpr std::size_t kMaxSpanLength = 10;
// Clamped geometric span length on {1..kMaxSpanLength}.
std::size_t sample_span_length(Rng& rng);

struct MaskStats {
  std::map<std::string, std::size_t> by_class;
  std::vector<std::pair<std::string, std::size_t>> top_tokens;  // most masked surface forms
  std::size_t total = 0;
};

MaskStats mask_stats(const std::vector<MaskPlan>& plans, const std::vector<TokenizedContext>& contexts,
                     const Vocab& vocab, std::size_t top_k = 10);

}  // namespace nmg
