#include <algorithm>
#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "nmg/error.hpp"
#include "nmg/masking.hpp"
#include "support.hpp"

using namespace nmg;
using nmg::test::random_context;

namespace {

std::size_t max_word_length(const TokenizedContext& c) {
  std::size_t best = 0, run = 0;
  for (std::size_t i = 0; i < c.length(); ++i) {
    if (!c.maskable(i)) continue;
    run = c.word_start[i] ? 1 : run + 1;
    best = std::max(best, run);
  }
  return best;
}

void check_plan(const TokenizedContext& c, const MaskPlan& plan, std::size_t lo, std::size_t hi) {
  ASSERT_GE(plan.positions.size(), lo);
  ASSERT_LE(plan.positions.size(), hi);
  for (std::size_t k = 0; k < plan.positions.size(); ++k) {
    EXPECT_TRUE(c.maskable(plan.positions[k]));
    if (k > 0) EXPECT_LT(plan.positions[k - 1], plan.positions[k]);
  }
  auto masked = apply_mask_plan(c, plan);
  EXPECT_EQ(restore(masked), c.ids);
  for (auto p : plan.positions) EXPECT_EQ(masked.ids[p], kMaskId);
}

}  // namespace

TEST(MaskCount, FloorWithFloorOfOne) {
  EXPECT_EQ(mask_count(100, 0.15), 15u);
  EXPECT_EQ(mask_count(19, 0.05), 1u);
  EXPECT_EQ(mask_count(40, 0.05), 2u);
  EXPECT_EQ(mask_count(1, 0.5), 1u);
  EXPECT_THROW(mask_count(0, 0.1), DataError);
  EXPECT_THROW(mask_count(10, 0.0), ConfigError);
  EXPECT_THROW(mask_count(10, 1.0), ConfigError);
}

TEST(ApplyMask, ReplacesAndRestores) {
  TokenizedContext c;
  c.ids = {kClsId, 7, 8, 9, kSepId};
  c.word_start = {false, true, true, true, false};
  c.token_class = {TokenClass::kSpecial, TokenClass::kPlainWord, TokenClass::kPlainWord, TokenClass::kPlainWord,
                   TokenClass::kSpecial};
  MaskPlan plan{0, {1, 3}, 0.5, 2};
  auto m = apply_mask_plan(c, plan);
  EXPECT_EQ(m.ids, (std::vector<int>{kClsId, kMaskId, 8, kMaskId, kSepId}));
  EXPECT_EQ(m.labels, (std::vector<std::pair<std::size_t, int>>{{1, 7}, {3, 9}}));
  EXPECT_EQ(restore(m), c.ids);
  EXPECT_THROW(apply_mask_plan(c, {0, {0}, 0.5, 1}), DataError);
  EXPECT_THROW(apply_mask_plan(c, {0, {3, 1}, 0.5, 2}), DataError);
  EXPECT_THROW(apply_mask_plan(c, {0, {9}, 0.5, 1}), DataError);
}

TEST(Strategies, InvariantsOnRandomContexts) {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    auto c = random_context(rng);
    const double p = std::uniform_real_distribution<double>(0.02, 0.6)(rng);
    const std::size_t T = mask_count(c.maskable_count(), p);
    const auto seed = static_cast<std::uint64_t>(trial);
    check_plan(c, random_mask(c, p, seed), T, T);
    check_plan(c, whole_word_mask(c, p, seed), T, T + max_word_length(c) - 1);
    check_plan(c, span_mask(c, p, seed), T, T + kMaxSpanLength - 1);
    check_plan(c, heuristic_mask(MaskStrategy::kEntity, c, p, seed), T, T);
    check_plan(c, heuristic_mask(MaskStrategy::kPunctuation, c, p, seed), T, T);
  }
}

TEST(Strategies, SameSeedSamePlan) {
  Rng rng(2);
  auto c = random_context(rng, 30, 30);
  for (auto s : {MaskStrategy::kRandom, MaskStrategy::kWholeWord, MaskStrategy::kSpan, MaskStrategy::kEntity}) {
    EXPECT_EQ(heuristic_mask(s, c, 0.2, 5).positions, heuristic_mask(s, c, 0.2, 5).positions);
  }
  EXPECT_THROW(heuristic_mask(MaskStrategy::kNeural, c, 0.2, 5), ConfigError);
}

TEST(Strategies, WholeWordNeverSplitsWords) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    auto c = random_context(rng);
    auto plan = whole_word_mask(c, 0.3, static_cast<std::uint64_t>(trial));
    std::vector<bool> masked(c.length(), false);
    for (auto p : plan.positions) masked[p] = true;
    for (std::size_t i = 2; i + 1 < c.length(); ++i) {
      if (!c.word_start[i] && c.maskable(i) && c.maskable(i - 1)) EXPECT_EQ(masked[i], masked[i - 1]);
    }
  }
}

TEST(Strategies, PriorityClassTakenFirst) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    auto c = random_context(rng, 10, 40);
    auto plan = priority_mask(c, 0.3, static_cast<std::uint64_t>(trial), TokenClass::kEntityCandidate);
    std::size_t entities = 0, chosen = 0;
    for (std::size_t i = 0; i < c.length(); ++i) entities += c.token_class[i] == TokenClass::kEntityCandidate;
    for (auto p : plan.positions) chosen += c.token_class[p] == TokenClass::kEntityCandidate;
    EXPECT_EQ(chosen, std::min(entities, plan.positions.size()));
  }
}

TEST(Strategies, EmptyPriorityClassFallsBackToRandom) {
  Rng rng(6);
  auto c = random_context(rng, 20, 20);
  for (auto& cls : c.token_class) {
    if (cls == TokenClass::kPunctuation) cls = TokenClass::kPlainWord;
  }
  for (std::uint64_t s = 0; s < 20; ++s) {
    EXPECT_EQ(priority_mask(c, 0.2, s, TokenClass::kPunctuation).positions, random_mask(c, 0.2, s).positions);
  }
}

TEST(Strategies, RandomMaskIsUniform) {
  Rng rng(9);
  auto c = random_context(rng, 10, 10);
  std::map<std::size_t, int> hits;
  const int draws = 20000;
  for (int s = 0; s < draws; ++s) {
    for (auto p : random_mask(c, 0.1, static_cast<std::uint64_t>(s)).positions) ++hits[p];
  }
  const double expected = static_cast<double>(draws) / static_cast<double>(c.maskable_count());
  for (auto [pos, n] : hits) EXPECT_NEAR(n, expected, 5 * std::sqrt(expected)) << pos;
}

TEST(SpanLength, ClampedGeometric) {
  Rng rng(3);
  std::vector<int> counts(kMaxSpanLength + 1, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[sample_span_length(rng)];
  EXPECT_EQ(counts[0], 0);
  // P(L = k) = q(1-q)^(k-1) for k < 10, the tail lumped at 10
  for (std::size_t k = 1; k <= kMaxSpanLength; ++k) {
    const double want = k < kMaxSpanLength ? kSpanGeometricP * std::pow(1 - kSpanGeometricP, k - 1)
                                           : std::pow(1 - kSpanGeometricP, kMaxSpanLength - 1);
    EXPECT_NEAR(counts[k] / static_cast<double>(n), want, 0.006) << k;
  }
}

TEST(Names, RoundTrip) {
  for (const auto& n : strategy_names()) EXPECT_EQ(strategy_name(parse_strategy(n)), n);
  EXPECT_THROW(parse_strategy("bogus"), ConfigError);
  EXPECT_EQ(strategy_names().size(), 7u);
}

TEST(Stats, HistogramAndTopTokens) {
  Vocab v;
  const int comma = v.add(","), bob = v.add("Bob"), ran = v.add("ran");
  TokenizedContext c;
  c.ids = {kClsId, bob, comma, ran, comma, kSepId};
  c.word_start = {false, true, true, true, true, false};
  c.token_class = {TokenClass::kSpecial,     TokenClass::kEntityCandidate, TokenClass::kPunctuation,
                   TokenClass::kPlainWord,   TokenClass::kPunctuation,     TokenClass::kSpecial};
  std::vector<TokenizedContext> ctxs{c};
  auto s = mask_stats({MaskPlan{0, {2, 4}, 0.5, 2}}, ctxs, v);
  EXPECT_EQ(s.total, 2u);
  EXPECT_EQ(s.by_class.at("punctuation"), 2u);
  ASSERT_EQ(s.top_tokens.size(), 1u);
  EXPECT_EQ(s.top_tokens[0], (std::pair<std::string, std::size_t>{",", 2}));
  auto empty = mask_stats({}, ctxs, v);
  EXPECT_EQ(empty.total, 0u);
  EXPECT_TRUE(empty.by_class.empty());
  auto mixed = mask_stats({MaskPlan{0, {1, 2, 3}, 0.5, 3}}, ctxs, v, 2);
  EXPECT_EQ(mixed.top_tokens.size(), 2u);
}
