#include <algorithm>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "nmg/error.hpp"
#include "nmg/scoring.hpp"

using namespace nmg;

namespace {

// Sorted-multiset intersection, written independently of the library.
double reference_f1(const std::string& pred, const std::string& gold) {
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string w; in >> w;) {
      for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      out.push_back(w);
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  auto p = split(pred), g = split(gold);
  if (p.empty() && g.empty()) return 1.0;
  std::vector<std::string> common;
  std::set_intersection(p.begin(), p.end(), g.begin(), g.end(), std::back_inserter(common));
  if (common.empty()) return 0.0;
  const double prec = double(common.size()) / double(p.size()), rec = double(common.size()) / double(g.size());
  return 2 * prec * rec / (prec + rec);
}

}  // namespace

TEST(Normalize, CaseAndWhitespace) {
  EXPECT_EQ(normalize_answer("  The\tBig \n Cat "), "the big cat");
  EXPECT_EQ(normalize_answer(""), "");
}

TEST(ExactMatch, Basic) {
  EXPECT_DOUBLE_EQ(exact_match("Cat", "cat"), 1.0);
  EXPECT_DOUBLE_EQ(exact_match("the cat", "cat"), 0.0);
  EXPECT_DOUBLE_EQ(exact_match(" a  b", "a b "), 1.0);
}

TEST(TokenF1, KnownValues) {
  EXPECT_NEAR(token_f1("the cat", "the cat sat"), 0.8, 1e-12);
  EXPECT_NEAR(token_f1("a b c", "a b d"), 2.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(token_f1("x", "y"), 0.0);
  EXPECT_DOUBLE_EQ(token_f1("", ""), 1.0);
  EXPECT_DOUBLE_EQ(token_f1("", "a"), 0.0);
  // repeated tokens count once per occurrence
  EXPECT_NEAR(token_f1("a a a", "a"), 0.5, 1e-12);
}

TEST(TokenF1, MatchesReferenceOnGrid) {
  const std::vector<std::string> phrases = {"a", "a b", "b a", "a a b", "c", "A b C", "b b", "", "d e f a"};
  for (const auto& p : phrases) {
    for (const auto& g : phrases) EXPECT_NEAR(token_f1(p, g), reference_f1(p, g), 1e-12) << p << " | " << g;
  }
}

TEST(Accuracy, FractionOfMatches) {
  const std::vector<int> pred{0, 1, 2, 2}, gold{0, 2, 2, 1};
  EXPECT_DOUBLE_EQ(accuracy(pred, gold), 0.5);
  EXPECT_DOUBLE_EQ(accuracy(gold, gold), 1.0);
  EXPECT_THROW(accuracy(std::vector<int>{1}, gold), ShapeError);
  EXPECT_THROW(accuracy(std::vector<int>{}, std::vector<int>{}), DataError);
}
