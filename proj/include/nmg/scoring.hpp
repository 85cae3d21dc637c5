#pragma once

#include <span>
#include <string>

namespace nmg {

// Lower-cases and collapses runs of whitespace.
std::string normalize_answer(const std::string& text);

double exact_match(const std::string& prediction, const std::string& gold);

// Token-overlap F1 over normalized whitespace tokens (multiset overlap).
double token_f1(const std::string& prediction, const std::string& gold);

// Fraction of equal labels; throws on a length mismatch or empty input.
double accuracy(std::span<const int> predicted, std::span<const int> gold);

}  // namespace nmg
