#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nmg/autodiff.hpp"
#include "nmg/language_model.hpp"
#include "nmg/parameters.hpp"

namespace nmg {

// Masking policy (one self-attention layer, then two affine maps with gelu
// giving a scalar logit per position) and value head (two affine maps with
// gelu over the mean-pooled states).
struct AgentParams {
  std::size_t model_dim = 64;
  std::size_t heads = 2;
  std::size_t hidden = 128;
  ParameterSet params;

  std::uint64_t hash() const { return params.content_hash(); }
  AgentParams clone() const { return {model_dim, heads, hidden, params.clone()}; }

  void save(const std::filesystem::path& path, std::uint64_t episode, const std::string& role) const;
  static AgentParams load(const std::filesystem::path& path);
};

AgentParams init_agent(std::size_t model_dim, std::size_t heads, std::size_t hidden, std::uint64_t seed);

// Frozen LM features for one context: encoder output with gradients severed.
struct AgentState {
  Tensor hidden;
  std::vector<bool> maskable;
};

AgentState agent_state(const LmCheckpoint& lm, const TokenizedContext& context);

struct PolicyOutput {
  Tensor logits;         // [N, 1]
  Tensor probs;          // [1, N], zero outside maskable positions
  std::vector<double> probabilities;
  std::vector<bool> maskable;
};

PolicyOutput policy_forward(const AgentParams& agent, const AgentState& state);
Tensor value_forward(const AgentParams& agent, const AgentState& state);

struct SampledActions {
  std::vector<std::size_t> actions;
  std::vector<double> behavior_probs;  // π_old(a_t|s) under the original distribution
};

// T distinct positions drawn sequentially without replacement, renormalising
// after each draw.
SampledActions sample_actions(const PolicyOutput& policy, std::size_t count, Rng& rng);
// Top-T by probability, ties to the lower position; returned ascending.
std::vector<std::size_t> greedy_actions(const PolicyOutput& policy, std::size_t count);
// Uniform over maskable positions (exploration and the random opponent).
SampledActions uniform_actions(const std::vector<bool>& maskable, std::size_t count, Rng& rng);

double policy_entropy(const PolicyOutput& policy);
// Differentiable entropy over maskable positions.
Tensor policy_entropy_tensor(const PolicyOutput& policy);

}  // namespace nmg
