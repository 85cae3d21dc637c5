#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "nmg/agent.hpp"

namespace nmg {

struct Replay {
  std::size_t context_index = 0;
  std::size_t position = 0;
  int token = -1;
  int reward = 0;        // R in {-1, 0, +1}
  double pi_old = 1.0;   // behaviour probability of the action
  double priority = 0.0;

  bool operator==(const Replay&) const = default;
};

// One masked position chosen by an agent during an episode.
struct EpisodeEntry {
  std::size_t context_index = 0;
  std::size_t position = 0;
  double behavior_prob = 1.0;
};
using EpisodeBuffer = std::vector<EpisodeEntry>;

inline constexpr std::size_t kDefaultReplayCapacity = 50000;

// Bounded FIFO replay store with proportional (exponent 1) sampling.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = kDefaultReplayCapacity);

  void push(const Replay& replay);
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<Replay>& items() const { return items_; }

  // Diagnostic snapshot, one JSON object per line.
  void export_jsonl(const std::filesystem::path& path) const;
  static ReplayBuffer import_jsonl(const std::filesystem::path& path, std::size_t capacity);

 private:
  std::size_t capacity_;
  std::deque<Replay> items_;
};

// sgn(r - b); exact ties give 0.
int compute_reward(double r, double b);

// Disjoint-action credit assignment for the agent that produced `self`.
// Actions it shares with neither rival get min(sgn(r - r_random), sgn(r - r_op));
// shared with the random agent only: sgn(r - r_op); shared with the opponent
// only: sgn(r - r_random); shared with both: dropped.
std::vector<Replay> assign_disjoint_rewards(const EpisodeBuffer& self, const EpisodeBuffer& random,
                                            const EpisodeBuffer& opponent, double r, double r_random, double r_op);
// Self-play disabled: actions not shared with the random agent get sgn(r - r_random).
std::vector<Replay> assign_random_only_rewards(const EpisodeBuffer& self, const EpisodeBuffer& random, double r,
                                               double r_random);

// priority = |R - V(s)| / sqrt(freq) with freq the in-context count of the
// masked token (at least 1).
void push_replays(ReplayBuffer& buffer, std::vector<Replay> replays, const std::vector<double>& values,
                  const std::vector<std::size_t>& token_freqs);

// Proportional to priority, with replacement; uniform when all priorities are 0.
std::vector<Replay> sample_minibatch(const ReplayBuffer& buffer, std::size_t batch_size, Rng& rng);

using StateLookup = std::function<const AgentState&(std::size_t context_index)>;

struct AgentLosses {
  Tensor policy;
  Tensor value;
};

// Policy term: sum over replays of -(π/π_old)(R - V) - α H(π), with V held
// constant; value term: sum of ½(R - V)².
AgentLosses agent_losses(const AgentParams& agent, const std::vector<Replay>& batch, double alpha,
                         const StateLookup& states, std::optional<double> ratio_cap = std::nullopt);
Tensor policy_loss(const AgentParams& agent, const std::vector<Replay>& batch, double alpha, const StateLookup& states,
                   std::optional<double> ratio_cap = std::nullopt);
Tensor value_loss(const AgentParams& agent, const std::vector<Replay>& batch, const StateLookup& states);

struct AgentUpdateOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 1e-4;
  double alpha = 0.01;
  std::optional<double> ratio_cap;
  std::uint64_t seed = 0;
};

struct AgentUpdateStats {
  std::size_t steps = 0;
  double policy_loss = 0.0;  // mean over steps
  double value_loss = 0.0;
};

// epochs x (sample minibatch -> policy + value loss -> backward -> Adam).
AgentUpdateStats update_agent(AgentParams& agent, const ReplayBuffer& buffer, const AgentUpdateOptions& options,
                              const StateLookup& states);

std::size_t token_frequency(const TokenizedContext& context, std::size_t position);

}  // namespace nmg
