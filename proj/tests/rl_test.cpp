#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "nmg/error.hpp"
#include "nmg/rl.hpp"
#include "support.hpp"

using namespace nmg;

namespace {

EpisodeBuffer episode(std::initializer_list<std::pair<std::size_t, std::size_t>> actions) {
  EpisodeBuffer out;
  for (auto [c, p] : actions) out.push_back({c, p, 0.25});
  return out;
}

struct Toy {
  AgentParams agent;
  std::map<std::size_t, AgentState> states;
  StateLookup lookup() {
    return [this](std::size_t i) -> const AgentState& { return states.at(i); };
  }
};

Toy make_toy(std::size_t contexts, std::size_t len, std::uint64_t seed) {
  Toy toy{init_agent(8, 2, 16, seed), {}};
  Rng rng(seed + 100);
  std::normal_distribution<double> d(0.0, 1.0);
  for (std::size_t c = 0; c < contexts; ++c) {
    std::vector<double> v(len * 8);
    for (auto& x : v) x = d(rng);
    std::vector<bool> maskable(len, true);
    maskable.front() = maskable.back() = false;
    toy.states[c] = {Tensor::constant({len, 8}, v), maskable};
  }
  return toy;
}

}  // namespace

TEST(Reward, SignWithTies) {
  EXPECT_EQ(compute_reward(0.7, 0.5), 1);
  EXPECT_EQ(compute_reward(0.5, 0.7), -1);
  EXPECT_EQ(compute_reward(0.5, 0.5), 0);
}

TEST(DisjointRewards, FourBranches) {
  auto self = episode({{0, 1}, {0, 2}, {1, 3}, {1, 4}});
  auto random = episode({{0, 2}, {0, 5}, {1, 4}, {1, 6}});
  auto opp = episode({{0, 7}, {0, 8}, {1, 3}, {1, 4}});
  // beats random, loses to the opponent
  auto out = assign_disjoint_rewards(self, random, opp, 0.6, 0.5, 0.7);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].position, 1u);  // neither: min(+1, -1)
  EXPECT_EQ(out[0].reward, -1);
  EXPECT_EQ(out[1].position, 2u);  // random only: vs opponent
  EXPECT_EQ(out[1].reward, -1);
  EXPECT_EQ(out[2].position, 3u);  // opponent only: vs random
  EXPECT_EQ(out[2].reward, 1);
  EXPECT_DOUBLE_EQ(out[0].pi_old, 0.25);
}

TEST(DisjointRewards, RejectsMismatchedContexts) {
  auto self = episode({{0, 1}});
  EXPECT_THROW(assign_disjoint_rewards(self, episode({{1, 1}}), self, 1, 0, 0), DataError);
  EXPECT_THROW(assign_random_only_rewards(self, episode({{1, 1}}), 1, 0), DataError);
}

TEST(DisjointRewards, RandomOnlyVariant) {
  auto self = episode({{0, 1}, {0, 2}});
  auto random = episode({{0, 2}, {0, 3}});
  auto out = assign_random_only_rewards(self, random, 0.4, 0.5);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].position, 1u);
  EXPECT_EQ(out[0].reward, -1);
}

TEST(ReplayBuffer, PriorityFormulaAndFifo) {
  ReplayBuffer buf(3);
  std::vector<Replay> rs(4);
  for (std::size_t i = 0; i < 4; ++i) {
    rs[i].position = i;
    rs[i].reward = 1;
  }
  push_replays(buf, rs, {0.5, -1.0, 1.0, 0.0}, {1, 4, 2, 0});
  ASSERT_EQ(buf.size(), 3u);
  EXPECT_EQ(buf.items().front().position, 1u);
  EXPECT_NEAR(buf.items()[0].priority, 2.0 / 2.0, 1e-15);
  EXPECT_NEAR(buf.items()[1].priority, 0.0, 1e-15);
  EXPECT_NEAR(buf.items()[2].priority, 1.0, 1e-15);  // freq floored at 1
  EXPECT_THROW(push_replays(buf, rs, {0.0}, {1}), ShapeError);
  Replay bad;
  bad.priority = -1;
  EXPECT_THROW(buf.push(bad), NumericError);
  bad.priority = NAN;
  EXPECT_THROW(buf.push(bad), NumericError);
  EXPECT_THROW(ReplayBuffer(0), ConfigError);
}

TEST(ReplayBuffer, SnapshotRoundTrip) {
  test::TempDir dir("replay");
  ReplayBuffer buf(10);
  for (int i = 0; i < 5; ++i) buf.push({static_cast<std::size_t>(i), 2, 7 + i, i % 2 ? 1 : -1, 0.125 * (i + 1), 0.3 * i});
  buf.export_jsonl(dir / "r.jsonl");
  auto back = ReplayBuffer::import_jsonl(dir / "r.jsonl", 10);
  ASSERT_EQ(back.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(back.items()[i], buf.items()[i]);
  EXPECT_THROW(ReplayBuffer::import_jsonl(dir / "missing", 10), DataError);
}

TEST(ReplayBuffer, SamplingProportional) {
  ReplayBuffer buf(10);
  buf.push({0, 0, -1, 1, 1.0, 3.0});
  buf.push({1, 0, -1, 1, 1.0, 1.0});
  Rng rng(1);
  int first = 0;
  const int n = 40000;
  for (const auto& r : sample_minibatch(buf, n, rng)) first += r.context_index == 0;
  EXPECT_NEAR(first / double(n), 0.75, 0.01);

  ReplayBuffer zeros(10);
  zeros.push({0, 0, -1, 0, 1.0, 0.0});
  zeros.push({1, 0, -1, 0, 1.0, 0.0});
  first = 0;
  for (const auto& r : sample_minibatch(zeros, n, rng)) first += r.context_index == 0;
  EXPECT_NEAR(first / double(n), 0.5, 0.01);
  EXPECT_THROW(sample_minibatch(ReplayBuffer(2), 1, rng), DataError);
}

// With pi_old equal to the current policy and no entropy term, each replay
// contributes -(R - V) to the loss value.
TEST(AgentLoss, OnPolicyValueEqualsNegativeAdvantage) {
  auto toy = make_toy(2, 6, 1);
  auto lookup = toy.lookup();
  std::vector<Replay> batch;
  double expected = 0, expected_value = 0;
  for (std::size_t c = 0; c < 2; ++c) {
    auto po = policy_forward(toy.agent, toy.states[c]);
    const double v = value_forward(toy.agent, toy.states[c]).item();
    for (std::size_t pos : {1u, 3u}) {
      Replay r{c, pos, -1, pos == 1 ? 1 : -1, po.probabilities[pos], 1.0};
      batch.push_back(r);
      expected += -(r.reward - v);
      expected_value += 0.5 * (r.reward - v) * (r.reward - v);
    }
  }
  auto losses = agent_losses(toy.agent, batch, 0.0, lookup);
  EXPECT_NEAR(losses.policy.item(), expected, 1e-12);
  EXPECT_NEAR(losses.value.item(), expected_value, 1e-12);
  EXPECT_NEAR(value_loss(toy.agent, batch, lookup).item(), expected_value, 1e-12);
}

TEST(AgentLoss, EntropyTermAndRatioCap) {
  auto toy = make_toy(1, 5, 2);
  auto lookup = toy.lookup();
  auto po = policy_forward(toy.agent, toy.states[0]);
  const double v = value_forward(toy.agent, toy.states[0]).item();
  Replay r{0, 2, -1, 1, po.probabilities[2] / 10.0, 1.0};
  const double ratio = 10.0;
  EXPECT_NEAR(policy_loss(toy.agent, {r}, 0.5, lookup).item(), -ratio * (1 - v) - 0.5 * policy_entropy(po), 1e-12);
  EXPECT_NEAR(policy_loss(toy.agent, {r}, 0.0, lookup, 2.0).item(), -2.0 * (1 - v), 1e-12);
  // capped replays carry no policy gradient
  toy.agent.params.zero_grad();
  backward(policy_loss(toy.agent, {r}, 0.0, lookup, 2.0));
  EXPECT_EQ(toy.agent.params.grad_norm(), 0.0);
}

TEST(AgentLoss, RejectsBadReplays) {
  auto toy = make_toy(1, 5, 3);
  auto lookup = toy.lookup();
  EXPECT_THROW(agent_losses(toy.agent, {}, 0.0, lookup), DataError);
  EXPECT_THROW(agent_losses(toy.agent, {Replay{0, 0, -1, 1, 0.5, 1}}, 0.0, lookup), DataError);
  EXPECT_THROW(agent_losses(toy.agent, {Replay{0, 1, -1, 1, 0.0, 1}}, 0.0, lookup), NumericError);
}

TEST(UpdateAgent, PositiveRewardRaisesActionProbability) {
  auto toy = make_toy(1, 8, 4);
  auto lookup = toy.lookup();
  const double before = policy_forward(toy.agent, toy.states[0]).probabilities[3];
  ReplayBuffer buf;
  buf.push({0, 3, -1, 1, before, 1.0});
  AgentUpdateOptions o;
  o.epochs = 20;
  o.batch_size = 4;
  o.lr = 1e-3;
  o.alpha = 0.0;
  auto stats = update_agent(toy.agent, buf, o, lookup);
  EXPECT_EQ(stats.steps, 20u);
  EXPECT_GT(policy_forward(toy.agent, toy.states[0]).probabilities[3], before);
  const auto h = toy.agent.hash();
  EXPECT_EQ(update_agent(toy.agent, ReplayBuffer(), o, lookup).steps, 0u);
  EXPECT_EQ(toy.agent.hash(), h);
}

TEST(UpdateAgent, Deterministic) {
  auto a = make_toy(3, 6, 5), b = make_toy(3, 6, 5);
  ReplayBuffer buf;
  for (std::size_t c = 0; c < 3; ++c) buf.push({c, 2, -1, c == 1 ? 1 : -1, 0.25, 0.5 + double(c)});
  AgentUpdateOptions o;
  o.seed = 9;
  update_agent(a.agent, buf, o, a.lookup());
  update_agent(b.agent, buf, o, b.lookup());
  EXPECT_EQ(a.agent.hash(), b.agent.hash());
}

TEST(TokenFrequency, CountsInContext) {
  TokenizedContext c;
  c.ids = {kClsId, 7, 8, 7, 7, kSepId};
  EXPECT_EQ(token_frequency(c, 1), 3u);
  EXPECT_EQ(token_frequency(c, 2), 1u);
}
