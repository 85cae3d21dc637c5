#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "nmg/agent.hpp"
#include "nmg/config.hpp"
#include "nmg/error.hpp"
#include "support.hpp"

using namespace nmg;

namespace {

AgentState random_state(Rng& rng, std::size_t n, std::size_t dim, std::vector<bool> maskable = {}) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n * dim);
  for (auto& x : v) x = d(rng);
  if (maskable.empty()) {
    maskable.assign(n, true);
    maskable.front() = maskable.back() = false;
  }
  return {Tensor::constant({n, dim}, v), maskable};
}

PolicyOutput fixed_policy(std::vector<double> probs) {
  PolicyOutput p;
  p.probabilities = probs;
  p.maskable.resize(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) p.maskable[i] = probs[i] > 0.0;
  p.probs = Tensor::constant({1, probs.size()}, probs);
  return p;
}

}  // namespace

TEST(Agent, InitValidatesAndIsSeeded) {
  EXPECT_THROW(init_agent(10, 3, 8, 0), ConfigError);
  EXPECT_EQ(init_agent(8, 2, 16, 1).hash(), init_agent(8, 2, 16, 1).hash());
  EXPECT_NE(init_agent(8, 2, 16, 1).hash(), init_agent(8, 2, 16, 2).hash());
}

TEST(Agent, PolicyIsDistributionOverMaskable) {
  Rng rng(1);
  auto agent = init_agent(8, 2, 16, 3);
  auto state = random_state(rng, 7, 8, {false, true, true, false, true, true, false});
  auto out = policy_forward(agent, state);
  EXPECT_EQ(out.logits.shape(), (Shape{7, 1}));
  double total = 0;
  for (std::size_t i = 0; i < 7; ++i) {
    if (!state.maskable[i]) EXPECT_EQ(out.probabilities[i], 0.0);
    total += out.probabilities[i];
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_EQ(value_forward(agent, state).shape(), (Shape{1}));
  state.maskable.assign(7, false);
  EXPECT_THROW(policy_forward(agent, state), DataError);
  state.maskable.assign(3, true);
  EXPECT_THROW(policy_forward(agent, state), ShapeError);
}

TEST(Agent, FreshPolicyIsNearUniform) {
  Rng rng(2);
  auto agent = init_agent(16, 2, 32, 4);
  auto state = random_state(rng, 12, 16);
  auto out = policy_forward(agent, state);
  EXPECT_NEAR(policy_entropy(out), std::log(10.0), 0.01);
}

TEST(Agent, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  auto agent = init_agent(8, 2, 8, 5);
  std::normal_distribution<double> noise(0.0, 0.5);
  std::vector<Tensor> inputs;
  for (const auto& [_, t] : agent.params.tensors()) {
    Tensor h = t;
    for (auto& v : h.mutable_data()) v += noise(rng);
    inputs.push_back(h);
  }
  auto state = random_state(rng, 6, 8);
  const std::size_t picks[] = {2, 4};
  auto loss = [&] {
    auto out = policy_forward(agent, state);
    auto lp = sum(log(pick(out.probs, picks)));
    return add(add(lp, policy_entropy_tensor(out)), mul(value_forward(agent, state), value_forward(agent, state)));
  };
  EXPECT_LT(finite_difference_check(loss, inputs, 1e-5), 1e-4);
}

TEST(Agent, EntropyTensorMatchesScalar) {
  auto p = fixed_policy({0, 0.2, 0.3, 0.5, 0});
  EXPECT_NEAR(policy_entropy_tensor(p).item(), policy_entropy(p), 1e-15);
  EXPECT_NEAR(policy_entropy(p), -(0.2 * std::log(0.2) + 0.3 * std::log(0.3) + 0.5 * std::log(0.5)), 1e-15);
}

TEST(Sampling, DistinctAndRecordsOriginalProbability) {
  auto p = fixed_policy({0, 0.1, 0.6, 0.3, 0});
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    auto s = sample_actions(p, 3, rng);
    ASSERT_EQ(s.actions.size(), 3u);
    std::vector<std::size_t> sorted = s.actions;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::vector<std::size_t>{1, 2, 3}));
    for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(s.behavior_probs[k], p.probabilities[s.actions[k]]);
  }
  EXPECT_THROW(sample_actions(p, 4, rng), DataError);
}

// Sequential sampling without replacement: P(first = i) = p_i and
// P(second = j | first = i) = p_j / (1 - p_i).
TEST(Sampling, SequentialLaw) {
  auto p = fixed_policy({0.5, 0.3, 0.2});
  Rng rng(5);
  const int n = 60000;
  std::vector<std::vector<int>> pair(3, std::vector<int>(3, 0));
  for (int i = 0; i < n; ++i) {
    auto s = sample_actions(p, 2, rng);
    ++pair[s.actions[0]][s.actions[1]];
  }
  const auto& q = p.probabilities;
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = 0; b < 3; ++b) {
      if (a == b) continue;
      const double want = q[a] * q[b] / (1 - q[a]);
      EXPECT_NEAR(pair[a][b] / double(n), want, 0.01) << a << "," << b;
    }
  }
}

TEST(Sampling, GreedyAndUniform) {
  auto p = fixed_policy({0, 0.2, 0.2, 0.5, 0.1});
  EXPECT_EQ(greedy_actions(p, 2), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(greedy_actions(p, 1), (std::vector<std::size_t>{3}));
  EXPECT_THROW(greedy_actions(p, 5), DataError);
  Rng rng(6);
  std::vector<bool> maskable{false, true, true, true, true};
  std::vector<int> hits(5, 0);
  for (int i = 0; i < 8000; ++i) {
    auto s = uniform_actions(maskable, 1, rng);
    EXPECT_DOUBLE_EQ(s.behavior_probs[0], 0.25);
    ++hits[s.actions[0]];
  }
  EXPECT_EQ(hits[0], 0);
  for (int i = 1; i < 5; ++i) EXPECT_NEAR(hits[i], 2000, 200);
}

TEST(Agent, CheckpointRoundTrip) {
  test::TempDir dir("agent");
  auto agent = init_agent(8, 2, 16, 7);
  agent.save(dir / "a.bin", 3, "neural");
  auto back = AgentParams::load(dir / "a.bin");
  EXPECT_EQ(back.hash(), agent.hash());
  EXPECT_EQ(back.hidden, 16u);
}

TEST(Agent, StateFromLanguageModelIsDetached) {
  LmConfig c;
  c.layers = 1;
  c.model_dim = 8;
  c.ff_dim = 8;
  c.max_seq_len = 16;
  c.vocab_size = 20;
  auto lm = init_language_model(c, 1);
  Rng rng(8);
  auto ctx = test::random_context(rng, 5, 5, 20);
  auto state = agent_state(lm, ctx);
  EXPECT_FALSE(state.hidden.requires_grad());
  EXPECT_EQ(state.maskable, ctx.maskable_flags());
}

// The masking network stays small next to the encoder at a realistic vocab.
TEST(Agent, ParameterBudgetAgainstLanguageModel) {
  LmConfig c;
  c.vocab_size = 10000;
  auto lm = init_language_model(c, 1);
  auto agent = init_agent(c.model_dim, c.heads, RlConfig{}.hidden_size, 1);
  EXPECT_LE(static_cast<double>(agent.params.parameter_count()),
            0.05 * static_cast<double>(lm.params.parameter_count()));
}
