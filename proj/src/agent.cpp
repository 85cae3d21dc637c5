#include "nmg/agent.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nmg/error.hpp"

namespace nmg {

namespace {

constexpr double kInitStd = 0.02;

Tensor affine(const ParameterSet& p, const std::string& name, const Tensor& x) {
  return add(matmul(x, p.at(name + ".w")), p.at(name + ".b"));
}

void add_affine(ParameterSet& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  p.add_normal(name + ".w", {in, out}, kInitStd, rng);
  p.add_constant(name + ".b", {out}, 0.0);
}

}  // namespace

AgentParams init_agent(std::size_t model_dim, std::size_t heads, std::size_t hidden, std::uint64_t seed) {
  if (model_dim == 0 || heads == 0 || hidden == 0 || model_dim % heads != 0) {
    throw ConfigError("init_agent: invalid dimensions");
  }
  Rng rng(seed);
  AgentParams agent{model_dim, heads, hidden, {}};
  add_self_attention_params(agent.params, "policy.attn", model_dim, rng);
  add_affine(agent.params, "policy.fc1", model_dim, hidden, rng);
  add_affine(agent.params, "policy.fc2", hidden, 1, rng);
  add_affine(agent.params, "value.fc1", model_dim, hidden, rng);
  add_affine(agent.params, "value.fc2", hidden, 1, rng);
  return agent;
}

void AgentParams::save(const std::filesystem::path& path, std::uint64_t episode, const std::string& role) const {
  params.save(path,
              {{"kind", "agent"}, {"model_dim", model_dim}, {"heads", heads}, {"hidden", hidden},
               {"episode", episode}, {"role", role}},
              /*include_optimizer=*/true);
}

AgentParams AgentParams::load(const std::filesystem::path& path) {
  auto [params, meta] = ParameterSet::load(path);
  if (meta.value("kind", "") != "agent") throw DataError(path.string() + " is not an agent checkpoint");
  return {meta.at("model_dim").get<std::size_t>(), meta.at("heads").get<std::size_t>(),
          meta.at("hidden").get<std::size_t>(), std::move(params)};
}

AgentState agent_state(const LmCheckpoint& lm, const TokenizedContext& context) {
  return {detach(encode(lm, context.ids)), context.maskable_flags()};
}

PolicyOutput policy_forward(const AgentParams& agent, const AgentState& state) {
  const std::size_t n = state.hidden.rows();
  if (state.maskable.size() != n) throw ShapeError("policy_forward: maskable flags do not match the sequence");
  if (std::none_of(state.maskable.begin(), state.maskable.end(), [](bool b) { return b; })) {
    throw DataError("policy_forward: no maskable positions");
  }
  const Tensor attended = self_attention_block(agent.params, "policy.attn", state.hidden, agent.heads, 0.0, nullptr);
  PolicyOutput out;
  out.logits = affine(agent.params, "policy.fc2", gelu(affine(agent.params, "policy.fc1", attended)));
  out.probs = masked_softmax(reshape(out.logits, {1, n}), state.maskable);
  out.probabilities.assign(out.probs.data().begin(), out.probs.data().end());
  out.maskable = state.maskable;
  return out;
}

Tensor value_forward(const AgentParams& agent, const AgentState& state) {
  const Tensor pooled = mean_pool(state.hidden);
  const Tensor v = affine(agent.params, "value.fc2", gelu(affine(agent.params, "value.fc1", pooled)));
  return reshape(v, {1});
}

SampledActions sample_actions(const PolicyOutput& policy, std::size_t count, Rng& rng) {
  const auto& p = policy.probabilities;
  const auto available = static_cast<std::size_t>(std::count(policy.maskable.begin(), policy.maskable.end(), true));
  if (count > available) {
    throw DataError("sample_actions: " + std::to_string(count) + " actions requested, " + std::to_string(available) +
                    " maskable positions");
  }
  std::vector<double> weights = p;
  std::vector<bool> used(p.size(), false);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SampledActions out;
  for (std::size_t t = 0; t < count; ++t) {
    double total = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) total += used[i] ? 0.0 : weights[i];
    std::size_t chosen = weights.size();
    if (total > 0.0) {
      const double u = unit(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < weights.size(); ++i) {
        if (used[i] || weights[i] <= 0.0) continue;
        acc += weights[i];
        chosen = i;
        if (u < acc) break;
      }
    } else {
      // remaining mass underflowed; fall back to uniform over what is left
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < weights.size(); ++i) {
        if (policy.maskable[i] && !used[i]) rest.push_back(i);
      }
      std::uniform_int_distribution<std::size_t> pick(0, rest.size() - 1);
      chosen = rest[pick(rng)];
    }
    used[chosen] = true;
    out.actions.push_back(chosen);
    out.behavior_probs.push_back(p[chosen]);
  }
  return out;
}

std::vector<std::size_t> greedy_actions(const PolicyOutput& policy, std::size_t count) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < policy.probabilities.size(); ++i) {
    if (policy.maskable[i]) order.push_back(i);
  }
  if (count > order.size()) throw DataError("greedy_actions: more actions than maskable positions");
  const auto& p = policy.probabilities;
  std::stable_sort(order.begin(), order.end(), [&p](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

SampledActions uniform_actions(const std::vector<bool>& maskable, std::size_t count, Rng& rng) {
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < maskable.size(); ++i) {
    if (maskable[i]) positions.push_back(i);
  }
  if (count > positions.size()) throw DataError("uniform_actions: more actions than maskable positions");
  // same partial Fisher-Yates as random_mask
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, positions.size() - 1);
    std::swap(positions[i], positions[pick(rng)]);
  }
  positions.resize(count);
  SampledActions out;
  out.actions = std::move(positions);
  out.behavior_probs.assign(count, 1.0 / static_cast<double>(std::count(maskable.begin(), maskable.end(), true)));
  return out;
}

double policy_entropy(const PolicyOutput& policy) {
  double h = 0.0;
  for (std::size_t i = 0; i < policy.probabilities.size(); ++i) {
    const double p = policy.probabilities[i];
    if (policy.maskable[i] && p > 0.0) h -= p * std::log(p);
  }
  return h;
}

Tensor policy_entropy_tensor(const PolicyOutput& policy) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < policy.probabilities.size(); ++i) {
    if (policy.maskable[i] && policy.probabilities[i] > 0.0) idx.push_back(i);
  }
  const Tensor p = pick(policy.probs, idx);
  return scale(sum(mul(p, log(p))), -1.0);
}

}  // namespace nmg
