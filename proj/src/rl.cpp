#include "nmg/rl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "nmg/error.hpp"

namespace nmg {

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("replay buffer capacity must be positive");
}

void ReplayBuffer::push(const Replay& replay) {
  if (!(replay.priority >= 0.0) || !std::isfinite(replay.priority)) {
    throw NumericError("replay priority must be finite and non-negative");
  }
  if (items_.size() == capacity_) items_.pop_front();
  items_.push_back(replay);
}

void ReplayBuffer::export_jsonl(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& r : items_) {
    nlohmann::ordered_json j;
    j["context_id"] = r.context_index;
    j["position"] = r.position;
    j["token"] = r.token;
    j["R"] = r.reward;
    j["pi_old"] = r.pi_old;
    j["priority"] = r.priority;
    out << j.dump() << '\n';
  }
}

ReplayBuffer ReplayBuffer::import_jsonl(const std::filesystem::path& path, std::size_t capacity) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open replay snapshot " + path.string());
  ReplayBuffer buffer(capacity);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    Replay r;
    r.context_index = j.at("context_id").get<std::size_t>();
    r.position = j.at("position").get<std::size_t>();
    r.token = j.at("token").get<int>();
    r.reward = j.at("R").get<int>();
    r.pi_old = j.at("pi_old").get<double>();
    r.priority = j.at("priority").get<double>();
    buffer.push(r);
  }
  return buffer;
}

int compute_reward(double r, double b) {
  if (r > b) return 1;
  if (r < b) return -1;
  return 0;
}

namespace {

using Key = std::pair<std::size_t, std::size_t>;

std::set<Key> action_set(const EpisodeBuffer& buffer) {
  std::set<Key> out;
  for (const auto& e : buffer) out.emplace(e.context_index, e.position);
  return out;
}

std::set<std::size_t> context_set(const EpisodeBuffer& buffer) {
  std::set<std::size_t> out;
  for (const auto& e : buffer) out.insert(e.context_index);
  return out;
}

Replay make_replay(const EpisodeEntry& e, int reward) {
  Replay r;
  r.context_index = e.context_index;
  r.position = e.position;
  r.reward = reward;
  r.pi_old = e.behavior_prob;
  return r;
}

}  // namespace

std::vector<Replay> assign_disjoint_rewards(const EpisodeBuffer& self, const EpisodeBuffer& random,
                                            const EpisodeBuffer& opponent, double r, double r_random, double r_op) {
  const auto contexts = context_set(self);
  if (context_set(random) != contexts || context_set(opponent) != contexts) {
    throw DataError("assign_disjoint_rewards: episode buffers cover different context sets");
  }
  const auto by_random = action_set(random);
  const auto by_opponent = action_set(opponent);
  const int vs_random = compute_reward(r, r_random);
  const int vs_opponent = compute_reward(r, r_op);
  std::vector<Replay> out;
  for (const auto& e : self) {
    const Key key{e.context_index, e.position};
    const bool shared_op = by_opponent.count(key) != 0;
    const bool shared_random = by_random.count(key) != 0;
    if (!shared_op && !shared_random) {
      out.push_back(make_replay(e, std::min(vs_random, vs_opponent)));
    } else if (!shared_op) {
      out.push_back(make_replay(e, vs_opponent));
    } else if (!shared_random) {
      out.push_back(make_replay(e, vs_random));
    }
  }
  return out;
}

std::vector<Replay> assign_random_only_rewards(const EpisodeBuffer& self, const EpisodeBuffer& random, double r,
                                               double r_random) {
  if (context_set(random) != context_set(self)) {
    throw DataError("assign_random_only_rewards: episode buffers cover different context sets");
  }
  const auto by_random = action_set(random);
  const int reward = compute_reward(r, r_random);
  std::vector<Replay> out;
  for (const auto& e : self) {
    if (!by_random.count({e.context_index, e.position})) out.push_back(make_replay(e, reward));
  }
  return out;
}

void push_replays(ReplayBuffer& buffer, std::vector<Replay> replays, const std::vector<double>& values,
                  const std::vector<std::size_t>& token_freqs) {
  if (values.size() != replays.size() || token_freqs.size() != replays.size()) {
    throw ShapeError("push_replays: values/frequencies do not match the replay count");
  }
  for (std::size_t i = 0; i < replays.size(); ++i) {
    const double freq = static_cast<double>(std::max<std::size_t>(1, token_freqs[i]));
    replays[i].priority = std::abs(static_cast<double>(replays[i].reward) - values[i]) / std::sqrt(freq);
    buffer.push(replays[i]);
  }
}

std::vector<Replay> sample_minibatch(const ReplayBuffer& buffer, std::size_t batch_size, Rng& rng) {
  if (buffer.empty()) throw DataError("sample_minibatch: empty replay buffer");
  const auto& items = buffer.items();
  std::vector<double> weights;
  weights.reserve(items.size());
  double total = 0.0;
  for (const auto& r : items) {
    weights.push_back(r.priority);
    total += r.priority;
  }
  if (total <= 0.0) std::fill(weights.begin(), weights.end(), 1.0);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::vector<Replay> out;
  out.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) out.push_back(items[pick(rng)]);
  return out;
}

AgentLosses agent_losses(const AgentParams& agent, const std::vector<Replay>& batch, double alpha,
                         const StateLookup& states, std::optional<double> ratio_cap) {
  if (batch.empty()) throw DataError("agent_losses: empty batch");
  std::map<std::size_t, std::vector<const Replay*>> by_context;
  for (const auto& r : batch) {
    if (!(r.pi_old > 0.0)) throw NumericError("policy_loss: behaviour probability must be positive");
    by_context[r.context_index].push_back(&r);
  }
  std::vector<Tensor> policy_terms, value_terms;
  for (const auto& [ctx, replays] : by_context) {
    const AgentState& state = states(ctx);
    const PolicyOutput po = policy_forward(agent, state);
    const Tensor v = value_forward(agent, state);
    const Tensor entropy = alpha != 0.0 ? policy_entropy_tensor(po) : Tensor{};
    const double v_const = v.item();
    for (const Replay* r : replays) {
      if (r->position >= po.probabilities.size() || !po.maskable[r->position]) {
        throw DataError("policy_loss: replay action is not a maskable position of its context");
      }
      const std::size_t idx[] = {r->position};
      const Tensor prob = pick(po.probs, idx);
      const double advantage = static_cast<double>(r->reward) - v_const;
      Tensor ratio = scale(prob, 1.0 / r->pi_old);
      if (ratio_cap && ratio.item() > *ratio_cap) ratio = Tensor::scalar(*ratio_cap);
      Tensor term = scale(ratio, -advantage);
      if (alpha != 0.0) term = sub(term, scale(entropy, alpha));
      policy_terms.push_back(term);
      const Tensor err = add_scalar(scale(v, -1.0), static_cast<double>(r->reward));
      value_terms.push_back(scale(mul(err, err), 0.5));
    }
  }
  auto total = [](const std::vector<Tensor>& terms) {
    Tensor acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return acc;
  };
  return {total(policy_terms), total(value_terms)};
}

Tensor policy_loss(const AgentParams& agent, const std::vector<Replay>& batch, double alpha, const StateLookup& states,
                   std::optional<double> ratio_cap) {
  return agent_losses(agent, batch, alpha, states, ratio_cap).policy;
}

Tensor value_loss(const AgentParams& agent, const std::vector<Replay>& batch, const StateLookup& states) {
  return agent_losses(agent, batch, 0.0, states).value;
}

AgentUpdateStats update_agent(AgentParams& agent, const ReplayBuffer& buffer, const AgentUpdateOptions& options,
                              const StateLookup& states) {
  AgentUpdateStats stats;
  if (buffer.empty()) return stats;
  Rng rng(options.seed);
  AdamWOptions adam;
  adam.lr = options.lr;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    const auto batch = sample_minibatch(buffer, options.batch_size, rng);
    const auto losses = agent_losses(agent, batch, options.alpha, states, options.ratio_cap);
    agent.params.zero_grad();
    backward(add(losses.policy, losses.value));
    agent.params.adamw_step(adam);
    agent.params.zero_grad();
    stats.policy_loss += losses.policy.item();
    stats.value_loss += losses.value.item();
    ++stats.steps;
  }
  stats.policy_loss /= static_cast<double>(stats.steps);
  stats.value_loss /= static_cast<double>(stats.steps);
  return stats;
}

std::size_t token_frequency(const TokenizedContext& context, std::size_t position) {
  const int id = context.ids.at(position);
  return static_cast<std::size_t>(std::count(context.ids.begin(), context.ids.end(), id));
}

}  // namespace nmg
