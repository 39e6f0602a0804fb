#include "opelab/envs.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "opelab/policies.hpp"

namespace opelab {

TabularMdp::TabularMdp(std::size_t states, std::size_t actions, std::size_t horizon_, double gamma_)
    : n_states(states),
      n_actions(actions),
      horizon(horizon_),
      gamma(gamma_),
      d0(states, 0.0),
      transitions(states * actions * states, 0.0),
      rewards(states * actions, 0.0),
      terminal(states, 0) {}

bool TabularMdp::is_deterministic() const {
  for (double v : d0)
    if (v != 0.0 && v != 1.0) return false;
  for (double v : transitions)
    if (v != 0.0 && v != 1.0) return false;
  return true;
}

namespace {

void check_distribution(std::span<const double> row, const std::string& what) {
  double sum = 0.0;
  for (double v : row) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(what + ": probability outside [0,1]");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-12) {
    std::ostringstream msg;
    msg << what << ": probabilities sum to " << sum;
    throw ConfigError(msg.str());
  }
}

}  // namespace

void TabularMdp::validate() const {
  if (n_states == 0 || n_actions == 0) throw ConfigError("mdp: empty state or action space");
  if (horizon < 1) throw ConfigError("mdp: horizon must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("mdp: gamma must lie in [0,1]");
  if (d0.size() != n_states || transitions.size() != n_states * n_actions * n_states ||
      rewards.size() != n_states * n_actions || terminal.size() != n_states)
    throw ConfigError("mdp: table sizes inconsistent with n_states/n_actions");
  check_distribution(d0, "mdp d0");
  for (std::size_t s = 0; s < n_states; ++s)
    for (std::size_t a = 0; a < n_actions; ++a)
      check_distribution(transition_row(static_cast<int>(s), static_cast<int>(a)),
                         "mdp P(.|" + std::to_string(s) + "," + std::to_string(a) + ")");
}

namespace gridworld {

double cell_reward(int x, int y) {
  if (x == 3 && y == 3) return 100.0;
  if (x == 1 && y == 1) return -10.0;
  if (x == 1 && y == 3) return 1.0;
  return -1.0;
}

}  // namespace gridworld

TabularMdp make_gridworld(std::size_t horizon, double gamma) {
  using namespace gridworld;
  TabularMdp mdp(kSize * kSize, 4, horizon, gamma);
  const int goal = state(3, 3);
  const int dx[4] = {0, 1, 0, -1};
  const int dy[4] = {-1, 0, 1, 0};
  mdp.d0[static_cast<std::size_t>(state(0, 0))] = 1.0;
  mdp.terminal[static_cast<std::size_t>(goal)] = 1;
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      const int s = state(x, y);
      for (int a = 0; a < 4; ++a) {
        if (s == goal) {
          mdp.p(s, a, s) = 1.0;
          continue;
        }
        int nx = x + dx[a], ny = y + dy[a];
        if (nx < 0 || nx >= kSize || ny < 0 || ny >= kSize) nx = x, ny = y;
        mdp.p(s, a, state(nx, ny)) = 1.0;
        mdp.r(s, a) = cell_reward(nx, ny);
      }
    }
  }
  return mdp;
}

TabularMdp make_singlepath(std::size_t horizon, double gamma, double stay_probability) {
  constexpr int kStates = 6;
  TabularMdp mdp(kStates, 2, horizon, gamma);
  mdp.d0[0] = 1.0;
  mdp.terminal[kStates - 1] = 1;
  for (int s = 0; s < kStates; ++s) {
    if (s == kStates - 1) {
      mdp.p(s, 0, s) = mdp.p(s, 1, s) = 1.0;
      continue;
    }
    mdp.p(s, 0, s + 1) = 1.0;
    mdp.r(s, 0) = 1.0;
    mdp.p(s, 1, s) = stay_probability;
    mdp.p(s, 1, s + 1) += 1.0 - stay_probability;
  }
  return mdp;
}

LdsEnv::LdsEnv() {
  control << 0.5, 0.0,
             0.0, 0.5,
             1.0, 0.0,
             0.0, 1.0;
}

Eigen::Vector4d LdsEnv::step(const Eigen::Vector4d& state, const Eigen::Vector2d& action,
                             Rng& rng) const {
  const Eigen::Vector2d applied = action.cwiseMax(-action_limit).cwiseMin(action_limit);
  Eigen::Vector4d next = transition * state + control * applied;
  for (int i = 0; i < 4; ++i)
    if (noise_std[i] != 0.0) next[i] += noise_std[i] * standard_normal(rng);
  return next;
}

double LdsEnv::reward(const Eigen::Vector4d& next_state) const {
  return reward_offset - reward_scale * (next_state.head<2>() - goal).norm();
}

void LdsEnv::validate() const {
  if (horizon < 1) throw ConfigError("lds: horizon must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("lds: gamma must lie in [0,1]");
  if ((noise_std.array() < 0.0).any()) throw ConfigError("lds: noise_std must be >= 0");
  if (!(action_limit > 0.0)) throw ConfigError("lds: action_limit must be > 0");
}

namespace {

double override_number(const nlohmann::json& o, const char* key, double fallback) {
  if (!o.contains(key)) return fallback;
  if (!o[key].is_number()) throw ConfigError(std::string("override '") + key + "' must be a number");
  return o[key].get<double>();
}

std::size_t override_count(const nlohmann::json& o, const char* key, std::size_t fallback) {
  if (!o.contains(key)) return fallback;
  if (!o[key].is_number_integer() || o[key].get<long long>() < 1)
    throw ConfigError(std::string("override '") + key + "' must be a positive integer");
  return o[key].get<std::size_t>();
}

Eigen::VectorXd override_vector(const nlohmann::json& o, const char* key, Eigen::VectorXd fallback) {
  if (!o.contains(key)) return fallback;
  const auto& v = o[key];
  if (v.is_number()) return Eigen::VectorXd::Constant(fallback.size(), v.get<double>());
  if (!v.is_array() || v.size() != static_cast<std::size_t>(fallback.size()))
    throw ConfigError(std::string("override '") + key + "' has the wrong length");
  Eigen::VectorXd out(fallback.size());
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = v[static_cast<std::size_t>(i)].get<double>();
  return out;
}

void reject_unknown(const nlohmann::json& o, std::initializer_list<const char*> known) {
  for (auto it = o.begin(); it != o.end(); ++it) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; }))
      throw ConfigError("unknown override '" + it.key() + "'");
  }
}

}  // namespace

Environment build_env(const nlohmann::json& spec) {
  if (!spec.is_object() || !spec.contains("env") || !spec["env"].is_string())
    throw ConfigError("environment spec needs a string field 'env'");
  const std::string name = spec["env"].get<std::string>();
  const nlohmann::json overrides = spec.value("overrides", nlohmann::json::object());
  if (!overrides.is_object()) throw ConfigError("'overrides' must be an object");

  if (name == "gridworld") {
    reject_unknown(overrides, {"horizon", "gamma"});
    TabularMdp mdp = make_gridworld(override_count(overrides, "horizon", 100),
                                    override_number(overrides, "gamma", 1.0));
    mdp.validate();
    return mdp;
  }
  if (name == "singlepath") {
    reject_unknown(overrides, {"horizon", "gamma", "stay_probability"});
    const double stay = override_number(overrides, "stay_probability", 0.5);
    if (!(stay >= 0.0 && stay <= 1.0)) throw ConfigError("stay_probability must lie in [0,1]");
    TabularMdp mdp = make_singlepath(override_count(overrides, "horizon", 5),
                                     override_number(overrides, "gamma", 1.0), stay);
    mdp.validate();
    return mdp;
  }
  if (name == "lds") {
    reject_unknown(overrides, {"horizon", "gamma", "noise_std", "goal", "reward_scale",
                               "reward_offset", "action_limit", "initial_state"});
    LdsEnv env;
    env.horizon = override_count(overrides, "horizon", env.horizon);
    env.gamma = override_number(overrides, "gamma", env.gamma);
    env.noise_std = override_vector(overrides, "noise_std", env.noise_std);
    env.goal = override_vector(overrides, "goal", env.goal);
    env.initial_state = override_vector(overrides, "initial_state", env.initial_state);
    env.reward_scale = override_number(overrides, "reward_scale", env.reward_scale);
    env.reward_offset = override_number(overrides, "reward_offset", env.reward_offset);
    if (overrides.contains("action_limit") && overrides["action_limit"].is_null())
      env.action_limit = std::numeric_limits<double>::infinity();
    else
      env.action_limit = override_number(overrides, "action_limit", env.action_limit);
    env.validate();
    return env;
  }
  if (name == "bandit1d") {
    reject_unknown(overrides, {});
    return BanditEnv{};
  }
  throw ConfigError("unknown environment '" + name + "'");
}

Environment build_env(std::string_view name) {
  return build_env(nlohmann::json{{"env", std::string(name)}});
}

TabularTrajectory sample_trajectory(const TabularMdp& mdp, const TabularPolicy& policy, Rng& rng) {
  if (policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions)
    throw ConfigError("policy shape does not match the MDP");
  auto draw = [&rng](std::span<const double> dist) {
    const double u = uniform01(rng);
    double acc = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < dist.size(); ++i) {
      if (dist[i] <= 0.0) continue;
      acc += dist[i];
      last = i;
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(last);
  };

  const std::size_t L = mdp.horizon;
  TabularTrajectory traj;
  traj.states.resize(L);
  traj.actions.resize(L);
  traj.rewards.assign(L, 0.0);
  traj.active_steps = L;
  int s = draw(mdp.d0);
  for (std::size_t t = 0; t < L; ++t) {
    traj.states[t] = s;
    const int a = policy.sample(s, rng);
    traj.actions[t] = a;
    if (mdp.is_terminal(s)) {
      if (traj.active_steps == L) traj.active_steps = t;
      continue;
    }
    traj.rewards[t] = mdp.r(s, a);
    s = draw(mdp.transition_row(s, a));
  }
  return traj;
}

ContinuousTrajectory sample_trajectory(const LdsEnv& env, const GaussianLinearPolicy& policy, Rng& rng) {
  if (policy.state_dim() != 4 || policy.action_dim() != 2)
    throw ConfigError("LDS policies map 4-d states to 2-d actions");
  const std::size_t L = env.horizon;
  ContinuousTrajectory traj;
  traj.states.reserve(L);
  traj.actions.reserve(L);
  traj.rewards.reserve(L);
  traj.active_steps = L;
  Eigen::Vector4d s = env.initial_state;
  for (std::size_t t = 0; t < L; ++t) {
    Eigen::VectorXd a = policy.sample(s, rng);
    Eigen::Vector4d next = env.step(s, a, rng);
    traj.states.emplace_back(s);
    traj.actions.push_back(std::move(a));
    traj.rewards.push_back(env.reward(next));
    s = next;
  }
  return traj;
}

BanditTrajectory sample_trajectory(const BanditEnv& env, const PiecewiseUniformPolicy& policy, Rng& rng) {
  BanditTrajectory traj;
  const double a = policy.sample(rng);
  traj.states = {0};
  traj.actions = {a};
  traj.rewards = {env.reward(a)};
  traj.active_steps = 1;
  return traj;
}

double true_value_dp(const TabularMdp& mdp, const TabularPolicy& policy, double gamma) {
  if (policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions)
    throw ConfigError("policy shape does not match the MDP");
  const std::size_t S = mdp.n_states, A = mdp.n_actions;
  std::vector<double> v(S, 0.0), next_v(S, 0.0);
  for (std::size_t k = 0; k < mdp.horizon; ++k) {
    for (std::size_t s = 0; s < S; ++s) {
      if (mdp.is_terminal(static_cast<int>(s))) {
        next_v[s] = 0.0;
        continue;
      }
      double acc = 0.0;
      for (std::size_t a = 0; a < A; ++a) {
        const double pa = policy.probability(static_cast<int>(s), static_cast<int>(a));
        if (pa == 0.0) continue;
        const auto row = mdp.transition_row(static_cast<int>(s), static_cast<int>(a));
        double cont = 0.0;
        for (std::size_t n = 0; n < S; ++n) cont += row[n] * v[n];
        acc += pa * (mdp.r(static_cast<int>(s), static_cast<int>(a)) + gamma * cont);
      }
      next_v[s] = acc;
    }
    std::swap(v, next_v);
  }
  double value = 0.0;
  for (std::size_t s = 0; s < S; ++s) value += mdp.d0[s] * v[s];
  return value;
}

double true_value_dp(const TabularMdp& mdp, const TabularPolicy& policy) {
  return true_value_dp(mdp, policy, mdp.gamma);
}

std::vector<double> state_occupancy(const TabularMdp& mdp, const TabularPolicy& policy) {
  const std::size_t S = mdp.n_states, A = mdp.n_actions;
  std::vector<double> dist = mdp.d0, next(S), visits(S, 0.0);
  for (std::size_t t = 0; t < mdp.horizon; ++t) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t s = 0; s < S; ++s) {
      if (dist[s] == 0.0 || mdp.is_terminal(static_cast<int>(s))) continue;
      visits[s] += dist[s];
      for (std::size_t a = 0; a < A; ++a) {
        const double w = dist[s] * policy.probability(static_cast<int>(s), static_cast<int>(a));
        if (w == 0.0) continue;
        const auto row = mdp.transition_row(static_cast<int>(s), static_cast<int>(a));
        for (std::size_t n = 0; n < S; ++n) next[n] += w * row[n];
      }
    }
    std::swap(dist, next);
  }
  double total = 0.0;
  for (double v : visits) total += v;
  if (total > 0.0)
    for (double& v : visits) v /= total;
  return visits;
}

std::uint64_t dataset_digest(std::span<const TabularTrajectory> data) {
  std::uint64_t h = fnv1a("tabular");
  for (const auto& tr : data) {
    h = fnv1a(tr.states.data(), tr.states.size() * sizeof(int), h);
    h = fnv1a(tr.actions.data(), tr.actions.size() * sizeof(int), h);
    h = fnv1a(tr.rewards.data(), tr.rewards.size() * sizeof(double), h);
  }
  return h;
}

std::uint64_t dataset_digest(std::span<const ContinuousTrajectory> data) {
  std::uint64_t h = fnv1a("continuous");
  for (const auto& tr : data) {
    for (std::size_t t = 0; t < tr.length(); ++t) {
      h = fnv1a(tr.states[t].data(), static_cast<std::size_t>(tr.states[t].size()) * sizeof(double), h);
      h = fnv1a(tr.actions[t].data(), static_cast<std::size_t>(tr.actions[t].size()) * sizeof(double), h);
    }
    h = fnv1a(tr.rewards.data(), tr.rewards.size() * sizeof(double), h);
  }
  return h;
}

}  // namespace opelab
