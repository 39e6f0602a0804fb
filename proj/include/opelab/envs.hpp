#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "opelab/common.hpp"

namespace opelab {

class TabularPolicy;
class GaussianLinearPolicy;
class PiecewiseUniformPolicy;

// One episode padded to the full horizon. Steps at or after `active_steps`
// sit in an absorbing state: dynamics ignore the action and reward is 0.
template <class State, class Action>
struct Trajectory {
  std::vector<State> states;
  std::vector<Action> actions;
  std::vector<double> rewards;
  std::size_t active_steps = 0;

  std::size_t length() const { return rewards.size(); }
  bool is_padding(std::size_t t) const { return t >= active_steps; }
};

using TabularTrajectory = Trajectory<int, int>;
using ContinuousTrajectory = Trajectory<Eigen::VectorXd, Eigen::VectorXd>;
using BanditTrajectory = Trajectory<int, double>;

template <class State, class Action>
double trajectory_return(const Trajectory<State, Action>& traj, double gamma) {
  double g = 0.0;
  double discount = 1.0;
  for (double r : traj.rewards) {
    g += discount * r;
    discount *= gamma;
  }
  return g;
}

struct TabularMdp {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  std::size_t horizon = 1;
  double gamma = 1.0;
  std::vector<double> d0;
  std::vector<double> transitions;  // [(s * n_actions + a) * n_states + s']
  std::vector<double> rewards;      // [s * n_actions + a]
  std::vector<char> terminal;

  TabularMdp() = default;
  TabularMdp(std::size_t states, std::size_t actions, std::size_t horizon, double gamma);

  double& p(int s, int a, int next) { return transitions[index(s, a) * n_states + next]; }
  double p(int s, int a, int next) const { return transitions[index(s, a) * n_states + next]; }
  std::span<const double> transition_row(int s, int a) const {
    return {transitions.data() + index(s, a) * n_states, n_states};
  }
  double& r(int s, int a) { return rewards[index(s, a)]; }
  double r(int s, int a) const { return rewards[index(s, a)]; }
  bool is_terminal(int s) const { return terminal[static_cast<std::size_t>(s)] != 0; }
  bool is_deterministic() const;

  // Throws ConfigError when a probability table is malformed.
  void validate() const;

 private:
  std::size_t index(int s, int a) const {
    return static_cast<std::size_t>(s) * n_actions + static_cast<std::size_t>(a);
  }
};

namespace gridworld {
inline constexpr int kSize = 4;
enum Action : int { kUp = 0, kRight = 1, kDown = 2, kLeft = 3 };
inline int state(int x, int y) { return y * kSize + x; }
double cell_reward(int x, int y);
}  // namespace gridworld

// 4x4 grid, start (0,0). Cell (3,3) is the absorbing goal: entering it pays 100.
// Reward is paid on arrival in a cell; bumping a wall leaves the agent in place.
TabularMdp make_gridworld(std::size_t horizon = 100, double gamma = 1.0);
// States s0..s5 in a chain, s5 absorbing. a0 advances with reward 1; a1 advances
// with probability 1 - stay_probability and pays 0.
TabularMdp make_singlepath(std::size_t horizon = 5, double gamma = 1.0,
                           double stay_probability = 0.5);

struct LdsEnv {
  Eigen::Matrix4d transition = Eigen::Matrix4d::Identity();
  Eigen::Matrix<double, 4, 2> control;
  Eigen::Vector4d noise_std = Eigen::Vector4d::Ones();
  Eigen::Vector4d initial_state = Eigen::Vector4d::Zero();
  Eigen::Vector2d goal{5.0, 5.0};
  std::size_t horizon = 20;
  double gamma = 1.0;
  double reward_scale = 1.0;
  double reward_offset = 0.0;
  // Per-dimension clip on the acceleration fed to the dynamics (not on the
  // sampled action). Infinity disables it.
  double action_limit = 2.0;

  LdsEnv();
  Eigen::Vector4d step(const Eigen::Vector4d& state, const Eigen::Vector2d& action, Rng& rng) const;
  double reward(const Eigen::Vector4d& next_state) const;
  void validate() const;
};

// Single-step continuous bandit on [lower, upper] with R(a) = a.
struct BanditEnv {
  double lower = 0.0;
  double upper = 1.0;
  std::size_t horizon = 1;
  double gamma = 1.0;
  double reward(double action) const { return action; }
};

using Environment = std::variant<TabularMdp, LdsEnv, BanditEnv>;

// {"env": "gridworld" | "singlepath" | "lds" | "bandit1d", "overrides": {...}}
Environment build_env(const nlohmann::json& spec);
Environment build_env(std::string_view name);
inline Environment build_env(const char* name) { return build_env(std::string_view(name)); }

TabularTrajectory sample_trajectory(const TabularMdp& mdp, const TabularPolicy& policy, Rng& rng);
ContinuousTrajectory sample_trajectory(const LdsEnv& env, const GaussianLinearPolicy& policy, Rng& rng);
BanditTrajectory sample_trajectory(const BanditEnv& env, const PiecewiseUniformPolicy& policy, Rng& rng);

template <class Env, class Policy>
auto sample_dataset(const Env& env, const Policy& policy, std::size_t m, Rng& rng) {
  using Traj = decltype(sample_trajectory(env, policy, rng));
  std::vector<Traj> data;
  data.reserve(m);
  for (std::size_t i = 0; i < m; ++i) data.push_back(sample_trajectory(env, policy, rng));
  return data;
}

double true_value_dp(const TabularMdp& mdp, const TabularPolicy& policy, double gamma);
double true_value_dp(const TabularMdp& mdp, const TabularPolicy& policy);

struct McValue {
  double mean = 0.0;
  double standard_error = std::numeric_limits<double>::quiet_NaN();  // NaN when n_rollouts == 1
};

template <class Env, class Policy>
McValue true_value_mc(const Env& env, const Policy& policy, double gamma, std::size_t n_rollouts,
                      Rng& rng) {
  if (n_rollouts == 0) throw ConfigError("true_value_mc: n_rollouts must be >= 1");
  // Welford keeps the variance exact (zero) for constant returns.
  double mean = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < n_rollouts; ++i) {
    const double g = trajectory_return(sample_trajectory(env, policy, rng), gamma);
    const double delta = g - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (g - mean);
  }
  McValue out;
  out.mean = mean;
  if (n_rollouts > 1) {
    const double n = static_cast<double>(n_rollouts);
    out.standard_error = std::sqrt(m2 / (n - 1.0) / n);
  }
  return out;
}

// Expected visits to each state over non-absorbed steps, normalized to sum 1.
std::vector<double> state_occupancy(const TabularMdp& mdp, const TabularPolicy& policy);

std::uint64_t dataset_digest(std::span<const TabularTrajectory> data);
std::uint64_t dataset_digest(std::span<const ContinuousTrajectory> data);

}  // namespace opelab
