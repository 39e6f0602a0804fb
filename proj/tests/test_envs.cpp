#include <doctest.h>

#include <cmath>
#include <limits>
#include <variant>

#include "opelab/envs.hpp"
#include "opelab/policies.hpp"
#include "oracles.hpp"

using namespace opelab;

namespace {

TabularPolicy constant_policy(std::size_t S, double p0) {
  std::vector<double> p;
  for (std::size_t s = 0; s < S; ++s) p.insert(p.end(), {p0, 1.0 - p0});
  return TabularPolicy(S, 2, p);
}

TabularPolicy checked_in(const std::string& name) {
  return std::get<TabularPolicy>(load_policy(std::string(OPELAB_CONFIG_DIR) + "/policies/" + name));
}

// Forward propagation of the state distribution; a different route to v(pi)
// than the library's backward induction.
double value_forward(const TabularMdp& mdp, const TabularPolicy& pi) {
  std::vector<double> dist = mdp.d0;
  double v = 0.0, discount = 1.0;
  for (std::size_t t = 0; t < mdp.horizon; ++t) {
    std::vector<double> next(mdp.n_states, 0.0);
    for (std::size_t s = 0; s < mdp.n_states; ++s) {
      if (dist[s] == 0.0) continue;
      if (mdp.is_terminal(static_cast<int>(s))) {
        next[s] += dist[s];
        continue;
      }
      for (std::size_t a = 0; a < mdp.n_actions; ++a) {
        const double w = dist[s] * pi.probability(static_cast<int>(s), static_cast<int>(a));
        v += discount * w * mdp.r(static_cast<int>(s), static_cast<int>(a));
        for (std::size_t n = 0; n < mdp.n_states; ++n) next[n] += w * mdp.p(static_cast<int>(s), static_cast<int>(a), static_cast<int>(n));
      }
    }
    dist = next;
    discount *= mdp.gamma;
  }
  return v;
}

void check_normalized(const TabularMdp& mdp) {
  double d0 = 0.0;
  for (double p : mdp.d0) d0 += p;
  CHECK(std::abs(d0 - 1.0) <= 1e-12);
  for (std::size_t s = 0; s < mdp.n_states; ++s)
    for (std::size_t a = 0; a < mdp.n_actions; ++a) {
      double total = 0.0;
      for (double p : mdp.transition_row(static_cast<int>(s), static_cast<int>(a))) {
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
        total += p;
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
}

}  // namespace

TEST_CASE("singlepath dynamics") {
  const auto mdp = std::get<TabularMdp>(build_env("singlepath"));
  CHECK(mdp.n_states == 6);
  CHECK(mdp.n_actions == 2);
  CHECK(mdp.horizon == 5);
  CHECK(mdp.gamma == 1.0);
  for (int s = 0; s < 5; ++s) {
    CHECK(mdp.p(s, 1, s) == 0.5);
    CHECK(mdp.p(s, 1, s + 1) == 0.5);
    CHECK(mdp.p(s, 0, s + 1) == 1.0);
    CHECK(mdp.r(s, 0) == 1.0);
    CHECK(mdp.r(s, 1) == 0.0);
  }
  CHECK(mdp.is_terminal(5));
  check_normalized(mdp);
}

TEST_CASE("gridworld layout") {
  const auto mdp = std::get<TabularMdp>(build_env("gridworld"));
  using namespace gridworld;
  CHECK(mdp.n_states == 16);
  CHECK(mdp.n_actions == 4);
  CHECK(mdp.horizon == 100);
  CHECK(mdp.d0[state(0, 0)] == 1.0);
  CHECK(mdp.is_terminal(state(3, 3)));
  CHECK(cell_reward(3, 3) == 100.0);
  CHECK(cell_reward(1, 1) == -10.0);
  CHECK(cell_reward(1, 3) == 1.0);
  CHECK(cell_reward(2, 0) == -1.0);
  // Entering the goal from (3,2) moving down pays 100.
  CHECK(mdp.p(state(3, 2), kDown, state(3, 3)) == 1.0);
  CHECK(mdp.r(state(3, 2), kDown) == 100.0);
  // Wall bump stays put.
  CHECK(mdp.p(state(0, 0), kUp, state(0, 0)) == 1.0);
  CHECK(mdp.p(state(0, 0), kLeft, state(0, 0)) == 1.0);
  CHECK(mdp.is_deterministic());
  check_normalized(mdp);
}

TEST_CASE("lds control matrix and validation") {
  const auto env = std::get<LdsEnv>(build_env("lds"));
  Eigen::Matrix<double, 4, 2> b;
  b << 0.5, 0, 0, 0.5, 1, 0, 0, 1;
  CHECK(env.control == b);
  CHECK(env.transition == Eigen::Matrix4d::Identity());
  CHECK(env.horizon == 20);
  CHECK(env.noise_std == Eigen::Vector4d::Ones());
}

TEST_CASE("build_env errors") {
  CHECK_THROWS_AS(build_env("cartpole"), ConfigError);
  CHECK_THROWS_AS(build_env(nlohmann::json{{"env", "singlepath"}, {"overrides", {{"gamma", 1.5}}}}), ConfigError);
  CHECK_THROWS_AS(build_env(nlohmann::json{{"env", "gridworld"}, {"overrides", {{"gamma", -0.1}}}}), ConfigError);
  CHECK_THROWS_AS(build_env(nlohmann::json{{"env", "gridworld"}, {"overrides", {{"wind", 1}}}}), ConfigError);
  CHECK_THROWS_AS(build_env(nlohmann::json{{"env", "lds"}, {"overrides", {{"horizon", 0}}}}), ConfigError);
  CHECK_NOTHROW(build_env(nlohmann::json{{"env", "bandit1d"}}));
}

TEST_CASE("trajectory_return") {
  TabularTrajectory tr;
  tr.rewards = {1, 1, 1, 1, 1};
  CHECK(trajectory_return(tr, 1.0) == 5.0);
  tr.rewards = {1, 1};
  CHECK(trajectory_return(tr, 0.0) == 1.0);
  CHECK(trajectory_return(tr, 0.5) == 1.5);
}

TEST_CASE("sampling") {
  const auto mdp = std::get<TabularMdp>(build_env("singlepath"));

  SUBCASE("always a0 walks the chain") {
    const auto pi = constant_policy(6, 1.0);
    for (std::uint64_t seed : {1u, 2u, 99u}) {
      Rng rng(seed);
      const auto tr = sample_trajectory(mdp, pi, rng);
      CHECK(tr.states == std::vector<int>{0, 1, 2, 3, 4});
      CHECK(tr.rewards == std::vector<double>{1, 1, 1, 1, 1});
      CHECK(tr.active_steps == 5);
    }
  }

  SUBCASE("same seed, same trajectory") {
    const auto pi = constant_policy(6, 0.3);
    Rng a(7), b(7);
    for (int i = 0; i < 50; ++i) {
      const auto x = sample_trajectory(mdp, pi, a);
      const auto y = sample_trajectory(mdp, pi, b);
      CHECK(x.states == y.states);
      CHECK(x.actions == y.actions);
      CHECK(x.rewards == y.rewards);
    }
    const auto lds = std::get<LdsEnv>(build_env("lds"));
    const auto gp = std::get<GaussianLinearPolicy>(load_policy(std::string(OPELAB_CONFIG_DIR) + "/policies/lds_pi_b.json"));
    Rng c(3), d(3);
    const auto u = sample_trajectory(lds, gp, c);
    const auto w = sample_trajectory(lds, gp, d);
    for (std::size_t t = 0; t < u.length(); ++t) {
      CHECK(u.states[t] == w.states[t]);
      CHECK(u.actions[t] == w.actions[t]);
      CHECK(u.rewards[t] == w.rewards[t]);
    }
  }

  SUBCASE("lds without noise or control stays put") {
    const auto lds = std::get<LdsEnv>(build_env(
        nlohmann::json{{"env", "lds"}, {"overrides", {{"noise_std", {0, 0, 0, 0}}}}}));
    const GaussianLinearPolicy zero(Eigen::MatrixXd::Zero(2, 15), Eigen::VectorXd::Constant(2, -std::numeric_limits<double>::infinity()), 4, 2);
    Rng rng(5);
    const auto tr = sample_trajectory(lds, zero, rng);
    REQUIRE(tr.length() == 20);
    for (const auto& s : tr.states) CHECK(s == lds.initial_state);
  }
}

TEST_CASE("gridworld absorption pads with zero reward") {
  const auto mdp = std::get<TabularMdp>(build_env("gridworld"));
  const auto pi = checked_in("gridworld_pi_e.json");
  const int goal = gridworld::state(3, 3);
  Rng rng(17);
  std::size_t absorbed = 0;
  for (int i = 0; i < 500; ++i) {
    const auto tr = sample_trajectory(mdp, pi, rng);
    REQUIRE(tr.length() == 100);
    REQUIRE(tr.states.size() == 100);
    REQUIRE(tr.actions.size() == 100);
    for (std::size_t t = 0; t < tr.length(); ++t) {
      if (tr.states[t] != goal) continue;
      ++absorbed;
      CHECK(tr.active_steps == t);
      for (std::size_t k = t; k < tr.length(); ++k) {
        CHECK(tr.states[k] == goal);
        CHECK(tr.rewards[k] == 0.0);
      }
      break;
    }
  }
  CHECK(absorbed > 0);
}

TEST_CASE("true_value_dp") {
  const auto mdp = std::get<TabularMdp>(build_env("singlepath"));
  CHECK(true_value_dp(mdp, constant_policy(6, 0.4)) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(true_value_dp(mdp, constant_policy(6, 0.6)) == doctest::Approx(3.0).epsilon(1e-14));

  // Independent enumeration over all action/transition sequences.
  auto no_terminal = mdp;
  std::fill(no_terminal.terminal.begin(), no_terminal.terminal.end(), 0);
  CHECK(oracle::value_by_enumeration(no_terminal, constant_policy(6, 0.4)) == doctest::Approx(2.0).epsilon(1e-14));

  const auto grid = std::get<TabularMdp>(build_env("gridworld"));
  const auto pe = checked_in("gridworld_pi_e.json");
  const auto pb = checked_in("gridworld_pi_b.json");
  // Golden constants for the checked-in pair.
  CHECK(true_value_dp(grid, pe) == doctest::Approx(81.873867650473883).epsilon(1e-12));
  CHECK(true_value_dp(grid, pb) == doctest::Approx(73.983425138302053).epsilon(1e-12));
  CHECK(true_value_dp(grid, pe) == doctest::Approx(value_forward(grid, pe)).epsilon(1e-12));

  Rng rng(8);
  for (int k = 0; k < 20; ++k) {
    const auto m = oracle::random_mdp(3, 2, 3, rng, false);
    const auto p = oracle::random_policy(3, 2, rng);
    CHECK(true_value_dp(m, p) == doctest::Approx(oracle::value_by_enumeration(m, p)).epsilon(1e-12));
  }
}

TEST_CASE("Monte Carlo agrees with DP") {
  SUBCASE("singlepath") {
    const auto mdp = std::get<TabularMdp>(build_env("singlepath"));
    const auto pi = constant_policy(6, 0.4);
    Rng rng(21);
    const auto mc = true_value_mc(mdp, pi, 1.0, 1000000, rng);
    CHECK(std::abs(mc.mean - 2.0) <= 4.0 * mc.standard_error);
  }
  SUBCASE("gridworld") {
    const auto mdp = std::get<TabularMdp>(build_env("gridworld"));
    const auto pi = checked_in("gridworld_pi_e.json");
    Rng rng(22);
    const auto mc = true_value_mc(mdp, pi, 1.0, 100000, rng);
    CHECK(std::abs(mc.mean - true_value_dp(mdp, pi)) <= 4.0 * mc.standard_error);
  }
  SUBCASE("single rollout") {
    const auto mdp = std::get<TabularMdp>(build_env("singlepath"));
    const auto pi = constant_policy(6, 0.4);
    Rng a(4), b(4);
    const auto mc = true_value_mc(mdp, pi, 1.0, 1, a);
    CHECK(mc.mean == trajectory_return(sample_trajectory(mdp, pi, b), 1.0));
    CHECK(std::isnan(mc.standard_error));
  }
  SUBCASE("deterministic lds") {
    auto lds = std::get<LdsEnv>(build_env(nlohmann::json{{"env", "lds"}, {"overrides", {{"noise_std", {0, 0, 0, 0}}}}}));
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(2, 15);
    w(0, 0) = 0.3;
    w(1, 0) = 0.2;
    const GaussianLinearPolicy pi(w, Eigen::VectorXd::Constant(2, -std::numeric_limits<double>::infinity()), 4, 2);
    Rng r1(1);
    const auto mc = true_value_mc(lds, pi, 1.0, 50, r1);
    // A = I, so position moves by B a = a / 2 per step.
    double exact = 0.0;
    for (int k = 1; k <= 20; ++k) {
      const double x = 0.15 * k, y = 0.1 * k;
      exact += -std::hypot(x - 5.0, y - 5.0);
    }
    CHECK(mc.mean == doctest::Approx(exact).epsilon(1e-12));
    CHECK(mc.standard_error == 0.0);
  }
  CHECK_THROWS_AS(
      [] {
        Rng r(1);
        true_value_mc(std::get<TabularMdp>(build_env("singlepath")), TabularPolicy::uniform(6, 2), 1.0, 0, r);
      }(),
      ConfigError);
}

TEST_CASE("state occupancy normalizes") {
  const auto mdp = std::get<TabularMdp>(build_env("gridworld"));
  const auto occ = state_occupancy(mdp, checked_in("gridworld_pi_b.json"));
  double total = 0.0;
  for (double x : occ) total += x;
  CHECK(std::abs(total - 1.0) <= 1e-12);
  CHECK(occ[gridworld::state(3, 3)] == 0.0);
}

TEST_CASE("dataset digest is sensitive to content") {
  const auto mdp = std::get<TabularMdp>(build_env("singlepath"));
  Rng a(1), b(1), c(2);
  const auto d1 = sample_dataset(mdp, constant_policy(6, 0.5), 20, a);
  const auto d2 = sample_dataset(mdp, constant_policy(6, 0.5), 20, b);
  const auto d3 = sample_dataset(mdp, constant_policy(6, 0.5), 20, c);
  CHECK(dataset_digest(d1) == dataset_digest(d2));
  CHECK(dataset_digest(d1) != dataset_digest(d3));
}
