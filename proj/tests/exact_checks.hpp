// Exact-math checks shared by the unit tests and the acceptance binary.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "opelab/behavior.hpp"
#include "opelab/estimators.hpp"
#include "oracles.hpp"

namespace exact {

using namespace opelab;

// Deterministic 3-state, 2-action, L=3 MDP; the dataset holds every
// pi_b-possible trajectory with random multiplicity. Returns |RIS(L-1) - v|.
inline double full_history_error(std::uint64_t seed) {
  Rng rng(seed);
  const auto mdp = oracle::random_mdp(3, 2, 3, rng, true);
  const auto pb = oracle::random_policy(3, 2, rng);
  const auto pe = oracle::random_policy(3, 2, rng);
  std::vector<TabularTrajectory> data;
  for (const auto& w : oracle::enumerate(mdp, pb))
    for (std::uint64_t k = 0, n = 1 + rng() % 3; k < n; ++k) data.push_back(w.traj);
  std::shuffle(data.begin(), data.end(), rng);
  const double est = ris_estimate(data, pe, 2, mdp.gamma, IsVariant::Ordinary).value;
  return std::abs(est - true_value_dp(mdp, pe));
}

// Sample-average IS against the trajectory-count form, for the true behavior
// policy and every RIS(n) denominator. Returns the largest discrepancy.
inline double forms_identity_error(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t S = 2 + rng() % 3, A = 2 + rng() % 2, L = 1 + rng() % 4, m = 1 + rng() % 40;
  auto mdp = oracle::random_mdp(S, A, L, rng, false);
  mdp.gamma = 0.5 + 0.5 * uniform01(rng);
  const auto pb = oracle::random_policy(S, A, rng);
  const auto pe = oracle::random_policy(S, A, rng);
  const auto data = sample_dataset(mdp, pb, m, rng);

  auto check = [&](const TabularActionModel& denom) {
    const double sample_avg = is_estimate(data, pe, denom, mdp.gamma, IsVariant::Ordinary).value;
    std::map<std::pair<std::vector<int>, std::vector<int>>, std::pair<std::size_t, const TabularTrajectory*>> distinct;
    for (const auto& tr : data) {
      auto& slot = distinct[{tr.states, tr.actions}];
      ++slot.first;
      slot.second = &tr;
    }
    double count_form = 0.0;
    for (const auto& [key, entry] : distinct) {
      const auto& h = *entry.second;
      double we = 1.0, wd = 1.0;
      for (std::size_t t = 0; t < h.length(); ++t) {
        we *= pe.probability(h.states[t], h.actions[t]);
        wd *= denom.action_probability(h, t);
      }
      count_form += static_cast<double>(entry.first) / static_cast<double>(m) * (we / wd) * oracle::ret(h, mdp.gamma);
    }
    return std::abs(sample_avg - count_form);
  };
  double worst = check(pb);
  for (std::size_t n = 0; n < L; ++n) worst = std::max(worst, check(fit_count_policy(data, n, 0.0, A)));
  return worst;
}

struct Expectation {
  std::string name;
  double library = 0.0;
  double oracle = 0.0;
};

// All ordered datasets of size 2 on a random 3-state, 2-action, L=2 MDP,
// weighted by their probability under pi_b.
inline std::vector<Expectation> enumerated_expectations(std::uint64_t seed) {
  Rng rng(seed);
  auto mdp = oracle::random_mdp(3, 2, 2, rng, false);
  mdp.gamma = 0.9;
  const auto pb = oracle::random_policy(3, 2, rng, 0.1);
  const auto pe = oracle::random_policy(3, 2, rng, 0.1);
  const auto trajs = oracle::enumerate(mdp, pb);

  std::vector<Expectation> out;
  auto add = [&](std::string name, auto library_fn, auto oracle_fn) {
    Expectation e{std::move(name), 0.0, 0.0};
    for (const auto& a : trajs)
      for (const auto& b : trajs) {
        const std::vector<TabularTrajectory> d{a.traj, b.traj};
        const double p = a.prob * b.prob;
        e.library += p * library_fn(d);
        e.oracle += p * oracle_fn(d);
      }
    out.push_back(e);
  };
  const double g = mdp.gamma;
  const std::size_t A = 2, L = 2;
  auto model_of = [&](const std::vector<TabularTrajectory>& d) {
    return fit_model_counts(std::span<const TabularTrajectory>(d.data(), d.size() / 2), 3, 2);
  };

  add("IS-OIS", [&](const auto& d) { return is_estimate(d, pe, pb, g, IsVariant::Ordinary).value; },
      [&](const auto& d) { return oracle::is(d, oracle::ratios(d, pe, pb, -1), g); });
  add("WIS-OIS", [&](const auto& d) { return is_estimate(d, pe, pb, g, IsVariant::Weighted).value; },
      [&](const auto& d) { return oracle::wis(d, oracle::ratios(d, pe, pb, -1), g); });
  add("PDIS-OIS", [&](const auto& d) { return is_estimate(d, pe, pb, g, IsVariant::PerDecision).value; },
      [&](const auto& d) { return oracle::pdis(d, oracle::ratios(d, pe, pb, -1), g); });
  for (int n : {0, 1}) {
    const std::string tag = "-RIS(" + std::to_string(n) + ")";
    const auto h = static_cast<std::size_t>(n);
    add("IS" + tag, [&](const auto& d) { return ris_estimate(d, pe, h, g, IsVariant::Ordinary).value; },
        [&](const auto& d) { return oracle::is(d, oracle::ratios(d, pe, pb, n), g); });
    add("WIS" + tag, [&](const auto& d) { return ris_estimate(d, pe, h, g, IsVariant::Weighted).value; },
        [&](const auto& d) { return oracle::wis(d, oracle::ratios(d, pe, pb, n), g); });
    add("PDIS" + tag, [&](const auto& d) { return ris_estimate(d, pe, h, g, IsVariant::PerDecision).value; },
        [&](const auto& d) { return oracle::pdis(d, oracle::ratios(d, pe, pb, n), g); });
    for (bool weighted : {false, true})
      add((weighted ? "WDR" : "DR") + tag,
          [&](const auto& d) { return dr_estimate(d, pe, fit_count_policy(d, h, 0.0, A), model_of(d), g, weighted).value; },
          [&](const auto& d) {
            return oracle::dr(d, oracle::ratios(d, pe, pb, n), oracle::model_values(d, pe, 3, A, L, g), A, g, weighted);
          });
  }
  for (bool weighted : {false, true})
    add(weighted ? "WDR-OIS" : "DR-OIS", [&](const auto& d) { return dr_estimate(d, pe, pb, model_of(d), g, weighted).value; },
        [&](const auto& d) {
          return oracle::dr(d, oracle::ratios(d, pe, pb, -1), oracle::model_values(d, pe, 3, A, L, g), A, g, weighted);
        });
  add("REG", [&](const auto& d) { return reg_estimate(d, pe, mdp, g).value; },
      [&](const auto& d) { return oracle::reg(d, mdp, pe); });
  // Unbiasedness of OIS gives one more anchor.
  out.push_back({"v(pi_e)", out.front().library, true_value_dp(mdp, pe)});
  return out;
}

}  // namespace exact
