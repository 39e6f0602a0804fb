// Independent reference implementations used by the unit and acceptance tests.
// Deliberately naive: nothing here calls into the estimator code under test.
#pragma once

#include <cmath>
#include <map>
#include <utility>
#include <vector>

#include "opelab/envs.hpp"
#include "opelab/policies.hpp"

namespace oracle {

using opelab::Rng;
using opelab::TabularMdp;
using opelab::TabularPolicy;
using opelab::TabularTrajectory;

// Random MDP without absorbing states. `deterministic` makes d0 and P point masses.
inline TabularMdp random_mdp(std::size_t S, std::size_t A, std::size_t L, Rng& rng, bool deterministic) {
  TabularMdp mdp(S, A, L, 1.0);
  auto fill_row = [&](double* row) {
    if (deterministic) {
      row[rng() % S] = 1.0;
      return;
    }
    double total = 0.0;
    for (std::size_t n = 0; n < S; ++n) total += row[n] = 0.2 + opelab::uniform01(rng);
    for (std::size_t n = 0; n < S; ++n) row[n] /= total;
  };
  fill_row(mdp.d0.data());
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t a = 0; a < A; ++a) {
      fill_row(mdp.transitions.data() + (s * A + a) * S);
      mdp.rewards[s * A + a] = 2.0 * opelab::uniform01(rng) - 1.0;
    }
  // Renormalizing can leave rows a few ulps off; snap the last entry.
  auto snap = [&](double* row) {
    double partial = 0.0;
    for (std::size_t n = 0; n + 1 < S; ++n) partial += row[n];
    row[S - 1] = 1.0 - partial;
  };
  if (!deterministic) {
    snap(mdp.d0.data());
    for (std::size_t sa = 0; sa < S * A; ++sa) snap(mdp.transitions.data() + sa * S);
  }
  return mdp;
}

inline TabularPolicy random_policy(std::size_t S, std::size_t A, Rng& rng, double floor = 0.05) {
  std::vector<double> p(S * A);
  for (std::size_t s = 0; s < S; ++s) {
    double total = 0.0;
    for (std::size_t a = 0; a < A; ++a) total += p[s * A + a] = floor + opelab::uniform01(rng);
    double partial = 0.0;
    for (std::size_t a = 0; a + 1 < A; ++a) partial += p[s * A + a] /= total;
    p[s * A + A - 1] = 1.0 - partial;
  }
  return TabularPolicy(S, A, std::move(p));
}

struct Weighted {
  TabularTrajectory traj;
  double prob;
};

// Every trajectory with positive probability, for MDPs without absorbing states.
inline std::vector<Weighted> enumerate(const TabularMdp& mdp, const TabularPolicy& pi) {
  std::vector<Weighted> out;
  TabularTrajectory cur;
  cur.states.resize(mdp.horizon);
  cur.actions.resize(mdp.horizon);
  cur.rewards.resize(mdp.horizon);
  cur.active_steps = mdp.horizon;
  auto rec = [&](auto&& self, int s, std::size_t t, double p) -> void {
    if (t == mdp.horizon) {
      out.push_back({cur, p});
      return;
    }
    for (std::size_t a = 0; a < mdp.n_actions; ++a) {
      const double pa = pi.probability(s, static_cast<int>(a));
      if (pa == 0.0) continue;
      cur.states[t] = s;
      cur.actions[t] = static_cast<int>(a);
      cur.rewards[t] = mdp.r(s, static_cast<int>(a));
      if (t + 1 == mdp.horizon) {
        self(self, s, t + 1, p * pa);
        continue;
      }
      for (std::size_t n = 0; n < mdp.n_states; ++n) {
        const double pn = mdp.p(s, static_cast<int>(a), static_cast<int>(n));
        if (pn > 0.0) self(self, static_cast<int>(n), t + 1, p * pa * pn);
      }
    }
  };
  for (std::size_t s = 0; s < mdp.n_states; ++s)
    if (mdp.d0[s] > 0.0) rec(rec, static_cast<int>(s), 0, mdp.d0[s]);
  return out;
}

inline double value_by_enumeration(const TabularMdp& mdp, const TabularPolicy& pi) {
  double v = 0.0;
  for (const auto& w : enumerate(mdp, pi)) {
    double g = 0.0, d = 1.0;
    for (double r : w.traj.rewards) g += d * r, d *= mdp.gamma;
    v += w.prob * g;
  }
  return v;
}

inline double ret(const TabularTrajectory& tr, double gamma) {
  double g = 0.0, d = 1.0;
  for (double r : tr.rewards) g += d * r, d *= gamma;
  return g;
}

// History segment ending at t, as a plain vector, truncated at the episode start.
inline std::vector<int> segment(const TabularTrajectory& tr, std::size_t t, std::size_t n) {
  std::vector<int> key;
  for (std::size_t k = (t >= n ? t - n : 0); k < t; ++k) {
    key.push_back(tr.states[k]);
    key.push_back(tr.actions[k]);
  }
  key.push_back(tr.states[t]);
  return key;
}

// Maximum-likelihood count policy: scan the whole dataset for every query.
inline double count_probability(const std::vector<TabularTrajectory>& data, std::size_t n,
                                const std::vector<int>& key, int action) {
  double c = 0.0, ca = 0.0;
  for (const auto& tr : data)
    for (std::size_t t = 0; t < tr.length(); ++t)
      if (segment(tr, t, n) == key) {
        c += 1.0;
        ca += tr.actions[t] == action;
      }
  return ca / c;
}

// Per-step ratios; history < 0 means the true behavior policy.
inline std::vector<std::vector<double>> ratios(const std::vector<TabularTrajectory>& data, const TabularPolicy& pe,
                                               const TabularPolicy& pb, int history) {
  std::vector<std::vector<double>> out;
  for (const auto& tr : data) {
    std::vector<double> r;
    for (std::size_t t = 0; t < tr.length(); ++t) {
      const double num = pe.probability(tr.states[t], tr.actions[t]);
      const double den = history < 0 ? pb.probability(tr.states[t], tr.actions[t])
                                     : count_probability(data, static_cast<std::size_t>(history),
                                                         segment(tr, t, static_cast<std::size_t>(history)),
                                                         tr.actions[t]);
      r.push_back(num / den);
    }
    out.push_back(r);
  }
  return out;
}

inline double prod(const std::vector<double>& v, std::size_t upto) {
  double p = 1.0;
  for (std::size_t t = 0; t < upto; ++t) p *= v[t];
  return p;
}

inline double is(const std::vector<TabularTrajectory>& d, const std::vector<std::vector<double>>& rho, double gamma) {
  double s = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) s += prod(rho[i], rho[i].size()) * ret(d[i], gamma);
  return s / static_cast<double>(d.size());
}

inline double wis(const std::vector<TabularTrajectory>& d, const std::vector<std::vector<double>>& rho, double gamma) {
  double s = 0.0, w = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    s += prod(rho[i], rho[i].size()) * ret(d[i], gamma);
    w += prod(rho[i], rho[i].size());
  }
  return s / w;
}

inline double pdis(const std::vector<TabularTrajectory>& d, const std::vector<std::vector<double>>& rho, double gamma) {
  double s = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t t = 0; t < d[i].length(); ++t) s += std::pow(gamma, static_cast<double>(t)) * prod(rho[i], t + 1) * d[i].rewards[t];
  return s / static_cast<double>(d.size());
}

// Count model from the first half of the data, then time-indexed q and v under pi_e.
struct ModelQ {
  std::vector<std::vector<double>> q, v;  // [t][s*A+a], [t][s]
};

inline ModelQ model_values(const std::vector<TabularTrajectory>& data, const TabularPolicy& pe, std::size_t S,
                           std::size_t A, std::size_t L, double gamma) {
  const std::size_t half = data.size() / 2;
  std::map<std::pair<int, int>, std::map<int, double>> trans;
  std::map<std::pair<int, int>, std::pair<double, double>> rew;  // sum, count
  for (std::size_t i = 0; i < half; ++i)
    for (std::size_t t = 0; t < data[i].length(); ++t) {
      const auto sa = std::make_pair(data[i].states[t], data[i].actions[t]);
      rew[sa].first += data[i].rewards[t];
      rew[sa].second += 1.0;
      if (t + 1 < data[i].length()) trans[sa][data[i].states[t + 1]] += 1.0;
    }
  ModelQ m;
  m.q.assign(L, std::vector<double>(S * A, 0.0));
  m.v.assign(L, std::vector<double>(S, 0.0));
  for (std::size_t k = L; k-- > 0;) {
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t a = 0; a < A; ++a) {
        const auto sa = std::make_pair(static_cast<int>(s), static_cast<int>(a));
        double r = 0.0, cont = 0.0;
        if (rew.count(sa)) r = rew[sa].first / rew[sa].second;
        const double vnext_self = k + 1 < L ? m.v[k + 1][s] : 0.0;
        if (trans.count(sa)) {
          double total = 0.0;
          for (auto& [n, c] : trans[sa]) total += c;
          for (auto& [n, c] : trans[sa]) cont += c / total * (k + 1 < L ? m.v[k + 1][static_cast<std::size_t>(n)] : 0.0);
        } else {
          cont = vnext_self;
        }
        m.q[k][s * A + a] = r + gamma * cont;
      }
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t a = 0; a < A; ++a)
        m.v[k][s] += pe.probability(static_cast<int>(s), static_cast<int>(a)) * m.q[k][s * A + a];
  }
  return m;
}

inline double dr(const std::vector<TabularTrajectory>& d, const std::vector<std::vector<double>>& rho,
                 const ModelQ& mq, std::size_t A, double gamma, bool weighted) {
  const std::size_t m = d.size(), L = d.front().length();
  double total = 0.0;
  for (std::size_t t = 0; t < L; ++t) {
    double sum_t = 0.0, sum_prev = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      sum_t += prod(rho[j], t + 1);
      sum_prev += prod(rho[j], t);
    }
    for (std::size_t i = 0; i < m; ++i) {
      const double w = weighted ? prod(rho[i], t + 1) / sum_t : prod(rho[i], t + 1) / static_cast<double>(m);
      const double wp = weighted ? (t == 0 ? 1.0 / static_cast<double>(m) : prod(rho[i], t) / sum_prev)
                                 : prod(rho[i], t) / static_cast<double>(m);
      const auto s = static_cast<std::size_t>(d[i].states[t]);
      const auto a = static_cast<std::size_t>(d[i].actions[t]);
      total += std::pow(gamma, static_cast<double>(t)) *
               (w * (d[i].rewards[t] - mq.q[t][s * A + a]) + wp * mq.v[t][s]);
    }
  }
  return total;
}

// Sum over pi_e-possible trajectories of Pr(h | pi_e) times the mean observed return (0 if unseen).
inline double reg(const std::vector<TabularTrajectory>& d, const TabularMdp& mdp, const TabularPolicy& pe) {
  double v = 0.0;
  for (const auto& w : enumerate(mdp, pe)) {
    double sum = 0.0, count = 0.0;
    for (const auto& tr : d)
      if (tr.states == w.traj.states && tr.actions == w.traj.actions) {
        sum += ret(tr, mdp.gamma);
        count += 1.0;
      }
    if (count > 0.0) v += w.prob * sum / count;
  }
  return v;
}

}  // namespace oracle
