#include "opelab/estimators.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <unordered_map>

namespace opelab {

namespace {

bool out_of_range(double w) { return w != 0.0 && !(w >= kWeightFloor && w <= kWeightCeiling); }

void check_traces(std::span<const RatioTrace> traces) {
  if (traces.empty()) throw EstimationError("estimators need a non-empty dataset");
  const std::size_t L = traces.front().ratios.size();
  for (const auto& tr : traces)
    if (tr.ratios.size() != L || tr.rewards.size() != L)
      throw EstimationError("all trajectories must share one horizon");
}

}  // namespace

Estimate importance_sampling(std::span<const RatioTrace> traces, double gamma, IsVariant variant) {
  check_traces(traces);
  const double m = static_cast<double>(traces.size());
  Estimate est;
  est.weights.reserve(traces.size());
  double total = 0.0, weight_sum = 0.0;
  for (const auto& tr : traces) {
    double rho = 1.0, discount = 1.0, g = 0.0, pd = 0.0;
    bool flagged = false;
    for (std::size_t t = 0; t < tr.ratios.size(); ++t) {
      rho *= tr.ratios[t];
      flagged = flagged || out_of_range(rho);
      g += discount * tr.rewards[t];
      pd += discount * rho * tr.rewards[t];
      discount *= gamma;
    }
    if (flagged) est.flags |= kWeightOutOfRange;
    est.weights.push_back(rho);
    weight_sum += rho;
    total += variant == IsVariant::PerDecision ? pd : rho * g;
  }
  if (variant == IsVariant::Weighted) {
    if (weight_sum == 0.0) throw EstimationError("weighted importance sampling: all weights are zero");
    est.value = total / weight_sum;
  } else {
    est.value = total / m;
  }
  if (!std::isfinite(est.value)) est.flags |= kNonFinite;
  return est;
}

Estimate doubly_robust(std::span<const RatioTrace> traces, std::span<const ModelTrace> model, double gamma,
                       bool weighted) {
  check_traces(traces);
  if (model.size() != traces.size()) throw EstimationError("model trace count differs from dataset size");
  const std::size_t m = traces.size(), L = traces.front().ratios.size();
  const double md = static_cast<double>(m);
  Estimate est;
  std::vector<double> rho(m, 1.0), prev(m, 1.0 / md), cur(m);
  double value = 0.0, discount = 1.0;
  for (std::size_t t = 0; t < L; ++t) {
    double rho_sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      rho[i] *= traces[i].ratios[t];
      rho_sum += rho[i];
    }
    if (weighted && rho_sum == 0.0)
      throw EstimationError("weighted doubly robust: weights sum to zero at t=" + std::to_string(t));
    for (std::size_t i = 0; i < m; ++i) {
      cur[i] = weighted ? rho[i] / rho_sum : rho[i] / md;
      value += discount * (cur[i] * (traces[i].rewards[t] - model[i].q[t]) + prev[i] * model[i].v[t]);
    }
    std::swap(prev, cur);
    discount *= gamma;
  }
  est.value = value;
  est.weights = rho;
  for (double w : rho)
    if (out_of_range(w)) est.flags |= kWeightOutOfRange;
  if (!std::isfinite(est.value)) est.flags |= kNonFinite;
  return est;
}

RatioTrace ratio_trace(const TabularTrajectory& traj, const TabularPolicy& pi_e, const TabularActionModel& denom) {
  RatioTrace out;
  const std::size_t L = traj.length();
  out.ratios.assign(L, 1.0);
  out.rewards = traj.rewards;
  for (std::size_t t = 0; t < traj.active_steps; ++t) {
    const double d = denom.action_probability(traj, t);
    if (!(d > 0.0)) {
      std::ostringstream msg;
      msg << "zero denominator probability at t=" << t << ", state " << traj.states[t] << ", action "
          << traj.actions[t];
      throw EstimationError(msg.str());
    }
    out.ratios[t] = pi_e.probability(traj.states[t], traj.actions[t]) / d;
  }
  return out;
}

std::vector<RatioTrace> ratio_traces(std::span<const TabularTrajectory> data, const TabularPolicy& pi_e,
                                     const TabularActionModel& denom) {
  std::vector<RatioTrace> out;
  out.reserve(data.size());
  for (const auto& tr : data) out.push_back(ratio_trace(tr, pi_e, denom));
  return out;
}

double trajectory_weight(const TabularPolicy& pi_e, const TabularActionModel& denom, const TabularTrajectory& traj) {
  double w = 1.0;
  for (double r : ratio_trace(traj, pi_e, denom).ratios) w *= r;
  return w;
}

Estimate is_estimate(std::span<const TabularTrajectory> data, const TabularPolicy& pi_e,
                     const TabularActionModel& denom, double gamma, IsVariant variant) {
  if (data.empty()) throw EstimationError("estimators need a non-empty dataset");
  const auto traces = ratio_traces(data, pi_e, denom);
  return importance_sampling(traces, gamma, variant);
}

Estimate ris_estimate(std::span<const TabularTrajectory> data, const TabularPolicy& pi_e, std::size_t history,
                      double gamma, IsVariant variant) {
  const auto fitted = fit_count_policy(data, history, 0.0, pi_e.n_actions());
  return is_estimate(data, pi_e, fitted, gamma, variant);
}

ModelValues evaluate_on_model(const EstimatedModel& model, const TabularPolicy& pi_e, std::size_t horizon,
                              double gamma) {
  const std::size_t S = model.n_states, A = model.n_actions;
  ModelValues out;
  out.n_states = S;
  out.n_actions = A;
  out.q.assign(horizon, std::vector<double>(S * A, 0.0));
  out.v.assign(horizon, std::vector<double>(S, 0.0));
  std::vector<double> next_v(S, 0.0);
  for (std::size_t k = horizon; k-- > 0;) {
    auto& q = out.q[k];
    auto& v = out.v[k];
    for (std::size_t s = 0; s < S; ++s) {
      double vs = 0.0;
      for (std::size_t a = 0; a < A; ++a) {
        const double* row = model.transitions.data() + (s * A + a) * S;
        double cont = 0.0;
        for (std::size_t n = 0; n < S; ++n) cont += row[n] * next_v[n];
        q[s * A + a] = model.rewards[s * A + a] + gamma * cont;
        vs += pi_e.probability(static_cast<int>(s), static_cast<int>(a)) * q[s * A + a];
      }
      v[s] = vs;
    }
    next_v = v;
  }
  return out;
}

std::vector<ModelTrace> model_traces(std::span<const TabularTrajectory> data, const ModelValues& values) {
  std::vector<ModelTrace> out;
  out.reserve(data.size());
  const std::size_t A = values.n_actions;
  for (const auto& tr : data) {
    ModelTrace mt;
    const std::size_t L = tr.length();
    if (L > values.q.size()) throw EstimationError("trajectory longer than the model horizon");
    mt.q.assign(L, 0.0);
    mt.v.assign(L, 0.0);
    // Padded steps keep q = v = 0: the absorbing state earns nothing.
    for (std::size_t t = 0; t < tr.active_steps; ++t) {
      const auto s = static_cast<std::size_t>(tr.states[t]);
      mt.q[t] = values.q[t][s * A + static_cast<std::size_t>(tr.actions[t])];
      mt.v[t] = values.v[t][s];
    }
    out.push_back(std::move(mt));
  }
  return out;
}

Estimate dr_estimate(std::span<const TabularTrajectory> data, const TabularPolicy& pi_e,
                     const TabularActionModel& denom, const EstimatedModel& model, double gamma, bool weighted) {
  if (data.empty()) throw EstimationError("estimators need a non-empty dataset");
  const auto traces = ratio_traces(data, pi_e, denom);
  const auto values = evaluate_on_model(model, pi_e, data.front().length(), gamma);
  const auto mtraces = model_traces(data, values);
  return doubly_robust(traces, mtraces, gamma, weighted);
}

namespace {

std::vector<int> trajectory_key(const TabularTrajectory& tr) {
  std::vector<int> key;
  key.reserve(2 * tr.active_steps + 1);
  for (std::size_t t = 0; t < tr.active_steps; ++t) {
    key.push_back(tr.states[t]);
    key.push_back(tr.actions[t]);
  }
  if (tr.active_steps < tr.length()) key.push_back(tr.states[tr.active_steps]);
  return key;
}

struct VectorHash {
  std::size_t operator()(const std::vector<int>& v) const {
    std::uint64_t h = 0x9ae16a3b2f90404fULL;
    for (int x : v) h = splitmix64(h ^ static_cast<std::uint32_t>(x));
    return static_cast<std::size_t>(h);
  }
};

}  // namespace

Estimate reg_estimate(std::span<const TabularTrajectory> data, const TabularPolicy& pi_e, const TabularMdp& mdp,
                      double gamma, const RegOptions& options) {
  if (data.empty()) throw EstimationError("estimators need a non-empty dataset");
  struct Stat {
    double sum = 0.0;
    std::size_t count = 0;
  };
  std::unordered_map<std::vector<int>, Stat, VectorHash> observed;
  for (const auto& tr : data) {
    auto& st = observed[trajectory_key(tr)];
    st.sum += trajectory_return(tr, gamma);
    st.count += 1;
  }

  Estimate est;
  std::size_t enumerated = 0;
  std::vector<int> key;
  const std::size_t L = mdp.horizon;
  std::function<void(int, std::size_t, double)> visit = [&](int s, std::size_t t, double prob) {
    if (t == L || mdp.is_terminal(s)) {
      if (t < L) key.push_back(s);
      if (++enumerated > options.max_trajectories)
        throw EstimationError("REG: more than " + std::to_string(options.max_trajectories) +
                              " trajectories have positive probability under the evaluation policy");
      const auto it = observed.find(key);
      if (it == observed.end()) {
        est.flags |= kUnobservedTrajectories;
        est.value += prob * options.unobserved_return;
      } else {
        est.value += prob * it->second.sum / static_cast<double>(it->second.count);
      }
      if (t < L) key.pop_back();
      return;
    }
    for (std::size_t a = 0; a < mdp.n_actions; ++a) {
      const double pa = pi_e.probability(s, static_cast<int>(a));
      if (pa == 0.0) continue;
      key.push_back(s);
      key.push_back(static_cast<int>(a));
      const auto row = mdp.transition_row(s, static_cast<int>(a));
      for (std::size_t n = 0; n < mdp.n_states; ++n)
        if (row[n] > 0.0) visit(static_cast<int>(n), t + 1, prob * pa * row[n]);
      key.pop_back();
      key.pop_back();
    }
  };
  for (std::size_t s = 0; s < mdp.n_states; ++s)
    if (mdp.d0[s] > 0.0) visit(static_cast<int>(s), 0, mdp.d0[s]);
  return est;
}

RatioTrace ratio_trace(const ContinuousTrajectory& traj, const GaussianLinearPolicy& pi_e,
                       const GaussianLinearPolicy& denom) {
  RatioTrace out;
  const std::size_t L = traj.length();
  out.ratios.assign(L, 1.0);
  out.rewards = traj.rewards;
  const bool shared_basis = pi_e.state_dim() == denom.state_dim() && pi_e.feature_order() == denom.feature_order();
  for (std::size_t t = 0; t < traj.active_steps; ++t) {
    double le, ld;
    if (shared_basis) {
      const Eigen::VectorXd phi = pi_e.features(traj.states[t]);
      le = pi_e.log_prob_from_features(phi, traj.actions[t]);
      ld = denom.log_prob_from_features(phi, traj.actions[t]);
    } else {
      le = pi_e.log_prob(traj.states[t], traj.actions[t]);
      ld = denom.log_prob(traj.states[t], traj.actions[t]);
    }
    if (ld == -std::numeric_limits<double>::infinity())
      throw EstimationError("zero denominator density at t=" + std::to_string(t));
    out.ratios[t] = std::exp(le - ld);
  }
  return out;
}

std::vector<RatioTrace> ratio_traces(std::span<const ContinuousTrajectory> data, const GaussianLinearPolicy& pi_e,
                                     const GaussianLinearPolicy& denom) {
  std::vector<RatioTrace> out;
  out.reserve(data.size());
  for (const auto& tr : data) out.push_back(ratio_trace(tr, pi_e, denom));
  return out;
}

Estimate is_estimate(std::span<const ContinuousTrajectory> data, const GaussianLinearPolicy& pi_e,
                     const GaussianLinearPolicy& denom, double gamma, IsVariant variant) {
  if (data.empty()) throw EstimationError("estimators need a non-empty dataset");
  const auto traces = ratio_traces(data, pi_e, denom);
  return importance_sampling(traces, gamma, variant);
}

Estimate ris_estimate(std::span<const ContinuousTrajectory> data, const GaussianLinearPolicy& pi_e, double gamma,
                      IsVariant variant, int feature_order) {
  const auto fit = fit_gaussian_ols(data, feature_order);
  return is_estimate(data, pi_e, fit.policy, gamma, variant);
}

}  // namespace opelab
