#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "opelab/behavior.hpp"
#include "opelab/envs.hpp"
#include "opelab/policies.hpp"

namespace opelab {

enum class IsVariant { Ordinary, Weighted, PerDecision };

enum EstimateFlag : unsigned {
  kWeightOutOfRange = 1u << 0,  // some weight product left [1e-300, 1e300]
  kUnobservedTrajectories = 1u << 1,  // REG fell back to its default for unseen trajectories
  kNonFinite = 1u << 2,
};

struct Estimate {
  double value = 0.0;
  std::vector<double> weights;  // full-trajectory weights, one per trajectory
  unsigned flags = 0;
  bool has(EstimateFlag f) const { return (flags & f) != 0; }
};

// Per-step ratios pi_e / denominator and rewards for one trajectory. Padded
// steps have ratio 1.
struct RatioTrace {
  std::vector<double> ratios;
  std::vector<double> rewards;
};

// q-hat(S_t, A_t) and v-hat(S_t) along one trajectory.
struct ModelTrace {
  std::vector<double> q;
  std::vector<double> v;
};

inline constexpr double kWeightFloor = 1e-300;
inline constexpr double kWeightCeiling = 1e300;

Estimate importance_sampling(std::span<const RatioTrace> traces, double gamma, IsVariant variant);
Estimate doubly_robust(std::span<const RatioTrace> traces, std::span<const ModelTrace> model, double gamma,
                       bool weighted);

// Tabular. Zero denominators raise EstimationError naming (t, segment, action).
RatioTrace ratio_trace(const TabularTrajectory& traj, const TabularPolicy& pi_e, const TabularActionModel& denom);
std::vector<RatioTrace> ratio_traces(std::span<const TabularTrajectory> data, const TabularPolicy& pi_e,
                                     const TabularActionModel& denom);
double trajectory_weight(const TabularPolicy& pi_e, const TabularActionModel& denom, const TabularTrajectory& traj);

Estimate is_estimate(std::span<const TabularTrajectory> data, const TabularPolicy& pi_e,
                     const TabularActionModel& denom, double gamma, IsVariant variant);
// Fits pi_D^(n) on `data` itself and importance samples with it.
Estimate ris_estimate(std::span<const TabularTrajectory> data, const TabularPolicy& pi_e, std::size_t history,
                      double gamma, IsVariant variant);

// Time-indexed action values of pi_e on an estimated model: q[t][s*A+a], v[t][s].
struct ModelValues {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  std::vector<std::vector<double>> q;
  std::vector<std::vector<double>> v;
};
ModelValues evaluate_on_model(const EstimatedModel& model, const TabularPolicy& pi_e, std::size_t horizon,
                              double gamma);
std::vector<ModelTrace> model_traces(std::span<const TabularTrajectory> data, const ModelValues& values);

Estimate dr_estimate(std::span<const TabularTrajectory> data, const TabularPolicy& pi_e,
                     const TabularActionModel& denom, const EstimatedModel& model, double gamma, bool weighted);

struct RegOptions {
  std::size_t max_trajectories = 1'000'000;
  double unobserved_return = 0.0;
};
Estimate reg_estimate(std::span<const TabularTrajectory> data, const TabularPolicy& pi_e, const TabularMdp& mdp,
                      double gamma, const RegOptions& options = {});

// Continuous actions.
RatioTrace ratio_trace(const ContinuousTrajectory& traj, const GaussianLinearPolicy& pi_e,
                       const GaussianLinearPolicy& denom);
std::vector<RatioTrace> ratio_traces(std::span<const ContinuousTrajectory> data, const GaussianLinearPolicy& pi_e,
                                     const GaussianLinearPolicy& denom);
Estimate is_estimate(std::span<const ContinuousTrajectory> data, const GaussianLinearPolicy& pi_e,
                     const GaussianLinearPolicy& denom, double gamma, IsVariant variant);
// OLS behavior fit on `data`, then importance sampling.
Estimate ris_estimate(std::span<const ContinuousTrajectory> data, const GaussianLinearPolicy& pi_e,
                      double gamma, IsVariant variant, int feature_order = 2);

}  // namespace opelab
