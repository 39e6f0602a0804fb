#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "opelab/envs.hpp"
#include "opelab/policies.hpp"

namespace opelab {

// (s_{t-n}, a_{t-n}, ..., s_{t-1}, a_{t-1}, s_t), cut short at the episode start.
struct SegmentKey {
  std::vector<int> items;
  bool operator==(const SegmentKey&) const = default;
  std::string to_string() const;
};

struct SegmentKeyHash {
  std::size_t operator()(const SegmentKey& key) const;
};

SegmentKey segment_key(const TabularTrajectory& traj, std::size_t t, std::size_t history);

// pi(a | key) = (c(key, a) + alpha) / (c(key) + alpha * |A|).
class SegmentCountPolicy final : public TabularActionModel {
 public:
  SegmentCountPolicy(std::size_t history, std::size_t n_actions, double alpha = 0.0);

  void observe(const TabularTrajectory& traj);
  void add(const SegmentKey& key, int action, std::uint64_t times = 1);

  std::size_t history() const { return history_; }
  std::size_t n_actions() const { return n_actions_; }
  double alpha() const { return alpha_; }
  std::size_t segment_count() const;

  std::uint64_t count(const SegmentKey& key) const;
  std::uint64_t count(const SegmentKey& key, int action) const;
  // Throws EstimationError for unseen keys when alpha == 0.
  double probability(const SegmentKey& key, int action) const;
  double log_prob(const SegmentKey& key, int action) const;
  double action_probability(const TabularTrajectory& traj, std::size_t t) const override;

  // Markov view for history 0: NaN where the state was never visited and alpha == 0.
  double state_probability(int state, int action) const;

  double log_likelihood(std::span<const TabularTrajectory> data) const;

 private:
  const std::uint64_t* row(const SegmentKey& key) const;
  double ratio(const std::uint64_t* counts, int action) const;
  [[noreturn]] void unseen(const std::string& key) const;

  std::size_t history_;
  std::size_t n_actions_;
  double alpha_;
  // history 0 keeps a dense per-state table; longer histories hash segments.
  std::vector<std::uint64_t> dense_;  // [s * (n_actions + 1) + a], last slot = total
  std::unordered_map<SegmentKey, std::vector<std::uint64_t>, SegmentKeyHash> sparse_;
};

// Active steps only: padded absorbing steps carry no behavior information.
SegmentCountPolicy fit_count_policy(std::span<const TabularTrajectory> data, std::size_t history,
                                    double alpha, std::size_t n_actions);

struct GaussianFit {
  GaussianLinearPolicy policy;
  bool ridge_fallback = false;
};

GaussianFit fit_gaussian_ols(std::span<const ContinuousTrajectory> data, int feature_order);

// Design matrix (one row per active step) and matching action matrix.
void stack_pairs(std::span<const ContinuousTrajectory> data, const PolynomialBasis& basis,
                 Eigen::MatrixXd& features, Eigen::MatrixXd& actions);

// Sum over pairs of 0.5 ((a - W z) / e^sigma)^2 + sigma, per action dimension,
// plus l2 * ||W||^2 excluding column 0 (the intercept). Evaluated from
// sufficient statistics so each call costs O(F^2) regardless of data size.
class GaussianNllObjective {
 public:
  GaussianNllObjective(const Eigen::MatrixXd& features, const Eigen::MatrixXd& actions, double l2);

  std::size_t pairs() const { return pairs_; }
  double value(const Eigen::MatrixXd& weights, const Eigen::VectorXd& log_std) const;
  void gradient(const Eigen::MatrixXd& weights, const Eigen::VectorXd& log_std, Eigen::MatrixXd& grad_w,
                Eigen::VectorXd& grad_log_std) const;
  // Per-pair loss without the penalty.
  double mean_nll(const Eigen::MatrixXd& weights, const Eigen::VectorXd& log_std) const;

 private:
  Eigen::VectorXd residual_sq(const Eigen::MatrixXd& weights) const;

  std::size_t pairs_;
  double l2_;
  Eigen::MatrixXd gram_;    // Z^T Z
  Eigen::MatrixXd cross_;   // Z^T Y
  Eigen::VectorXd y_sq_;    // column sums of Y∘Y
};

struct GradientFitConfig {
  double learning_rate = 1e-3;
  double l2 = 0.02;
  std::size_t checkpoint_interval = 25;
  std::size_t max_steps = 10000;
  int feature_order = 2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainingCheckpoint {
  std::size_t step = 0;
  double train_nll = 0.0;
  double validation_nll = 0.0;
  GaussianLinearPolicy policy;
};

struct TrainingTrace {
  std::vector<TrainingCheckpoint> checkpoints;
  bool diverged = false;
};

// Full-batch Adam from W = 0, log_std = 0 over whitened features; snapshots
// are expressed in the raw feature basis. Checkpoint 0 is the initialization.
TrainingTrace fit_gaussian_gd(std::span<const ContinuousTrajectory> train,
                              std::span<const ContinuousTrajectory> validation,
                              const GradientFitConfig& config);

struct EstimatedModel {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  std::vector<double> transitions;        // [(s * A + a) * S + s']
  std::vector<double> rewards;            // [s * A + a]
  std::vector<std::uint64_t> visits;      // [s * A + a]

  double p(int s, int a, int next) const {
    return transitions[(static_cast<std::size_t>(s) * n_actions + static_cast<std::size_t>(a)) * n_states +
                       static_cast<std::size_t>(next)];
  }
  double r(int s, int a) const { return rewards[static_cast<std::size_t>(s) * n_actions + static_cast<std::size_t>(a)]; }
};

// Unvisited (s, a): self-loop with reward 0. Transitions out of the final step
// are never observed and so are not counted; rewards use every active step.
EstimatedModel fit_model_counts(std::span<const TabularTrajectory> data, std::size_t n_states,
                                std::size_t n_actions);

}  // namespace opelab
