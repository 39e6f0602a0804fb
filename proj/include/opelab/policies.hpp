#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "opelab/common.hpp"
#include "opelab/envs.hpp"

namespace opelab {

// Anything that can put a probability on the action taken at step t of a
// tabular trajectory, possibly looking back along the history.
class TabularActionModel {
 public:
  virtual ~TabularActionModel() = default;
  virtual double action_probability(const TabularTrajectory& traj, std::size_t t) const = 0;
};

struct SoftmaxParameters {
  std::vector<double> theta;  // [s * n_actions + a]
  double temperature = 1.0;
};

class TabularPolicy final : public TabularActionModel {
 public:
  TabularPolicy(std::size_t n_states, std::size_t n_actions, std::vector<double> probabilities);

  static TabularPolicy softmax(std::size_t n_states, std::size_t n_actions,
                               std::vector<double> theta, double temperature);
  static TabularPolicy uniform(std::size_t n_states, std::size_t n_actions);

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }
  double probability(int s, int a) const {
    return probs_[static_cast<std::size_t>(s) * n_actions_ + static_cast<std::size_t>(a)];
  }
  double log_prob(int s, int a) const;
  std::span<const double> row(int s) const {
    return {probs_.data() + static_cast<std::size_t>(s) * n_actions_, n_actions_};
  }
  const std::vector<double>& table() const { return probs_; }
  int sample(int s, Rng& rng) const;
  double entropy(int s) const;

  double action_probability(const TabularTrajectory& traj, std::size_t t) const override {
    return probability(traj.states[t], traj.actions[t]);
  }

  const std::optional<SoftmaxParameters>& softmax_parameters() const { return softmax_; }

 private:
  std::size_t n_states_;
  std::size_t n_actions_;
  std::vector<double> probs_;
  std::optional<SoftmaxParameters> softmax_;
};

// Monomials of total degree <= order in lexicographic order of their exponent
// tuples (first coordinate's exponent varies slowest). The constant comes first.
class PolynomialBasis {
 public:
  PolynomialBasis(std::size_t dim, int order);
  std::size_t dim() const { return dim_; }
  int order() const { return order_; }
  std::size_t size() const { return exponents_.size(); }
  const std::vector<std::vector<int>>& exponents() const { return exponents_; }
  Eigen::VectorXd operator()(const Eigen::VectorXd& state) const;
  void evaluate(const Eigen::VectorXd& state, double* out) const;

 private:
  std::size_t dim_;
  int order_;
  std::vector<std::vector<int>> exponents_;
};

Eigen::VectorXd poly_features(const Eigen::VectorXd& state, int order);
std::size_t poly_feature_count(std::size_t dim, int order);

class GaussianLinearPolicy {
 public:
  GaussianLinearPolicy(Eigen::MatrixXd weights, Eigen::VectorXd log_std, std::size_t state_dim,
                       int feature_order);

  const Eigen::MatrixXd& weights() const { return weights_; }
  const Eigen::VectorXd& log_std() const { return log_std_; }
  std::size_t state_dim() const { return basis_.dim(); }
  std::size_t action_dim() const { return static_cast<std::size_t>(weights_.rows()); }
  int feature_order() const { return basis_.order(); }
  const PolynomialBasis& basis() const { return basis_; }

  Eigen::VectorXd features(const Eigen::VectorXd& state) const { return basis_(state); }
  Eigen::VectorXd mean(const Eigen::VectorXd& state) const;
  double log_prob(const Eigen::VectorXd& state, const Eigen::VectorXd& action) const;
  double log_prob_from_features(const Eigen::VectorXd& features, const Eigen::VectorXd& action) const;
  Eigen::VectorXd sample(const Eigen::VectorXd& state, Rng& rng) const;

  GaussianLinearPolicy with_log_std(Eigen::VectorXd log_std) const;
  GaussianLinearPolicy with_weights(Eigen::MatrixXd weights) const;

 private:
  Eigen::MatrixXd weights_;
  Eigen::VectorXd log_std_;
  PolynomialBasis basis_;
};

// Mixture of uniforms over consecutive intervals [edges[k], edges[k+1]).
class PiecewiseUniformPolicy {
 public:
  PiecewiseUniformPolicy(std::vector<double> edges, std::vector<double> masses);
  const std::vector<double>& edges() const { return edges_; }
  const std::vector<double>& masses() const { return masses_; }
  std::size_t bin(double action) const;
  double density(double action) const;
  double sample(Rng& rng) const;
  double mean() const;

 private:
  std::vector<double> edges_;
  std::vector<double> masses_;
};

struct CemConfig {
  std::size_t iterations = 10;
  std::size_t population = 50;
  double elite_fraction = 0.2;
  double initial_std = 1.0;
  double min_std = 1e-3;
};

struct CemResult {
  GaussianLinearPolicy policy;
  std::vector<double> population_mean;  // mean objective of each iteration's population
};

using PolicyObjective = std::function<double(const GaussianLinearPolicy&)>;

// Diagonal-Gaussian CEM over the weight matrix; log_std stays at the template's.
CemResult cem_optimize(const PolicyObjective& objective, const GaussianLinearPolicy& initial,
                       const CemConfig& config, Rng& rng);

// Mean return over `rollouts` episodes; every candidate sees the same noise.
PolicyObjective lds_return_objective(const LdsEnv& env, std::size_t rollouts, std::uint64_t seed);

struct KlResult {
  double value = 0.0;
  bool support_violation = false;
};

// q may return NaN for "undefined here", which counts as a support violation.
using ProbabilityFn = std::function<double(int state, int action)>;
KlResult kl_tabular(const ProbabilityFn& p, const ProbabilityFn& q, std::size_t n_actions,
                    std::span<const double> state_weights);
KlResult kl_tabular(const TabularPolicy& p, const TabularPolicy& q,
                    std::span<const double> state_weights);

using AnyPolicy = std::variant<TabularPolicy, GaussianLinearPolicy>;

nlohmann::json policy_to_json(const TabularPolicy& policy);
nlohmann::json policy_to_json(const GaussianLinearPolicy& policy);
AnyPolicy policy_from_json(const nlohmann::json& j);
AnyPolicy load_policy(const std::filesystem::path& path);
void save_policy(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace opelab
