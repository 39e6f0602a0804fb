#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "opelab/behavior.hpp"
#include "opelab/envs.hpp"
#include "opelab/estimators.hpp"
#include "opelab/policies.hpp"

namespace opelab {

enum class EstimatorKind { IS, WIS, PDIS, DR, WDR, REG };
enum class WeightSource { None, TrueBehavior, Ris, Independent, ExtraData, Supplied };

// Names look like "IS-OIS", "WDR-RIS(2)", "IS-Independent", "PDIS-ExtraData(0)",
// "WIS-Supplied" or "REG".
struct EstimatorSpec {
  EstimatorKind kind = EstimatorKind::IS;
  WeightSource source = WeightSource::TrueBehavior;
  std::size_t history = 0;
  std::string name;
};

EstimatorSpec parse_estimator(std::string_view text);

enum class ExperimentMode { OffPolicy, OnPolicy, Baselines, TrainingCurve, BanditDemo };

ExperimentMode parse_mode(std::string_view text);

struct ExperimentConfig {
  std::string name = "experiment";
  ExperimentMode mode = ExperimentMode::OffPolicy;
  nlohmann::json env = nlohmann::json{{"env", "singlepath"}};
  nlohmann::json evaluation_policy;  // inline policy JSON (paths resolved at load time)
  nlohmann::json behavior_policy;
  nlohmann::json supplied_policy;    // optional denominator for *-Supplied estimators
  std::vector<EstimatorSpec> estimators;
  std::vector<std::size_t> sample_sizes;
  std::size_t trials = 100;
  std::uint64_t base_seed = 0;
  std::size_t oracle_rollouts = 100000;
  std::size_t threads = 0;
  std::string output;

  void validate() const;
};

ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// OPELAB_SEED, when set to an unsigned integer.
std::optional<std::uint64_t> seed_from_environment();

struct Aggregate {
  double mse = 0.0;
  double ci95 = 0.0;  // NaN with fewer than two estimates
  double mean = 0.0;
  double variance = 0.0;  // population variance of the estimates
  double bias = 0.0;
  std::size_t count = 0;
};

// Non-finite estimates count as failures and are skipped (`count` reports the rest).
Aggregate aggregate(std::span<const double> estimates, double true_value);

struct ReportRow {
  std::string estimator;
  std::size_t m = 0;
  Aggregate stats;
  std::size_t failures = 0;
  std::size_t flagged = 0;
  std::vector<double> estimates;  // one per trial, NaN where the estimator failed
};

struct ExperimentReport {
  std::string name;
  std::uint64_t base_seed = 0;
  std::uint64_t config_digest = 0;
  double true_value = 0.0;
  double true_value_stderr = 0.0;
  std::size_t trials = 0;
  std::vector<ReportRow> rows;
  // dataset_digests[k][trial] for sample_sizes[k]; every estimator in a trial saw this dataset.
  std::vector<std::vector<std::uint64_t>> dataset_digests;

  const ReportRow& row(std::string_view estimator, std::size_t m) const;
  bool any_estimator_always_failed() const;
};

ExperimentReport run_experiment(const ExperimentConfig& config);

void write_report_csv(const ExperimentReport& report, std::ostream& out);
nlohmann::json report_metadata(const ExperimentReport& report);
// Writes `path` (CSV) and a sibling `.json` with metadata.
void save_report(const ExperimentReport& report, const std::filesystem::path& path);

struct BootstrapInterval {
  double observed = 0.0;
  double lower = 0.0;  // one-sided lower bound at the requested confidence
  double upper = 0.0;  // one-sided upper bound
  std::size_t pairs = 0;
};

// Paired bootstrap over trials (pairs with a non-finite member are dropped).
BootstrapInterval bootstrap_mse_difference(std::span<const double> a, std::span<const double> b, double truth,
                                           std::size_t resamples, double confidence, std::uint64_t seed);
BootstrapInterval bootstrap_variance_difference(std::span<const double> a, std::span<const double> b,
                                                std::size_t resamples, double confidence, std::uint64_t seed);

struct TrainingCurveConfig {
  std::string name = "training_curve";
  nlohmann::json env = nlohmann::json{{"env", "lds"}};
  nlohmann::json evaluation_policy;
  nlohmann::json behavior_policy;
  std::size_t sample_size = 200;  // trajectories used for fitting and for the estimate
  double validation_fraction = 0.2;  // of all drawn trajectories
  std::size_t trials = 200;
  std::uint64_t base_seed = 0;
  std::size_t oracle_rollouts = 100000;
  std::size_t threads = 0;
  GradientFitConfig fit;
  std::string output;
};

TrainingCurveConfig parse_training_curve_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

struct TrainingCurveRow {
  std::size_t step = 0;
  double train_nll = 0.0;
  double val_nll = 0.0;
  double ris_estimate = 0.0;  // mean over trials
  double mse = 0.0;
  std::size_t trials = 0;  // trials that reached this checkpoint
};

struct TrainingCurveReport {
  std::string name;
  double true_value = 0.0;
  double true_value_stderr = 0.0;
  std::vector<TrainingCurveRow> rows;
  std::size_t validation_min = 0;  // row index of the lowest mean validation NLL
  Aggregate ois;
  std::vector<double> ois_estimates;
  std::vector<std::vector<double>> ris_estimates;  // [row][trial]
  std::size_t diverged_trials = 0;
};

TrainingCurveReport training_curve_experiment(const TrainingCurveConfig& config);
void write_training_curve_csv(const TrainingCurveReport& report, std::ostream& out);
void save_training_curve(const TrainingCurveReport& report, const std::filesystem::path& path);

struct BanditDemoConfig {
  std::vector<std::size_t> sample_sizes{10, 200};
  std::vector<double> bin_edges{0.0, 0.5, 1.0};
  std::vector<double> bin_masses{0.25, 0.75};
  std::size_t trials = 1000;
  std::uint64_t base_seed = 0;
  std::string output;
};

BanditDemoConfig parse_bandit_demo_config(const nlohmann::json& j);

// Importance sampling with a piecewise-constant density fitted to the sample.
// Bins that received no samples get zero fitted density; `missing_bin` reports it.
double bandit_ris_estimate(std::span<const double> actions, std::span<const double> rewards,
                           const PiecewiseUniformPolicy& policy, bool* missing_bin = nullptr);

// Rows "OIS" and "RIS" per sample size; `flagged` counts trials with an empty bin.
ExperimentReport bandit_demo(const BanditDemoConfig& config);

// Planning-discounted value iteration; absorbing states have Q = 0.
std::vector<double> optimal_q_values(const TabularMdp& mdp, double planning_gamma, std::size_t iterations);

struct GridworldPolicyPair {
  TabularPolicy behavior;
  TabularPolicy evaluation;
};
GridworldPolicyPair construct_gridworld_policies(double planning_gamma = 0.9, double behavior_temperature = 25.0,
                                                 double evaluation_temperature = 16.7);

struct LdsPolicyPair {
  GaussianLinearPolicy behavior;
  GaussianLinearPolicy evaluation;
  std::vector<double> cem_population_mean;
};
LdsPolicyPair construct_lds_policies(const LdsEnv& env, std::uint64_t seed, const CemConfig& cem,
                                     std::size_t rollouts_per_candidate = 20);

}  // namespace opelab
