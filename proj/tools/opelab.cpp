#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "opelab/harness.hpp"

namespace fs = std::filesystem;
using namespace opelab;

namespace {

constexpr int kConfigError = 2;
constexpr int kAllTrialsFailed = 3;

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_seed(std::uint64_t& seed) {
  if (auto s = seed_from_environment()) seed = *s;
}

int emit_report(const ExperimentReport& report, const std::string& output) {
  if (output.empty()) {
    write_report_csv(report, std::cout);
  } else {
    save_report(report, output);
    std::cerr << "wrote " << output << " (v(pi_e) = " << report.true_value << ")\n";
  }
  if (report.any_estimator_always_failed()) {
    std::cerr << "error: at least one estimator failed in every trial\n";
    return kAllTrialsFailed;
  }
  return 0;
}

int run_training_curve(TrainingCurveConfig config, std::size_t threads, const std::string& output) {
  apply_seed(config.base_seed);
  if (threads) config.threads = threads;
  if (!output.empty()) config.output = output;
  const auto report = training_curve_experiment(config);
  if (config.output.empty()) {
    write_training_curve_csv(report, std::cout);
  } else {
    save_training_curve(report, config.output);
    std::cerr << "wrote " << config.output << '\n';
  }
  const auto& vm = report.rows[report.validation_min];
  std::cerr << "v(pi_e) = " << report.true_value << ", validation minimum at step " << vm.step
            << ", RIS mse there " << vm.mse << ", OIS mse " << report.ois.mse << '\n';
  return 0;
}

int run_bandit(BanditDemoConfig config, const std::string& output) {
  apply_seed(config.base_seed);
  if (!output.empty()) config.output = output;
  return emit_report(bandit_demo(config), config.output);
}

int command_run(const fs::path& path, std::size_t threads, const std::string& output) {
  const auto j = read_json_file(path);
  const auto mode = parse_mode(j.value("mode", std::string("off_policy")));
  if (mode == ExperimentMode::TrainingCurve)
    return run_training_curve(parse_training_curve_config(j, path.parent_path()), threads, output);
  if (mode == ExperimentMode::BanditDemo) {
    auto c = parse_bandit_demo_config(j);
    if (!c.output.empty() && fs::path(c.output).is_relative()) c.output = (path.parent_path() / c.output).string();
    return run_bandit(c, output);
  }
  auto config = parse_experiment_config(j, path.parent_path());
  apply_seed(config.base_seed);
  if (threads) config.threads = threads;
  if (!output.empty()) config.output = output;
  return emit_report(run_experiment(config), config.output);
}

int command_value(const std::string& env_arg, const fs::path& policy_path, std::size_t rollouts, std::uint64_t seed) {
  const nlohmann::json spec =
      fs::exists(env_arg) ? read_json_file(env_arg) : nlohmann::json{{"env", env_arg}};
  const Environment env = build_env(spec);
  const AnyPolicy policy = load_policy(policy_path);
  apply_seed(seed);
  if (const auto* mdp = std::get_if<TabularMdp>(&env)) {
    const auto* p = std::get_if<TabularPolicy>(&policy);
    if (!p) throw ConfigError("tabular environments need a tabular policy");
    std::printf("%.17g\n", true_value_dp(*mdp, *p));
    return 0;
  }
  if (const auto* lds = std::get_if<LdsEnv>(&env)) {
    const auto* p = std::get_if<GaussianLinearPolicy>(&policy);
    if (!p) throw ConfigError("the lds environment needs a gaussian_linear policy");
    Rng rng(derive_seed(seed, 0, "oracle"));
    const McValue v = true_value_mc(*lds, *p, lds->gamma, rollouts, rng);
    std::printf("%.17g +- %.6g (standard error, %zu rollouts)\n", v.mean, v.standard_error, rollouts);
    return 0;
  }
  throw ConfigError("value oracle supports tabular and lds environments");
}

int command_build_policies(const fs::path& dir, std::uint64_t seed) {
  fs::create_directories(dir);
  const auto grid = construct_gridworld_policies();
  save_policy(dir / "gridworld_pi_b.json", policy_to_json(grid.behavior));
  save_policy(dir / "gridworld_pi_e.json", policy_to_json(grid.evaluation));

  const auto sp_b = TabularPolicy(6, 2, {0.6, 0.4, 0.6, 0.4, 0.6, 0.4, 0.6, 0.4, 0.6, 0.4, 0.6, 0.4});
  const auto sp_e = TabularPolicy(6, 2, {0.4, 0.6, 0.4, 0.6, 0.4, 0.6, 0.4, 0.6, 0.4, 0.6, 0.4, 0.6});
  save_policy(dir / "singlepath_pi_b.json", policy_to_json(sp_b));
  save_policy(dir / "singlepath_pi_e.json", policy_to_json(sp_e));

  CemConfig cem;
  cem.initial_std = 0.1;
  const auto lds = construct_lds_policies(LdsEnv{}, seed, cem);
  save_policy(dir / "lds_pi_b.json", policy_to_json(lds.behavior));
  save_policy(dir / "lds_pi_e.json", policy_to_json(lds.evaluation));
  std::cerr << "CEM population mean return per iteration:";
  for (double v : lds.cem_population_mean) std::cerr << ' ' << v;
  std::cerr << "\nwrote policies to " << dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Off-policy evaluation benchmarks: importance sampling with true or regressed behavior policies."};
  app.require_subcommand(1);

  std::string config_path, output, env_arg, policy_path, out_dir = "configs/policies";
  std::size_t threads = 0, rollouts = 1000000;
  std::uint64_t seed = 0;
  BanditDemoConfig bandit;

  auto* run = app.add_subcommand("run", "Run an experiment described by a JSON config");
  run->add_option("config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  run->add_option("--threads", threads, "Worker threads (default: all cores)");
  run->add_option("-o,--output", output, "Override the output CSV path");

  auto* curve = app.add_subcommand("training-curve", "Run the behavior-fit training-curve experiment");
  curve->add_option("config", config_path, "Training-curve config")->required()->check(CLI::ExistingFile);
  curve->add_option("--threads", threads, "Worker threads (default: all cores)");
  curve->add_option("-o,--output", output, "Override the output CSV path");

  auto* value = app.add_subcommand("value", "Ground-truth value of a policy");
  value->add_option("env", env_arg, "Environment name or JSON spec file")->required();
  value->add_option("policy", policy_path, "Policy JSON")->required()->check(CLI::ExistingFile);
  value->add_option("--rollouts", rollouts, "Monte Carlo rollouts for continuous environments");
  value->add_option("--seed", seed, "Seed for Monte Carlo rollouts");

  auto* demo = app.add_subcommand("demo-bandit", "Continuous-bandit sampling-error demonstration");
  demo->add_option("--sizes", bandit.sample_sizes, "Sample sizes");
  demo->add_option("--trials", bandit.trials, "Trials per sample size");
  demo->add_option("--seed", bandit.base_seed, "Base seed");
  demo->add_option("-o,--output", output, "Output CSV path");

  auto* build = app.add_subcommand("build-policies", "Regenerate the checked-in policy files");
  build->add_option("--out", out_dir, "Destination directory");
  build->add_option("--seed", seed, "Seed for the CEM policy search");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (*run) return command_run(config_path, threads, output);
    if (*curve) {
      const auto j = read_json_file(config_path);
      return run_training_curve(parse_training_curve_config(j, fs::path(config_path).parent_path()), threads, output);
    }
    if (*value) return command_value(env_arg, policy_path, rollouts, seed);
    if (*demo) return run_bandit(bandit, output);
    if (*build) return command_build_policies(out_dir, seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
