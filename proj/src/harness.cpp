#include "opelab/harness.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <regex>
#include <set>
#include <sstream>
#include <variant>

namespace opelab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

nlohmann::json resolve_policy(const nlohmann::json& field, const std::filesystem::path& base_dir) {
  if (field.is_null()) return field;
  if (field.is_string()) {
    std::filesystem::path p = field.get<std::string>();
    if (p.is_relative()) p = base_dir / p;
    return read_json(p);
  }
  if (field.is_object()) return field;
  throw ConfigError("policy must be a file path or an inline object");
}

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

std::size_t get_count(const nlohmann::json& j, const char* key, std::size_t fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number_integer() || j[key].get<long long>() < 0)
    throw ConfigError(std::string("config key '") + key + "' must be a non-negative integer");
  return j[key].get<std::size_t>();
}

std::vector<double> finite_only(std::span<const double> xs) {
  std::vector<double> out;
  out.reserve(xs.size());
  for (double x : xs)
    if (std::isfinite(x)) out.push_back(x);
  return out;
}

}  // namespace

EstimatorSpec parse_estimator(std::string_view text) {
  static const std::regex pattern(R"(^(IS|WIS|PDIS|DR|WDR)-(OIS|RIS|Independent|ExtraData|Supplied)(?:\((\d+)\))?$)");
  EstimatorSpec spec;
  spec.name = std::string(text);
  if (text == "REG") {
    spec.kind = EstimatorKind::REG;
    spec.source = WeightSource::None;
    return spec;
  }
  std::cmatch match;
  const std::string s(text);
  if (!std::regex_match(s.c_str(), match, pattern)) throw ConfigError("unrecognized estimator '" + s + "'");
  const std::string kind = match[1].str(), source = match[2].str();
  if (kind == "IS") spec.kind = EstimatorKind::IS;
  else if (kind == "WIS") spec.kind = EstimatorKind::WIS;
  else if (kind == "PDIS") spec.kind = EstimatorKind::PDIS;
  else if (kind == "DR") spec.kind = EstimatorKind::DR;
  else spec.kind = EstimatorKind::WDR;
  if (source == "OIS") spec.source = WeightSource::TrueBehavior;
  else if (source == "RIS") spec.source = WeightSource::Ris;
  else if (source == "Independent") spec.source = WeightSource::Independent;
  else if (source == "ExtraData") spec.source = WeightSource::ExtraData;
  else spec.source = WeightSource::Supplied;
  if (match[3].matched) {
    if (spec.source == WeightSource::TrueBehavior || spec.source == WeightSource::Supplied)
      throw ConfigError("estimator '" + s + "': only fitted weight sources take a history length");
    spec.history = std::stoul(match[3].str());
  } else if (spec.source == WeightSource::Ris) {
    throw ConfigError("estimator '" + s + "': RIS needs a history length, e.g. RIS(0)");
  }
  return spec;
}

ExperimentMode parse_mode(std::string_view text) {
  if (text == "off_policy") return ExperimentMode::OffPolicy;
  if (text == "on_policy") return ExperimentMode::OnPolicy;
  if (text == "baselines") return ExperimentMode::Baselines;
  if (text == "training_curve") return ExperimentMode::TrainingCurve;
  if (text == "bandit_demo") return ExperimentMode::BanditDemo;
  throw ConfigError("unknown mode '" + std::string(text) + "'");
}

void ExperimentConfig::validate() const {
  if (trials < 1) throw ConfigError("trials must be >= 1");
  if (sample_sizes.empty()) throw ConfigError("sample_sizes must not be empty");
  for (std::size_t i = 0; i < sample_sizes.size(); ++i) {
    if (sample_sizes[i] < 1) throw ConfigError("sample sizes must be >= 1");
    if (i > 0 && sample_sizes[i] <= sample_sizes[i - 1]) throw ConfigError("sample_sizes must be strictly increasing");
  }
  if (estimators.empty()) throw ConfigError("no estimators configured");
  if (evaluation_policy.is_null()) throw ConfigError("evaluation_policy is required");
  if (mode != ExperimentMode::OnPolicy && behavior_policy.is_null())
    throw ConfigError("behavior_policy is required outside on_policy mode");
  if (mode == ExperimentMode::TrainingCurve || mode == ExperimentMode::BanditDemo)
    throw ConfigError("this mode has its own runner");
  for (const auto& e : estimators) {
    if (e.source == WeightSource::Supplied && supplied_policy.is_null())
      throw ConfigError("estimator '" + e.name + "' needs a supplied_policy");
  }
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown_keys(j, {"name", "description", "mode", "env", "evaluation_policy", "behavior_policy",
                          "supplied_policy", "estimators", "sample_sizes", "trials", "base_seed",
                          "oracle_rollouts", "threads", "output"});
  ExperimentConfig c;
  c.name = get_or<std::string>(j, "name", c.name);
  c.mode = parse_mode(get_or<std::string>(j, "mode", "off_policy"));
  if (j.contains("env")) c.env = j["env"].is_string() ? nlohmann::json{{"env", j["env"]}} : j["env"];
  c.evaluation_policy = resolve_policy(j.value("evaluation_policy", nlohmann::json()), base_dir);
  c.behavior_policy = resolve_policy(j.value("behavior_policy", nlohmann::json()), base_dir);
  c.supplied_policy = resolve_policy(j.value("supplied_policy", nlohmann::json()), base_dir);
  if (c.mode == ExperimentMode::OnPolicy) c.behavior_policy = c.evaluation_policy;
  for (const auto& name : get_or<std::vector<std::string>>(j, "estimators", {})) c.estimators.push_back(parse_estimator(name));
  c.sample_sizes = get_or<std::vector<std::size_t>>(j, "sample_sizes", {});
  c.trials = get_count(j, "trials", c.trials);
  c.base_seed = get_or<std::uint64_t>(j, "base_seed", c.base_seed);
  c.oracle_rollouts = get_count(j, "oracle_rollouts", c.oracle_rollouts);
  c.threads = get_count(j, "threads", c.threads);
  c.output = get_or<std::string>(j, "output", "");
  if (!c.output.empty() && std::filesystem::path(c.output).is_relative()) c.output = (base_dir / c.output).string();
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return parse_experiment_config(read_json(path), path.parent_path());
}

std::optional<std::uint64_t> seed_from_environment() {
  const char* raw = std::getenv("OPELAB_SEED");
  if (!raw || !*raw) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(raw, &end, 10);
  if (*end != '\0') throw ConfigError("OPELAB_SEED must be an unsigned integer");
  return static_cast<std::uint64_t>(v);
}

Aggregate aggregate(std::span<const double> estimates, double true_value) {
  const auto xs = finite_only(estimates);
  Aggregate a;
  a.count = xs.size();
  if (xs.empty()) {
    a.mse = a.ci95 = a.mean = a.variance = a.bias = kNaN;
    return a;
  }
  const double n = static_cast<double>(xs.size());
  double sum = 0.0;
  for (double x : xs) sum += x;
  a.mean = sum / n;
  a.bias = a.mean - true_value;
  double var = 0.0, mse = 0.0;
  for (double x : xs) {
    var += (x - a.mean) * (x - a.mean);
    mse += (x - true_value) * (x - true_value);
  }
  a.variance = var / n;
  a.mse = mse / n;
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) {
      const double e = (x - true_value) * (x - true_value) - a.mse;
      ss += e * e;
    }
    a.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  } else {
    a.ci95 = kNaN;
  }
  return a;
}

const ReportRow& ExperimentReport::row(std::string_view estimator, std::size_t m) const {
  for (const auto& r : rows)
    if (r.estimator == estimator && r.m == m) return r;
  throw std::out_of_range("no report row for " + std::string(estimator) + " at m=" + std::to_string(m));
}

bool ExperimentReport::any_estimator_always_failed() const {
  return std::any_of(rows.begin(), rows.end(), [](const ReportRow& r) { return r.failures == r.estimates.size(); });
}

namespace {

struct TrialOutcome {
  std::vector<double> values;
  std::vector<char> flagged;
  std::uint64_t digest = 0;
};

bool needs_training_data(const std::vector<EstimatorSpec>& specs) {
  return std::any_of(specs.begin(), specs.end(), [](const EstimatorSpec& s) {
    return s.source == WeightSource::Independent || s.source == WeightSource::ExtraData;
  });
}

IsVariant is_variant(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::WIS: return IsVariant::Weighted;
    case EstimatorKind::PDIS: return IsVariant::PerDecision;
    default: return IsVariant::Ordinary;
  }
}

// Per-trial cache: weight traces are computed once per distinct denominator.
class TraceCache {
 public:
  template <class Compute>
  const std::vector<RatioTrace>& get(const EstimatorSpec& spec, Compute&& compute) {
    const auto key = std::make_pair(static_cast<int>(spec.source), spec.history);
    auto it = entries_.find(key);
    if (it == entries_.end()) {
      Entry e;
      try {
        e = compute();
      } catch (const EstimationError& err) {
        e = std::string(err.what());
      }
      it = entries_.emplace(key, std::move(e)).first;
    }
    if (const auto* msg = std::get_if<std::string>(&it->second)) throw EstimationError(*msg);
    return std::get<std::vector<RatioTrace>>(it->second);
  }

 private:
  using Entry = std::variant<std::vector<RatioTrace>, std::string>;
  std::map<std::pair<int, std::size_t>, Entry> entries_;
};

template <class Traj>
std::vector<Traj> concat(const std::vector<Traj>& a, const std::vector<Traj>& b) {
  std::vector<Traj> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

struct TabularSetup {
  TabularMdp mdp;
  TabularPolicy pi_e;
  TabularPolicy pi_b;
  std::optional<TabularPolicy> supplied;
};

struct LdsSetup {
  LdsEnv env;
  GaussianLinearPolicy pi_e;
  GaussianLinearPolicy pi_b;
  std::optional<GaussianLinearPolicy> supplied;
};

TabularPolicy as_tabular(const nlohmann::json& j, const TabularMdp& mdp, const char* role) {
  auto p = policy_from_json(j);
  auto* t = std::get_if<TabularPolicy>(&p);
  if (!t) throw ConfigError(std::string(role) + " policy must be tabular for this environment");
  if (t->n_states() != mdp.n_states || t->n_actions() != mdp.n_actions)
    throw ConfigError(std::string(role) + " policy shape does not match the environment");
  return *t;
}

GaussianLinearPolicy as_gaussian(const nlohmann::json& j, const char* role) {
  auto p = policy_from_json(j);
  auto* g = std::get_if<GaussianLinearPolicy>(&p);
  if (!g) throw ConfigError(std::string(role) + " policy must be gaussian_linear for this environment");
  if (g->state_dim() != 4 || g->action_dim() != 2) throw ConfigError(std::string(role) + " policy has the wrong shape");
  return *g;
}

std::string data_tag(std::size_t m) { return "data/m=" + std::to_string(m); }
std::string train_tag(std::size_t m) { return "train/m=" + std::to_string(m); }

TrialOutcome run_tabular_trial(const TabularSetup& setup, const ExperimentConfig& config, std::size_t m,
                               std::size_t trial) {
  const auto& mdp = setup.mdp;
  Rng rng(derive_seed(config.base_seed, trial, data_tag(m)));
  const auto data = sample_dataset(mdp, setup.pi_b, m, rng);
  std::vector<TabularTrajectory> train;
  if (needs_training_data(config.estimators)) {
    Rng train_rng(derive_seed(config.base_seed, trial, train_tag(m)));
    train = sample_dataset(mdp, setup.pi_b, m, train_rng);
  }

  TrialOutcome out;
  out.digest = dataset_digest(data);
  out.values.assign(config.estimators.size(), kNaN);
  out.flagged.assign(config.estimators.size(), 0);
  TraceCache cache;
  std::optional<std::vector<ModelTrace>> model;
  const double gamma = mdp.gamma;
  const std::size_t A = mdp.n_actions;

  auto traces = [&](const EstimatorSpec& spec) -> const std::vector<RatioTrace>& {
    return cache.get(spec, [&]() -> std::vector<RatioTrace> {
      switch (spec.source) {
        case WeightSource::TrueBehavior: return ratio_traces(data, setup.pi_e, setup.pi_b);
        case WeightSource::Supplied: return ratio_traces(data, setup.pi_e, *setup.supplied);
        case WeightSource::Ris:
          return ratio_traces(data, setup.pi_e, fit_count_policy(data, spec.history, 0.0, A));
        case WeightSource::Independent:
          return ratio_traces(data, setup.pi_e, fit_count_policy(train, spec.history, 1.0, A));
        case WeightSource::ExtraData:
          return ratio_traces(data, setup.pi_e, fit_count_policy(concat(train, data), spec.history, 0.0, A));
        case WeightSource::None: break;
      }
      throw EstimationError("estimator has no weight source");
    });
  };
  auto model_for = [&]() -> const std::vector<ModelTrace>& {
    if (!model) {
      const std::span<const TabularTrajectory> half(data.data(), data.size() / 2);
      const auto fitted = fit_model_counts(half, mdp.n_states, mdp.n_actions);
      model = model_traces(data, evaluate_on_model(fitted, setup.pi_e, mdp.horizon, gamma));
    }
    return *model;
  };

  for (std::size_t k = 0; k < config.estimators.size(); ++k) {
    const auto& spec = config.estimators[k];
    try {
      Estimate e;
      switch (spec.kind) {
        case EstimatorKind::IS:
        case EstimatorKind::WIS:
        case EstimatorKind::PDIS: e = importance_sampling(traces(spec), gamma, is_variant(spec.kind)); break;
        case EstimatorKind::DR: e = doubly_robust(traces(spec), model_for(), gamma, false); break;
        case EstimatorKind::WDR: e = doubly_robust(traces(spec), model_for(), gamma, true); break;
        case EstimatorKind::REG: e = reg_estimate(data, setup.pi_e, mdp, gamma); break;
      }
      out.values[k] = e.value;
      out.flagged[k] = e.flags != 0;
    } catch (const EstimationError&) {
      out.values[k] = kNaN;
    }
  }
  return out;
}

TrialOutcome run_lds_trial(const LdsSetup& setup, const ExperimentConfig& config, std::size_t m, std::size_t trial) {
  Rng rng(derive_seed(config.base_seed, trial, data_tag(m)));
  const auto data = sample_dataset(setup.env, setup.pi_b, m, rng);
  std::vector<ContinuousTrajectory> train;
  if (needs_training_data(config.estimators)) {
    Rng train_rng(derive_seed(config.base_seed, trial, train_tag(m)));
    train = sample_dataset(setup.env, setup.pi_b, m, train_rng);
  }
  TrialOutcome out;
  out.digest = dataset_digest(data);
  out.values.assign(config.estimators.size(), kNaN);
  out.flagged.assign(config.estimators.size(), 0);
  TraceCache cache;
  std::vector<char> ridge(6, 0);
  const int order = setup.pi_e.feature_order();

  auto fitted = [&](std::span<const ContinuousTrajectory> d, WeightSource src) {
    auto fit = fit_gaussian_ols(d, order);
    ridge[static_cast<std::size_t>(src)] = fit.ridge_fallback;
    return fit.policy;
  };
  auto traces = [&](const EstimatorSpec& spec) -> const std::vector<RatioTrace>& {
    return cache.get(spec, [&]() -> std::vector<RatioTrace> {
      switch (spec.source) {
        case WeightSource::TrueBehavior: return ratio_traces(data, setup.pi_e, setup.pi_b);
        case WeightSource::Supplied: return ratio_traces(data, setup.pi_e, *setup.supplied);
        case WeightSource::Ris: return ratio_traces(data, setup.pi_e, fitted(data, spec.source));
        case WeightSource::Independent: return ratio_traces(data, setup.pi_e, fitted(train, spec.source));
        case WeightSource::ExtraData:
          return ratio_traces(data, setup.pi_e, fitted(concat(train, data), spec.source));
        case WeightSource::None: break;
      }
      throw EstimationError("estimator has no weight source");
    });
  };
  for (std::size_t k = 0; k < config.estimators.size(); ++k) {
    const auto& spec = config.estimators[k];
    try {
      const Estimate e = importance_sampling(traces(spec), setup.env.gamma, is_variant(spec.kind));
      out.values[k] = e.value;
      out.flagged[k] = e.flags != 0 || ridge[static_cast<std::size_t>(spec.source)];
    } catch (const EstimationError&) {
      out.values[k] = kNaN;
    }
  }
  return out;
}

template <class Setup, class TrialFn>
ExperimentReport run_trials(const ExperimentConfig& config, const Setup& setup, TrialFn trial_fn, double truth,
                            double truth_stderr) {
  ExperimentReport report;
  report.name = config.name;
  report.base_seed = config.base_seed;
  report.true_value = truth;
  report.true_value_stderr = truth_stderr;
  report.trials = config.trials;
  const std::size_t E = config.estimators.size();
  std::vector<std::vector<ReportRow>> by_estimator(E);
  for (std::size_t mi = 0; mi < config.sample_sizes.size(); ++mi) {
    const std::size_t m = config.sample_sizes[mi];
    std::vector<TrialOutcome> outcomes(config.trials);
    parallel_for(config.trials, config.threads, [&](std::size_t t) { outcomes[t] = trial_fn(setup, config, m, t); });
    std::vector<std::uint64_t> digests;
    for (const auto& o : outcomes) digests.push_back(o.digest);
    report.dataset_digests.push_back(std::move(digests));
    for (std::size_t k = 0; k < E; ++k) {
      ReportRow row;
      row.estimator = config.estimators[k].name;
      row.m = m;
      for (const auto& o : outcomes) {
        row.estimates.push_back(o.values[k]);
        row.failures += !std::isfinite(o.values[k]);
        row.flagged += o.flagged[k] != 0;
      }
      row.stats = aggregate(row.estimates, truth);
      by_estimator[k].push_back(std::move(row));
    }
  }
  for (auto& rows : by_estimator)
    for (auto& r : rows) report.rows.push_back(std::move(r));
  return report;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  const Environment env = build_env(config.env);
  ExperimentReport report;
  if (const auto* mdp = std::get_if<TabularMdp>(&env)) {
    TabularSetup setup{*mdp, as_tabular(config.evaluation_policy, *mdp, "evaluation"),
                       as_tabular(config.behavior_policy, *mdp, "behavior"), std::nullopt};
    if (!config.supplied_policy.is_null()) setup.supplied = as_tabular(config.supplied_policy, *mdp, "supplied");
    const double truth = true_value_dp(setup.mdp, setup.pi_e);
    report = run_trials(config, setup, run_tabular_trial, truth, 0.0);
  } else if (const auto* lds = std::get_if<LdsEnv>(&env)) {
    for (const auto& e : config.estimators)
      if (e.kind == EstimatorKind::DR || e.kind == EstimatorKind::WDR || e.kind == EstimatorKind::REG)
        throw ConfigError("estimator '" + e.name + "' needs a tabular environment");
    LdsSetup setup{*lds, as_gaussian(config.evaluation_policy, "evaluation"),
                   as_gaussian(config.behavior_policy, "behavior"), std::nullopt};
    if (!config.supplied_policy.is_null()) setup.supplied = as_gaussian(config.supplied_policy, "supplied");
    if (config.oracle_rollouts < 1) throw ConfigError("oracle_rollouts must be >= 1");
    Rng oracle_rng(derive_seed(config.base_seed, 0, "oracle"));
    const McValue truth = true_value_mc(setup.env, setup.pi_e, setup.env.gamma, config.oracle_rollouts, oracle_rng);
    report = run_trials(config, setup, run_lds_trial, truth.mean, truth.standard_error);
  } else {
    throw ConfigError("the bandit environment is only available through the bandit demo");
  }
  nlohmann::json canonical = {{"name", config.name}, {"env", config.env}, {"pi_e", config.evaluation_policy},
                              {"pi_b", config.behavior_policy}, {"trials", config.trials},
                              {"sample_sizes", config.sample_sizes}, {"base_seed", config.base_seed}};
  for (const auto& e : config.estimators) canonical["estimators"].push_back(e.name);
  report.config_digest = fnv1a(canonical.dump());
  return report;
}

void write_report_csv(const ExperimentReport& report, std::ostream& out) {
  out << "estimator,m,mse,ci95,mean_est,variance,bias,failures\n";
  for (const auto& r : report.rows) {
    out << r.estimator << ',' << r.m << ',' << format_double(r.stats.mse) << ',' << format_double(r.stats.ci95) << ','
        << format_double(r.stats.mean) << ',' << format_double(r.stats.variance) << ','
        << format_double(r.stats.bias) << ',' << r.failures << '\n';
  }
}

nlohmann::json report_metadata(const ExperimentReport& report) {
  nlohmann::json j;
  j["name"] = report.name;
  j["base_seed"] = report.base_seed;
  j["config_digest"] = hex64(report.config_digest);
  j["true_value"] = report.true_value;
  j["true_value_stderr"] = report.true_value_stderr;
  j["trials"] = report.trials;
  j["ci_method"] = "normal approximation over per-trial squared errors, 1.96 sd / sqrt(trials)";
  nlohmann::json flagged = nlohmann::json::object();
  for (const auto& r : report.rows) flagged[r.estimator + "@" + std::to_string(r.m)] = r.flagged;
  j["flagged_trials"] = flagged;
  nlohmann::json digests = nlohmann::json::array();
  for (const auto& per_m : report.dataset_digests) {
    nlohmann::json row = nlohmann::json::array();
    for (auto d : per_m) row.push_back(hex64(d));
    digests.push_back(row);
  }
  j["dataset_digests"] = digests;
  return j;
}

namespace {

void ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

}  // namespace

void save_report(const ExperimentReport& report, const std::filesystem::path& path) {
  ensure_parent(path);
  std::ofstream csv(path);
  if (!csv) throw ConfigError("cannot write " + path.string());
  write_report_csv(report, csv);
  std::filesystem::path meta = path;
  meta.replace_extension(".json");
  std::ofstream js(meta);
  js << report_metadata(report).dump(1) << '\n';
}

namespace {

template <class Stat>
BootstrapInterval paired_bootstrap(std::span<const double> a, std::span<const double> b, std::size_t resamples,
                                   double confidence, std::uint64_t seed, Stat stat) {
  if (a.size() != b.size()) throw std::invalid_argument("paired bootstrap needs equal-length samples");
  std::vector<double> xa, xb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isfinite(a[i]) && std::isfinite(b[i])) {
      xa.push_back(a[i]);
      xb.push_back(b[i]);
    }
  }
  BootstrapInterval out;
  out.pairs = xa.size();
  if (xa.empty()) {
    out.observed = out.lower = out.upper = kNaN;
    return out;
  }
  out.observed = stat(xa, xb);
  Rng rng(seed);
  std::vector<double> ra(xa.size()), rb(xb.size()), diffs(resamples);
  std::uniform_int_distribution<std::size_t> pick(0, xa.size() - 1);
  for (std::size_t r = 0; r < resamples; ++r) {
    for (std::size_t i = 0; i < xa.size(); ++i) {
      const std::size_t j = pick(rng);
      ra[i] = xa[j];
      rb[i] = xb[j];
    }
    diffs[r] = stat(ra, rb);
  }
  std::sort(diffs.begin(), diffs.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(resamples - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, resamples - 1);
    return diffs[lo] + (pos - static_cast<double>(lo)) * (diffs[hi] - diffs[lo]);
  };
  out.lower = quantile(1.0 - confidence);
  out.upper = quantile(confidence);
  return out;
}

double mean_sq_err(const std::vector<double>& xs, double truth) {
  double s = 0.0;
  for (double x : xs) s += (x - truth) * (x - truth);
  return s / static_cast<double>(xs.size());
}

double pop_variance(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double s = 0.0;
  for (double x : xs) s += (x - mean) * (x - mean);
  return s / static_cast<double>(xs.size());
}

}  // namespace

BootstrapInterval bootstrap_mse_difference(std::span<const double> a, std::span<const double> b, double truth,
                                           std::size_t resamples, double confidence, std::uint64_t seed) {
  return paired_bootstrap(a, b, resamples, confidence, seed, [truth](const auto& x, const auto& y) {
    return mean_sq_err(x, truth) - mean_sq_err(y, truth);
  });
}

BootstrapInterval bootstrap_variance_difference(std::span<const double> a, std::span<const double> b,
                                                std::size_t resamples, double confidence, std::uint64_t seed) {
  return paired_bootstrap(a, b, resamples, confidence, seed,
                          [](const auto& x, const auto& y) { return pop_variance(x) - pop_variance(y); });
}

TrainingCurveConfig parse_training_curve_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown_keys(j, {"name", "description", "mode", "env", "evaluation_policy", "behavior_policy", "sample_size",
                          "validation_fraction", "trials", "base_seed", "oracle_rollouts", "threads", "fit", "output"});
  TrainingCurveConfig c;
  c.name = get_or<std::string>(j, "name", c.name);
  if (j.contains("env")) c.env = j["env"].is_string() ? nlohmann::json{{"env", j["env"]}} : j["env"];
  c.evaluation_policy = resolve_policy(j.value("evaluation_policy", nlohmann::json()), base_dir);
  c.behavior_policy = resolve_policy(j.value("behavior_policy", nlohmann::json()), base_dir);
  c.sample_size = get_count(j, "sample_size", c.sample_size);
  c.validation_fraction = get_or<double>(j, "validation_fraction", c.validation_fraction);
  c.trials = get_count(j, "trials", c.trials);
  c.base_seed = get_or<std::uint64_t>(j, "base_seed", c.base_seed);
  c.oracle_rollouts = get_count(j, "oracle_rollouts", c.oracle_rollouts);
  c.threads = get_count(j, "threads", c.threads);
  if (j.contains("fit")) {
    const auto& f = j["fit"];
    reject_unknown_keys(f, {"learning_rate", "l2", "checkpoint_interval", "max_steps", "feature_order"});
    c.fit.learning_rate = get_or<double>(f, "learning_rate", c.fit.learning_rate);
    c.fit.l2 = get_or<double>(f, "l2", c.fit.l2);
    c.fit.checkpoint_interval = get_count(f, "checkpoint_interval", c.fit.checkpoint_interval);
    c.fit.max_steps = get_count(f, "max_steps", c.fit.max_steps);
    c.fit.feature_order = get_or<int>(f, "feature_order", c.fit.feature_order);
  }
  c.output = get_or<std::string>(j, "output", "");
  if (!c.output.empty() && std::filesystem::path(c.output).is_relative()) c.output = (base_dir / c.output).string();
  if (c.trials < 1) throw ConfigError("trials must be >= 1");
  if (c.sample_size < 1) throw ConfigError("sample_size must be >= 1");
  if (!(c.validation_fraction > 0.0 && c.validation_fraction < 1.0))
    throw ConfigError("validation_fraction must lie in (0,1)");
  if (c.fit.checkpoint_interval < 1) throw ConfigError("checkpoint_interval must be >= 1");
  if (c.evaluation_policy.is_null() || c.behavior_policy.is_null())
    throw ConfigError("training curve needs evaluation_policy and behavior_policy");
  return c;
}

namespace {

struct CurveTrial {
  std::vector<double> train_nll, val_nll, estimate;
  double ois = kNaN;
  bool diverged = false;
};

}  // namespace

TrainingCurveReport training_curve_experiment(const TrainingCurveConfig& config) {
  const Environment built = build_env(config.env);
  const auto* env = std::get_if<LdsEnv>(&built);
  if (!env) throw ConfigError("the training curve needs the lds environment");
  const auto pi_e = as_gaussian(config.evaluation_policy, "evaluation");
  const auto pi_b = as_gaussian(config.behavior_policy, "behavior");
  const double gamma = env->gamma;

  TrainingCurveReport report;
  report.name = config.name;
  Rng oracle_rng(derive_seed(config.base_seed, 0, "oracle"));
  const McValue truth = true_value_mc(*env, pi_e, gamma, config.oracle_rollouts, oracle_rng);
  report.true_value = truth.mean;
  report.true_value_stderr = truth.standard_error;

  const auto n_val = static_cast<std::size_t>(std::max(
      1.0, std::round(static_cast<double>(config.sample_size) * config.validation_fraction /
                      (1.0 - config.validation_fraction))));
  std::vector<CurveTrial> trials(config.trials);
  parallel_for(config.trials, config.threads, [&](std::size_t trial) {
    Rng rng(derive_seed(config.base_seed, trial, "curve/data"));
    const auto data = sample_dataset(*env, pi_b, config.sample_size, rng);
    Rng val_rng(derive_seed(config.base_seed, trial, "curve/validation"));
    const auto validation = sample_dataset(*env, pi_b, n_val, val_rng);
    const TrainingTrace trace = fit_gaussian_gd(data, validation, config.fit);

    const PolynomialBasis& basis = pi_e.basis();
    const std::size_t L = env->horizon, m = data.size();
    std::vector<Eigen::VectorXd> phi(m * L);
    std::vector<double> log_e(m * L), returns(m);
    for (std::size_t i = 0; i < m; ++i) {
      returns[i] = trajectory_return(data[i], gamma);
      for (std::size_t t = 0; t < L; ++t) {
        phi[i * L + t] = basis(data[i].states[t]);
        log_e[i * L + t] = pi_e.log_prob_from_features(phi[i * L + t], data[i].actions[t]);
      }
    }
    auto estimate_with = [&](const GaussianLinearPolicy& denom) {
      double total = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        double w = 1.0;
        for (std::size_t t = 0; t < L; ++t)
          w *= std::exp(log_e[i * L + t] - denom.log_prob_from_features(phi[i * L + t], data[i].actions[t]));
        total += w * returns[i];
      }
      return total / static_cast<double>(m);
    };
    CurveTrial& out = trials[trial];
    out.ois = estimate_with(pi_b);
    out.diverged = trace.diverged;
    for (const auto& c : trace.checkpoints) {
      out.train_nll.push_back(c.train_nll);
      out.val_nll.push_back(c.validation_nll);
      out.estimate.push_back(estimate_with(c.policy));
    }
  });

  std::size_t rows = 0;
  for (const auto& t : trials) {
    rows = std::max(rows, t.estimate.size());
    report.ois_estimates.push_back(t.ois);
    report.diverged_trials += t.diverged;
  }
  report.ois = aggregate(report.ois_estimates, report.true_value);
  report.ris_estimates.assign(rows, std::vector<double>(config.trials, kNaN));
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < rows; ++k) {
    TrainingCurveRow row;
    row.step = k * config.fit.checkpoint_interval;
    double tr = 0.0, va = 0.0, est = 0.0, se = 0.0;
    for (std::size_t t = 0; t < config.trials; ++t) {
      if (k >= trials[t].estimate.size()) continue;
      row.trials += 1;
      tr += trials[t].train_nll[k];
      va += trials[t].val_nll[k];
      est += trials[t].estimate[k];
      se += (trials[t].estimate[k] - report.true_value) * (trials[t].estimate[k] - report.true_value);
      report.ris_estimates[k][t] = trials[t].estimate[k];
    }
    const double n = static_cast<double>(row.trials);
    row.train_nll = tr / n;
    row.val_nll = va / n;
    row.ris_estimate = est / n;
    row.mse = se / n;
    if (row.trials == config.trials && row.val_nll < best) {
      best = row.val_nll;
      report.validation_min = k;
    }
    report.rows.push_back(row);
  }
  return report;
}

void write_training_curve_csv(const TrainingCurveReport& report, std::ostream& out) {
  out << "step,train_nll,val_nll,ris_estimate,mse\n";
  for (const auto& r : report.rows)
    out << r.step << ',' << format_double(r.train_nll) << ',' << format_double(r.val_nll) << ','
        << format_double(r.ris_estimate) << ',' << format_double(r.mse) << '\n';
}

void save_training_curve(const TrainingCurveReport& report, const std::filesystem::path& path) {
  ensure_parent(path);
  std::ofstream csv(path);
  if (!csv) throw ConfigError("cannot write " + path.string());
  write_training_curve_csv(report, csv);
  nlohmann::json j;
  j["name"] = report.name;
  j["true_value"] = report.true_value;
  j["true_value_stderr"] = report.true_value_stderr;
  j["validation_min_step"] = report.rows.empty() ? 0 : report.rows[report.validation_min].step;
  j["ois_mse"] = report.ois.mse;
  j["ois_mean"] = report.ois.mean;
  j["diverged_trials"] = report.diverged_trials;
  std::filesystem::path meta = path;
  meta.replace_extension(".json");
  std::ofstream js(meta);
  js << j.dump(1) << '\n';
}

BanditDemoConfig parse_bandit_demo_config(const nlohmann::json& j) {
  reject_unknown_keys(j, {"name", "description", "mode", "sample_sizes", "bin_edges", "bin_masses", "trials",
                          "base_seed", "output"});
  BanditDemoConfig c;
  c.sample_sizes = get_or(j, "sample_sizes", c.sample_sizes);
  c.bin_edges = get_or(j, "bin_edges", c.bin_edges);
  c.bin_masses = get_or(j, "bin_masses", c.bin_masses);
  c.trials = get_count(j, "trials", c.trials);
  c.base_seed = get_or<std::uint64_t>(j, "base_seed", c.base_seed);
  c.output = get_or<std::string>(j, "output", "");
  if (c.trials < 1) throw ConfigError("trials must be >= 1");
  return c;
}

double bandit_ris_estimate(std::span<const double> actions, std::span<const double> rewards,
                           const PiecewiseUniformPolicy& policy, bool* missing_bin) {
  if (actions.empty() || actions.size() != rewards.size()) throw EstimationError("bandit sample is empty or ragged");
  const std::size_t K = policy.masses().size();
  std::vector<double> counts(K, 0.0);
  for (double a : actions) {
    const std::size_t k = policy.bin(a);
    if (k >= K) throw EstimationError("action outside the policy support");
    counts[k] += 1.0;
  }
  const double n = static_cast<double>(actions.size());
  double total = 0.0;
  for (std::size_t i = 0; i < actions.size(); ++i) {
    const std::size_t k = policy.bin(actions[i]);
    // pi(a) / pi_hat(a) with pi_hat the fitted piecewise-constant density.
    total += policy.masses()[k] / (counts[k] / n) * rewards[i];
  }
  if (missing_bin) *missing_bin = std::any_of(counts.begin(), counts.end(), [](double c) { return c == 0.0; });
  return total / n;
}

ExperimentReport bandit_demo(const BanditDemoConfig& config) {
  const PiecewiseUniformPolicy policy(config.bin_edges, config.bin_masses);
  const BanditEnv env;
  ExperimentReport report;
  report.name = "bandit_demo";
  report.base_seed = config.base_seed;
  report.true_value = policy.mean();
  report.trials = config.trials;
  std::vector<ReportRow> ois_rows, ris_rows;
  for (std::size_t m : config.sample_sizes) {
    ReportRow ois{"OIS", m, {}, 0, 0, {}}, ris{"RIS", m, {}, 0, 0, {}};
    std::vector<std::uint64_t> digests;
    for (std::size_t trial = 0; trial < config.trials; ++trial) {
      Rng rng(derive_seed(config.base_seed, trial, "bandit/m=" + std::to_string(m)));
      std::vector<double> actions(m), rewards(m);
      for (std::size_t i = 0; i < m; ++i) {
        const auto tr = sample_trajectory(env, policy, rng);
        actions[i] = tr.actions[0];
        rewards[i] = tr.rewards[0];
      }
      digests.push_back(fnv1a(actions.data(), actions.size() * sizeof(double)));
      double mean = 0.0;
      for (double r : rewards) mean += r;
      ois.estimates.push_back(mean / static_cast<double>(m));
      bool missing = false;
      ris.estimates.push_back(bandit_ris_estimate(actions, rewards, policy, &missing));
      ris.flagged += missing;
    }
    ois.stats = aggregate(ois.estimates, report.true_value);
    ris.stats = aggregate(ris.estimates, report.true_value);
    report.dataset_digests.push_back(std::move(digests));
    ois_rows.push_back(std::move(ois));
    ris_rows.push_back(std::move(ris));
  }
  for (auto& r : ois_rows) report.rows.push_back(std::move(r));
  for (auto& r : ris_rows) report.rows.push_back(std::move(r));
  report.config_digest = fnv1a(nlohmann::json{{"sizes", config.sample_sizes}, {"edges", config.bin_edges},
                                              {"masses", config.bin_masses}, {"trials", config.trials},
                                              {"seed", config.base_seed}}.dump());
  return report;
}

std::vector<double> optimal_q_values(const TabularMdp& mdp, double planning_gamma, std::size_t iterations) {
  const std::size_t S = mdp.n_states, A = mdp.n_actions;
  std::vector<double> q(S * A, 0.0), v(S, 0.0);
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t a = 0; a < A; ++a) {
        if (mdp.is_terminal(static_cast<int>(s))) {
          q[s * A + a] = 0.0;
          continue;
        }
        const auto row = mdp.transition_row(static_cast<int>(s), static_cast<int>(a));
        double cont = 0.0;
        for (std::size_t n = 0; n < S; ++n) cont += row[n] * v[n];
        q[s * A + a] = mdp.r(static_cast<int>(s), static_cast<int>(a)) + planning_gamma * cont;
      }
    }
    for (std::size_t s = 0; s < S; ++s) v[s] = *std::max_element(q.begin() + static_cast<std::ptrdiff_t>(s * A),
                                                                q.begin() + static_cast<std::ptrdiff_t>((s + 1) * A));
  }
  return q;
}

GridworldPolicyPair construct_gridworld_policies(double planning_gamma, double behavior_temperature,
                                                 double evaluation_temperature) {
  const TabularMdp mdp = make_gridworld();
  const auto q = optimal_q_values(mdp, planning_gamma, 1000);
  return {TabularPolicy::softmax(mdp.n_states, mdp.n_actions, q, behavior_temperature),
          TabularPolicy::softmax(mdp.n_states, mdp.n_actions, q, evaluation_temperature)};
}

LdsPolicyPair construct_lds_policies(const LdsEnv& env, std::uint64_t seed, const CemConfig& cem,
                                     std::size_t rollouts_per_candidate) {
  const std::size_t F = poly_feature_count(4, 2);
  const GaussianLinearPolicy initial(Eigen::MatrixXd::Zero(2, static_cast<Eigen::Index>(F)),
                                     Eigen::VectorXd::Constant(2, std::log(0.5)), 4, 2);
  Rng rng(derive_seed(seed, 0, "cem/sampling"));
  const auto objective = lds_return_objective(env, rollouts_per_candidate, derive_seed(seed, 0, "cem/objective"));
  CemResult result = cem_optimize(objective, initial, cem, rng);
  return {result.policy.with_log_std(Eigen::VectorXd::Constant(2, std::log(0.6))),
          result.policy.with_log_std(Eigen::VectorXd::Constant(2, std::log(0.5))),
          std::move(result.population_mean)};
}

}  // namespace opelab
