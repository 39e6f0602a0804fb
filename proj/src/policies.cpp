#include "opelab/policies.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace opelab {

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;

void check_row(std::span<const double> row, std::size_t s) {
  double sum = 0.0;
  for (double p : row) {
    if (!(p >= 0.0 && p <= 1.0))
      throw ConfigError("policy row " + std::to_string(s) + " has a probability outside [0,1]");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("policy row " + std::to_string(s) + " does not sum to 1");
}

}  // namespace

TabularPolicy::TabularPolicy(std::size_t n_states, std::size_t n_actions, std::vector<double> probabilities)
    : n_states_(n_states), n_actions_(n_actions), probs_(std::move(probabilities)) {
  if (n_states_ == 0 || n_actions_ == 0) throw ConfigError("policy: empty state or action space");
  if (probs_.size() != n_states_ * n_actions_) throw ConfigError("policy: table has the wrong size");
  for (std::size_t s = 0; s < n_states_; ++s) check_row(row(static_cast<int>(s)), s);
}

TabularPolicy TabularPolicy::softmax(std::size_t n_states, std::size_t n_actions,
                                     std::vector<double> theta, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
  if (theta.size() != n_states * n_actions) throw ConfigError("softmax theta has the wrong size");
  std::vector<double> probs(theta.size());
  for (std::size_t s = 0; s < n_states; ++s) {
    const double* th = theta.data() + s * n_actions;
    double* p = probs.data() + s * n_actions;
    const double mx = *std::max_element(th, th + n_actions);
    double z = 0.0;
    for (std::size_t a = 0; a < n_actions; ++a) z += p[a] = std::exp((th[a] - mx) / temperature);
    for (std::size_t a = 0; a < n_actions; ++a) p[a] /= z;
  }
  TabularPolicy out(n_states, n_actions, std::move(probs));
  out.softmax_ = SoftmaxParameters{std::move(theta), temperature};
  return out;
}

TabularPolicy TabularPolicy::uniform(std::size_t n_states, std::size_t n_actions) {
  return softmax(n_states, n_actions, std::vector<double>(n_states * n_actions, 0.0), 1.0);
}

double TabularPolicy::log_prob(int s, int a) const {
  const double p = probability(s, a);
  return p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
}

int TabularPolicy::sample(int s, Rng& rng) const {
  const auto r = row(s);
  const double u = uniform01(rng);
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t a = 0; a < r.size(); ++a) {
    if (r[a] <= 0.0) continue;
    acc += r[a];
    last = a;
    if (u < acc) return static_cast<int>(a);
  }
  return static_cast<int>(last);
}

double TabularPolicy::entropy(int s) const {
  double h = 0.0;
  for (double p : row(s))
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

PolynomialBasis::PolynomialBasis(std::size_t dim, int order) : dim_(dim), order_(order) {
  if (order < 1) throw ConfigError("polynomial order must be >= 1");
  if (dim == 0) throw ConfigError("polynomial basis needs at least one coordinate");
  // Enumerate exponent tuples in lexicographic order, keeping total degree <= order.
  std::vector<int> e(dim, 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t i, int budget) {
    if (i == dim) {
      exponents_.push_back(e);
      return;
    }
    for (int k = 0; k <= budget; ++k) {
      e[i] = k;
      rec(i + 1, budget - k);
    }
    e[i] = 0;
  };
  rec(0, order);
}

void PolynomialBasis::evaluate(const Eigen::VectorXd& state, double* out) const {
  if (static_cast<std::size_t>(state.size()) != dim_)
    throw ConfigError("state dimension does not match the feature basis");
  for (std::size_t k = 0; k < exponents_.size(); ++k) {
    double v = 1.0;
    const auto& e = exponents_[k];
    for (std::size_t i = 0; i < dim_; ++i)
      for (int p = 0; p < e[i]; ++p) v *= state[static_cast<Eigen::Index>(i)];
    out[k] = v;
  }
}

Eigen::VectorXd PolynomialBasis::operator()(const Eigen::VectorXd& state) const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(size()));
  evaluate(state, out.data());
  return out;
}

Eigen::VectorXd poly_features(const Eigen::VectorXd& state, int order) {
  return PolynomialBasis(static_cast<std::size_t>(state.size()), order)(state);
}

std::size_t poly_feature_count(std::size_t dim, int order) {
  // C(dim + order, order)
  std::size_t c = 1;
  for (int k = 1; k <= order; ++k) c = c * (dim + static_cast<std::size_t>(k)) / static_cast<std::size_t>(k);
  return c;
}

GaussianLinearPolicy::GaussianLinearPolicy(Eigen::MatrixXd weights, Eigen::VectorXd log_std,
                                           std::size_t state_dim, int feature_order)
    : weights_(std::move(weights)), log_std_(std::move(log_std)), basis_(state_dim, feature_order) {
  if (static_cast<std::size_t>(weights_.cols()) != basis_.size())
    throw ConfigError("weight matrix has " + std::to_string(weights_.cols()) + " columns, expected " +
                      std::to_string(basis_.size()));
  if (log_std_.size() != weights_.rows())
    throw ConfigError("log_std length must equal the action dimension");
  if (log_std_.array().isNaN().any() || (log_std_.array() == std::numeric_limits<double>::infinity()).any())
    throw ConfigError("log_std must be finite or -inf");
}

Eigen::VectorXd GaussianLinearPolicy::mean(const Eigen::VectorXd& state) const {
  return weights_ * basis_(state);
}

double GaussianLinearPolicy::log_prob_from_features(const Eigen::VectorXd& features,
                                                    const Eigen::VectorXd& action) const {
  if (action.size() != weights_.rows()) throw ConfigError("action dimension mismatch");
  double lp = 0.0;
  for (Eigen::Index d = 0; d < action.size(); ++d) {
    const double mu = weights_.row(d).dot(features);
    const double sd = std::exp(log_std_[d]);
    if (sd == 0.0) {
      if (action[d] != mu) return -std::numeric_limits<double>::infinity();
      continue;  // point mass: treated as density 1 so deterministic runs stay finite
    }
    const double z = (action[d] - mu) / sd;
    lp += -0.5 * z * z - log_std_[d] - 0.5 * kLogTwoPi;
  }
  return lp;
}

double GaussianLinearPolicy::log_prob(const Eigen::VectorXd& state, const Eigen::VectorXd& action) const {
  return log_prob_from_features(basis_(state), action);
}

Eigen::VectorXd GaussianLinearPolicy::sample(const Eigen::VectorXd& state, Rng& rng) const {
  Eigen::VectorXd a = mean(state);
  for (Eigen::Index d = 0; d < a.size(); ++d) {
    const double sd = std::exp(log_std_[d]);
    if (sd > 0.0) a[d] += sd * standard_normal(rng);
  }
  return a;
}

GaussianLinearPolicy GaussianLinearPolicy::with_log_std(Eigen::VectorXd log_std) const {
  return GaussianLinearPolicy(weights_, std::move(log_std), state_dim(), feature_order());
}

GaussianLinearPolicy GaussianLinearPolicy::with_weights(Eigen::MatrixXd weights) const {
  return GaussianLinearPolicy(std::move(weights), log_std_, state_dim(), feature_order());
}

PiecewiseUniformPolicy::PiecewiseUniformPolicy(std::vector<double> edges, std::vector<double> masses)
    : edges_(std::move(edges)), masses_(std::move(masses)) {
  if (edges_.size() < 2 || masses_.size() + 1 != edges_.size())
    throw ConfigError("piecewise policy needs k+1 edges for k masses");
  for (std::size_t i = 0; i + 1 < edges_.size(); ++i)
    if (!(edges_[i] < edges_[i + 1])) throw ConfigError("piecewise edges must increase");
  const double total = std::accumulate(masses_.begin(), masses_.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-12 || std::any_of(masses_.begin(), masses_.end(), [](double m) { return m < 0; }))
    throw ConfigError("piecewise masses must be a distribution");
}

std::size_t PiecewiseUniformPolicy::bin(double action) const {
  if (action < edges_.front() || action > edges_.back()) return masses_.size();
  const auto it = std::upper_bound(edges_.begin(), edges_.end(), action);
  const auto k = static_cast<std::size_t>(it - edges_.begin());
  return k == 0 ? 0 : std::min(k - 1, masses_.size() - 1);
}

double PiecewiseUniformPolicy::density(double action) const {
  const std::size_t k = bin(action);
  if (k >= masses_.size()) return 0.0;
  return masses_[k] / (edges_[k + 1] - edges_[k]);
}

double PiecewiseUniformPolicy::sample(Rng& rng) const {
  const double u = uniform01(rng);
  double acc = 0.0;
  std::size_t k = 0;
  for (; k + 1 < masses_.size(); ++k) {
    acc += masses_[k];
    if (u < acc) break;
  }
  return edges_[k] + (edges_[k + 1] - edges_[k]) * uniform01(rng);
}

double PiecewiseUniformPolicy::mean() const {
  double m = 0.0;
  for (std::size_t k = 0; k < masses_.size(); ++k) m += masses_[k] * 0.5 * (edges_[k] + edges_[k + 1]);
  return m;
}

CemResult cem_optimize(const PolicyObjective& objective, const GaussianLinearPolicy& initial,
                       const CemConfig& config, Rng& rng) {
  if (config.population < 2) throw ConfigError("cem: population must be >= 2");
  if (!(config.elite_fraction > 0.0 && config.elite_fraction <= 1.0))
    throw ConfigError("cem: elite_fraction must lie in (0, 1]");
  const Eigen::Index n = initial.weights().size();
  const Eigen::Index rows = initial.weights().rows(), cols = initial.weights().cols();
  Eigen::VectorXd mean = Eigen::Map<const Eigen::VectorXd>(initial.weights().data(), n);
  Eigen::VectorXd std = Eigen::VectorXd::Constant(n, config.initial_std);
  const auto n_elite = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(config.elite_fraction * static_cast<double>(config.population))));

  CemResult result{initial, {}};
  std::vector<Eigen::VectorXd> samples(config.population);
  std::vector<double> scores(config.population);
  std::vector<std::size_t> order(config.population);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    double total = 0.0;
    for (std::size_t k = 0; k < config.population; ++k) {
      Eigen::VectorXd x(n);
      for (Eigen::Index i = 0; i < n; ++i) x[i] = mean[i] + std[i] * standard_normal(rng);
      samples[k] = x;
      const double score = objective(initial.with_weights(Eigen::Map<Eigen::MatrixXd>(x.data(), rows, cols)));
      scores[k] = std::isfinite(score) ? score : -std::numeric_limits<double>::infinity();
      total += scores[k];
    }
    result.population_mean.push_back(total / static_cast<double>(config.population));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    Eigen::VectorXd new_mean = Eigen::VectorXd::Zero(n);
    for (std::size_t e = 0; e < n_elite; ++e) new_mean += samples[order[e]];
    new_mean /= static_cast<double>(n_elite);
    Eigen::VectorXd var = Eigen::VectorXd::Zero(n);
    for (std::size_t e = 0; e < n_elite; ++e) var += (samples[order[e]] - new_mean).cwiseAbs2();
    var /= static_cast<double>(n_elite);
    mean = new_mean;
    std = var.cwiseSqrt().cwiseMax(config.min_std);
  }
  result.policy = initial.with_weights(Eigen::Map<Eigen::MatrixXd>(mean.data(), rows, cols));
  return result;
}

PolicyObjective lds_return_objective(const LdsEnv& env, std::size_t rollouts, std::uint64_t seed) {
  return [env, rollouts, seed](const GaussianLinearPolicy& policy) {
    Rng rng(seed);
    double total = 0.0;
    for (std::size_t i = 0; i < rollouts; ++i) total += trajectory_return(sample_trajectory(env, policy, rng), env.gamma);
    return total / static_cast<double>(rollouts);
  };
}

KlResult kl_tabular(const ProbabilityFn& p, const ProbabilityFn& q, std::size_t n_actions,
                    std::span<const double> state_weights) {
  KlResult out;
  for (std::size_t s = 0; s < state_weights.size(); ++s) {
    const double w = state_weights[s];
    if (w <= 0.0) continue;
    double kl = 0.0;
    for (std::size_t a = 0; a < n_actions; ++a) {
      const double pa = p(static_cast<int>(s), static_cast<int>(a));
      if (pa <= 0.0) continue;
      const double qa = q(static_cast<int>(s), static_cast<int>(a));
      if (!(qa > 0.0)) {
        out.support_violation = true;
        out.value = std::numeric_limits<double>::infinity();
        return out;
      }
      kl += pa * std::log(pa / qa);
    }
    out.value += w * std::max(kl, 0.0);
  }
  return out;
}

KlResult kl_tabular(const TabularPolicy& p, const TabularPolicy& q, std::span<const double> state_weights) {
  if (p.n_states() != q.n_states() || p.n_actions() != q.n_actions())
    throw ConfigError("kl_tabular: policy shapes differ");
  return kl_tabular([&](int s, int a) { return p.probability(s, a); },
                    [&](int s, int a) { return q.probability(s, a); }, p.n_actions(), state_weights);
}

nlohmann::json policy_to_json(const TabularPolicy& policy) {
  nlohmann::json j;
  j["n_states"] = policy.n_states();
  j["n_actions"] = policy.n_actions();
  auto table = [&](const std::vector<double>& flat) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t s = 0; s < policy.n_states(); ++s)
      rows.push_back(std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(s * policy.n_actions()),
                                         flat.begin() + static_cast<std::ptrdiff_t>((s + 1) * policy.n_actions())));
    return rows;
  };
  if (const auto& sp = policy.softmax_parameters()) {
    j["kind"] = "tabular_softmax";
    j["theta"] = table(sp->theta);
    j["temperature"] = sp->temperature;
  } else {
    j["kind"] = "tabular";
    j["probabilities"] = table(policy.table());
  }
  return j;
}

nlohmann::json policy_to_json(const GaussianLinearPolicy& policy) {
  if (!policy.log_std().allFinite()) throw ConfigError("cannot serialize a policy with infinite log_std");
  nlohmann::json j;
  j["kind"] = "gaussian_linear";
  j["state_dim"] = policy.state_dim();
  j["feature_order"] = policy.feature_order();
  nlohmann::json w = nlohmann::json::array();
  for (Eigen::Index r = 0; r < policy.weights().rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(policy.weights().cols()));
    for (Eigen::Index c = 0; c < policy.weights().cols(); ++c) row[static_cast<std::size_t>(c)] = policy.weights()(r, c);
    w.push_back(row);
  }
  j["W"] = w;
  j["log_std"] = std::vector<double>(policy.log_std().data(), policy.log_std().data() + policy.log_std().size());
  return j;
}

namespace {

std::vector<double> flatten_table(const nlohmann::json& rows, std::size_t& n_rows, std::size_t& n_cols,
                                  const char* what) {
  if (!rows.is_array() || rows.empty()) throw ConfigError(std::string(what) + " must be a non-empty 2-d array");
  n_rows = rows.size();
  n_cols = rows[0].size();
  std::vector<double> flat;
  flat.reserve(n_rows * n_cols);
  for (const auto& r : rows) {
    if (!r.is_array() || r.size() != n_cols) throw ConfigError(std::string(what) + " rows have unequal length");
    for (const auto& v : r) {
      if (!v.is_number()) throw ConfigError(std::string(what) + " entries must be numbers");
      flat.push_back(v.get<double>());
    }
  }
  return flat;
}

}  // namespace

AnyPolicy policy_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("kind")) throw ConfigError("policy JSON needs a 'kind'");
  const std::string kind = j["kind"].get<std::string>();
  std::size_t rows = 0, cols = 0;
  if (kind == "tabular_softmax") {
    auto theta = flatten_table(j.at("theta"), rows, cols, "theta");
    return TabularPolicy::softmax(rows, cols, std::move(theta), j.value("temperature", 1.0));
  }
  if (kind == "tabular") {
    auto probs = flatten_table(j.at("probabilities"), rows, cols, "probabilities");
    return TabularPolicy(rows, cols, std::move(probs));
  }
  if (kind == "gaussian_linear") {
    auto flat = flatten_table(j.at("W"), rows, cols, "W");
    Eigen::MatrixXd w(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = flat[r * cols + c];
    const auto ls = j.at("log_std").get<std::vector<double>>();
    Eigen::VectorXd log_std = Eigen::Map<const Eigen::VectorXd>(ls.data(), static_cast<Eigen::Index>(ls.size()));
    return GaussianLinearPolicy(std::move(w), std::move(log_std), j.value("state_dim", std::size_t{4}),
                                j.value("feature_order", 2));
  }
  throw ConfigError("unknown policy kind '" + kind + "'");
}

AnyPolicy load_policy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open policy file " + path.string());
  try {
    return policy_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("policy file " + path.string() + ": " + e.what());
  }
}

void save_policy(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

}  // namespace opelab
