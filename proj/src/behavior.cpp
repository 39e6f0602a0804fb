#include "opelab/behavior.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace opelab {

std::string SegmentKey::to_string() const {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out << ',';
    out << (i % 2 == 0 ? 's' : 'a') << items[i];
  }
  out << ')';
  return out.str();
}

std::size_t SegmentKeyHash::operator()(const SegmentKey& key) const {
  std::uint64_t h = 0x84222325cbf29ce4ULL;
  for (int v : key.items) h = splitmix64(h ^ static_cast<std::uint32_t>(v));
  return static_cast<std::size_t>(h);
}

SegmentKey segment_key(const TabularTrajectory& traj, std::size_t t, std::size_t history) {
  const std::size_t start = t >= history ? t - history : 0;
  SegmentKey key;
  key.items.reserve(2 * (t - start) + 1);
  for (std::size_t k = start; k < t; ++k) {
    key.items.push_back(traj.states[k]);
    key.items.push_back(traj.actions[k]);
  }
  key.items.push_back(traj.states[t]);
  return key;
}

SegmentCountPolicy::SegmentCountPolicy(std::size_t history, std::size_t n_actions, double alpha)
    : history_(history), n_actions_(n_actions), alpha_(alpha) {
  if (n_actions == 0) throw ConfigError("count policy needs at least one action");
  if (!(alpha >= 0.0)) throw ConfigError("smoothing alpha must be >= 0");
}

void SegmentCountPolicy::add(const SegmentKey& key, int action, std::uint64_t times) {
  if (action < 0 || static_cast<std::size_t>(action) >= n_actions_) throw ConfigError("action out of range");
  if (history_ == 0 && key.items.size() == 1) {
    const auto s = static_cast<std::size_t>(key.items[0]);
    const std::size_t stride = n_actions_ + 1;
    if (dense_.size() < (s + 1) * stride) dense_.resize((s + 1) * stride, 0);
    dense_[s * stride + static_cast<std::size_t>(action)] += times;
    dense_[s * stride + n_actions_] += times;
    return;
  }
  auto& row = sparse_[key];
  if (row.empty()) row.assign(n_actions_ + 1, 0);
  row[static_cast<std::size_t>(action)] += times;
  row[n_actions_] += times;
}

void SegmentCountPolicy::observe(const TabularTrajectory& traj) {
  if (history_ == 0) {
    for (std::size_t t = 0; t < traj.active_steps; ++t) {
      const auto s = static_cast<std::size_t>(traj.states[t]);
      const std::size_t stride = n_actions_ + 1;
      if (dense_.size() < (s + 1) * stride) dense_.resize((s + 1) * stride, 0);
      dense_[s * stride + static_cast<std::size_t>(traj.actions[t])] += 1;
      dense_[s * stride + n_actions_] += 1;
    }
    return;
  }
  for (std::size_t t = 0; t < traj.active_steps; ++t) add(segment_key(traj, t, history_), traj.actions[t]);
}

std::size_t SegmentCountPolicy::segment_count() const {
  std::size_t n = sparse_.size();
  for (std::size_t i = n_actions_; i < dense_.size(); i += n_actions_ + 1) n += dense_[i] > 0;
  return n;
}

const std::uint64_t* SegmentCountPolicy::row(const SegmentKey& key) const {
  if (history_ == 0 && key.items.size() == 1) {
    const auto s = static_cast<std::size_t>(key.items[0]);
    const std::size_t stride = n_actions_ + 1;
    if ((s + 1) * stride > dense_.size() || dense_[s * stride + n_actions_] == 0) return nullptr;
    return dense_.data() + s * stride;
  }
  const auto it = sparse_.find(key);
  return it == sparse_.end() ? nullptr : it->second.data();
}

std::uint64_t SegmentCountPolicy::count(const SegmentKey& key) const {
  const auto* r = row(key);
  return r ? r[n_actions_] : 0;
}

std::uint64_t SegmentCountPolicy::count(const SegmentKey& key, int action) const {
  const auto* r = row(key);
  return r ? r[action] : 0;
}

double SegmentCountPolicy::ratio(const std::uint64_t* counts, int action) const {
  const double c = counts ? static_cast<double>(counts[action]) : 0.0;
  const double total = counts ? static_cast<double>(counts[n_actions_]) : 0.0;
  return (c + alpha_) / (total + alpha_ * static_cast<double>(n_actions_));
}

void SegmentCountPolicy::unseen(const std::string& key) const {
  throw EstimationError("segment " + key + " does not occur in the fitting data");
}

double SegmentCountPolicy::probability(const SegmentKey& key, int action) const {
  const auto* r = row(key);
  if (!r && alpha_ == 0.0) unseen(key.to_string());
  return ratio(r, action);
}

double SegmentCountPolicy::log_prob(const SegmentKey& key, int action) const {
  const double p = probability(key, action);
  return p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
}

double SegmentCountPolicy::action_probability(const TabularTrajectory& traj, std::size_t t) const {
  if (history_ == 0) {
    const auto s = static_cast<std::size_t>(traj.states[t]);
    const std::size_t stride = n_actions_ + 1;
    const std::uint64_t* r = nullptr;
    if ((s + 1) * stride <= dense_.size() && dense_[s * stride + n_actions_] > 0) r = dense_.data() + s * stride;
    if (!r && alpha_ == 0.0) unseen("(s" + std::to_string(s) + ")");
    return ratio(r, traj.actions[t]);
  }
  return probability(segment_key(traj, t, history_), traj.actions[t]);
}

double SegmentCountPolicy::state_probability(int state, int action) const {
  SegmentKey key{{state}};
  const auto* r = row(key);
  if (!r && alpha_ == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return ratio(r, action);
}

double SegmentCountPolicy::log_likelihood(std::span<const TabularTrajectory> data) const {
  double ll = 0.0;
  for (const auto& tr : data)
    for (std::size_t t = 0; t < tr.active_steps; ++t) ll += std::log(action_probability(tr, t));
  return ll;
}

SegmentCountPolicy fit_count_policy(std::span<const TabularTrajectory> data, std::size_t history, double alpha,
                                    std::size_t n_actions) {
  if (data.empty()) throw EstimationError("cannot fit a behavior policy to an empty dataset");
  SegmentCountPolicy policy(history, n_actions, alpha);
  for (const auto& tr : data) policy.observe(tr);
  return policy;
}

void stack_pairs(std::span<const ContinuousTrajectory> data, const PolynomialBasis& basis,
                 Eigen::MatrixXd& features, Eigen::MatrixXd& actions) {
  std::size_t n = 0;
  for (const auto& tr : data) n += tr.active_steps;
  if (n == 0) throw EstimationError("no state-action pairs to fit");
  const auto A = data.front().actions.front().size();
  features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(basis.size()));
  actions.resize(static_cast<Eigen::Index>(n), A);
  // Fill row-major scratch then copy, since Eigen defaults to column-major.
  std::vector<double> row(basis.size());
  Eigen::Index i = 0;
  for (const auto& tr : data) {
    for (std::size_t t = 0; t < tr.active_steps; ++t, ++i) {
      basis.evaluate(tr.states[t], row.data());
      for (std::size_t f = 0; f < row.size(); ++f) features(i, static_cast<Eigen::Index>(f)) = row[f];
      actions.row(i) = tr.actions[t].transpose();
    }
  }
}

GaussianFit fit_gaussian_ols(std::span<const ContinuousTrajectory> data, int feature_order) {
  if (data.empty()) throw EstimationError("cannot fit a behavior policy to an empty dataset");
  const auto state_dim = static_cast<std::size_t>(data.front().states.front().size());
  const PolynomialBasis basis(state_dim, feature_order);
  Eigen::MatrixXd X, Y;
  stack_pairs(data, basis, X, Y);

  GaussianFit fit{GaussianLinearPolicy(Eigen::MatrixXd::Zero(Y.cols(), X.cols()),
                                       Eigen::VectorXd::Zero(Y.cols()), state_dim, feature_order),
                  false};
  Eigen::MatrixXd W;  // F x A
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (X.rows() >= X.cols() && qr.rank() == X.cols()) {
    W = qr.solve(Y);
  } else {
    fit.ridge_fallback = true;
    const Eigen::MatrixXd gram = X.transpose() * X + 1e-8 * Eigen::MatrixXd::Identity(X.cols(), X.cols());
    W = gram.ldlt().solve(X.transpose() * Y);
  }
  const Eigen::MatrixXd resid = Y - X * W;
  Eigen::VectorXd log_std(Y.cols());
  for (Eigen::Index d = 0; d < Y.cols(); ++d)
    log_std[d] = std::log(std::sqrt(resid.col(d).squaredNorm() / static_cast<double>(X.rows())));
  fit.policy = GaussianLinearPolicy(W.transpose(), log_std, state_dim, feature_order);
  return fit;
}

GaussianNllObjective::GaussianNllObjective(const Eigen::MatrixXd& features, const Eigen::MatrixXd& actions,
                                           double l2)
    : pairs_(static_cast<std::size_t>(features.rows())), l2_(l2) {
  gram_.noalias() = features.transpose() * features;
  cross_.noalias() = features.transpose() * actions;
  y_sq_ = actions.array().square().colwise().sum().transpose();
}

Eigen::VectorXd GaussianNllObjective::residual_sq(const Eigen::MatrixXd& weights) const {
  // sum_i (y_id - w_d . z_i)^2 = yy_d - 2 w_d . c_d + w_d G w_d
  Eigen::VectorXd out(weights.rows());
  for (Eigen::Index d = 0; d < weights.rows(); ++d) {
    const Eigen::VectorXd w = weights.row(d).transpose();
    out[d] = std::max(0.0, y_sq_[d] - 2.0 * w.dot(cross_.col(d)) + w.dot(gram_ * w));
  }
  return out;
}

double GaussianNllObjective::value(const Eigen::MatrixXd& weights, const Eigen::VectorXd& log_std) const {
  const Eigen::VectorXd rss = residual_sq(weights);
  const double n = static_cast<double>(pairs_);
  double v = 0.0;
  for (Eigen::Index d = 0; d < weights.rows(); ++d)
    v += 0.5 * rss[d] * std::exp(-2.0 * log_std[d]) + n * log_std[d];
  v += l2_ * weights.rightCols(weights.cols() - 1).squaredNorm();
  return v;
}

void GaussianNllObjective::gradient(const Eigen::MatrixXd& weights, const Eigen::VectorXd& log_std,
                                    Eigen::MatrixXd& grad_w, Eigen::VectorXd& grad_log_std) const {
  const Eigen::VectorXd rss = residual_sq(weights);
  const double n = static_cast<double>(pairs_);
  grad_w.resize(weights.rows(), weights.cols());
  grad_log_std.resize(weights.rows());
  for (Eigen::Index d = 0; d < weights.rows(); ++d) {
    const double inv_var = std::exp(-2.0 * log_std[d]);
    const Eigen::VectorXd w = weights.row(d).transpose();
    grad_w.row(d) = ((gram_ * w - cross_.col(d)) * inv_var).transpose();
    grad_log_std[d] = n - rss[d] * inv_var;
  }
  grad_w.rightCols(weights.cols() - 1) += 2.0 * l2_ * weights.rightCols(weights.cols() - 1);
}

double GaussianNllObjective::mean_nll(const Eigen::MatrixXd& weights, const Eigen::VectorXd& log_std) const {
  const Eigen::VectorXd rss = residual_sq(weights);
  const double n = static_cast<double>(pairs_);
  double v = 0.0;
  for (Eigen::Index d = 0; d < weights.rows(); ++d)
    v += 0.5 * rss[d] * std::exp(-2.0 * log_std[d]) + n * log_std[d];
  return v / n;
}

TrainingTrace fit_gaussian_gd(std::span<const ContinuousTrajectory> train,
                              std::span<const ContinuousTrajectory> validation, const GradientFitConfig& config) {
  if (train.empty() || validation.empty()) throw EstimationError("training and validation sets must be non-empty");
  if (config.checkpoint_interval == 0) throw ConfigError("checkpoint_interval must be >= 1");
  const auto state_dim = static_cast<std::size_t>(train.front().states.front().size());
  const PolynomialBasis basis(state_dim, config.feature_order);
  Eigen::MatrixXd X, Y, Xv, Yv;
  stack_pairs(train, basis, X, Y);
  stack_pairs(validation, basis, Xv, Yv);
  const Eigen::Index F = X.cols(), A = Y.cols();

  // Whitening of the non-constant features, estimated on the training split.
  const Eigen::VectorXd mu = X.rightCols(F - 1).colwise().mean().transpose();
  const Eigen::MatrixXd centered = X.rightCols(F - 1).rowwise() - mu.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(X.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const double floor = 1e-12 * std::max(eig.eigenvalues().maxCoeff(), 1e-300);
  const Eigen::MatrixXd whiten =
      eig.eigenvectors() * eig.eigenvalues().cwiseMax(floor).cwiseSqrt().cwiseInverse().asDiagonal();
  auto transform = [&](const Eigen::MatrixXd& raw) {
    Eigen::MatrixXd z(raw.rows(), F);
    z.col(0).setOnes();
    z.rightCols(F - 1) = (raw.rightCols(F - 1).rowwise() - mu.transpose()) * whiten;
    return z;
  };
  const GaussianNllObjective train_obj(transform(X), Y, config.l2);
  const GaussianNllObjective val_obj(transform(Xv), Yv, 0.0);
  const double n = static_cast<double>(train_obj.pairs());

  auto to_raw = [&](const Eigen::MatrixXd& v, const Eigen::VectorXd& log_std) {
    Eigen::MatrixXd w(A, F);
    w.rightCols(F - 1) = v.rightCols(F - 1) * whiten.transpose();
    w.col(0) = v.col(0) - w.rightCols(F - 1) * mu;
    return GaussianLinearPolicy(w, log_std, state_dim, config.feature_order);
  };

  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(A, F), m_v = v, s_v = v, g_v;
  Eigen::VectorXd ls = Eigen::VectorXd::Zero(A), m_l = ls, s_l = ls, g_l;
  TrainingTrace trace;
  double b1t = 1.0, b2t = 1.0;
  for (std::size_t step = 0;; ++step) {
    if (step % config.checkpoint_interval == 0) {
      const double tr = train_obj.mean_nll(v, ls);
      const double va = val_obj.mean_nll(v, ls);
      if (!std::isfinite(tr) || !v.allFinite()) {
        trace.diverged = true;
        break;
      }
      trace.checkpoints.push_back({step, tr, va, to_raw(v, ls)});
    }
    if (step >= config.max_steps) break;
    train_obj.gradient(v, ls, g_v, g_l);
    // Gradients of the summed objective, rescaled to per-pair units so the
    // Adam epsilon has the same meaning for any dataset size.
    g_v /= n;
    g_l /= n;
    b1t *= config.beta1;
    b2t *= config.beta2;
    m_v = config.beta1 * m_v + (1.0 - config.beta1) * g_v;
    s_v = config.beta2 * s_v + (1.0 - config.beta2) * g_v.cwiseAbs2();
    m_l = config.beta1 * m_l + (1.0 - config.beta1) * g_l;
    s_l = config.beta2 * s_l + (1.0 - config.beta2) * g_l.cwiseAbs2();
    v.array() -= config.learning_rate * (m_v.array() / (1.0 - b1t)) /
                 ((s_v.array() / (1.0 - b2t)).sqrt() + config.epsilon);
    ls.array() -= config.learning_rate * (m_l.array() / (1.0 - b1t)) /
                  ((s_l.array() / (1.0 - b2t)).sqrt() + config.epsilon);
    if (!v.allFinite() || !ls.allFinite()) {
      trace.diverged = true;
      break;
    }
  }
  return trace;
}

EstimatedModel fit_model_counts(std::span<const TabularTrajectory> data, std::size_t n_states,
                                std::size_t n_actions) {
  const std::size_t S = n_states, A = n_actions;
  EstimatedModel model;
  model.n_states = S;
  model.n_actions = A;
  model.transitions.assign(S * A * S, 0.0);
  model.rewards.assign(S * A, 0.0);
  model.visits.assign(S * A, 0);
  std::vector<std::uint64_t> trans_counts(S * A, 0);
  std::vector<double> reward_sum(S * A, 0.0);
  for (const auto& tr : data) {
    for (std::size_t t = 0; t < tr.active_steps; ++t) {
      const std::size_t sa = static_cast<std::size_t>(tr.states[t]) * A + static_cast<std::size_t>(tr.actions[t]);
      model.visits[sa] += 1;
      reward_sum[sa] += tr.rewards[t];
      if (t + 1 < tr.length()) {
        model.transitions[sa * S + static_cast<std::size_t>(tr.states[t + 1])] += 1.0;
        trans_counts[sa] += 1;
      }
    }
  }
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t a = 0; a < A; ++a) {
      const std::size_t sa = s * A + a;
      if (model.visits[sa] > 0) model.rewards[sa] = reward_sum[sa] / static_cast<double>(model.visits[sa]);
      double* row = model.transitions.data() + sa * S;
      if (trans_counts[sa] == 0) {
        row[s] = 1.0;
        continue;
      }
      const double total = static_cast<double>(trans_counts[sa]);
      for (std::size_t n = 0; n < S; ++n) row[n] /= total;
    }
  }
  return model;
}

}  // namespace opelab
