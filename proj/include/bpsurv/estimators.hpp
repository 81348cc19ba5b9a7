#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "bpsurv/dataset.hpp"
#include "bpsurv/propensity.hpp"
#include "bpsurv/survival.hpp"

namespace bpsurv {

/// Nonnegative weights normalized to sum to n.
struct WeightVector {
  Vector w;
  bool converged = true;
  int iterations = 0;
  std::size_t clip_hits = 0;
  std::size_t floor_hits = 0;

  [[nodiscard]] Eigen::Index size() const { return w.size(); }
};

inline Vector normalize_to_n(const Vector& raw) {
  const double total = raw.sum();
  if (!(total > 0.0) || !std::isfinite(total)) throw DataError("degenerate weights: cannot normalize to n");
  return raw * (static_cast<double>(raw.size()) / total);
}

enum class EstimatorKind { regression, weighted, doubly_robust };

inline const char* to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::regression: return "regression";
    case EstimatorKind::weighted: return "weighted";
    case EstimatorKind::doubly_robust: return "doubly_robust";
  }
  return "unknown";
}

/// Point estimate plus worst-case CMSE diagnostics (zero where not applicable).
struct EvalReport {
  double estimate = 0.0;
  double worst_case_bias = 0.0;
  double variance_term = 0.0;
  double objective = 0.0;
  EstimatorKind kind = EstimatorKind::weighted;
  bool converged = true;
  std::size_t clip_hits = 0;
  std::size_t floor_hits = 0;
  Vector weights;
};

/// Plug-in value (1/n) sum_i sum_a pi_a(X_i) muhat_a(X_i).
inline EvalReport reg_estimator(const PolicyMatrix& policy, const Matrix& muhat) {
  require_dims(policy.rows() == muhat.rows() && policy.cols() == muhat.cols(), "policy vs outcome model");
  EvalReport r;
  r.kind = EstimatorKind::regression;
  r.estimate = policy.cwiseProduct(muhat).sum() / static_cast<double>(policy.rows());
  return r;
}

/// Clipped propensity of the received arm, max(M, phi_{A_i}(X_i)).
inline Vector clipped_received_propensity(const Matrix& probs, const std::vector<int>& arms, double clip,
                                          std::size_t* clip_hits = nullptr) {
  require_dims(static_cast<std::size_t>(probs.rows()) == arms.size(), "propensities vs arms");
  Vector out(probs.rows());
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const double p = probs(i, arms[static_cast<std::size_t>(i)]);
    if (p < clip) ++hits;
    out[i] = std::max(clip, p);
  }
  if (clip_hits) *clip_hits = hits;
  return out;
}

/// pi_{A_i}(X_i) / max(M, phi_{A_i}(X_i)), normalized to sum to n.
inline WeightVector ipw_weights(const PolicyMatrix& policy, const Matrix& propensity_probs,
                                const std::vector<int>& arms, double clip) {
  require_dims(policy.rows() == propensity_probs.rows() && policy.cols() == propensity_probs.cols(),
               "policy vs propensities");
  WeightVector out;
  const Vector denom = clipped_received_propensity(propensity_probs, arms, clip, &out.clip_hits);
  Vector raw(policy.rows());
  for (Eigen::Index i = 0; i < raw.size(); ++i) raw[i] = policy(i, arms[static_cast<std::size_t>(i)]) / denom[i];
  out.w = normalize_to_n(raw);
  return out;
}

inline WeightVector ipw_weights(const PolicyMatrix& policy, const PropensityModel& prop, const Matrix& X,
                                const std::vector<int>& arms) {
  return ipw_weights(policy, prop.predict(X), arms, prop.clip);
}

/// pi_{A_i}(X_i) Delta_i / (max(M, phi) max(floor, G(Y_i- | X_i, A_i))), normalized to n.
inline WeightVector ipw_ipcw_weights(const PolicyMatrix& policy, const Matrix& propensity_probs,
                                     const Vector& censor_survival, const CensoredDataset& ds, double clip,
                                     double floor = kSurvivalFloor) {
  require_dims(censor_survival.size() == static_cast<Eigen::Index>(ds.n()), "censoring survival vs dataset");
  WeightVector out;
  const Vector denom = clipped_received_propensity(propensity_probs, ds.arm, clip, &out.clip_hits);
  Vector raw = Vector::Zero(policy.rows());
  for (Eigen::Index i = 0; i < raw.size(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (!ds.event[k]) continue;
    if (censor_survival[i] < floor) ++out.floor_hits;
    raw[i] = policy(i, ds.arm[k]) / (denom[i] * std::max(floor, censor_survival[i]));
  }
  out.w = normalize_to_n(raw);
  return out;
}

/// G(Y_i- | X_i, A_i) from a censoring-target Beran model.
inline Vector censoring_survival_at_observed(const BeranModel& ghat, const CensoredDataset& ds) {
  if (ghat.target() != SurvivalTarget::censoring) throw ConfigError("IPCW needs a censoring-target survival model");
  Vector out(static_cast<Eigen::Index>(ds.n()));
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out[r] = ghat.predict(ds.X.row(r).transpose(), ds.arm[i]).before(ds.y[r]);
  }
  return out;
}

inline WeightVector ipw_ipcw_weights(const PolicyMatrix& policy, const PropensityModel& prop, const BeranModel& ghat,
                                     const CensoredDataset& ds, double floor = kSurvivalFloor) {
  return ipw_ipcw_weights(policy, prop.predict(ds.X), censoring_survival_at_observed(ghat, ds), ds, prop.clip, floor);
}

/// (1/n) sum_i w_i y_i.
inline EvalReport weighted_estimator(const WeightVector& weights, const Vector& outcomes) {
  require_dims(weights.size() == outcomes.size(), "weights vs outcomes");
  EvalReport r;
  r.kind = EstimatorKind::weighted;
  r.estimate = weights.w.dot(outcomes) / static_cast<double>(outcomes.size());
  r.converged = weights.converged;
  r.clip_hits = weights.clip_hits;
  r.floor_hits = weights.floor_hits;
  r.weights = weights.w;
  return r;
}

/// Regression term plus (1/n) sum_i w_i (y_i - muhat_{A_i}(X_i)).
inline EvalReport dr_estimator(const PolicyMatrix& policy, const WeightVector& weights, const Matrix& muhat,
                               const Vector& outcomes, const std::vector<int>& arms) {
  require_dims(weights.size() == outcomes.size() && policy.rows() == outcomes.size() &&
                   static_cast<std::size_t>(outcomes.size()) == arms.size(),
               "policy/weights/outcomes/arms lengths");
  EvalReport r = reg_estimator(policy, muhat);
  double corr = 0.0;
  for (Eigen::Index i = 0; i < outcomes.size(); ++i)
    corr += weights.w[i] * (outcomes[i] - muhat(i, arms[static_cast<std::size_t>(i)]));
  r.estimate += corr / static_cast<double>(outcomes.size());
  r.kind = EstimatorKind::doubly_robust;
  r.converged = weights.converged;
  r.clip_hits = weights.clip_hits;
  r.floor_hits = weights.floor_hits;
  r.weights = weights.w;
  return r;
}

/// Worst-case CMSE over the unit ball of the product RKHS (p = 2) with a
/// kernel shared across arms:
///   bias^2 = sum_a gamma_a^2 v_a^T K v_a / n^2,  v_{a,i} = w_i [A_i = a] - pi_a(X_i),
///   variance_term = sum_i lambda_i w_i^2 / n^2.
struct BalanceObjective {
  Matrix K;
  Vector gamma;
  Vector lambda;
  PolicyMatrix policy;
  std::vector<int> arms;

  [[nodiscard]] Eigen::Index n() const { return K.rows(); }
  [[nodiscard]] int m() const { return static_cast<int>(policy.cols()); }

  void validate() const {
    const Eigen::Index n = K.rows();
    require_dims(K.cols() == n && lambda.size() == n && policy.rows() == n &&
                     arms.size() == static_cast<std::size_t>(n) && gamma.size() == policy.cols(),
                 "balance objective components");
    if ((lambda.array() <= 0.0).any()) throw ConfigError("lambda diagonal must be strictly positive");
    if ((gamma.array() <= 0.0).any()) throw ConfigError("gamma entries must be positive");
  }

  /// v_a for every arm as the columns of an n x m matrix.
  [[nodiscard]] Matrix imbalance(const Vector& w) const {
    Matrix V = -policy;
    for (Eigen::Index i = 0; i < w.size(); ++i) V(i, arms[static_cast<std::size_t>(i)]) += w[i];
    return V;
  }

  [[nodiscard]] double bias_squared(const Vector& w) const {
    require_dims(w.size() == n(), "weights vs objective");
    const Matrix V = imbalance(w);
    const Matrix KV = K * V;
    double total = 0.0;
    for (int a = 0; a < m(); ++a) total += gamma[a] * gamma[a] * V.col(a).dot(KV.col(a));
    const double nn = static_cast<double>(n());
    return std::max(0.0, total) / (nn * nn);
  }

  [[nodiscard]] double variance_term(const Vector& w) const {
    const double nn = static_cast<double>(n());
    return w.cwiseAbs2().dot(lambda) / (nn * nn);
  }
};

/// sup over the unit ball of |B(W, pi; f)|.
inline double worst_case_bias(const WeightVector& weights, const BalanceObjective& obj) {
  return std::sqrt(obj.bias_squared(weights.w));
}

struct CmseValue {
  double objective = 0.0;
  double bias = 0.0;
  double variance_term = 0.0;
};

inline CmseValue cmse_objective(const WeightVector& weights, const BalanceObjective& obj) {
  CmseValue out;
  const double b2 = obj.bias_squared(weights.w);
  out.bias = std::sqrt(b2);
  out.variance_term = obj.variance_term(weights.w);
  out.objective = b2 + out.variance_term;
  return out;
}

/// B(W, pi; f) = (1/n) sum_i sum_a (w_i [A_i = a] - pi_a(X_i)) f_a(X_i) for
/// arm functions evaluated at the sample (n x m).
inline double conditional_bias(const Vector& w, const PolicyMatrix& policy, const std::vector<int>& arms,
                               const Matrix& f_values) {
  Matrix V = -policy;
  for (Eigen::Index i = 0; i < w.size(); ++i) V(i, arms[static_cast<std::size_t>(i)]) += w[i];
  return V.cwiseProduct(f_values).sum() / static_cast<double>(w.size());
}

}  // namespace bpsurv
