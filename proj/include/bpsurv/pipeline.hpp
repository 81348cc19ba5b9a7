#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bpsurv/balanced.hpp"
#include "bpsurv/estimators.hpp"
#include "bpsurv/policy.hpp"
#include "bpsurv/propensity.hpp"
#include "bpsurv/survival.hpp"

namespace bpsurv {

enum class Method { reg, ipw_ipcw, ipw_imputed, balanced, balanced_dr };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::reg: return "reg";
    case Method::ipw_ipcw: return "ipw_ipcw";
    case Method::ipw_imputed: return "ipw_imputed";
    case Method::balanced: return "balanced";
    case Method::balanced_dr: return "balanced_dr";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (auto m : {Method::reg, Method::ipw_ipcw, Method::ipw_imputed, Method::balanced, Method::balanced_dr})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown method '" + s + "'");
}

inline RewardTransform parse_transform(const std::string& s) {
  if (s == "identity") return RewardTransform::identity;
  if (s == "log") return RewardTransform::log;
  throw ConfigError("unknown transform '" + s + "' (expected identity or log)");
}

inline const char* to_string(RewardTransform g) { return g == RewardTransform::log ? "log" : "identity"; }

/// Settings shared by every stage of a single analysis.
struct PipelineOptions {
  RewardTransform transform = RewardTransform::log;
  std::optional<double> bandwidth;
  double survival_floor = kSurvivalFloor;
  TuneOptions tune;
  PropensityOptions propensity;
  LearnConfig learn;
  QpOptions qp;
};

/// Nuisance fits for one dataset: imputed outcomes, GP kernel and noise,
/// per-arm outcome model, propensity model and censoring survival at Y-.
struct PreparedData {
  CensoredDataset ds;
  ImputedOutcomes imputed;
  GpFit gp;
  Matrix muhat;
  PropensityModel propensity;
  Vector censor_survival;
  Vector observed_outcomes;
};

inline PreparedData prepare(const CensoredDataset& ds, const PipelineOptions& opt) {
  ds.validate();
  for (std::size_t i = 0; i < ds.n(); ++i)
    if (opt.transform == RewardTransform::log && !(ds.y[static_cast<Eigen::Index>(i)] > 0.0))
      throw DataError("log transform needs positive times (row " + std::to_string(i + 1) + ")");
  PreparedData p;
  p.ds = ds;
  const auto event_model = fit_beran(ds, opt.bandwidth, SurvivalTarget::event);
  p.imputed = impute(ds, event_model, opt.transform, opt.survival_floor);
  p.gp = tune_hyperparameters(ds, p.imputed.yhat, opt.tune);
  p.muhat = gp_arm_means(ds, p.imputed.yhat, p.gp, ds.X);
  p.propensity = fit_propensity(ds, opt.propensity);
  const auto censor_model = fit_beran(ds, opt.bandwidth, SurvivalTarget::censoring);
  p.censor_survival = censoring_survival_at_observed(censor_model, ds);
  p.observed_outcomes.resize(static_cast<Eigen::Index>(ds.n()));
  for (Eigen::Index i = 0; i < p.observed_outcomes.size(); ++i)
    p.observed_outcomes[i] = apply_transform(opt.transform, ds.y[i]);
  return p;
}

/// Learns a softmax-linear policy with the given estimator as objective.
inline LearnResult learn_policy(const PreparedData& p, Method method, const PipelineOptions& opt) {
  switch (method) {
    case Method::reg: return learn_regression(p.ds, p.muhat, opt.learn);
    case Method::ipw_ipcw:
      return learn_weighted_baseline(p.ds, p.observed_outcomes, WeightRule::ipw_ipcw, p.propensity, p.censor_survival,
                                     opt.learn, opt.survival_floor);
    case Method::ipw_imputed:
      return learn_weighted_baseline(p.ds, p.imputed.yhat, WeightRule::ipw, p.propensity, std::nullopt, opt.learn);
    case Method::balanced:
    case Method::balanced_dr: {
      const auto mode = method == Method::balanced ? BalancedMode::weighted : BalancedMode::dr;
      const BalancedPolicyObjective obj(p.ds, p.imputed, p.gp.hyperparams, p.gp, mode,
                                        mode == BalancedMode::dr ? std::optional<Matrix>(p.muhat) : std::nullopt,
                                        opt.qp);
      return learn_balanced(obj, p.ds.m, opt.learn);
    }
  }
  throw ConfigError("unknown method");
}

/// Value of a fixed policy under one estimator.
inline EvalReport evaluate_policy(const PreparedData& p, const PolicyMatrix& pi, Method method,
                                  const PipelineOptions& opt) {
  validate_policy(pi, 1e-9);
  require_dims(pi.rows() == static_cast<Eigen::Index>(p.ds.n()) && pi.cols() == p.ds.m, "policy vs dataset");
  const Matrix probs = p.propensity.predict(p.ds.X);
  switch (method) {
    case Method::reg: return reg_estimator(pi, p.muhat);
    case Method::ipw_ipcw: {
      auto w = ipw_ipcw_weights(pi, probs, p.censor_survival, p.ds, p.propensity.clip, opt.survival_floor);
      return weighted_estimator(w, p.observed_outcomes);
    }
    case Method::ipw_imputed: {
      auto w = ipw_weights(pi, probs, p.ds.arm, p.propensity.clip);
      auto r = weighted_estimator(w, p.imputed.yhat);
      r.floor_hits = p.imputed.floor_hits;
      return r;
    }
    case Method::balanced:
      return balanced_estimate(p.ds, pi, p.imputed, p.gp.hyperparams, p.gp, BalancedMode::weighted, std::nullopt,
                               opt.qp);
    case Method::balanced_dr:
      return balanced_estimate(p.ds, pi, p.imputed, p.gp.hyperparams, p.gp, BalancedMode::dr, p.muhat, opt.qp);
  }
  throw ConfigError("unknown method");
}

}  // namespace bpsurv
