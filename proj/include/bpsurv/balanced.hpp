#pragma once

#include <optional>

#include "bpsurv/balance_qp.hpp"
#include "bpsurv/kernel.hpp"

namespace bpsurv {

enum class BalancedMode { weighted, dr };

/// Objective with the shared kernel of `cfg` and Lambda = noise_variance * I.
inline BalanceObjective make_balance_objective(const CensoredDataset& ds, const PolicyMatrix& policy,
                                               const KernelConfig& cfg, double noise_variance) {
  BalanceObjective obj;
  obj.K = gram(ds.X, cfg).K;
  obj.gamma = cfg.gamma.size() == ds.m ? cfg.gamma : Vector::Ones(ds.m);
  obj.lambda = Vector::Constant(static_cast<Eigen::Index>(ds.n()), noise_variance);
  obj.policy = policy;
  obj.arms = ds.arm;
  obj.validate();
  return obj;
}

/// Balanced weights for `policy` followed by the weighted or doubly robust
/// estimator applied to the imputed outcomes.
inline EvalReport balanced_estimate(const CensoredDataset& ds, const PolicyMatrix& policy,
                                    const ImputedOutcomes& imputed, const KernelConfig& cfg, const GpFit& gpfit,
                                    BalancedMode mode, const std::optional<Matrix>& muhat = std::nullopt,
                                    const QpOptions& qp = {}) {
  if (mode == BalancedMode::dr && !muhat) throw ConfigError("doubly robust mode needs an outcome model");
  const auto obj = make_balance_objective(ds, policy, cfg, gpfit.noise_variance);
  const BalanceProblem problem(obj);
  const auto sol = problem.solve(qp);
  EvalReport r = mode == BalancedMode::dr ? dr_estimator(policy, sol.weights, *muhat, imputed.yhat, ds.arm)
                                          : weighted_estimator(sol.weights, imputed.yhat);
  const auto cm = cmse_objective(sol.weights, obj);
  r.worst_case_bias = cm.bias;
  r.variance_term = cm.variance_term;
  r.objective = cm.objective;
  r.floor_hits = imputed.floor_hits;
  r.converged = sol.weights.converged;
  return r;
}

}  // namespace bpsurv
