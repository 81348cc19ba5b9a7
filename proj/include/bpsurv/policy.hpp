#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "bpsurv/balanced.hpp"
#include "bpsurv/parallel.hpp"
#include "bpsurv/propensity.hpp"
#include "bpsurv/simulate.hpp"
#include "bpsurv/survival.hpp"

namespace bpsurv {

/// Softmax-linear policy pi_a(x) proportional to exp(beta_a0 + beta_a^T x).
struct PolicyParams {
  Matrix beta;  // m x (d + 1), intercept first
  double temperature = 1.0;

  [[nodiscard]] int m() const { return static_cast<int>(beta.rows()); }
  [[nodiscard]] Eigen::Index d() const { return beta.cols() - 1; }
};

inline Matrix policy_design(const Matrix& X) { return expand_features(X, FeatureMap::linear); }

inline PolicyMatrix softmax_policy(const PolicyParams& params, const Matrix& X) {
  require_dims(X.cols() + 1 == params.beta.cols(), "covariates vs policy coefficients");
  return softmax_rows(policy_design(X) * params.beta.transpose() / params.temperature);
}

/// argmax_a (beta_a0 + beta_a^T x), ties to the lowest arm.
inline int choose_arm(const PolicyParams& params, const Eigen::Ref<const Vector>& x) {
  require_dims(x.size() + 1 == params.beta.cols(), "covariates vs policy coefficients");
  int best = 0;
  double best_logit = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < params.m(); ++a) {
    const double logit = params.beta(a, 0) + params.beta.row(a).tail(x.size()).dot(x);
    if (logit > best_logit) {
      best_logit = logit;
      best = a;
    }
  }
  return best;
}

inline std::function<int(const Eigen::Ref<const Vector>&)> deterministic_policy(PolicyParams params) {
  return [p = std::move(params)](const Eigen::Ref<const Vector>& x) { return choose_arm(p, x); };
}

/// One-hot matrix of the deterministic rule on the rows of X.
inline PolicyMatrix deterministic_policy_matrix(const PolicyParams& params, const Matrix& X) {
  PolicyMatrix out = PolicyMatrix::Zero(X.rows(), params.m());
  for (Eigen::Index i = 0; i < X.rows(); ++i) out(i, choose_arm(params, X.row(i).transpose())) = 1.0;
  return out;
}

/// d psi / d beta from d psi / d pi_a(X_j) (n x m) through the softmax.
inline Matrix chain_softmax(const Matrix& dpsi_dpi, const PolicyMatrix& pi, const Matrix& design) {
  const Vector inner = pi.cwiseProduct(dpsi_dpi).rowwise().sum();
  const Matrix local = pi.cwiseProduct(dpsi_dpi.colwise() - inner);
  return local.transpose() * design;
}

enum class GradMode { implicit, finite_diff };

struct LearnConfig {
  int starts = 10;
  int max_outer = 200;
  double step0 = 0.5;
  GradMode grad_mode = GradMode::implicit;
  std::uint64_t seed = 0;
  double tol = 1e-6;
  double init_sd = 0.5;
  int max_halvings = 20;
  bool pin_first_arm = true;
  double fd_step = 1e-4;
  /// 0 means BPSURV_THREADS / hardware concurrency.
  unsigned threads = 1;
};

struct TracePoint {
  double value = 0.0;
  double objective = 0.0;
  double step = 0.0;
};

struct LearnResult {
  PolicyParams params;
  double value = -std::numeric_limits<double>::infinity();
  std::vector<TracePoint> trace;
  std::vector<double> start_values;
  int failed_starts = 0;
  int gradient_fallbacks = 0;
};

/// Balanced-policy value as a function of the policy coefficients. Holds the
/// QP for the fixed design and warm-starts each solve from the last accepted
/// weights.
class BalancedPolicyObjective {
 public:
  BalancedPolicyObjective(const CensoredDataset& ds, const ImputedOutcomes& imputed, const KernelConfig& cfg,
                          const GpFit& gpfit, BalancedMode mode, std::optional<Matrix> muhat = std::nullopt,
                          QpOptions qp = {})
      : BalancedPolicyObjective(ds, imputed, gram(ds.X, cfg).K, cfg.gamma.size() == ds.m ? cfg.gamma : Vector::Ones(ds.m),
                                gpfit.noise_variance, mode, std::move(muhat), qp) {}

  BalancedPolicyObjective(const CensoredDataset& ds, const ImputedOutcomes& imputed, Matrix K, Vector gamma,
                          double noise_variance, BalancedMode mode, std::optional<Matrix> muhat = std::nullopt,
                          QpOptions qp = {})
      : local_(std::move(K), std::move(gamma), Vector::Constant(static_cast<Eigen::Index>(ds.n()), noise_variance),
               ds.arm, ds.m),
        design_(policy_design(ds.X)),
        mode_(mode),
        muhat_(std::move(muhat)),
        qp_(qp),
        arms_(ds.arm) {
    if (mode_ == BalancedMode::dr && !muhat_) throw ConfigError("doubly robust mode needs an outcome model");
    residual_ = imputed.yhat;
    if (mode_ == BalancedMode::dr)
      for (Eigen::Index i = 0; i < residual_.size(); ++i) residual_[i] -= (*muhat_)(i, arms_[static_cast<std::size_t>(i)]);
  }

  struct Evaluation {
    double value = 0.0;
    double objective = 0.0;
    bool converged = false;
    PolicyMatrix pi;
    Vector w;
  };

  [[nodiscard]] Evaluation evaluate(const Matrix& beta) {
    Evaluation ev;
    ev.pi = softmax_rows(design_ * beta.transpose());
    local_.set_policy(ev.pi);
    const auto sol = local_.solve(qp_, warm_.size() ? &warm_ : nullptr);
    ev.w = sol.weights.w;
    ev.converged = sol.weights.converged;
    ev.objective = sol.objective;
    ev.value = value_from(ev.pi, ev.w);
    return ev;
  }

  void accept(const Evaluation& ev) { warm_ = ev.w; }
  void reset_warm_start() { warm_.resize(0); }

  /// Total derivative of the estimate at an evaluated point.
  /// `frozen_weights` drops the weight term, leaving the explicit policy term.
  [[nodiscard]] Matrix gradient(const Matrix& beta, const Evaluation& ev, GradMode mode, bool* fell_back = nullptr,
                                bool frozen_weights = false, double fd_step = 1e-4) {
    if (fell_back) *fell_back = false;
    const double n = static_cast<double>(ev.w.size());
    Matrix dpsi = Matrix::Zero(ev.pi.rows(), ev.pi.cols());
    if (mode_ == BalancedMode::dr) dpsi = *muhat_ / n;
    if (frozen_weights) return chain_softmax(dpsi, ev.pi, design_);
    if (mode == GradMode::implicit) {
      local_.set_policy(ev.pi);
      std::vector<bool> support(ev.w.size());
      for (Eigen::Index i = 0; i < ev.w.size(); ++i) support[static_cast<std::size_t>(i)] = ev.w[i] > 0.0;
      const auto sys = local_.factor_support(support);
      if (sys.ok && ev.converged) {
        const Vector r = local_.support_projection(sys, residual_ / n);
        const Matrix& K = local_.kernel();
        const Vector& gamma = local_.gamma();
        Matrix R = Matrix::Zero(r.size(), ev.pi.cols());
        for (Eigen::Index i = 0; i < r.size(); ++i) R(i, arms_[static_cast<std::size_t>(i)]) = r[i];
        Matrix KR = K * R;
        for (Eigen::Index a = 0; a < KR.cols(); ++a) KR.col(a) *= gamma[a] * gamma[a];
        dpsi += KR;
        return chain_softmax(dpsi, ev.pi, design_);
      }
      if (fell_back) *fell_back = true;
    }
    return finite_difference_gradient(beta, fd_step);
  }

  [[nodiscard]] Matrix finite_difference_gradient(const Matrix& beta, double h) {
    const Vector saved = warm_;
    Matrix G(beta.rows(), beta.cols());
    for (Eigen::Index a = 0; a < beta.rows(); ++a) {
      for (Eigen::Index k = 0; k < beta.cols(); ++k) {
        Matrix bp = beta, bm = beta;
        bp(a, k) += h;
        bm(a, k) -= h;
        const double fp = evaluate(bp).value;
        warm_ = saved;
        const double fm = evaluate(bm).value;
        warm_ = saved;
        G(a, k) = (fp - fm) / (2.0 * h);
      }
    }
    return G;
  }

  [[nodiscard]] const Matrix& design() const { return design_; }

 private:
  [[nodiscard]] double value_from(const PolicyMatrix& pi, const Vector& w) const {
    const double n = static_cast<double>(w.size());
    double v = w.dot(residual_) / n;
    if (mode_ == BalancedMode::dr) v += pi.cwiseProduct(*muhat_).sum() / n;
    return v;
  }

  BalanceProblem local_;
  Matrix design_;
  BalancedMode mode_;
  std::optional<Matrix> muhat_;
  QpOptions qp_;
  std::vector<int> arms_;
  Vector residual_;
  Vector warm_;
};

namespace detail {

inline Matrix initial_beta(int m, Eigen::Index cols, const LearnConfig& cfg, int start) {
  auto rng = make_rng(cfg.seed, 0x1000 + static_cast<std::uint64_t>(start));
  std::normal_distribution<double> nd(0.0, cfg.init_sd);
  Matrix beta(m, cols);
  for (Eigen::Index a = 0; a < m; ++a)
    for (Eigen::Index k = 0; k < cols; ++k) beta(a, k) = cfg.init_sd > 0.0 ? nd(rng) : 0.0;
  if (cfg.pin_first_arm) beta.row(0).setZero();
  return beta;
}

struct StartOutcome {
  Matrix beta;
  double value = -std::numeric_limits<double>::infinity();
  std::vector<TracePoint> trace;
  bool failed = false;
  int fallbacks = 0;
};

/// Backtracking gradient ascent shared by all learners. `Eval` must provide
/// value/objective/converged; `grad(beta, eval)` returns the ascent direction.
template <typename EvalFn, typename GradFn, typename AcceptFn>
StartOutcome ascend(Matrix beta, const LearnConfig& cfg, EvalFn&& evaluate, GradFn&& grad, AcceptFn&& accept) {
  StartOutcome out;
  auto cur = evaluate(beta);
  if (!cur.converged) {
    out.failed = true;
    return out;
  }
  accept(cur);
  out.trace.push_back({cur.value, cur.objective, 0.0});
  for (int it = 0; it < cfg.max_outer; ++it) {
    Matrix G = grad(beta, cur, out.fallbacks);
    if (cfg.pin_first_arm) G.row(0).setZero();
    if (!G.allFinite() || G.norm() == 0.0) break;
    // Unit-norm direction so that step0 is measured in coefficient units
    // whatever the outcome scale.
    G /= G.norm();
    double step = cfg.step0;
    bool accepted = false;
    for (int ls = 0; ls <= cfg.max_halvings; ++ls, step *= 0.5) {
      Matrix cand = beta + step * G;
      auto ev = evaluate(cand);
      if (ev.converged && std::isfinite(ev.value) && ev.value > cur.value) {
        const double gain = ev.value - cur.value;
        beta = std::move(cand);
        cur = std::move(ev);
        accept(cur);
        out.trace.push_back({cur.value, cur.objective, step});
        accepted = gain >= cfg.tol;
        break;
      }
    }
    if (!accepted) break;
  }
  out.beta = beta;
  out.value = cur.value;
  return out;
}

inline LearnResult assemble(std::vector<StartOutcome>& outcomes) {
  LearnResult res;
  for (auto& o : outcomes) {
    res.gradient_fallbacks += o.fallbacks;
    if (o.failed) {
      ++res.failed_starts;
      continue;
    }
    res.start_values.push_back(o.value);
    if (o.value > res.value) {
      res.value = o.value;
      res.params.beta = o.beta;
      res.trace = o.trace;
    }
  }
  if (res.start_values.empty()) throw ConvergenceError("all policy-learning starts failed");
  return res;
}

}  // namespace detail

/// Bilevel balanced policy learning: alternate the balancing QP at the current
/// policy with a backtracking ascent step along the total gradient.
inline LearnResult learn_balanced(const BalancedPolicyObjective& prototype, int m, const LearnConfig& cfg) {
  if (cfg.starts < 1) throw ConfigError("starts must be at least 1");
  if (!(cfg.tol > 0.0)) throw ConfigError("tol must be positive");
  const Eigen::Index cols = prototype.design().cols();
  std::vector<detail::StartOutcome> outcomes(static_cast<std::size_t>(cfg.starts));
  parallel_for(
      outcomes.size(),
      [&](std::size_t s) {
        BalancedPolicyObjective obj = prototype;
        obj.reset_warm_start();
        using Eval = BalancedPolicyObjective::Evaluation;
        outcomes[s] = detail::ascend(
            detail::initial_beta(m, cols, cfg, static_cast<int>(s)), cfg,
            [&](const Matrix& b) { return obj.evaluate(b); },
            [&](const Matrix& b, const Eval& ev, int& fallbacks) {
              bool fell = false;
              Matrix G = obj.gradient(b, ev, cfg.grad_mode, &fell, false, cfg.fd_step);
              fallbacks += fell ? 1 : 0;
              return G;
            },
            [&](const Eval& ev) { obj.accept(ev); });
      },
      cfg.threads == 0 ? thread_count() : cfg.threads);
  return detail::assemble(outcomes);
}

inline LearnResult learn_balanced(const CensoredDataset& ds, const ImputedOutcomes& imputed, const KernelConfig& kcfg,
                                  const GpFit& gpfit, BalancedMode mode, const std::optional<Matrix>& muhat,
                                  const LearnConfig& cfg, const QpOptions& qp = {}) {
  const BalancedPolicyObjective obj(ds, imputed, kcfg, gpfit, mode, muhat, qp);
  return learn_balanced(obj, ds.m, cfg);
}

enum class WeightRule { ipw, ipw_ipcw };

/// Self-normalized weighted value sum_i r_i y_i / sum_i r_i with
/// r_i = pi_{A_i}(X_i) * c_i, where c_i is the fixed inverse-probability factor.
class WeightedPolicyObjective {
 public:
  WeightedPolicyObjective(const CensoredDataset& ds, Vector outcomes, Vector factors)
      : design_(policy_design(ds.X)), arms_(ds.arm), y_(std::move(outcomes)), c_(std::move(factors)) {
    require_dims(y_.size() == static_cast<Eigen::Index>(ds.n()) && c_.size() == y_.size(), "outcomes/factors vs dataset");
  }

  /// c_i = 1 / max(M, phi) for IPW, Delta_i / (max(M, phi) max(floor, G(Y_i-))) for IPW+IPCW.
  static Vector inverse_probability_factors(const CensoredDataset& ds, const Matrix& propensity_probs, double clip,
                                            const std::optional<Vector>& censor_survival, WeightRule rule,
                                            double floor = kSurvivalFloor) {
    const Vector denom = clipped_received_propensity(propensity_probs, ds.arm, clip);
    Vector c(denom.size());
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      c[i] = 1.0 / denom[i];
      if (rule == WeightRule::ipw_ipcw) {
        if (!censor_survival) throw ConfigError("IPW+IPCW needs censoring survival values");
        c[i] = ds.event[static_cast<std::size_t>(i)] ? c[i] / std::max(floor, (*censor_survival)[i]) : 0.0;
      }
    }
    return c;
  }

  struct Evaluation {
    double value = 0.0;
    double objective = 0.0;
    bool converged = true;
    PolicyMatrix pi;
  };

  [[nodiscard]] Evaluation evaluate(const Matrix& beta) const {
    Evaluation ev;
    ev.pi = softmax_rows(design_ * beta.transpose());
    double num = 0.0;
    double den = 0.0;
    for (Eigen::Index i = 0; i < y_.size(); ++i) {
      const double r = ev.pi(i, arms_[static_cast<std::size_t>(i)]) * c_[i];
      num += r * y_[i];
      den += r;
    }
    ev.converged = den > 0.0;
    ev.value = den > 0.0 ? num / den : 0.0;
    return ev;
  }

  [[nodiscard]] Matrix gradient(const Evaluation& ev) const {
    double den = 0.0;
    for (Eigen::Index i = 0; i < y_.size(); ++i) den += ev.pi(i, arms_[static_cast<std::size_t>(i)]) * c_[i];
    Matrix dpsi = Matrix::Zero(ev.pi.rows(), ev.pi.cols());
    for (Eigen::Index i = 0; i < y_.size(); ++i)
      dpsi(i, arms_[static_cast<std::size_t>(i)]) = c_[i] * (y_[i] - ev.value) / den;
    return chain_softmax(dpsi, ev.pi, design_);
  }

  [[nodiscard]] const Matrix& design() const { return design_; }

 private:
  Matrix design_;
  std::vector<int> arms_;
  Vector y_;
  Vector c_;
};

/// Plug-in value (1/n) sum_i sum_a pi_a(X_i) muhat_a(X_i) as a policy objective.
class RegressionPolicyObjective {
 public:
  RegressionPolicyObjective(const CensoredDataset& ds, Matrix muhat) : design_(policy_design(ds.X)), muhat_(std::move(muhat)) {
    require_dims(muhat_.rows() == static_cast<Eigen::Index>(ds.n()) && muhat_.cols() == ds.m, "outcome model vs dataset");
  }

  using Evaluation = WeightedPolicyObjective::Evaluation;

  [[nodiscard]] Evaluation evaluate(const Matrix& beta) const {
    Evaluation ev;
    ev.pi = softmax_rows(design_ * beta.transpose());
    ev.value = reg_estimator(ev.pi, muhat_).estimate;
    return ev;
  }

  [[nodiscard]] Matrix gradient(const Evaluation& ev) const {
    return chain_softmax(muhat_ / static_cast<double>(muhat_.rows()), ev.pi, design_);
  }

  [[nodiscard]] const Matrix& design() const { return design_; }

 private:
  Matrix design_;
  Matrix muhat_;
};

template <typename Objective>
LearnResult learn_smooth(const Objective& obj, int m, const LearnConfig& cfg) {
  if (cfg.starts < 1) throw ConfigError("starts must be at least 1");
  const Eigen::Index cols = obj.design().cols();
  std::vector<detail::StartOutcome> outcomes(static_cast<std::size_t>(cfg.starts));
  using Eval = typename Objective::Evaluation;
  parallel_for(
      outcomes.size(),
      [&](std::size_t s) {
        outcomes[s] = detail::ascend(
            detail::initial_beta(m, cols, cfg, static_cast<int>(s)), cfg,
            [&](const Matrix& b) { return obj.evaluate(b); },
            [&](const Matrix&, const Eval& ev, int&) { return obj.gradient(ev); }, [](const Eval&) {});
      },
      cfg.threads == 0 ? thread_count() : cfg.threads);
  return detail::assemble(outcomes);
}

/// Maximizes the normalized clipped IPW or IPW+IPCW estimator over the
/// softmax-linear class.
inline LearnResult learn_weighted_baseline(const CensoredDataset& ds, const Vector& outcomes, WeightRule rule,
                                           const PropensityModel& prop, const std::optional<Vector>& censor_survival,
                                           const LearnConfig& cfg, double floor = kSurvivalFloor) {
  const Vector factors = WeightedPolicyObjective::inverse_probability_factors(ds, prop.predict(ds.X), prop.clip,
                                                                              censor_survival, rule, floor);
  return learn_smooth(WeightedPolicyObjective(ds, outcomes, factors), ds.m, cfg);
}

inline LearnResult learn_regression(const CensoredDataset& ds, const Matrix& muhat, const LearnConfig& cfg) {
  return learn_smooth(RegressionPolicyObjective(ds, muhat), ds.m, cfg);
}

}  // namespace bpsurv
