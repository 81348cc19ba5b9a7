#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include "bpsurv/dataset.hpp"
#include "bpsurv/simulate.hpp"

namespace bpsurv {

/// Mahalanobis RBF kernel exp(-(x - x')^T metric^{-1} (x - x') / scale^2),
/// shared by all arms; `gamma` holds the per-arm norm weights.
struct KernelConfig {
  double scale = 1.0;
  Matrix metric;
  Vector gamma;

  static KernelConfig identity(Eigen::Index d, int m, double scale = 1.0) {
    return {scale, Matrix::Identity(d, d), Vector::Ones(m)};
  }

  /// Diagonal metric of sample variances (zero variances replaced by 1).
  static KernelConfig from_data(const Matrix& X, int m, double scale) {
    Vector var = (X.rowwise() - X.colwise().mean()).colwise().squaredNorm() / std::max<Eigen::Index>(1, X.rows() - 1);
    for (Eigen::Index k = 0; k < var.size(); ++k)
      if (!(var[k] > 0.0)) var[k] = 1.0;
    return {scale, var.asDiagonal(), Vector::Ones(m)};
  }

  /// Full sample covariance as the metric (non-tuned preset).
  static KernelConfig sample_covariance(const Matrix& X, int m, double scale) {
    const Matrix centered = X.rowwise() - X.colwise().mean();
    Matrix cov = centered.transpose() * centered / std::max<Eigen::Index>(1, X.rows() - 1);
    return {scale, cov, Vector::Ones(m)};
  }

  [[nodiscard]] bool is_diagonal() const {
    return (metric - Matrix(metric.diagonal().asDiagonal())).cwiseAbs().maxCoeff() == 0.0;
  }

  void validate() const {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("kernel scale must be positive");
    if (metric.rows() != metric.cols() || metric.rows() == 0) throw ConfigError("kernel metric must be square");
    if ((metric - metric.transpose()).cwiseAbs().maxCoeff() > 1e-10) throw ConfigError("kernel metric is not symmetric");
    if (metric.llt().info() != Eigen::Success) throw ConfigError("kernel metric is not positive definite");
    if (gamma.size() > 0 && (gamma.array() <= 0.0).any()) throw ConfigError("gamma entries must be positive");
  }

  /// Rows of X mapped so that squared Euclidean distance equals the scaled
  /// Mahalanobis form.
  [[nodiscard]] Matrix whiten(const Matrix& X) const {
    require_dims(X.cols() == metric.rows(), "covariate dimension vs kernel metric");
    Eigen::LLT<Matrix> llt(metric);
    if (llt.info() != Eigen::Success) throw ConfigError("kernel metric is not positive definite");
    Matrix Z = llt.matrixL().solve(X.transpose()).transpose();
    return Z / scale;
  }
};

inline double rbf(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& x2, const KernelConfig& cfg) {
  require_dims(x.size() == x2.size() && x.size() == cfg.metric.rows(), "rbf inputs vs kernel metric");
  Eigen::LLT<Matrix> llt(cfg.metric);
  if (llt.info() != Eigen::Success) throw ConfigError("kernel metric is not positive definite");
  const Vector diff = x - x2;
  const double q = diff.dot(llt.solve(diff));
  return std::exp(-q / (cfg.scale * cfg.scale));
}

/// Kernel matrix over the rows of X together with the configuration used.
struct GramMatrix {
  Matrix K;
  KernelConfig config;

  [[nodiscard]] double min_eigenvalue() const {
    Eigen::SelfAdjointEigenSolver<Matrix> es(K, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
  }
};

namespace detail {

inline Matrix rbf_from_whitened(const Matrix& Z) {
  const Eigen::Index n = Z.rows();
  Matrix K(n, n);
  const Matrix Zt = Z.transpose();
  for (Eigen::Index j = 0; j < n; ++j) {
    K(j, j) = 1.0;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double v = std::exp(-(Zt.col(i) - Zt.col(j)).squaredNorm());
      K(i, j) = v;
      K(j, i) = v;
    }
  }
  return K;
}

}  // namespace detail

inline GramMatrix gram(const Matrix& X, const KernelConfig& cfg) {
  if (X.rows() < 1) throw DimensionError("dimension mismatch: gram needs at least one row");
  return {detail::rbf_from_whitened(cfg.whiten(X)), cfg};
}

/// Cross-kernel between the rows of A and B.
inline Matrix cross_gram(const Matrix& A, const Matrix& B, const KernelConfig& cfg) {
  const Matrix Za = cfg.whiten(A).transpose();
  const Matrix Zb = cfg.whiten(B).transpose();
  Matrix K(A.rows(), B.rows());
  for (Eigen::Index j = 0; j < B.rows(); ++j)
    for (Eigen::Index i = 0; i < A.rows(); ++i) K(i, j) = std::exp(-(Za.col(i) - Zb.col(j)).squaredNorm());
  return K;
}

/// Cholesky of K + noise I, escalating the diagonal jitter through
/// 1e-10, 1e-8, 1e-6 before giving up.
struct JitteredCholesky {
  Eigen::LLT<Matrix> llt;
  double jitter = 0.0;

  JitteredCholesky(const Matrix& K, double noise) {
    const Eigen::Index n = K.rows();
    for (double j : {0.0, 1e-10, 1e-8, 1e-6}) {
      Matrix C = K;
      C.diagonal().array() += noise + j;
      llt.compute(C);
      if (llt.info() == Eigen::Success) {
        jitter = j;
        return;
      }
    }
    (void)n;
    throw ConvergenceError("Cholesky of K + noise*I failed after jitter escalation");
  }
};

/// Log evidence of a zero-mean GP and its gradient.
///
/// Gradient ordering: [log scale, log noise_variance, log metric_11, ..., log metric_dd].
struct GpEvidence {
  double value = 0.0;
  Vector grad;
  double jitter = 0.0;
  /// y^T (K + noise I)^{-1} y.
  double quad = 0.0;
};

/// Evidence for a precomputed Gram; `grad` holds only d/d(log noise_variance).
inline GpEvidence gp_log_marginal(const GramMatrix& K, const Vector& y, double noise_variance) {
  require_dims(K.K.rows() == y.size() && K.K.cols() == y.size(), "gram vs outcome length");
  if (!(noise_variance > 0.0)) throw ConfigError("noise variance must be positive");
  const JitteredCholesky chol(K.K, noise_variance);
  const Vector alpha = chol.llt.solve(y);
  const double n = static_cast<double>(y.size());
  const double logdet = 2.0 * chol.llt.matrixLLT().diagonal().array().log().sum();
  GpEvidence out;
  out.value = -0.5 * y.dot(alpha) - 0.5 * logdet - 0.5 * n * std::log(2.0 * std::numbers::pi);
  const Matrix Cinv = chol.llt.solve(Matrix::Identity(y.size(), y.size()));
  out.grad = Vector::Constant(1, 0.5 * noise_variance * (alpha.squaredNorm() - Cinv.trace()));
  out.jitter = chol.jitter;
  return out;
}

namespace detail {

/// Evidence of K + noise I for a diagonal metric with the full gradient. With
/// `profile` set, the kernel amplitude is maximized out in closed form
/// (amplitude = y^T (K + noise I)^{-1} y / n) and `noise` is read as the
/// noise-to-amplitude ratio.
inline GpEvidence evidence_with_gradient(const Matrix& X, const KernelConfig& cfg, const Vector& y, double noise,
                                         bool profile) {
  require_dims(X.rows() == y.size(), "covariate rows vs outcome length");
  if (!cfg.is_diagonal()) throw ConfigError("hyperparameter gradient requires a diagonal metric");
  if (!(noise > 0.0)) throw ConfigError("noise variance must be positive");
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  const Matrix Zt = cfg.whiten(X).transpose();  // d x n, scaled coordinates
  const Matrix K = rbf_from_whitened(Zt.transpose());

  const JitteredCholesky chol(K, noise);
  const Vector alpha = chol.llt.solve(y);
  const double logdet = 2.0 * chol.llt.matrixLLT().diagonal().array().log().sum();
  const double quad = y.dot(alpha);
  const double nn = static_cast<double>(n);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  // d(evidence)/d theta = 1/2 tr(W dC/d theta) with W = c alpha alpha^T - C^{-1}.
  const double c = profile ? nn / std::max(quad, 1e-300) : 1.0;
  Matrix W = -chol.llt.solve(Matrix::Identity(n, n));
  W.noalias() += c * alpha * alpha.transpose();

  GpEvidence out;
  out.quad = quad;
  out.value = profile ? -0.5 * nn * std::log(std::max(quad, 1e-300) / nn) - 0.5 * logdet - 0.5 * nn * (1.0 + log2pi)
                      : -0.5 * quad - 0.5 * logdet - 0.5 * nn * log2pi;
  out.grad = Vector::Zero(2 + d);
  out.grad[1] = 0.5 * noise * W.trace();
  // dK/dlog metric_k = K * u_k^2, dK/dlog scale = 2 K * sum_k u_k^2, with u the whitened difference.
  Vector acc = Vector::Zero(d);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double wk = W(i, j) * K(i, j);
      if (wk == 0.0) continue;
      acc += wk * (Zt.col(i) - Zt.col(j)).cwiseAbs2();
    }
  }
  // Off-diagonal pairs appear twice in the trace; the 1/2 prefactor cancels that.
  out.grad.tail(d) = acc;
  out.grad[0] = 2.0 * acc.sum();
  out.jitter = chol.jitter;
  return out;
}

}  // namespace detail

/// Evidence with the full hyperparameter gradient for a diagonal metric.
inline GpEvidence gp_log_marginal(const Matrix& X, const KernelConfig& cfg, const Vector& y, double noise_variance) {
  return detail::evidence_with_gradient(X, cfg, y, noise_variance, false);
}

/// Evidence of amplitude * K + noise I with the amplitude maximized out.
/// `noise_ratio` is noise / amplitude; the gradient ordering matches
/// gp_log_marginal with log noise_ratio in place of log noise_variance.
inline GpEvidence gp_profile_log_marginal(const Matrix& X, const KernelConfig& cfg, const Vector& y,
                                          double noise_ratio) {
  return detail::evidence_with_gradient(X, cfg, y, noise_ratio, true);
}

/// Result of marginal-likelihood tuning.
struct GpFit {
  double noise_variance = 1.0;
  /// Kernel amplitude of the fitted GP; the kernel's per-arm gamma is its square root.
  double signal_variance = 1.0;
  KernelConfig hyperparams;
  double log_marginal = 0.0;
  double outcome_mean = 0.0;
  bool fallback = false;
  int iterations = 0;

  /// Inverse lengthscale of each coordinate: 1 / (scale * sqrt(metric_kk)).
  [[nodiscard]] Vector inverse_lengthscales() const {
    return (hyperparams.metric.diagonal().array().sqrt() * hyperparams.scale).inverse();
  }
};

struct TuneOptions {
  int starts = 5;
  int max_iter = 200;
  /// Random subsample used when n exceeds this (the evidence costs O(n^3)).
  int max_points = 400;
  std::uint64_t seed = 0;
  double rel_tol = 1e-9;
  /// Lower bound on noise / amplitude; keeps the fit away from exact interpolation.
  double min_noise_ratio = 1e-2;
  /// Verify Gram positive semidefiniteness after every accepted step.
  bool check_psd = false;
};

namespace detail {

inline double median_pairwise_distance(const Matrix& Z) {
  std::vector<double> dist;
  const Eigen::Index n = std::min<Eigen::Index>(Z.rows(), 300);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) dist.push_back((Z.row(i) - Z.row(j)).norm());
  if (dist.empty()) return 1.0;
  auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  return *mid > 0.0 ? *mid : 1.0;
}

inline KernelConfig config_from_params(const Vector& theta, int m) {
  const Eigen::Index d = theta.size() - 2;
  KernelConfig cfg;
  cfg.scale = std::exp(theta[0]);
  cfg.metric = theta.tail(d).array().exp().matrix().asDiagonal();
  cfg.gamma = Vector::Ones(m);
  return cfg;
}

}  // namespace detail

/// Maximizes the GP evidence of the (centered) outcomes over the log scale,
/// log noise-to-amplitude ratio and log diagonal metric, with the amplitude
/// profiled out, by multi-start quasi-Newton
/// gradient ascent with backtracking. Metric off-diagonals stay at zero.
inline GpFit tune_hyperparameters(const Matrix& X_all, const Vector& outcomes_all, int m,
                                  const TuneOptions& opt = {}) {
  require_dims(X_all.rows() == outcomes_all.size(), "covariate rows vs outcome length");
  if (X_all.rows() < 2) throw DataError("tuning needs at least two observations");
  if (!outcomes_all.allFinite()) throw DataError("outcomes must be finite (run imputation first)");
  auto rng = detail::make_rng(opt.seed, 0x7475);

  Matrix X = X_all;
  Vector y = outcomes_all;
  if (opt.max_points > 1 && X_all.rows() > opt.max_points) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(X_all.rows()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Eigen::Index>(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(opt.max_points));
    std::sort(idx.begin(), idx.end());
    X.resize(opt.max_points, X_all.cols());
    y.resize(opt.max_points);
    for (Eigen::Index r = 0; r < opt.max_points; ++r) {
      X.row(r) = X_all.row(idx[static_cast<std::size_t>(r)]);
      y[r] = outcomes_all[idx[static_cast<std::size_t>(r)]];
    }
  }
  const double ymean = y.mean();
  y.array() -= ymean;
  const double yvar = std::max(y.squaredNorm() / std::max<Eigen::Index>(1, y.size() - 1), 1e-8);
  const Eigen::Index d = X.cols();

  const KernelConfig base = KernelConfig::from_data(X, m, 1.0);
  Vector theta0(2 + d);
  theta0[0] = 0.5 * std::log(static_cast<double>(d));
  theta0[1] = 0.0;  // noise-to-amplitude ratio of one
  theta0.tail(d) = base.metric.diagonal().array().log();

  constexpr double kLo = -12.0;
  constexpr double kHi = 12.0;
  auto clamp = [&](Vector t) {
    for (Eigen::Index k = 0; k < t.size(); ++k) t[k] = std::clamp(t[k], kLo, kHi);
    t[1] = std::max(t[1], std::log(opt.min_noise_ratio));
    return t;
  };
  auto evaluate = [&](const Vector& t) -> std::optional<GpEvidence> {
    try {
      auto ev = gp_profile_log_marginal(X, detail::config_from_params(t, m), y, std::exp(t[1]));
      if (!std::isfinite(ev.value) || !ev.grad.allFinite()) return std::nullopt;
      return ev;
    } catch (const ConvergenceError&) {
      return std::nullopt;
    }
  };

  std::normal_distribution<double> jitter(0.0, 0.5);
  GpFit best;
  best.log_marginal = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (int s = 0; s < opt.starts; ++s) {
    Vector theta = theta0;
    if (s > 0)
      for (Eigen::Index k = 0; k < theta.size(); ++k) theta[k] += jitter(rng);
    theta = clamp(theta);
    auto cur = evaluate(theta);
    if (!cur) continue;
    // Quasi-Newton ascent: BFGS inverse-curvature estimate of -evidence
    // shapes the direction, then a backtracking line search on the evidence.
    const Eigen::Index P = theta.size();
    Matrix H = Matrix::Identity(P, P) / std::max(1.0, cur->grad.norm());
    bool scaled = false;
    int it = 0;
    for (; it < opt.max_iter; ++it) {
      Vector dir = H * cur->grad;
      if (!(cur->grad.dot(dir) > 0.0)) {
        H = Matrix::Identity(P, P) / std::max(1.0, cur->grad.norm());
        dir = H * cur->grad;
      }
      bool accepted = false;
      double t = 1.0;
      for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
        Vector cand = clamp(theta + t * dir);
        const Vector s_step = cand - theta;
        if (s_step.norm() == 0.0) break;
        auto ev = evaluate(cand);
        if (ev && ev->value > cur->value) {
          const double gain = ev->value - cur->value;
          const Vector yk = cur->grad - ev->grad;
          const double sy = s_step.dot(yk);
          if (sy > 1e-12 * s_step.norm() * yk.norm()) {
            if (!scaled) {
              H = Matrix::Identity(P, P) * (sy / yk.squaredNorm());
              scaled = true;
            }
            const double rho = 1.0 / sy;
            const Matrix V = Matrix::Identity(P, P) - rho * yk * s_step.transpose();
            H = V.transpose() * H * V + rho * s_step * s_step.transpose();
          }
          theta = cand;
          cur = ev;
          accepted = true;
          if (opt.check_psd) {
            const auto g = gram(X, detail::config_from_params(theta, m));
            if (g.min_eigenvalue() < -1e-8 * static_cast<double>(X.rows()))
              throw ConvergenceError("Gram matrix lost positive semidefiniteness during tuning");
          }
          if (gain < opt.rel_tol * (1.0 + std::abs(cur->value))) accepted = false;
          break;
        }
      }
      if (!accepted) break;
    }
    any = true;
    if (cur->value > best.log_marginal) {
      best.log_marginal = cur->value;
      best.signal_variance = cur->quad / static_cast<double>(y.size());
      best.noise_variance = std::exp(theta[1]) * best.signal_variance;
      best.hyperparams = detail::config_from_params(theta, m);
      best.hyperparams.gamma = Vector::Constant(m, std::sqrt(best.signal_variance));
      best.iterations = it;
    }
  }
  if (!any) {
    const double s = detail::median_pairwise_distance(base.whiten(X));
    best.hyperparams = base;
    best.hyperparams.scale = s;
    best.noise_variance = yvar;
    best.signal_variance = 1.0;
    best.fallback = true;
    try {
      best.log_marginal = gp_log_marginal(gram(X, best.hyperparams), y, yvar).value;
    } catch (const ConvergenceError&) {
      best.log_marginal = std::numeric_limits<double>::quiet_NaN();
    }
  }
  best.outcome_mean = ymean;
  return best;
}

inline GpFit tune_hyperparameters(const CensoredDataset& ds, const Vector& outcomes, const TuneOptions& opt = {}) {
  return tune_hyperparameters(ds.X, outcomes, ds.m, opt);
}

/// Per-arm GP posterior mean of the outcomes at the rows of X, using the
/// tuned kernel and noise. Returns an n x m matrix of fitted arm means.
inline Matrix gp_arm_means(const CensoredDataset& ds, const Vector& outcomes, const GpFit& fit, const Matrix& X) {
  require_dims(outcomes.size() == static_cast<Eigen::Index>(ds.n()), "outcomes vs dataset");
  Matrix out(X.rows(), ds.m);
  for (int a = 0; a < ds.m; ++a) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < ds.n(); ++i)
      if (ds.arm[i] == a) rows.push_back(static_cast<Eigen::Index>(i));
    if (rows.empty()) throw DataError("arm " + std::to_string(a + 1) + " has no observations");
    Matrix Xa(static_cast<Eigen::Index>(rows.size()), ds.d());
    Vector ya(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      Xa.row(static_cast<Eigen::Index>(r)) = ds.X.row(rows[r]);
      ya[static_cast<Eigen::Index>(r)] = outcomes[rows[r]];
    }
    const double mean = ya.mean();
    const JitteredCholesky chol(gram(Xa, fit.hyperparams).K, fit.noise_variance / fit.signal_variance);
    const Vector alpha = chol.llt.solve((ya.array() - mean).matrix());
    out.col(a) = (cross_gram(X, Xa, fit.hyperparams) * alpha).array() + mean;
  }
  return out;
}

}  // namespace bpsurv
