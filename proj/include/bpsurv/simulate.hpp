#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <utility>

#include "bpsurv/dataset.hpp"

namespace bpsurv {

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// E[min(Z, cap)] for Z ~ N(mean, sd^2).
inline double truncated_normal_mean(double mean, double sd, double cap) {
  const double b = (cap - mean) / sd;
  const double Fb = normal_cdf(b);
  return mean * Fb - sd * normal_pdf(b) + cap * (1.0 - Fb);
}

/// E[min(Z, cap) | Z > lower] for Z ~ N(mean, sd^2) and lower < cap.
inline double truncated_normal_residual_mean(double mean, double sd, double lower, double cap) {
  if (lower >= cap) return cap;
  const double a = (lower - mean) / sd;
  const double b = (cap - mean) / sd;
  const double Sa = normal_cdf(-a);
  const double Sb = normal_cdf(-b);
  if (Sa < 1e-300) return lower;
  const double body = mean * (Sb > Sa ? 0.0 : Sa - Sb) + sd * (normal_pdf(a) - normal_pdf(b));
  return (body + cap * Sb) / Sa;
}

enum class OutcomeScale { time, log_time };

/// Ground truth behind a simulated dataset.
///
/// `mu(x, a)` is the mean of the reward on `scale` for the horizon-truncated
/// time T = min(tau, T~). For the log-normal generators `log_location` and
/// `log_sd` describe the untruncated law log T~ | X, A.
struct OracleModel {
  std::function<double(const Eigen::Ref<const Vector>&, int)> mu;
  std::function<Vector(const Eigen::Ref<const Vector>&)> propensity;
  std::function<double(const Eigen::Ref<const Vector>&, int)> log_location;
  double log_sd = 1.0;
  double tau = 0.0;
  int m = 0;
  OutcomeScale scale = OutcomeScale::log_time;

  [[nodiscard]] Matrix mean_matrix(const Matrix& X) const {
    Matrix out(X.rows(), m);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const Vector x = X.row(i).transpose();
      for (int a = 0; a < m; ++a) out(i, a) = mu(x, a);
    }
    return out;
  }

  /// E[log T | T > y, X = x, A = a], the ideal imputation target.
  [[nodiscard]] double log_residual_mean(const Eigen::Ref<const Vector>& x, int a, double y) const {
    return truncated_normal_residual_mean(log_location(x, a), log_sd, std::log(y), std::log(tau));
  }
};

/// Sample average of sum_a pi_a(X_i) mu_a(X_i).
inline double sape(const PolicyMatrix& policy, const OracleModel& oracle, const Matrix& X) {
  require_dims(policy.rows() == X.rows() && policy.cols() == oracle.m, "policy rows/arms vs covariates/oracle");
  if (X.rows() == 0) throw DimensionError("dimension mismatch: empty covariate matrix");
  return policy.cwiseProduct(oracle.mean_matrix(X)).sum() / static_cast<double>(X.rows());
}

/// SAPE(pi*) - SAPE(pi) with pi* the rowwise argmax of the oracle mean.
inline double regret(const PolicyMatrix& policy, const OracleModel& oracle, const Matrix& X_test) {
  require_dims(policy.rows() == X_test.rows() && policy.cols() == oracle.m, "policy rows/arms vs covariates/oracle");
  if (X_test.rows() == 0) throw DimensionError("dimension mismatch: empty test set");
  const Matrix mu = oracle.mean_matrix(X_test);
  const PolicyMatrix best = argmax_policy(mu);
  const double n = static_cast<double>(X_test.rows());
  return std::max(0.0, (best - policy).cwiseProduct(mu).sum() / n);
}

namespace detail {

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x6270u};
  return std::mt19937_64(seq);
}

/// Cholesky factor of the d x d compound-symmetric covariance.
inline Matrix compound_symmetric_factor(int d, double rho) {
  Matrix sigma = Matrix::Constant(d, d, rho);
  sigma.diagonal().setOnes();
  return sigma.llt().matrixL();
}

/// Softmax of -||z - center_a||^2 / 2, i.e. a normalized isotropic normal density.
template <std::size_t M, std::size_t K>
Vector gaussian_center_probs(const Eigen::Ref<const Vector>& x, const std::array<std::array<double, K>, M>& centers) {
  Vector logits(static_cast<Eigen::Index>(M));
  for (std::size_t a = 0; a < M; ++a) {
    double d2 = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double diff = x[static_cast<Eigen::Index>(k)] - centers[a][k];
      d2 += diff * diff;
    }
    logits[static_cast<Eigen::Index>(a)] = -0.5 * d2;
  }
  logits.array() -= logits.maxCoeff();
  Vector p = logits.array().exp();
  return p / p.sum();
}

inline int draw_arm(const Vector& probs, double u) {
  double acc = 0.0;
  for (Eigen::Index a = 0; a < probs.size(); ++a) {
    acc += probs[a];
    if (u < acc) return static_cast<int>(a);
  }
  return static_cast<int>(probs.size() - 1);
}

}  // namespace detail

struct SimulatedData {
  CensoredDataset data;
  OracleModel oracle;
};

inline constexpr int kSimDimension = 10;

/// Location of log T~ for arm a (zero-based) in the radial-wedge design.
inline double setting1_location(const Eigen::Ref<const Vector>& x, int a) {
  const double angle = -2.0 * std::numbers::pi * (a + 1) / 5.0;
  const double cx = std::cos(angle) / std::numbers::sqrt2;
  const double cy = std::sin(angle) / std::numbers::sqrt2;
  const double dist = std::hypot(x[0] - cx, x[1] - cy);
  if (dist == 0.0) return std::numbers::e;
  return std::numbers::e - std::exp(1.0 - 1.0 / dist);
}

inline double setting1_censor_location(const Eigen::Ref<const Vector>& x) {
  const double s = std::abs(x[0] + x[1]);
  if (s == 0.0) return 2.5;
  return 2.5 - 0.5 * std::exp(1.0 - 1.0 / s);
}

/// Five arms, 10 correlated normal covariates, assignment driven by (x1, x2),
/// log-normal event times with radially arranged optimal wedges, tau = 3.5.
inline SimulatedData simulate_setting1(int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("n must be at least 1");
  constexpr int d = kSimDimension;
  constexpr double tau = 3.5;
  static constexpr std::array<std::array<double, 2>, 5> centers{{{0, 0}, {1, 0}, {0, 1}, {-1, 0}, {0, -1}}};

  OracleModel oracle;
  oracle.m = 5;
  oracle.tau = tau;
  oracle.log_sd = 1.0;
  oracle.scale = OutcomeScale::log_time;
  oracle.log_location = [](const Eigen::Ref<const Vector>& x, int a) { return setting1_location(x, a); };
  oracle.mu = [tau](const Eigen::Ref<const Vector>& x, int a) {
    return truncated_normal_mean(setting1_location(x, a), 1.0, std::log(tau));
  };
  oracle.propensity = [](const Eigen::Ref<const Vector>& x) { return detail::gaussian_center_probs(x, centers); };

  auto rng = detail::make_rng(seed, 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Matrix L = detail::compound_symmetric_factor(d, 0.2);

  CensoredDataset ds;
  ds.m = 5;
  ds.tau = tau;
  ds.X.resize(n, d);
  ds.y.resize(n);
  ds.arm.resize(static_cast<std::size_t>(n));
  ds.event.resize(static_cast<std::size_t>(n));
  Vector z(d);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < d; ++k) z[k] = normal(rng);
    const Vector x = L * z;
    ds.X.row(i) = x.transpose();
    const int a = detail::draw_arm(oracle.propensity(x), unif(rng));
    const double t = std::min(tau, std::exp(setting1_location(x, a) + normal(rng)));
    const double c = std::exp(setting1_censor_location(x) + std::numbers::sqrt2 * normal(rng));
    ds.arm[static_cast<std::size_t>(i)] = a;
    ds.y[i] = std::min(t, c);
    ds.event[static_cast<std::size_t>(i)] = t <= c;
  }
  ds.truncate_at_tau();
  return {std::move(ds), std::move(oracle)};
}

/// Per-arm effect terms for the three-arm design. `dominant_arm2` replaces the
/// heterogeneous effects by constants that favour arm 2 by 0.5 everywhere.
enum class Setting2Variant { standard, dominant_arm2 };

inline double setting2_arm_effect(const Eigen::Ref<const Vector>& x, int a, Setting2Variant variant) {
  if (variant == Setting2Variant::dominant_arm2) return a == 1 ? 0.5 : 0.0;
  switch (a) {
    case 0: return 0.2 * x[0] - 0.3 * x[1];
    case 1: return 0.1 + 0.1 * x[2];
    default: return -0.1 - 0.2 * x[0] + 0.4 * x[1] - 0.2 * x[2];
  }
}

inline double setting2_location(const Eigen::Ref<const Vector>& x, int a, Setting2Variant variant) {
  return 0.2 - 0.6 * x[0] + 0.2 * x[1] + 0.4 * x[2] + setting2_arm_effect(x, a, variant);
}

inline double setting2_censor_location(const Eigen::Ref<const Vector>& x, int a) {
  double nu = 0.0;
  switch (a) {
    case 0: nu = -0.1 * x[0] - 0.2 * x[1]; break;
    case 1: nu = 0.1 * x[1]; break;
    default: nu = -0.1 + 0.3 * x[1] - 0.4 * x[2]; break;
  }
  return 0.6 - 0.4 * x[0] + 0.3 * x[1] + 0.8 * x[2] + nu;
}

/// Three arms, 10 dependent uniform(-1, 1) covariates, log-normal event and
/// censoring times with prognostic and prescriptive terms, tau = 1.5.
inline SimulatedData simulate_setting2(int n, std::uint64_t seed,
                                       Setting2Variant variant = Setting2Variant::standard) {
  if (n < 1) throw ConfigError("n must be at least 1");
  constexpr int d = kSimDimension;
  constexpr double tau = 1.5;
  static constexpr std::array<std::array<double, 3>, 3> centers{{{-0.5, -0.5, 0.4}, {0, 0, -0.75}, {0.5, 0.5, 0.4}}};

  OracleModel oracle;
  oracle.m = 3;
  oracle.tau = tau;
  oracle.log_sd = 1.0;
  oracle.scale = OutcomeScale::log_time;
  oracle.log_location = [variant](const Eigen::Ref<const Vector>& x, int a) {
    return setting2_location(x, a, variant);
  };
  oracle.mu = [variant, tau](const Eigen::Ref<const Vector>& x, int a) {
    return truncated_normal_mean(setting2_location(x, a, variant), 1.0, std::log(tau));
  };
  oracle.propensity = [](const Eigen::Ref<const Vector>& x) { return detail::gaussian_center_probs(x, centers); };

  auto rng = detail::make_rng(seed, 2);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Matrix L = detail::compound_symmetric_factor(d, 0.2);

  CensoredDataset ds;
  ds.m = 3;
  ds.tau = tau;
  ds.X.resize(n, d);
  ds.y.resize(n);
  ds.arm.resize(static_cast<std::size_t>(n));
  ds.event.resize(static_cast<std::size_t>(n));
  Vector z(d);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < d; ++k) z[k] = normal(rng);
    Vector x = L * z;
    for (int k = 0; k < d; ++k) x[k] = 2.0 * normal_cdf(x[k]) - 1.0;
    ds.X.row(i) = x.transpose();
    const int a = detail::draw_arm(oracle.propensity(x), unif(rng));
    const double t = std::min(tau, std::exp(setting2_location(x, a, variant) + normal(rng)));
    const double c = std::exp(setting2_censor_location(x, a) + normal(rng));
    ds.arm[static_cast<std::size_t>(i)] = a;
    ds.y[i] = std::min(t, c);
    ds.event[static_cast<std::size_t>(i)] = t <= c;
  }
  ds.truncate_at_tau();
  return {std::move(ds), std::move(oracle)};
}

/// Covariates alone from a generator (used for large test sets).
inline Matrix simulate_covariates(const std::string& setting, int n, std::uint64_t seed) {
  if (setting == "sim1") return simulate_setting1(n, seed).data.X;
  if (setting == "sim2") return simulate_setting2(n, seed).data.X;
  throw ConfigError("unknown setting " + setting);
}

}  // namespace bpsurv
