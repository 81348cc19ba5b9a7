#pragma once

// Independent reference computations used by the unit and acceptance suites.
// Nothing here calls into the solver or estimator code paths it checks.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

namespace oracle {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Worst-case CMSE by direct double sums over (i, j, a).
inline double naive_cmse(const Vector& w, const Matrix& K, const Matrix& pi, const std::vector<int>& arms,
                         const Vector& gamma, const Vector& lambda) {
  const auto n = w.size();
  const auto m = pi.cols();
  double bias2 = 0.0;
  for (Eigen::Index a = 0; a < m; ++a) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double vi = (arms[static_cast<std::size_t>(i)] == a ? w[i] : 0.0) - pi(i, a);
      for (Eigen::Index j = 0; j < n; ++j) {
        const double vj = (arms[static_cast<std::size_t>(j)] == a ? w[j] : 0.0) - pi(j, a);
        s += vi * K(i, j) * vj;
      }
    }
    bias2 += gamma[a] * gamma[a] * s;
  }
  double var = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) var += lambda[i] * w[i] * w[i];
  const double nn = static_cast<double>(n * n);
  return bias2 / nn + var / nn;
}

/// Quadratic H and linear b with n^2 cmse(w) = w^T H w - 2 b^T w + const, built
/// entrywise from the definition.
inline void cmse_quadratic(const Matrix& K, const Matrix& pi, const std::vector<int>& arms, const Vector& gamma,
                           const Vector& lambda, Matrix& H, Vector& b) {
  const auto n = K.rows();
  H = Matrix::Zero(n, n);
  b = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int ai = arms[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < n; ++j) {
      if (arms[static_cast<std::size_t>(j)] == ai) H(i, j) = gamma[ai] * gamma[ai] * K(i, j);
      b[i] += gamma[ai] * gamma[ai] * K(i, j) * pi(j, ai);
    }
    H(i, i) += lambda[i];
  }
}

/// Exact minimum over {w >= 0, sum w = n} by enumerating all supports and
/// solving each bordered KKT system (exponential; n <= 14).
inline double support_enumeration_min(const Matrix& K, const Matrix& pi, const std::vector<int>& arms,
                                      const Vector& gamma, const Vector& lambda, Vector* argmin = nullptr) {
  Matrix H;
  Vector b;
  cmse_quadratic(K, pi, arms, gamma, lambda, H, b);
  const auto n = K.rows();
  double best = std::numeric_limits<double>::infinity();
  for (unsigned mask = 1; mask < (1u << n); ++mask) {
    std::vector<Eigen::Index> S;
    for (Eigen::Index i = 0; i < n; ++i)
      if (mask & (1u << i)) S.push_back(i);
    const auto s = static_cast<Eigen::Index>(S.size());
    Matrix A = Matrix::Zero(s + 1, s + 1);
    Vector rhs(s + 1);
    for (Eigen::Index r = 0; r < s; ++r) {
      for (Eigen::Index c = 0; c < s; ++c) A(r, c) = 2.0 * H(S[r], S[c]);
      A(r, s) = -1.0;
      A(s, r) = 1.0;
      rhs[r] = 2.0 * b[S[r]];
    }
    rhs[s] = static_cast<double>(n);
    const Vector sol = A.fullPivLu().solve(rhs);
    Vector w = Vector::Zero(n);
    bool feasible = true;
    for (Eigen::Index r = 0; r < s; ++r) {
      if (sol[r] < -1e-12) feasible = false;
      w[S[r]] = std::max(0.0, sol[r]);
    }
    if (!feasible) continue;
    const double v = naive_cmse(w, K, pi, arms, gamma, lambda);
    if (v < best) {
      best = v;
      if (argmin) *argmin = w;
    }
  }
  return best;
}

/// Minimum over the barycentric grid {w = n * k / steps, sum k = steps}.
inline double barycentric_grid_min(const Matrix& K, const Matrix& pi, const std::vector<int>& arms,
                                   const Vector& gamma, const Vector& lambda, int steps) {
  const auto n = K.rows();
  Matrix H;
  Vector b;
  cmse_quadratic(K, pi, arms, gamma, lambda, H, b);
  double constant = naive_cmse(Vector::Zero(n), K, pi, arms, gamma, lambda) * static_cast<double>(n * n);
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> k(static_cast<std::size_t>(n), 0);
  Vector w(n);
  std::function<void(Eigen::Index, int)> rec = [&](Eigen::Index pos, int left) {
    if (pos == n - 1) {
      k[static_cast<std::size_t>(pos)] = left;
      for (Eigen::Index i = 0; i < n; ++i) w[i] = static_cast<double>(n) * k[static_cast<std::size_t>(i)] / steps;
      const double v = (w.dot(H * w) - 2.0 * b.dot(w) + constant) / static_cast<double>(n * n);
      best = std::min(best, v);
      return;
    }
    for (int c = 0; c <= left; ++c) {
      k[static_cast<std::size_t>(pos)] = c;
      rec(pos + 1, left - c);
    }
  };
  rec(0, steps);
  return best;
}

/// Random PSD Gram with unit diagonal (correlation matrix of random vectors).
inline Matrix random_psd_gram(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Matrix F(n, n + 2);
  for (Eigen::Index i = 0; i < F.rows(); ++i)
    for (Eigen::Index j = 0; j < F.cols(); ++j) F(i, j) = nd(rng);
  for (Eigen::Index i = 0; i < n; ++i) F.row(i).normalize();
  return F * F.transpose();
}

inline Matrix random_policy(Eigen::Index n, Eigen::Index m, std::mt19937_64& rng) {
  std::exponential_distribution<double> ex(1.0);
  Matrix pi(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index a = 0; a < m; ++a) pi(i, a) = ex(rng);
    pi.row(i) /= pi.row(i).sum();
  }
  return pi;
}

/// Random point on {w >= 0, sum w = n}.
inline Vector random_simplex_weights(Eigen::Index n, std::mt19937_64& rng) {
  std::exponential_distribution<double> ex(1.0);
  Vector w(n);
  for (Eigen::Index i = 0; i < n; ++i) w[i] = ex(rng);
  return w * (static_cast<double>(n) / w.sum());
}

/// Central finite-difference gradient.
inline Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& x, double h) {
  Vector g(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    Vector xp = x, xm = x;
    xp[k] += h;
    xm[k] -= h;
    g[k] = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

inline double relative_error(const Vector& a, const Vector& b) {
  return (a - b).norm() / std::max(1e-12, std::max(a.norm(), b.norm()));
}

}  // namespace oracle
