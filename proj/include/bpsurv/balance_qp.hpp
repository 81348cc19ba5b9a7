#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "bpsurv/estimators.hpp"

namespace bpsurv {

/// Euclidean projection of v onto {w >= 0, sum w = total}.
inline Vector project_scaled_simplex(const Vector& v, double total) {
  const Eigen::Index n = v.size();
  std::vector<double> u(v.data(), v.data() + n);
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0;
  double theta = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    cumsum += u[static_cast<std::size_t>(k)];
    const double t = (cumsum - total) / static_cast<double>(k + 1);
    if (u[static_cast<std::size_t>(k)] - t > 0.0) theta = t;
  }
  return (v.array() - theta).max(0.0).matrix();
}

struct QpOptions {
  double kkt_tol = 1e-6;
  /// Stall detector: stop when the relative objective decrease stays below
  /// this for 200 consecutive iterations.
  double rel_tol = 1e-8;
  int max_iter = 50000;
  /// Exact active-set polishing of the accelerated iterates (skipped for n > 5000).
  bool polish = true;
  bool record_trace = false;
};

struct QpResult {
  WeightVector weights;
  double objective = 0.0;  // worst-case CMSE at the returned weights
  double kkt_residual = 0.0;
  std::vector<double> trace;
};

/// The balancing QP for a fixed design (kernel, arms, Lambda). With a shared
/// kernel the quadratic form is block diagonal by arm:
///   n^2 E^2(w) = sum_a (w_a^T Q_a w_a - 2 c_a^T w_a) + const,
///   Q_a = gamma_a^2 K[I_a, I_a] + diag(lambda[I_a]),  c_a = gamma_a^2 K[I_a, :] pi_a.
/// Only c and const depend on the policy, so one instance serves a whole
/// policy-learning run.
class BalanceProblem {
 public:
  BalanceProblem(Matrix K, Vector gamma, Vector lambda, std::vector<int> arms, int m)
      : K_(std::move(K)), gamma_(std::move(gamma)), lambda_(std::move(lambda)), arms_(std::move(arms)), m_(m) {
    const Eigen::Index n = K_.rows();
    require_dims(K_.cols() == n && lambda_.size() == n && arms_.size() == static_cast<std::size_t>(n) &&
                     gamma_.size() == m,
                 "balance problem components");
    if ((lambda_.array() <= 0.0).any()) throw ConfigError("lambda diagonal must be strictly positive");
    idx_.resize(static_cast<std::size_t>(m));
    pos_.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& v = idx_.at(static_cast<std::size_t>(arms_[static_cast<std::size_t>(i)]));
      pos_[static_cast<std::size_t>(i)] = static_cast<Eigen::Index>(v.size());
      v.push_back(i);
    }
    Q_.resize(static_cast<std::size_t>(m));
    lipschitz_ = 0.0;
    for (int a = 0; a < m; ++a) {
      const auto& I = idx_[static_cast<std::size_t>(a)];
      const auto na = static_cast<Eigen::Index>(I.size());
      Matrix& Q = Q_[static_cast<std::size_t>(a)];
      Q.resize(na, na);
      const double g2 = gamma_[a] * gamma_[a];
      for (Eigen::Index c = 0; c < na; ++c)
        for (Eigen::Index r = 0; r < na; ++r) Q(r, c) = g2 * K_(I[static_cast<std::size_t>(r)], I[static_cast<std::size_t>(c)]);
      for (Eigen::Index r = 0; r < na; ++r) Q(r, r) += lambda_[I[static_cast<std::size_t>(r)]];
      lipschitz_ = std::max(lipschitz_, 2.0 * top_eigenvalue(Q));
    }
  }

  explicit BalanceProblem(const BalanceObjective& obj)
      : BalanceProblem(obj.K, obj.gamma, obj.lambda, obj.arms, obj.m()) {
    set_policy(obj.policy);
  }

  [[nodiscard]] Eigen::Index n() const { return K_.rows(); }
  [[nodiscard]] int m() const { return m_; }
  [[nodiscard]] const Matrix& kernel() const { return K_; }
  [[nodiscard]] const Vector& gamma() const { return gamma_; }
  [[nodiscard]] const std::vector<int>& arms() const { return arms_; }
  [[nodiscard]] const PolicyMatrix& policy() const { return policy_; }

  void set_policy(const PolicyMatrix& pi) {
    require_dims(pi.rows() == n() && pi.cols() == m_, "policy vs balance problem");
    policy_ = pi;
    const Matrix KP = K_ * pi;
    c_ = Vector(n());
    constant_ = 0.0;
    for (Eigen::Index i = 0; i < n(); ++i) {
      const int a = arms_[static_cast<std::size_t>(i)];
      c_[i] = gamma_[a] * gamma_[a] * KP(i, a);
    }
    for (int a = 0; a < m_; ++a) constant_ += gamma_[a] * gamma_[a] * pi.col(a).dot(KP.col(a));
  }

  /// Q w (block product, arm-ordered within the full-length vector).
  [[nodiscard]] Vector apply_q(const Vector& w) const {
    Vector out(n());
    for (int a = 0; a < m_; ++a) {
      const auto& I = idx_[static_cast<std::size_t>(a)];
      const auto na = static_cast<Eigen::Index>(I.size());
      Vector wa(na);
      for (Eigen::Index r = 0; r < na; ++r) wa[r] = w[I[static_cast<std::size_t>(r)]];
      const Vector qa = Q_[static_cast<std::size_t>(a)] * wa;
      for (Eigen::Index r = 0; r < na; ++r) out[I[static_cast<std::size_t>(r)]] = qa[r];
    }
    return out;
  }

  /// n^2 * worst-case CMSE.
  [[nodiscard]] double scaled_objective(const Vector& w, const Vector& Qw) const {
    return w.dot(Qw) - 2.0 * c_.dot(w) + constant_;
  }

  [[nodiscard]] double objective(const Vector& w) const {
    const double nn = static_cast<double>(n());
    return std::max(0.0, scaled_objective(w, apply_q(w))) / (nn * nn);
  }

  /// Gradient of n * E^2, which is O(1) in n.
  [[nodiscard]] Vector normalized_gradient(const Vector& Qw) const {
    return 2.0 * (Qw - c_) / static_cast<double>(n());
  }

  /// max deviation from the KKT conditions of the simplex-constrained problem.
  [[nodiscard]] double kkt_residual(const Vector& w, const Vector& g) const {
    double gmax = -std::numeric_limits<double>::infinity();
    double gmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      if (w[i] > 0.0) {
        gmax = std::max(gmax, g[i]);
        gmin = std::min(gmin, g[i]);
      }
    }
    const double nu = 0.5 * (gmax + gmin);
    double res = 0.5 * (gmax - gmin);
    for (Eigen::Index i = 0; i < w.size(); ++i)
      if (w[i] <= 0.0) res = std::max(res, nu - g[i]);
    return res;
  }

  /// Factorization of the equality-constrained problem on a fixed support.
  struct SupportSystem {
    std::vector<std::vector<Eigen::Index>> rows;  // per arm, positions within arm block
    std::vector<Eigen::LLT<Matrix>> llt;
    Vector qinv_ones;  // full length, zero off-support
    double ones_qinv_ones = 0.0;
    bool ok = false;
  };

  [[nodiscard]] SupportSystem factor_support(const std::vector<bool>& support) const {
    SupportSystem sys;
    sys.rows.resize(static_cast<std::size_t>(m_));
    sys.llt.resize(static_cast<std::size_t>(m_));
    sys.qinv_ones = Vector::Zero(n());
    for (int a = 0; a < m_; ++a) {
      const auto& I = idx_[static_cast<std::size_t>(a)];
      auto& rows = sys.rows[static_cast<std::size_t>(a)];
      for (std::size_t r = 0; r < I.size(); ++r)
        if (support[static_cast<std::size_t>(I[r])]) rows.push_back(static_cast<Eigen::Index>(r));
      if (rows.empty()) continue;
      const auto s = static_cast<Eigen::Index>(rows.size());
      Matrix Qs(s, s);
      const Matrix& Q = Q_[static_cast<std::size_t>(a)];
      for (Eigen::Index c = 0; c < s; ++c)
        for (Eigen::Index r = 0; r < s; ++r) Qs(r, c) = Q(rows[static_cast<std::size_t>(r)], rows[static_cast<std::size_t>(c)]);
      sys.llt[static_cast<std::size_t>(a)].compute(Qs);
      if (sys.llt[static_cast<std::size_t>(a)].info() != Eigen::Success) return sys;
      const Vector x = sys.llt[static_cast<std::size_t>(a)].solve(Vector::Ones(s));
      for (Eigen::Index r = 0; r < s; ++r) sys.qinv_ones[I[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])]] = x[r];
    }
    sys.ones_qinv_ones = sys.qinv_ones.sum();
    sys.ok = sys.ones_qinv_ones > 0.0 && std::isfinite(sys.ones_qinv_ones);
    return sys;
  }

  /// Q_S^{-1} v restricted to the support (zero elsewhere).
  [[nodiscard]] Vector support_solve(const SupportSystem& sys, const Vector& v) const {
    Vector out = Vector::Zero(n());
    for (int a = 0; a < m_; ++a) {
      const auto& rows = sys.rows[static_cast<std::size_t>(a)];
      if (rows.empty()) continue;
      const auto& I = idx_[static_cast<std::size_t>(a)];
      const auto s = static_cast<Eigen::Index>(rows.size());
      Vector rhs(s);
      for (Eigen::Index r = 0; r < s; ++r) rhs[r] = v[I[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])]];
      const Vector x = sys.llt[static_cast<std::size_t>(a)].solve(rhs);
      for (Eigen::Index r = 0; r < s; ++r) out[I[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])]] = x[r];
    }
    return out;
  }

  /// Derivative map of the support solution w_S(c) = Q_S^{-1}(c_S + eta 1)
  /// with eta fixed by sum w = n: P v = Q^{-1} v - Q^{-1} 1 (1^T Q^{-1} v) / (1^T Q^{-1} 1).
  [[nodiscard]] Vector support_projection(const SupportSystem& sys, const Vector& v) const {
    const Vector x = support_solve(sys, v);
    return x - sys.qinv_ones * (x.sum() / sys.ones_qinv_ones);
  }

  /// Minimizes the worst-case CMSE over {w >= 0, sum w = n} by monotone FISTA
  /// with exact simplex projection, polishing candidate supports exactly.
  [[nodiscard]] QpResult solve(const QpOptions& opt = {}, const Vector* warm = nullptr) const {
    const Eigen::Index n = this->n();
    const double total = static_cast<double>(n);
    const double nn = total * total;
    QpResult res;
    Vector x = warm && warm->size() == n ? project_scaled_simplex(*warm, total) : Vector::Ones(n);
    Vector Qx = apply_q(x);
    double Jx = scaled_objective(x, Qx);
    if (opt.record_trace) res.trace.push_back(std::max(0.0, Jx) / nn);

    const bool can_polish = opt.polish && n <= 5000;
    double L = std::max(lipschitz_, 1e-12);
    Vector y = x;
    Vector xprev = x;
    double t = 1.0;
    int stall = 0;
    int next_polish = 0;
    double kkt = std::numeric_limits<double>::infinity();
    int it = 0;
    for (; it <= opt.max_iter; ++it) {
      kkt = kkt_residual(x, normalized_gradient(Qx));
      if (kkt <= opt.kkt_tol) break;
      if (can_polish && it >= next_polish && (kkt < 1e-2 || it % 25 == 0)) {
        if (auto pw = polish(x)) {
          const Vector Qp = apply_q(*pw);
          const double Jp = scaled_objective(*pw, Qp);
          if (Jp <= Jx + 1e-12 * (1.0 + std::abs(Jx))) {
            xprev = x;
            x = *pw;
            Qx = Qp;
            Jx = std::min(Jx, Jp);
            y = x;
            t = 1.0;
            if (opt.record_trace) res.trace.push_back(std::max(0.0, Jx) / nn);
            kkt = kkt_residual(x, normalized_gradient(Qx));
            if (kkt <= opt.kkt_tol) break;
          }
        }
        next_polish = it + 25;
      }
      if (it == opt.max_iter) break;

      const Vector Qy = apply_q(y);
      const double Jy = scaled_objective(y, Qy);
      const Vector gy = 2.0 * (Qy - c_);
      Vector z;
      Vector Qz;
      double Jz = 0.0;
      for (int bt = 0; bt < 60; ++bt) {
        z = project_scaled_simplex(y - gy / L, total);
        Qz = apply_q(z);
        Jz = scaled_objective(z, Qz);
        const Vector dz = z - y;
        if (Jz <= Jy + gy.dot(dz) + 0.5 * L * dz.squaredNorm() + 1e-12 * (1.0 + std::abs(Jy))) break;
        L *= 2.0;
      }
      const Vector xold = x;
      const double Jold = Jx;
      if (Jz <= Jx) {
        x = z;
        Qx = Qz;
        Jx = Jz;
      }
      const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      y = x + (t / tn) * (z - x) + ((t - 1.0) / tn) * (x - xold);
      t = tn;
      xprev = xold;
      if (opt.record_trace) res.trace.push_back(std::max(0.0, Jx) / nn);

      if (Jold - Jx <= opt.rel_tol * std::abs(Jold)) {
        if (++stall >= 200) break;
      } else {
        stall = 0;
      }
    }
    res.kkt_residual = kkt;
    res.weights.w = x;
    res.weights.converged = kkt <= opt.kkt_tol;
    res.weights.iterations = it;
    res.objective = std::max(0.0, Jx) / nn;
    return res;
  }

  /// Solution of the equality-constrained problem restricted to a support.
  [[nodiscard]] Vector support_solution(const SupportSystem& sys) const {
    const Vector qc = support_solve(sys, c_);
    const double eta = (static_cast<double>(n()) - qc.sum()) / sys.ones_qinv_ones;
    return qc + eta * sys.qinv_ones;
  }

 private:
  /// Primal active-set refinement starting from the support of x.
  [[nodiscard]] std::optional<Vector> polish(const Vector& x) const {
    std::vector<bool> support(static_cast<std::size_t>(n()));
    for (Eigen::Index i = 0; i < n(); ++i) support[static_cast<std::size_t>(i)] = x[i] > 0.0;
    for (int round = 0; round < 30; ++round) {
      const auto sys = factor_support(support);
      if (!sys.ok) return std::nullopt;
      const Vector w = support_solution(sys);
      bool dropped = false;
      for (Eigen::Index i = 0; i < n(); ++i) {
        if (support[static_cast<std::size_t>(i)] && w[i] <= 0.0) {
          support[static_cast<std::size_t>(i)] = false;
          dropped = true;
        }
      }
      if (dropped) continue;
      const Vector g = 2.0 * (apply_q(w) - c_);
      double nu = 0.0;
      Eigen::Index count = 0;
      for (Eigen::Index i = 0; i < n(); ++i)
        if (support[static_cast<std::size_t>(i)]) {
          nu += g[i];
          ++count;
        }
      if (count == 0) return std::nullopt;
      nu /= static_cast<double>(count);
      Eigen::Index worst = -1;
      double viol = 1e-12 * (1.0 + std::abs(nu));
      for (Eigen::Index i = 0; i < n(); ++i) {
        if (!support[static_cast<std::size_t>(i)] && nu - g[i] > viol) {
          viol = nu - g[i];
          worst = i;
        }
      }
      if (worst < 0) return w.cwiseMax(0.0);
      support[static_cast<std::size_t>(worst)] = true;
    }
    return std::nullopt;
  }

  static double top_eigenvalue(const Matrix& Q) {
    if (Q.rows() == 0) return 0.0;
    Vector v = Vector::Ones(Q.rows()).normalized();
    double lam = 0.0;
    for (int k = 0; k < 100; ++k) {
      const Vector u = Q * v;
      const double nu = u.norm();
      if (!(nu > 0.0)) return 0.0;
      const double next = v.dot(u);
      v = u / nu;
      if (std::abs(next - lam) <= 1e-10 * std::abs(next)) {
        lam = next;
        break;
      }
      lam = next;
    }
    return lam * 1.05;
  }

  Matrix K_;
  Vector gamma_;
  Vector lambda_;
  std::vector<int> arms_;
  int m_;
  std::vector<std::vector<Eigen::Index>> idx_;
  std::vector<Eigen::Index> pos_;
  std::vector<Matrix> Q_;
  double lipschitz_ = 0.0;
  PolicyMatrix policy_;
  Vector c_;
  double constant_ = 0.0;
};

/// Minimizer of the worst-case CMSE over weights summing to n.
inline WeightVector balanced_weights(const BalanceObjective& obj, const QpOptions& opt = {}) {
  obj.validate();
  return BalanceProblem(obj).solve(opt).weights;
}

}  // namespace bpsurv
