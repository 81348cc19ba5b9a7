#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "bpsurv/dataset.hpp"

namespace bpsurv {

enum class FeatureMap { linear, quadratic };

/// Design row [1, x] or [1, x, x_k x_l (k <= l)].
inline Vector expand_row(const Eigen::Ref<const Vector>& x, FeatureMap map) {
  const Eigen::Index d = x.size();
  const Eigen::Index p = map == FeatureMap::linear ? d : d + d * (d + 1) / 2;
  Vector out(p + 1);
  out[0] = 1.0;
  out.segment(1, d) = x;
  if (map == FeatureMap::quadratic) {
    Eigen::Index c = d + 1;
    for (Eigen::Index k = 0; k < d; ++k)
      for (Eigen::Index l = k; l < d; ++l) out[c++] = x[k] * x[l];
  }
  return out;
}

inline Matrix expand_features(const Matrix& X, FeatureMap map) {
  if (map == FeatureMap::linear) {
    Matrix out(X.rows(), X.cols() + 1);
    out.col(0).setOnes();
    out.rightCols(X.cols()) = X;
    return out;
  }
  Matrix out(X.rows(), 1 + X.cols() + X.cols() * (X.cols() + 1) / 2);
  for (Eigen::Index i = 0; i < X.rows(); ++i) out.row(i) = expand_row(X.row(i).transpose(), map).transpose();
  return out;
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp();
  return p.array().colwise() / p.rowwise().sum().array();
}

/// Multinomial softmax-linear propensity model with denominator clipping.
struct PropensityModel {
  Matrix beta;  // m x (p + 1), row 0 pinned to zero
  double clip = 0.05;
  FeatureMap features = FeatureMap::linear;

  [[nodiscard]] Matrix predict(const Matrix& X) const {
    const Matrix F = expand_features(X, features);
    require_dims(F.cols() == beta.cols(), "propensity features vs coefficients");
    return softmax_rows(F * beta.transpose());
  }
};

struct PropensityOptions {
  double ridge = 1e-4;
  double clip = 0.05;
  FeatureMap features = FeatureMap::linear;
  int max_iter = 100;
};

/// Maximizes (1/n) sum_i log p_{A_i}(X_i) - ridge * ||beta||^2 by damped Newton.
inline PropensityModel fit_propensity(const CensoredDataset& ds, const PropensityOptions& opt = {}) {
  const auto counts = ds.arm_counts();
  for (int a = 0; a < ds.m; ++a)
    if (counts[static_cast<std::size_t>(a)] == 0)
      throw DataError("propensity fit: arm " + std::to_string(a + 1) + " is never observed");
  if (!(opt.clip > 0.0) || opt.clip > 1.0 / ds.m) throw ConfigError("clip must lie in (0, 1/m]");

  const Matrix F = expand_features(ds.X, opt.features);
  const Eigen::Index n = F.rows();
  const Eigen::Index q = F.cols();
  const int m = ds.m;
  const Eigen::Index P = (m - 1) * q;
  const double inv_n = 1.0 / static_cast<double>(n);

  Matrix onehot = Matrix::Zero(n, m);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, ds.arm[static_cast<std::size_t>(i)]) = 1.0;

  auto unpack = [&](const Vector& theta) {
    Matrix beta = Matrix::Zero(m, q);
    for (int a = 1; a < m; ++a) beta.row(a) = theta.segment((a - 1) * q, q).transpose();
    return beta;
  };
  auto objective = [&](const Vector& theta) {
    const Matrix logits = F * unpack(theta).transpose();
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = logits.row(i).maxCoeff();
      const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
      ll += logits(i, ds.arm[static_cast<std::size_t>(i)]) - lse;
    }
    return ll * inv_n - opt.ridge * theta.squaredNorm();
  };

  Vector theta = Vector::Zero(P);
  double f = objective(theta);
  for (int it = 0; it < opt.max_iter; ++it) {
    const Matrix p = softmax_rows(F * unpack(theta).transpose());
    const Matrix resid = onehot - p;
    Vector grad(P);
    for (int a = 1; a < m; ++a) grad.segment((a - 1) * q, q) = F.transpose() * resid.col(a) * inv_n;
    grad -= 2.0 * opt.ridge * theta;

    Matrix H = Matrix::Zero(P, P);
    for (int a = 1; a < m; ++a) {
      for (int b = a; b < m; ++b) {
        Vector wts = -p.col(a).cwiseProduct(p.col(b));
        if (a == b) wts += p.col(a);
        const Matrix block = F.transpose() * wts.asDiagonal() * F * inv_n;
        H.block((a - 1) * q, (b - 1) * q, q, q) = block;
        if (a != b) H.block((b - 1) * q, (a - 1) * q, q, q) = block.transpose();
      }
    }
    H.diagonal().array() += 2.0 * opt.ridge;
    const Vector step = H.ldlt().solve(grad);
    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 40; ++ls) {
      const Vector cand = theta + t * step;
      const double fc = objective(cand);
      if (fc >= f) {
        moved = fc > f;
        theta = cand;
        f = fc;
        break;
      }
      t *= 0.5;
    }
    if (!moved || grad.lpNorm<Eigen::Infinity>() < 1e-10) break;
  }
  return {unpack(theta), opt.clip, opt.features};
}

}  // namespace bpsurv
