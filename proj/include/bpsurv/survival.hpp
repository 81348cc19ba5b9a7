#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "bpsurv/dataset.hpp"

namespace bpsurv {

/// Right-continuous step function: S(t) = surv[j] for the last jump t_j <= t,
/// and 1 before the first jump.
struct SurvivalCurve {
  std::vector<double> times;
  std::vector<double> surv;
  double tau = 0.0;

  [[nodiscard]] double at(double t) const {
    auto it = std::upper_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return 1.0;
    return surv[static_cast<std::size_t>(std::distance(times.begin(), it) - 1)];
  }

  /// Left limit S(t-).
  [[nodiscard]] double before(double t) const {
    auto it = std::lower_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return 1.0;
    return surv[static_cast<std::size_t>(std::distance(times.begin(), it) - 1)];
  }

  [[nodiscard]] bool valid() const {
    double prev = 1.0;
    double prev_t = -1.0;
    for (std::size_t j = 0; j < times.size(); ++j) {
      if (!(times[j] > prev_t) || times[j] > tau) return false;
      if (surv[j] < 0.0 || surv[j] > prev) return false;
      prev = surv[j];
      prev_t = times[j];
    }
    return times.size() == surv.size();
  }
};

enum class RewardTransform { identity, log };

inline double apply_transform(RewardTransform g, double t) {
  return g == RewardTransform::log ? std::log(t) : t;
}

namespace detail {

/// Weighted product-limit estimate over observations pre-sorted by time.
/// Events precede censorings at tied times: a unit censored at t is still
/// at risk for events at t.
inline SurvivalCurve weighted_product_limit(const std::vector<double>& sorted_times,
                                            const std::vector<bool>& sorted_events,
                                            const std::vector<double>& weights, double tau) {
  SurvivalCurve curve;
  curve.tau = tau;
  double at_risk = 0.0;
  for (double w : weights) at_risk += w;
  double s = 1.0;
  std::size_t i = 0;
  const std::size_t n = sorted_times.size();
  while (i < n) {
    const double t = sorted_times[i];
    double events = 0.0;
    double leaving = 0.0;
    std::size_t j = i;
    for (; j < n && sorted_times[j] == t; ++j) {
      if (sorted_events[j]) events += weights[j];
      leaving += weights[j];
    }
    if (events > 0.0 && at_risk > 0.0) {
      s *= std::max(0.0, 1.0 - events / at_risk);
      curve.times.push_back(t);
      curve.surv.push_back(s);
    }
    at_risk -= leaving;
    i = j;
  }
  return curve;
}

}  // namespace detail

/// Product-limit estimate over distinct event times.
inline SurvivalCurve kaplan_meier(const Vector& y, const std::vector<bool>& event, double tau) {
  require_dims(static_cast<std::size_t>(y.size()) == event.size(), "times vs indicators");
  if (y.size() == 0) throw DataError("Kaplan-Meier needs at least one observation");
  std::vector<std::size_t> order(event.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (y[static_cast<Eigen::Index>(a)] != y[static_cast<Eigen::Index>(b)])
      return y[static_cast<Eigen::Index>(a)] < y[static_cast<Eigen::Index>(b)];
    return event[a] && !event[b];
  });
  std::vector<double> t;
  std::vector<bool> e;
  for (auto k : order) {
    t.push_back(y[static_cast<Eigen::Index>(k)]);
    e.push_back(event[k]);
  }
  return detail::weighted_product_limit(t, e, std::vector<double>(t.size(), 1.0), tau);
}

enum class SurvivalTarget { event, censoring };

/// Beran (kernel-conditional Kaplan-Meier) estimator, stratified by arm.
///
/// Weights are exp(-||z - Z_i||^2 / h_a^2) on covariates standardized by the
/// training mean and sd. Without an explicit bandwidth each arm uses
/// h_a = 1.06 * sqrt(d) * n_a^{-1/(d+4)}: standardized coordinates have unit
/// sd, and sqrt(d) keeps the squared-distance scale of the whole vector.
/// Fitting only sorts the arm subsamples; weights are computed per query.
class BeranModel {
 public:
  BeranModel(const CensoredDataset& ds, std::optional<double> bandwidth, SurvivalTarget target)
      : target_(target), tau_(ds.tau), m_(ds.m), d_(ds.d()) {
    if (bandwidth && !(*bandwidth > 0.0)) throw ConfigError("bandwidth must be positive");
    mean_ = ds.X.colwise().mean().transpose();
    sd_ = ((ds.X.rowwise() - mean_.transpose()).colwise().squaredNorm() / std::max<double>(1.0, static_cast<double>(ds.n()) - 1.0))
              .cwiseSqrt()
              .transpose();
    for (Eigen::Index k = 0; k < sd_.size(); ++k)
      if (!(sd_[k] > 0.0)) sd_[k] = 1.0;

    arms_.resize(static_cast<std::size_t>(m_));
    for (std::size_t i = 0; i < ds.n(); ++i) arms_[static_cast<std::size_t>(ds.arm[i])].rows.push_back(i);
    for (int a = 0; a < m_; ++a) {
      auto& st = arms_[static_cast<std::size_t>(a)];
      std::stable_sort(st.rows.begin(), st.rows.end(), [&](std::size_t p, std::size_t q) {
        const double yp = ds.y[static_cast<Eigen::Index>(p)];
        const double yq = ds.y[static_cast<Eigen::Index>(q)];
        if (yp != yq) return yp < yq;
        return indicator(ds, p) && !indicator(ds, q);
      });
      const auto na = static_cast<Eigen::Index>(st.rows.size());
      st.Z.resize(d_, na);
      for (Eigen::Index r = 0; r < na; ++r) {
        const auto i = st.rows[static_cast<std::size_t>(r)];
        st.Z.col(r) = standardize(ds.X.row(static_cast<Eigen::Index>(i)).transpose());
        st.times.push_back(ds.y[static_cast<Eigen::Index>(i)]);
        st.events.push_back(indicator(ds, i));
      }
      if (bandwidth) {
        st.h = *bandwidth;
      } else if (na > 0) {
        st.h = 1.06 * std::sqrt(static_cast<double>(d_)) * std::pow(static_cast<double>(na), -1.0 / (static_cast<double>(d_) + 4.0));
      }
    }
  }

  [[nodiscard]] SurvivalTarget target() const { return target_; }
  [[nodiscard]] double tau() const { return tau_; }
  [[nodiscard]] double bandwidth(int a) const { return arms_.at(static_cast<std::size_t>(a)).h; }

  [[nodiscard]] SurvivalCurve predict(const Eigen::Ref<const Vector>& x, int a) const {
    require_dims(x.size() == d_, "query covariates vs training dimension");
    if (a < 0 || a >= m_) throw DataError("arm label out of range");
    const auto& st = arms_[static_cast<std::size_t>(a)];
    if (st.rows.empty()) throw DataError("arm " + std::to_string(a + 1) + " has no training observations");
    const Vector z = standardize(x);
    const auto na = static_cast<std::size_t>(st.Z.cols());
    std::vector<double> d2(na);
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < na; ++r) {
      d2[r] = (st.Z.col(static_cast<Eigen::Index>(r)) - z).squaredNorm();
      dmin = std::min(dmin, d2[r]);
    }
    const double inv_h2 = 1.0 / (st.h * st.h);
    std::vector<double> w(na);
    for (std::size_t r = 0; r < na; ++r) w[r] = std::exp(-(d2[r] - dmin) * inv_h2);
    return detail::weighted_product_limit(st.times, st.events, w, tau_);
  }

 private:
  struct Stratum {
    std::vector<std::size_t> rows;
    Matrix Z;
    std::vector<double> times;
    std::vector<bool> events;
    double h = 1.0;
  };

  [[nodiscard]] bool indicator(const CensoredDataset& ds, std::size_t i) const {
    return target_ == SurvivalTarget::event ? ds.event[i] : !ds.event[i];
  }

  [[nodiscard]] Vector standardize(const Eigen::Ref<const Vector>& x) const {
    return (x - mean_).cwiseQuotient(sd_);
  }

  SurvivalTarget target_;
  double tau_;
  int m_;
  Eigen::Index d_;
  Vector mean_;
  Vector sd_;
  std::vector<Stratum> arms_;
};

inline BeranModel fit_beran(const CensoredDataset& ds, std::optional<double> bandwidth,
                            SurvivalTarget target = SurvivalTarget::event) {
  return BeranModel(ds, bandwidth, target);
}

/// Denominator floor for S(y | x, a) and G(y | x, a).
inline constexpr double kSurvivalFloor = 0.05;

struct ResidualValue {
  double value = 0.0;
  bool floor_hit = false;
};

/// Restricted mean of g(T) given T > y under the curve:
/// (sum_{t_j > y} g(t_j) (S(t_j-) - S(t_j)) + g(tau) S(tau)) / max(S(y), floor),
/// kept inside [g(y), g(tau)].
inline ResidualValue expected_residual(const SurvivalCurve& curve, double y, RewardTransform g,
                                       double floor = kSurvivalFloor) {
  double num = 0.0;
  double prev = 1.0;
  double s_y = 1.0;
  for (std::size_t j = 0; j < curve.times.size(); ++j) {
    if (curve.times[j] > y) num += apply_transform(g, curve.times[j]) * (prev - curve.surv[j]);
    else s_y = curve.surv[j];
    prev = curve.surv[j];
  }
  num += apply_transform(g, curve.tau) * curve.at(curve.tau);
  ResidualValue out;
  out.floor_hit = s_y < floor;
  const double raw = num / std::max(s_y, floor);
  const double lo = apply_transform(g, std::min(y, curve.tau));
  const double hi = apply_transform(g, curve.tau);
  out.value = std::clamp(raw, lo, hi);
  return out;
}

/// Outcome vector with censored entries replaced by conditional expectations.
struct ImputedOutcomes {
  Vector yhat;
  RewardTransform transform = RewardTransform::identity;
  std::size_t floor_hits = 0;
  std::vector<bool> floor_hit;
};

inline ImputedOutcomes impute(const CensoredDataset& ds, const BeranModel& model, RewardTransform g,
                              double floor = kSurvivalFloor) {
  if (model.target() != SurvivalTarget::event) throw ConfigError("imputation needs an event-time survival model");
  ImputedOutcomes out;
  out.transform = g;
  out.yhat.resize(static_cast<Eigen::Index>(ds.n()));
  out.floor_hit.assign(ds.n(), false);
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (ds.event[i]) {
      out.yhat[r] = apply_transform(g, ds.y[r]);
      continue;
    }
    const auto res = expected_residual(model.predict(ds.X.row(r).transpose(), ds.arm[i]), ds.y[r], g, floor);
    out.yhat[r] = res.value;
    if (res.floor_hit) {
      out.floor_hit[i] = true;
      ++out.floor_hits;
    }
  }
  return out;
}

/// Dataset columns (x1..xd, a, y, delta, after horizon truncation) with the
/// imputed outcome and the survival-floor flag appended.
inline void write_imputed_csv(std::ostream& out, const CensoredDataset& ds, const ImputedOutcomes& imp) {
  out.precision(17);
  for (Eigen::Index k = 0; k < ds.d(); ++k) out << 'x' << (k + 1) << ',';
  out << "a,y,delta,yhat,floor_hit\n";
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (Eigen::Index k = 0; k < ds.d(); ++k) out << ds.X(r, k) << ',';
    out << (ds.arm[i] + 1) << ',' << ds.y[r] << ',' << (ds.event[i] ? 1 : 0) << ',' << imp.yhat[r] << ','
        << (imp.floor_hit[i] ? 1 : 0) << '\n';
  }
}

}  // namespace bpsurv
