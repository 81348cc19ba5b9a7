// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails. Pass criterion numbers as arguments to
// run a subset.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "bpsurv/bench.hpp"
#include "oracles.hpp"

using namespace bpsurv;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto k = v.size() / 2;
  return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

BalanceObjective random_objective(Eigen::Index n, int m, std::mt19937_64& rng, bool random_gamma) {
  BalanceObjective obj;
  obj.K = oracle::random_psd_gram(n, rng);
  obj.policy = oracle::random_policy(n, m, rng);
  obj.gamma = Vector::Ones(m);
  if (random_gamma) {
    std::uniform_real_distribution<double> u(0.5, 2.0);
    for (auto& g : obj.gamma) g = u(rng);
  }
  obj.lambda = Vector::Ones(n);
  std::uniform_int_distribution<int> arm(0, m - 1);
  for (Eigen::Index i = 0; i < n; ++i) obj.arms.push_back(arm(rng));
  return obj;
}

// 1. Balancing QP against exhaustive oracles.
Outcome qp_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> size(2, 12);
  std::uniform_int_distribution<int> arms(2, 3);
  double worst_gap = -std::numeric_limits<double>::infinity();
  int grid_checked = 0;
  for (int inst = 0; inst < 50; ++inst) {
    const auto n = static_cast<Eigen::Index>(size(rng));
    const auto obj = random_objective(n, arms(rng), rng, false);
    const double solver = cmse_objective(balanced_weights(obj), obj).objective;
    double oracle_min = oracle::support_enumeration_min(obj.K, obj.policy, obj.arms, obj.gamma, obj.lambda);
    if (n <= 4) {
      oracle_min = std::min(oracle_min, oracle::barycentric_grid_min(obj.K, obj.policy, obj.arms, obj.gamma, obj.lambda, 200));
      ++grid_checked;
    }
    worst_gap = std::max(worst_gap, solver - oracle_min);
  }
  const double secs = seconds_since(t0);
  return {worst_gap <= 1e-5 && secs < 60.0,
          fmt("max(solver - oracle) = %.3g over 50 instances (%d also on the 0.005 grid), %.1f s", worst_gap,
              grid_checked, secs)};
}

// 2. Closed-form worst-case bias bounds random unit-norm RKHS functions.
Outcome dual_norm() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  double worst = -std::numeric_limits<double>::infinity();
  for (int inst = 0; inst < 20; ++inst) {
    const auto obj = random_objective(10, 3, rng, true);
    WeightVector w;
    w.w = oracle::random_simplex_weights(10, rng);
    const double bound = worst_case_bias(w, obj);
    for (int f = 0; f < 200; ++f) {
      Matrix alpha(10, 3);
      for (auto& v : alpha.reshaped()) v = nd(rng);
      double norm2 = 0.0;
      for (int a = 0; a < 3; ++a) norm2 += alpha.col(a).dot(obj.K * alpha.col(a)) / (obj.gamma[a] * obj.gamma[a]);
      alpha /= std::sqrt(norm2);
      worst = std::max(worst, std::abs(conditional_bias(w.w, obj.policy, obj.arms, obj.K * alpha)) - bound);
    }
  }
  return {worst <= 1e-10, fmt("max(|B(f)| - bound) = %.3g over 4000 functions", worst)};
}

// 3. psi_W - SAPE = B(W, pi; mu) + (1/n) sum W_i eps_i.
Outcome cmse_decomposition() {
  double worst = 0.0;
  std::mt19937_64 rng(3);
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    const auto sim = simulate_setting2(300, seed);
    const auto& ds = sim.data;
    const auto imp = impute(ds, fit_beran(ds, std::nullopt), RewardTransform::log);
    const Matrix mu = sim.oracle.mean_matrix(ds.X);
    Vector eps(300);
    for (Eigen::Index i = 0; i < 300; ++i) eps[i] = imp.yhat[i] - mu(i, ds.arm[static_cast<std::size_t>(i)]);
    const Matrix pi = oracle::random_policy(300, 3, rng);
    const double truth = sape(pi, sim.oracle, ds.X);
    GpFit fit;
    fit.noise_variance = 0.5;
    std::vector<Vector> candidates{oracle::random_simplex_weights(300, rng), Vector::Ones(300),
                                   balanced_estimate(ds, pi, imp, KernelConfig::from_data(ds.X, 3, 2.0), fit,
                                                     BalancedMode::weighted)
                                       .weights};
    for (const auto& w : candidates) {
      WeightVector wv;
      wv.w = w;
      const double lhs = weighted_estimator(wv, imp.yhat).estimate - truth;
      const double rhs = conditional_bias(w, pi, ds.arm, mu) + w.dot(eps) / 300.0;
      worst = std::max(worst, std::abs(lhs - rhs));
    }
  }
  return {worst <= 1e-10, fmt("max |lhs - rhs| = %.3g over 9 weight vectors", worst)};
}

// 4. Imputation on fixed step curves, event pass-through, Beran vs KM.
Outcome imputation() {
  auto curve = [](std::vector<double> t, std::vector<double> s, double tau) {
    SurvivalCurve c;
    c.times = std::move(t);
    c.surv = std::move(s);
    c.tau = tau;
    return c;
  };
  double err = 0.0;
  const auto two = curve({1.0, 2.0}, {0.5, 0.25}, 3.0);
  err = std::max(err, std::abs(expected_residual(curve({2.0}, {0.0}, 3.0), 1.0, RewardTransform::identity).value - 2.0));
  err = std::max(err, std::abs(expected_residual(curve({}, {}, 3.0), 1.2, RewardTransform::identity).value - 3.0));
  err = std::max(err, std::abs(expected_residual(two, 0.0, RewardTransform::identity).value - 1.75));
  err = std::max(err, std::abs(expected_residual(two, 1.0, RewardTransform::identity).value - 2.5));
  err = std::max(err, std::abs(expected_residual(two, 0.5, RewardTransform::log).value -
                               (0.5 * std::log(1.0) + 0.25 * std::log(2.0) + 0.25 * std::log(3.0))));
  const bool steps_exact = err <= 1e-15;

  auto ds = simulate_setting2(400, 5).data;
  const auto imp = impute(ds, fit_beran(ds, std::nullopt), RewardTransform::log);
  bool pass_through = true;
  for (std::size_t i = 0; i < ds.n(); ++i)
    if (ds.event[i] && imp.yhat[static_cast<Eigen::Index>(i)] != std::log(ds.y[static_cast<Eigen::Index>(i)]))
      pass_through = false;

  const auto model = fit_beran(ds, 1e12);
  double km_err = 0.0;
  for (int a = 0; a < ds.m; ++a) {
    std::vector<double> y;
    std::vector<bool> ev;
    for (std::size_t i = 0; i < ds.n(); ++i)
      if (ds.arm[i] == a) {
        y.push_back(ds.y[static_cast<Eigen::Index>(i)]);
        ev.push_back(ds.event[i]);
      }
    const auto km = kaplan_meier(Eigen::Map<const Vector>(y.data(), static_cast<Eigen::Index>(y.size())), ev, ds.tau);
    const auto c = model.predict(ds.X.row(0).transpose(), a);
    if (c.times != km.times) km_err = std::numeric_limits<double>::infinity();
    else
      for (std::size_t j = 0; j < c.surv.size(); ++j) km_err = std::max(km_err, std::abs(c.surv[j] - km.surv[j]));
  }
  return {steps_exact && pass_through && km_err <= 1e-10,
          fmt("step-curve error %.2g, event pass-through %s, Beran(h=1e12) vs KM %.2g", err,
              pass_through ? "exact" : "broken", km_err)};
}

/// E[min(Z, log tau) | Z > log y] for Z ~ N(mu, sd), by trapezoid quadrature.
double residual_by_quadrature(double mu, double sd, double log_y, double log_tau) {
  if (log_y >= log_tau) return log_tau;
  const int steps = 4000;
  const double h = (log_tau - log_y) / steps;
  double acc = 0.0;
  for (int k = 0; k <= steps; ++k) {
    const double z = log_y + k * h;
    const double dens = std::exp(-0.5 * (z - mu) * (z - mu) / (sd * sd)) / (sd * std::sqrt(2.0 * std::numbers::pi));
    acc += (k == 0 || k == steps ? 0.5 : 1.0) * z * dens * h;
  }
  const double tail = 0.5 * std::erfc((log_tau - mu) / (sd * std::sqrt(2.0)));
  const double surv = 0.5 * std::erfc((log_y - mu) / (sd * std::sqrt(2.0)));
  return (acc + log_tau * tail) / surv;
}

// 5. Imputation error shrinks with n under setting 2.
Outcome imputation_trend() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> medians;
  for (int n : {250, 1000, 2000}) {
    std::vector<double> per_seed;
    for (int s = 0; s < 20; ++s) {
      const auto sim = simulate_setting2(n, 500 + static_cast<std::uint64_t>(s));
      const auto& ds = sim.data;
      const auto imp = impute(ds, fit_beran(ds, std::nullopt), RewardTransform::log);
      double total = 0.0;
      for (std::size_t i = 0; i < ds.n(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        double ideal = std::log(ds.y[r]);
        if (!ds.event[i])
          ideal = residual_by_quadrature(sim.oracle.log_location(ds.X.row(r).transpose(), ds.arm[i]), sim.oracle.log_sd,
                                         std::log(ds.y[r]), std::log(ds.tau));
        total += std::abs(imp.yhat[r] - ideal);
      }
      per_seed.push_back(total / static_cast<double>(ds.n()));
    }
    medians.push_back(median(per_seed));
  }
  const double secs = seconds_since(t0);
  return {medians[0] > medians[1] && medians[1] > medians[2] && secs < 600.0,
          fmt("median mean|Yhat - Y*| at n=250/1000/2000: %.4f / %.4f / %.4f, %.0f s", medians[0], medians[1],
              medians[2], secs)};
}

// 6. Setting 2 learning: balanced beats both IPW baselines.
Outcome learning_ordering() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = std::filesystem::temp_directory_path() / "bpsurv_acceptance_c6";
  std::filesystem::create_directories(dir);
  ConfigMap c;
  c.set("experiment.setting", "sim2");
  c.set("experiment.n", "500");
  c.set("experiment.replications", "20");
  c.set("experiment.methods", "balanced,ipw_imputed,ipw_ipcw");
  c.set("experiment.output_dir", dir.string());
  const auto res = run_benchmark(resolve(c));
  std::map<std::string, std::vector<double>> reg;
  for (const auto& r : res.records)
    if (r.ok && r.regret) reg[to_string(r.method)].push_back(*r.regret);
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? std::numeric_limits<double>::infinity() : s / static_cast<double>(v.size());
  };
  auto wins = [&](const std::string& other) {
    int w = 0;
    const auto& b = reg["balanced"];
    const auto& o = reg[other];
    for (std::size_t k = 0; k < std::min(b.size(), o.size()); ++k) w += b[k] < o[k];
    return w;
  };
  const double mb = mean(reg["balanced"]), mi = mean(reg["ipw_imputed"]), mc = mean(reg["ipw_ipcw"]);
  const int wi = wins("ipw_imputed"), wc = wins("ipw_ipcw");
  const double secs = seconds_since(t0);
  const bool complete = reg["balanced"].size() == 20 && reg["ipw_imputed"].size() == 20 && reg["ipw_ipcw"].size() == 20;
  return {complete && mb < mi && mb < mc && wi >= 14 && wc >= 14 && secs < 1800.0,
          fmt("mean regret balanced %.4f, ipw_imputed %.4f, ipw_ipcw %.4f; paired wins %d/20 and %d/20; %.0f s", mb, mi,
              mc, wi, wc, secs)};
}

// 7. Empirical censoring rates at n = 10000.
Outcome censoring_rates() {
  const double c1 = simulate_setting1(10000, 77).data.censoring_fraction();
  const double c2 = simulate_setting2(10000, 77).data.censoring_fraction();
  auto in = [](double c) { return c >= 0.40 && c <= 0.50; };
  return {in(c1) && in(c2), fmt("setting 1: %.3f, setting 2: %.3f (target [0.40, 0.50])", c1, c2)};
}

// 8. Balanced evaluation error of the uniform policy shrinks with n.
Outcome evaluation_trend() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> medians;
  for (int n : {250, 1000, 4000}) {
    std::vector<double> errs;
    for (int s = 0; s < 20; ++s) {
      const auto seed = 900 + static_cast<std::uint64_t>(s);
      const auto sim = simulate_setting2(n, seed);
      PipelineOptions opt;
      opt.tune.seed = seed;
      const auto prepared = prepare(sim.data, opt);
      const Matrix pi = uniform_policy(n, 3);
      const auto rep = evaluate_policy(prepared, pi, Method::balanced, opt);
      errs.push_back(std::abs(rep.estimate - sape(pi, sim.oracle, sim.data.X)));
    }
    medians.push_back(median(errs));
  }
  return {medians[0] > medians[1] && medians[1] > medians[2],
          fmt("median |psi - SAPE| at n=250/1000/4000: %.4f / %.4f / %.4f, %.0f s", medians[0], medians[1], medians[2],
              seconds_since(t0))};
}

// 9. Analytic gradients against central differences.
Outcome gradients() {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-0.7, 0.7);
  std::normal_distribution<double> nd;
  double gp_err = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    const int n = 10 + 2 * inst;
    const Eigen::Index d = 1 + inst % 4;
    Matrix X(n, d);
    Vector y(n);
    for (auto& v : X.reshaped()) v = nd(rng);
    for (auto& v : y) v = nd(rng);
    Vector theta(2 + d);
    for (auto& t : theta) t = u(rng);
    for (bool profile : {false, true}) {
      auto eval = [&](const Vector& t) {
        const KernelConfig cfg{std::exp(t[0]), Matrix(t.tail(d).array().exp().matrix().asDiagonal()), Vector::Ones(1)};
        return profile ? gp_profile_log_marginal(X, cfg, y, std::exp(t[1])) : gp_log_marginal(X, cfg, y, std::exp(t[1]));
      };
      const Vector fd = oracle::central_difference([&](const Vector& t) { return eval(t).value; }, theta, 1e-5);
      gp_err = std::max(gp_err, oracle::relative_error(eval(theta).grad, fd));
    }
  }

  double pol_err = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 g(seed);
    const int n = 40, m = 3;
    CensoredDataset ds;
    ds.m = m;
    ds.tau = 10.0;
    ds.X.resize(n, 2);
    ds.y.resize(n);
    Matrix muhat(n, m);
    std::uniform_int_distribution<int> arm(0, m - 1);
    for (int i = 0; i < n; ++i) {
      ds.X(i, 0) = nd(g);
      ds.X(i, 1) = nd(g);
      const int a = i < m ? i : arm(g);
      ds.arm.push_back(a);
      ds.event.push_back(true);
      ds.y[i] = 1.0 + 0.5 * std::sin(ds.X(i, 0) * (a + 1)) + 0.1 * nd(g);
      for (int b = 0; b < m; ++b) muhat(i, b) = 1.0 + 0.4 * std::sin(ds.X(i, 0) * (b + 1));
    }
    ImputedOutcomes imp;
    imp.yhat = ds.y;
    imp.floor_hit.assign(n, false);
    const Matrix K = gram(ds.X, KernelConfig::identity(2, m, 1.5)).K;
    for (auto mode : {BalancedMode::weighted, BalancedMode::dr}) {
      BalancedPolicyObjective obj(ds, imp, K, Vector::Ones(m), 0.3, mode, muhat);
      Matrix beta(m, 3);
      for (auto& v : beta.reshaped()) v = 0.5 * nd(g);
      const auto ev = obj.evaluate(beta);
      const Matrix grad = obj.gradient(beta, ev, GradMode::implicit);
      const Vector fd =
          oracle::central_difference([&](const Vector& b) { return obj.evaluate(b.reshaped(m, 3)).value; }, beta.reshaped(), 1e-4);
      pol_err = std::max(pol_err, oracle::relative_error(grad.reshaped(), fd));
    }
  }
  return {gp_err < 1e-5 && pol_err < 1e-3,
          fmt("GP evidence max rel. error %.2g (limit 1e-5), policy gradient max rel. error %.2g (limit 1e-3)", gp_err,
              pol_err)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// 10. Two fixed-seed benchmark runs write identical record files.
Outcome determinism() {
  const auto dir = std::filesystem::temp_directory_path() / "bpsurv_acceptance_c10";
  std::filesystem::create_directories(dir);
  ConfigMap c;
  c.set("experiment.setting", "sim2");
  c.set("experiment.n", "200");
  c.set("experiment.replications", "3");
  c.set("experiment.methods", "balanced,ipw_imputed,ipw_ipcw");
  c.set("experiment.test_size", "2000");
  c.set("learn.starts", "3");
  c.set("experiment.output_dir", dir.string());
  const auto cfg = resolve(c);
  run_benchmark(cfg);
  const auto records = slurp(dir / "records.csv");
  const auto summary = slurp(dir / "summary.json");
  run_benchmark(cfg);
  const bool same = records == slurp(dir / "records.csv") && summary == slurp(dir / "summary.json");
  return {same && !records.empty(), fmt("records.csv (%zu bytes) and summary.json %s across two runs", records.size(),
                                        same ? "byte-identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, qp_oracle},          {2, dual_norm},       {3, cmse_decomposition}, {4, imputation},
      {5, imputation_trend},   {6, learning_ordering}, {7, censoring_rates},  {8, evaluation_trend},
      {9, gradients},          {10, determinism},
  };
  std::set<int> selected;
  for (int k = 1; k < argc; ++k) selected.insert(std::atoi(argv[k]));
  int failures = 0;
  for (const auto& [id, run] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %2d: %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
