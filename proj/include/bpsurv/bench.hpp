#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "bpsurv/io.hpp"
#include "bpsurv/parallel.hpp"
#include "bpsurv/pipeline.hpp"
#include "bpsurv/simulate.hpp"

namespace bpsurv {

/// Dataset for one replication plus the ground truth when it is simulated.
struct DataSource {
  CensoredDataset data;
  std::optional<OracleModel> oracle;
};

/// Seed of replication r: the base seed advanced by r.
inline std::uint64_t replication_seed(std::uint64_t base, int r) { return base + static_cast<std::uint64_t>(r); }

/// Seed of the shared test set, disjoint from every replication seed stream.
inline std::uint64_t test_seed(std::uint64_t base) { return base ^ 0x8000000000000000ull; }

inline DataSource load_source(const ExperimentConfig& cfg, std::uint64_t seed, LoadReport* report = nullptr) {
  DataSource src;
  switch (cfg.setting) {
    case Setting::sim1: {
      auto s = simulate_setting1(cfg.n, seed);
      src.data = std::move(s.data);
      src.oracle = std::move(s.oracle);
      break;
    }
    case Setting::sim2: {
      auto s = simulate_setting2(cfg.n, seed, cfg.variant);
      src.data = std::move(s.data);
      src.oracle = std::move(s.oracle);
      break;
    }
    case Setting::csv: src.data = load_csv(cfg.data_path, cfg.arms, cfg.tau, report); break;
  }
  if (!cfg.feature_subset.empty()) {
    for (int k : cfg.feature_subset)
      if (k >= src.data.d()) throw ConfigError("experiment.feature_subset index exceeds the data dimension");
    src.data = src.data.with_features(cfg.feature_subset);
  }
  return src;
}

/// Covariates on which oracle regret is measured (shared by all replications).
inline Matrix test_covariates(const ExperimentConfig& cfg) {
  Matrix X;
  if (cfg.setting == Setting::sim1) X = simulate_setting1(cfg.test_size, test_seed(cfg.seed)).data.X;
  else if (cfg.setting == Setting::sim2) X = simulate_setting2(cfg.test_size, test_seed(cfg.seed), cfg.variant).data.X;
  else throw ConfigError("no oracle test set for csv data");
  return X;
}

/// Columns of X the policy acts on (all of them when the subset is empty).
inline Matrix select_columns(const Matrix& X, const std::vector<int>& subset) {
  if (subset.empty()) return X;
  Matrix out(X.rows(), static_cast<Eigen::Index>(subset.size()));
  for (std::size_t k = 0; k < subset.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = X.col(subset[k]);
  return out;
}

struct BenchRecord {
  Method method = Method::balanced;
  int replication = 0;
  std::uint64_t seed = 0;
  int n = 0;
  std::optional<double> regret;
  double estimate = 0.0;
  long long runtime_ms = 0;
  bool ok = true;
  bool converged = true;
  int failed_starts = 0;
  int gradient_fallbacks = 0;
  std::size_t clip_hits = 0;
  std::size_t floor_hits = 0;
  std::string error;
};

struct Quantiles {
  std::size_t count = 0;
  double mean = 0.0;
  double sd = 0.0;
  double min = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double max = 0.0;
};

/// Mean, sample sd and linearly interpolated quartiles.
inline Quantiles summarize(std::vector<double> v) {
  Quantiles q;
  q.count = v.size();
  if (v.empty()) return q;
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  q.mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - q.mean) * (x - q.mean);
  q.sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  auto at = [&](double p) {
    const double h = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  q.min = v.front();
  q.q1 = at(0.25);
  q.median = at(0.5);
  q.q3 = at(0.75);
  q.max = v.back();
  return q;
}

inline Json to_json(const Quantiles& q) {
  Json j;
  j["count"] = q.count;
  j["mean"] = q.mean;
  j["sd"] = q.sd;
  j["min"] = q.min;
  j["q1"] = q.q1;
  j["median"] = q.median;
  j["q3"] = q.q3;
  j["max"] = q.max;
  return j;
}

/// Learns every requested method on one replication's data.
inline std::vector<BenchRecord> run_replication(const ExperimentConfig& cfg, int r, const Matrix* X_test) {
  const auto seed = replication_seed(cfg.seed, r);
  std::vector<BenchRecord> out;
  for (auto m : cfg.methods) {
    BenchRecord rec;
    rec.method = m;
    rec.replication = r;
    rec.seed = seed;
    out.push_back(rec);
  }
  try {
    const auto src = load_source(cfg, seed);
    PipelineOptions opt = cfg.pipeline;
    opt.tune.seed = seed;
    opt.learn.seed = seed;
    opt.learn.threads = 1;
    const auto prepared = prepare(src.data, opt);
    for (auto& rec : out) {
      rec.n = static_cast<int>(src.data.n());
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const auto res = learn_policy(prepared, rec.method, opt);
        rec.estimate = res.value;
        rec.failed_starts = res.failed_starts;
        rec.gradient_fallbacks = res.gradient_fallbacks;
        rec.converged = res.failed_starts == 0;
        if (rec.method == Method::ipw_ipcw || rec.method == Method::ipw_imputed) {
          clipped_received_propensity(prepared.propensity.predict(src.data.X), src.data.arm, prepared.propensity.clip,
                                      &rec.clip_hits);
        }
        if (rec.method == Method::ipw_ipcw) {
          for (std::size_t i = 0; i < src.data.n(); ++i)
            if (src.data.event[i] && prepared.censor_survival[static_cast<Eigen::Index>(i)] < opt.survival_floor)
              ++rec.floor_hits;
        } else if (rec.method != Method::reg) {
          rec.floor_hits = prepared.imputed.floor_hits;
        }
        if (src.oracle && X_test) {
          rec.regret = regret(deterministic_policy_matrix(res.params, select_columns(*X_test, cfg.feature_subset)),
                              *src.oracle, *X_test);
        }
      } catch (const Error& e) {
        rec.ok = false;
        rec.error = e.what();
      }
      rec.runtime_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    }
  } catch (const Error& e) {
    for (auto& rec : out) {
      rec.ok = false;
      rec.error = e.what();
    }
  }
  return out;
}

struct BenchResult {
  std::vector<BenchRecord> records;
  Json summary;
  int failed_replications = 0;
};

inline std::string records_csv(const ExperimentConfig& cfg, const std::vector<BenchRecord>& records) {
  std::ostringstream os;
  os << provenance_comment(cfg.raw);
  os << "method,replication,seed,n,";
  if (cfg.has_oracle()) os << "regret,";
  os << "estimate,status,converged,failed_starts,gradient_fallbacks,clip_hits,floor_hits\n";
  for (const auto& r : records) {
    os << to_string(r.method) << ',' << r.replication << ',' << r.seed << ',' << r.n << ',';
    if (cfg.has_oracle()) os << (r.ok && r.regret ? format_double(*r.regret) : "") << ',';
    os << (r.ok ? format_double(r.estimate) : "") << ',' << (r.ok ? "ok" : "failed") << ',' << (r.converged ? 1 : 0) << ','
       << r.failed_starts << ',' << r.gradient_fallbacks << ',' << r.clip_hits << ',' << r.floor_hits << '\n';
  }
  return os.str();
}

inline std::string long_csv(const ExperimentConfig& cfg, const std::vector<BenchRecord>& records) {
  std::ostringstream os;
  os << provenance_comment(cfg.raw);
  os << "method,replication,metric,value\n";
  for (const auto& r : records) {
    if (!r.ok) continue;
    if (r.regret) os << to_string(r.method) << ',' << r.replication << ",regret," << format_double(*r.regret) << '\n';
    os << to_string(r.method) << ',' << r.replication << ",estimate," << format_double(r.estimate) << '\n';
  }
  return os.str();
}

inline std::string timings_csv(const ExperimentConfig& cfg, const std::vector<BenchRecord>& records) {
  std::ostringstream os;
  os << provenance_comment(cfg.raw);
  os << "method,replication,runtime_ms\n";
  for (const auto& r : records) os << to_string(r.method) << ',' << r.replication << ',' << r.runtime_ms << '\n';
  return os.str();
}

inline Json summary_json(const ExperimentConfig& cfg, const std::vector<BenchRecord>& records, int failed) {
  Json j = provenance(cfg.raw);
  j["setting"] = to_string(cfg.setting);
  j["replications"] = cfg.replications;
  j["failed_replications"] = failed;
  Json methods = Json::object();
  for (auto m : cfg.methods) {
    std::vector<double> reg, est;
    for (const auto& r : records) {
      if (r.method != m || !r.ok) continue;
      est.push_back(r.estimate);
      if (r.regret) reg.push_back(*r.regret);
    }
    Json mj;
    if (cfg.has_oracle()) mj["regret"] = to_json(summarize(reg));
    mj["estimate"] = to_json(summarize(est));
    methods[to_string(m)] = std::move(mj);
  }
  j["methods"] = std::move(methods);
  return j;
}

/// Runs all replications (in parallel over BPSURV_THREADS workers), writes
/// records.csv, summary.json, long.csv and timings.csv into the output
/// directory, and aborts with ConvergenceError when more than 20% of the
/// replications fail.
inline BenchResult run_benchmark(const ExperimentConfig& cfg, unsigned threads = thread_count(),
                                 std::ostream* log = nullptr) {
  std::optional<Matrix> X_test;
  if (cfg.has_oracle()) X_test = test_covariates(cfg);
  std::vector<std::vector<BenchRecord>> per_rep(static_cast<std::size_t>(cfg.replications));
  parallel_for(
      per_rep.size(),
      [&](std::size_t r) { per_rep[r] = run_replication(cfg, static_cast<int>(r), X_test ? &*X_test : nullptr); },
      threads);

  BenchResult res;
  for (auto& rep : per_rep) {
    const bool failed = std::any_of(rep.begin(), rep.end(), [](const BenchRecord& b) { return !b.ok; });
    if (failed) {
      ++res.failed_replications;
      if (log)
        for (const auto& b : rep)
          if (!b.ok) *log << "replication " << b.replication << " " << to_string(b.method) << " failed: " << b.error << "\n";
    }
    for (auto& b : rep) res.records.push_back(std::move(b));
  }
  if (5 * res.failed_replications > cfg.replications)
    throw ConvergenceError("benchmark aborted: " + std::to_string(res.failed_replications) + " of " +
                           std::to_string(cfg.replications) + " replications failed");

  res.summary = summary_json(cfg, res.records, res.failed_replications);
  const std::filesystem::path dir(cfg.output_dir);
  write_text_file(dir / "records.csv", records_csv(cfg, res.records));
  write_text_file(dir / "long.csv", long_csv(cfg, res.records));
  write_text_file(dir / "timings.csv", timings_csv(cfg, res.records));
  write_json_file(dir / "summary.json", res.summary);
  return res;
}

/// Generates one dataset and writes data.csv plus a data.json sidecar.
inline CensoredDataset run_simulate(const ExperimentConfig& cfg) {
  if (!cfg.has_oracle()) throw ConfigError("simulate needs experiment.setting sim1 or sim2");
  const auto src = load_source(cfg, cfg.seed);
  const std::filesystem::path dir(cfg.output_dir);
  std::ostringstream os;
  os << provenance_comment(cfg.raw);
  write_csv(os, src.data);
  write_text_file(dir / "data.csv", os.str());
  Json side = provenance(cfg.raw);
  side["generator"] = to_string(cfg.setting);
  side["seed"] = cfg.seed;
  side["n"] = src.data.n();
  side["d"] = src.data.d();
  side["arms"] = src.data.m;
  side["tau"] = src.data.tau;
  side["censoring_fraction"] = src.data.censoring_fraction();
  side["outcome_scale"] = "log_time";
  write_json_file(dir / "data.json", side);
  return src.data;
}

/// Imputes censored outcomes of the configured data and writes imputed.csv.
/// Returns the number of rows changed by the horizon truncation.
inline std::size_t run_impute(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  LoadReport report;
  const auto src = load_source(cfg, cfg.seed, &report);
  if (report.truncated > 0 && log)
    *log << "warning: " << report.truncated << " rows had y >= tau and were truncated to tau as events\n";
  const auto model = fit_beran(src.data, cfg.pipeline.bandwidth, SurvivalTarget::event);
  const auto imp = impute(src.data, model, cfg.pipeline.transform, cfg.pipeline.survival_floor);
  std::ostringstream os;
  os << provenance_comment(cfg.raw);
  write_imputed_csv(os, src.data, imp);
  write_text_file(std::filesystem::path(cfg.output_dir) / "imputed.csv", os.str());
  return report.truncated;
}

/// Policy matrix named by `policy.file` (a policy JSON or `uniform`).
inline PolicyMatrix configured_policy(const ExperimentConfig& cfg, const CensoredDataset& ds) {
  const auto& file = cfg.raw.get("policy.file");
  if (file == "uniform") return uniform_policy(static_cast<Eigen::Index>(ds.n()), ds.m);
  const auto j = read_json_file(file);
  const auto params = policy_from_json(j.contains("policy") ? j["policy"] : j, ds.m, ds.d());
  return cfg.raw.get("policy.kind") == "deterministic" ? deterministic_policy_matrix(params, ds.X)
                                                       : softmax_policy(params, ds.X);
}

/// Evaluates the configured policy with every estimator in `evaluate.methods`
/// and writes eval.json (also holding the GP hyperparameters).
inline Json run_evaluate(const ExperimentConfig& cfg) {
  const auto src = load_source(cfg, cfg.seed);
  const auto pi = configured_policy(cfg, src.data);
  PipelineOptions opt = cfg.pipeline;
  opt.tune.seed = cfg.seed;
  const auto prepared = prepare(src.data, opt);
  Json j = provenance(cfg.raw);
  j["n"] = src.data.n();
  j["gp"] = to_json(prepared.gp);
  Json reports = Json::object();
  bool all_converged = true;
  for (const auto& name : cfg.raw.get_list("evaluate.methods")) {
    const auto rep = evaluate_policy(prepared, pi, parse_method(name), opt);
    all_converged = all_converged && rep.converged;
    reports[name] = to_json(rep);
  }
  j["reports"] = std::move(reports);
  if (src.oracle) j["oracle_sape"] = sape(pi, *src.oracle, src.data.X);
  write_json_file(std::filesystem::path(cfg.output_dir) / "eval.json", j);
  if (!all_converged) throw ConvergenceError("balancing QP did not converge (report written)");
  return j;
}

/// Learns a policy with `learn.method` and writes policy.json and gp.json.
inline Json run_learn(const ExperimentConfig& cfg, unsigned threads = thread_count()) {
  const auto src = load_source(cfg, cfg.seed);
  PipelineOptions opt = cfg.pipeline;
  opt.tune.seed = cfg.seed;
  opt.learn.seed = cfg.seed;
  opt.learn.threads = threads;
  const auto prepared = prepare(src.data, opt);
  const auto method = parse_method(cfg.raw.get("learn.method"));
  const auto res = learn_policy(prepared, method, opt);
  Json j = provenance(cfg.raw);
  j["method"] = to_string(method);
  j["policy"] = policy_to_json(res.params, cfg.feature_subset);
  j["value"] = res.value;
  Json starts = Json::array();
  for (double v : res.start_values) starts.push_back(v);
  j["start_values"] = starts;
  j["failed_starts"] = res.failed_starts;
  j["gradient_fallbacks"] = res.gradient_fallbacks;
  j["iterations"] = res.trace.empty() ? 0 : res.trace.size() - 1;
  if (src.oracle) {
    const Matrix X_test = test_covariates(cfg);
    j["test_regret"] =
        regret(deterministic_policy_matrix(res.params, select_columns(X_test, cfg.feature_subset)), *src.oracle, X_test);
  }
  const std::filesystem::path dir(cfg.output_dir);
  write_json_file(dir / "policy.json", j);
  Json gp = provenance(cfg.raw);
  gp["gp"] = to_json(prepared.gp);
  write_json_file(dir / "gp.json", gp);
  return j;
}

/// Applies the deterministic rule of a policy file to a covariate CSV with
/// columns x1..xd and writes `index,arm` (arms 1-based) to predictions.csv.
inline std::size_t run_predict(const ExperimentConfig& cfg, const std::string& covariates_path) {
  const auto pj = read_json_file(cfg.raw.get("policy.file"));
  std::ifstream in(covariates_path);
  if (!in) throw DataError("cannot open " + covariates_path);
  std::string line;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    header = detail::split_csv_line(line);
    break;
  }
  std::vector<std::ptrdiff_t> cols;
  for (int k = 1;; ++k) {
    auto it = std::find(header.begin(), header.end(), "x" + std::to_string(k));
    if (it == header.end()) break;
    cols.push_back(std::distance(header.begin(), it));
  }
  if (cols.empty()) throw ParseError(ParseError::Kind::missing_column, "missing column x1");
  const auto m = pj.contains("policy") ? pj["policy"].value("arms", 0) : pj.value("arms", 0);
  const auto& pol = pj.contains("policy") ? pj["policy"] : pj;
  std::vector<int> subset;
  if (pol.contains("feature_subset"))
    for (const auto& v : pol["feature_subset"]) subset.push_back(v.get<int>() - 1);
  const auto d = static_cast<Eigen::Index>(subset.empty() ? cols.size() : subset.size());
  const auto params = policy_from_json(pol, m, d);
  std::ostringstream os;
  os << provenance_comment(cfg.raw);
  os << "index,arm\n";
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    Vector x(d);
    for (Eigen::Index k = 0; k < d; ++k) {
      const auto src_col = subset.empty() ? static_cast<std::size_t>(k) : static_cast<std::size_t>(subset[static_cast<std::size_t>(k)]);
      if (src_col >= cols.size()) throw ParseError(ParseError::Kind::missing_column, "missing column x" + std::to_string(src_col + 1));
      const auto c = static_cast<std::size_t>(cols[src_col]);
      if (c >= cells.size()) throw ParseError(ParseError::Kind::missing_column, "short row " + std::to_string(row));
      x[k] = detail::parse_number(cells[c], row, header[c]);
    }
    os << row << ',' << (choose_arm(params, x) + 1) << '\n';
  }
  write_text_file(std::filesystem::path(cfg.output_dir) / "predictions.csv", os.str());
  return row;
}

}  // namespace bpsurv
