#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bpsurv/bench.hpp"

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kConvergence = 4 };

/// Options shared by every subcommand. Dedicated flags are shorthands for
/// `--set section.key=value` and are applied after the INI file.
struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::vector<std::pair<std::string, std::string>> flags;
};

void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("-c,--config", o.config_path, "INI configuration file");
  sub->add_option("--set", o.overrides, "Override a key, e.g. --set learn.starts=20")->take_all();
  auto flag = [&](const std::string& name, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(
        name, [&o, key](const std::string& v) { o.flags.emplace_back(key, v); }, help);
  };
  flag("--setting", "experiment.setting", "sim1, sim2 or csv");
  flag("--n", "experiment.n", "Sample size for simulated data");
  flag("--seed", "experiment.seed", "Base random seed");
  flag("--out", "experiment.output_dir", "Output directory");
  flag("--data", "data.path", "Input CSV (sets the csv setting when given)");
  flag("--arms", "data.arms", "Number of arms in the input CSV");
  flag("--tau", "data.tau", "Follow-up horizon of the input CSV");
  flag("--transform", "experiment.transform", "identity or log");
  flag("--features", "experiment.feature_subset", "Comma separated 1-based covariate indices");
}

bpsurv::ExperimentConfig build_config(const CommonOptions& o) {
  bpsurv::ConfigMap map;
  if (!o.config_path.empty()) map.load_ini(o.config_path);
  for (const auto& [k, v] : o.flags) {
    map.set(k, v);
    if (k == "data.path") map.set("experiment.setting", "csv");
  }
  for (const auto& s : o.overrides) map.apply_override(s);
  return bpsurv::resolve(map);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Balanced policy evaluation and learning for right-censored multi-arm data"};
  app.set_version_flag("--version", std::string(bpsurv::kVersion));
  app.require_subcommand(1);

  CommonOptions sim_o, imp_o, eval_o, learn_o, bench_o, pred_o;
  auto* sim = app.add_subcommand("simulate", "Generate a simulated dataset (data.csv and data.json)");
  add_common(sim, sim_o);
  auto* imp = app.add_subcommand("impute", "Impute censored outcomes (imputed.csv)");
  add_common(imp, imp_o);
  auto* eval = app.add_subcommand("evaluate", "Estimate the value of a fixed policy (eval.json)");
  add_common(eval, eval_o);
  std::string eval_policy, eval_kind;
  eval->add_option("--policy", eval_policy, "Policy JSON file or 'uniform'");
  eval->add_option("--kind", eval_kind, "softmax or deterministic");
  auto* learn = app.add_subcommand("learn", "Learn a policy (policy.json and gp.json)");
  add_common(learn, learn_o);
  std::string learn_method;
  learn->add_option("--method", learn_method, "reg, ipw_ipcw, ipw_imputed, balanced or balanced_dr");
  auto* bench = app.add_subcommand("benchmark", "Run replicated experiments (records.csv, summary.json, long.csv)");
  add_common(bench, bench_o);
  std::string bench_methods;
  int bench_reps = 0;
  bench->add_option("--methods", bench_methods, "Comma separated methods");
  bench->add_option("--replications", bench_reps, "Number of replications");
  auto* pred = app.add_subcommand("predict", "Assign arms to new covariates with a learned policy (predictions.csv)");
  add_common(pred, pred_o);
  std::string pred_policy, pred_input;
  pred->add_option("--policy", pred_policy, "Policy JSON written by learn")->required();
  pred->add_option("--input", pred_input, "CSV with columns x1..xd")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    const unsigned threads = bpsurv::thread_count();
    if (*sim) {
      const auto ds = bpsurv::run_simulate(build_config(sim_o));
      std::cout << "wrote " << ds.n() << " rows, censoring fraction " << ds.censoring_fraction() << "\n";
    } else if (*imp) {
      bpsurv::run_impute(build_config(imp_o), &std::cerr);
      std::cout << "wrote imputed.csv\n";
    } else if (*eval) {
      if (!eval_policy.empty()) eval_o.flags.emplace_back("policy.file", eval_policy);
      if (!eval_kind.empty()) eval_o.flags.emplace_back("policy.kind", eval_kind);
      const auto j = bpsurv::run_evaluate(build_config(eval_o));
      for (const auto& [name, rep] : j["reports"].items())
        std::cout << name << " " << rep["estimate"].get<double>() << "\n";
    } else if (*learn) {
      if (!learn_method.empty()) learn_o.flags.emplace_back("learn.method", learn_method);
      const auto j = bpsurv::run_learn(build_config(learn_o), threads);
      std::cout << j["method"].get<std::string>() << " value " << j["value"].get<double>() << "\n";
    } else if (*bench) {
      if (!bench_methods.empty()) bench_o.flags.emplace_back("experiment.methods", bench_methods);
      if (bench_reps > 0) bench_o.flags.emplace_back("experiment.replications", std::to_string(bench_reps));
      const auto cfg = build_config(bench_o);
      const auto res = bpsurv::run_benchmark(cfg, threads, &std::cerr);
      std::cout << "wrote " << res.records.size() << " records to " << cfg.output_dir << "\n";
    } else if (*pred) {
      pred_o.flags.emplace_back("policy.file", pred_policy);
      const auto rows = bpsurv::run_predict(build_config(pred_o), pred_input);
      std::cout << "wrote " << rows << " predictions\n";
    }
  } catch (const bpsurv::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const bpsurv::ConvergenceError& e) {
    std::cerr << "convergence error: " << e.what() << "\n";
    return kConvergence;
  } catch (const bpsurv::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const bpsurv::DimensionError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOk;
}
