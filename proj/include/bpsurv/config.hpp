#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bpsurv/error.hpp"
#include "bpsurv/pipeline.hpp"

#ifndef BPSURV_VERSION
#define BPSURV_VERSION "0.0.0"
#endif

namespace bpsurv {

inline constexpr const char* kVersion = BPSURV_VERSION;

/// Flat `section.key -> value` settings. Every known key has a default, so a
/// resolved config always lists the complete set.
class ConfigMap {
 public:
  ConfigMap() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d{
        {"experiment.setting", "sim2"},
        {"experiment.n", "500"},
        {"experiment.replications", "20"},
        {"experiment.seed", "1"},
        {"experiment.methods", "balanced,ipw_ipcw"},
        {"experiment.test_size", "10000"},
        {"experiment.transform", "log"},
        {"experiment.feature_subset", ""},
        {"experiment.output_dir", "bpsurv_out"},
        {"experiment.variant", "standard"},
        {"data.path", ""},
        {"data.arms", ""},
        {"data.tau", ""},
        {"survival.bandwidth", "auto"},
        {"survival.floor", "0.05"},
        {"kernel.tune_starts", "5"},
        {"kernel.tune_max_iter", "200"},
        {"kernel.max_points", "400"},
        {"kernel.rel_tol", "1e-9"},
        {"kernel.min_noise_ratio", "0.01"},
        {"propensity.clip", "0.05"},
        {"propensity.ridge", "1e-4"},
        {"propensity.features", "linear"},
        {"learn.method", "balanced"},
        {"learn.starts", "10"},
        {"learn.max_outer", "200"},
        {"learn.step0", "0.5"},
        {"learn.grad_mode", "implicit"},
        {"learn.tol", "1e-6"},
        {"learn.init_sd", "0.5"},
        {"learn.pin_first_arm", "true"},
        {"qp.kkt_tol", "1e-6"},
        {"qp.rel_tol", "1e-8"},
        {"qp.max_iter", "50000"},
        {"qp.polish", "true"},
        {"policy.file", "uniform"},
        {"policy.kind", "softmax"},
        {"evaluate.methods", "reg,ipw_imputed,ipw_ipcw,balanced,balanced_dr"},
    };
    return d;
  }

  /// Reads `[section]` / `key = value` lines. Unknown keys are errors.
  void load_ini(const std::string& path) {
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::ini_parser::read_ini(path, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("cannot read config: ") + e.what());
    }
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError("config key '" + section + "' must sit inside a [section]");
      for (const auto& [key, node] : body) set(section + "." + key, node.get_value<std::string>());
    }
  }

  /// Applies `section.key=value`.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must look like section.key=value");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  [[nodiscard]] const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  [[nodiscard]] double get_double(const std::string& key) const {
    const auto& v = get(key);
    try {
      std::size_t pos = 0;
      const double x = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    }
  }

  [[nodiscard]] long long get_int(const std::string& key) const {
    const auto& v = get(key);
    try {
      std::size_t pos = 0;
      const long long x = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
    }
  }

  [[nodiscard]] bool get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "' expects true/false, got '" + v + "'");
  }

  [[nodiscard]] std::vector<std::string> get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  [[nodiscard]] const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

enum class Setting { sim1, sim2, csv };

inline const char* to_string(Setting s) {
  switch (s) {
    case Setting::sim1: return "sim1";
    case Setting::sim2: return "sim2";
    case Setting::csv: return "csv";
  }
  return "?";
}

/// Typed, validated view of a ConfigMap.
struct ExperimentConfig {
  Setting setting = Setting::sim2;
  int n = 500;
  int replications = 20;
  std::uint64_t seed = 1;
  std::vector<Method> methods;
  int test_size = 10000;
  std::vector<int> feature_subset;  // zero-based; empty keeps all columns
  std::string output_dir;
  std::string data_path;
  int arms = 0;
  double tau = 0.0;
  Setting2Variant variant = Setting2Variant::standard;
  PipelineOptions pipeline;
  ConfigMap raw;

  [[nodiscard]] bool has_oracle() const { return setting != Setting::csv; }
};

inline ExperimentConfig resolve(const ConfigMap& c) {
  ExperimentConfig e;
  e.raw = c;
  const auto& setting = c.get("experiment.setting");
  if (setting == "sim1") e.setting = Setting::sim1;
  else if (setting == "sim2") e.setting = Setting::sim2;
  else if (setting == "csv") e.setting = Setting::csv;
  else throw ConfigError("experiment.setting must be sim1, sim2 or csv");

  e.n = static_cast<int>(c.get_int("experiment.n"));
  e.replications = static_cast<int>(c.get_int("experiment.replications"));
  const auto seed = c.get_int("experiment.seed");
  if (seed < 0) throw ConfigError("experiment.seed must be nonnegative");
  e.seed = static_cast<std::uint64_t>(seed);
  e.test_size = static_cast<int>(c.get_int("experiment.test_size"));
  if (e.setting != Setting::csv && e.n < 1) throw ConfigError("experiment.n must be at least 1");
  if (e.replications < 1) throw ConfigError("experiment.replications must be at least 1");
  if (e.test_size < 1) throw ConfigError("experiment.test_size must be at least 1");
  for (const auto& m : c.get_list("experiment.methods")) e.methods.push_back(parse_method(m));
  if (e.methods.empty()) throw ConfigError("experiment.methods must name at least one method");
  for (const auto& f : c.get_list("experiment.feature_subset")) {
    int k = 0;
    try {
      k = std::stoi(f);
    } catch (const std::exception&) {
      throw ConfigError("experiment.feature_subset entries must be integers");
    }
    if (k < 1) throw ConfigError("experiment.feature_subset indices are 1-based");
    e.feature_subset.push_back(k - 1);
  }
  if (e.setting != Setting::csv)
    for (int k : e.feature_subset)
      if (k >= kSimDimension) throw ConfigError("experiment.feature_subset index exceeds d = 10");
  e.output_dir = c.get("experiment.output_dir");
  const auto& variant = c.get("experiment.variant");
  if (variant == "standard") e.variant = Setting2Variant::standard;
  else if (variant == "dominant_arm2") e.variant = Setting2Variant::dominant_arm2;
  else throw ConfigError("experiment.variant must be standard or dominant_arm2");

  e.data_path = c.get("data.path");
  if (e.setting == Setting::csv) {
    if (e.data_path.empty()) throw ConfigError("csv setting needs data.path");
    if (c.get("data.arms").empty() || c.get("data.tau").empty()) throw ConfigError("csv setting needs data.arms and data.tau");
    e.arms = static_cast<int>(c.get_int("data.arms"));
    e.tau = c.get_double("data.tau");
    if (e.arms < 2) throw ConfigError("data.arms must be at least 2");
    if (!(e.tau > 0.0)) throw ConfigError("data.tau must be positive");
  }

  auto& p = e.pipeline;
  p.transform = parse_transform(c.get("experiment.transform"));
  if (c.get("survival.bandwidth") != "auto") {
    p.bandwidth = c.get_double("survival.bandwidth");
    if (!(*p.bandwidth > 0.0)) throw ConfigError("survival.bandwidth must be positive or auto");
  }
  p.survival_floor = c.get_double("survival.floor");
  if (!(p.survival_floor > 0.0 && p.survival_floor < 1.0)) throw ConfigError("survival.floor must lie in (0, 1)");
  p.tune.starts = static_cast<int>(c.get_int("kernel.tune_starts"));
  p.tune.max_iter = static_cast<int>(c.get_int("kernel.tune_max_iter"));
  p.tune.max_points = static_cast<int>(c.get_int("kernel.max_points"));
  p.tune.rel_tol = c.get_double("kernel.rel_tol");
  p.tune.min_noise_ratio = c.get_double("kernel.min_noise_ratio");
  if (!(p.tune.min_noise_ratio > 0.0)) throw ConfigError("kernel.min_noise_ratio must be positive");
  if (p.tune.starts < 1 || p.tune.max_iter < 0) throw ConfigError("kernel tuning needs starts >= 1 and max_iter >= 0");
  p.propensity.clip = c.get_double("propensity.clip");
  p.propensity.ridge = c.get_double("propensity.ridge");
  const auto& features = c.get("propensity.features");
  if (features == "linear") p.propensity.features = FeatureMap::linear;
  else if (features == "quadratic") p.propensity.features = FeatureMap::quadratic;
  else throw ConfigError("propensity.features must be linear or quadratic");
  if (!(p.propensity.ridge >= 0.0)) throw ConfigError("propensity.ridge must be nonnegative");
  if (!(p.propensity.clip > 0.0 && p.propensity.clip < 1.0)) throw ConfigError("propensity.clip must lie in (0, 1)");

  p.learn.starts = static_cast<int>(c.get_int("learn.starts"));
  p.learn.max_outer = static_cast<int>(c.get_int("learn.max_outer"));
  p.learn.step0 = c.get_double("learn.step0");
  p.learn.tol = c.get_double("learn.tol");
  p.learn.init_sd = c.get_double("learn.init_sd");
  p.learn.pin_first_arm = c.get_bool("learn.pin_first_arm");
  const auto& gm = c.get("learn.grad_mode");
  if (gm == "implicit") p.learn.grad_mode = GradMode::implicit;
  else if (gm == "finite_diff") p.learn.grad_mode = GradMode::finite_diff;
  else throw ConfigError("learn.grad_mode must be implicit or finite_diff");
  if (p.learn.starts < 1) throw ConfigError("learn.starts must be at least 1");
  if (!(p.learn.tol > 0.0)) throw ConfigError("learn.tol must be positive");
  if (!(p.learn.step0 > 0.0)) throw ConfigError("learn.step0 must be positive");
  if (p.learn.max_outer < 0 || !(p.learn.init_sd >= 0.0)) throw ConfigError("learn.max_outer and learn.init_sd must be nonnegative");
  parse_method(c.get("learn.method"));

  p.qp.kkt_tol = c.get_double("qp.kkt_tol");
  p.qp.rel_tol = c.get_double("qp.rel_tol");
  p.qp.max_iter = static_cast<int>(c.get_int("qp.max_iter"));
  p.qp.polish = c.get_bool("qp.polish");
  if (!(p.qp.kkt_tol > 0.0) || !(p.qp.rel_tol > 0.0) || p.qp.max_iter < 1)
    throw ConfigError("qp tolerances must be positive and qp.max_iter at least 1");

  const auto& kind = c.get("policy.kind");
  if (kind != "softmax" && kind != "deterministic") throw ConfigError("policy.kind must be softmax or deterministic");
  for (const auto& m : c.get_list("evaluate.methods")) parse_method(m);
  return e;
}

}  // namespace bpsurv
