#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bpsurv/config.hpp"
#include "json.hpp"

namespace bpsurv {

using Json = nlohmann::ordered_json;

/// Header object embedded in every output: library version plus the full
/// resolved configuration.
inline Json provenance(const ConfigMap& cfg) {
  Json j;
  j["version"] = kVersion;
  Json c = Json::object();
  for (const auto& [k, v] : cfg.values()) c[k] = v;
  j["config"] = std::move(c);
  return j;
}

/// One-line `#` comment carrying the provenance object, for CSV outputs.
inline std::string provenance_comment(const ConfigMap& cfg) { return "# bpsurv " + provenance(cfg).dump() + "\n"; }

inline Json to_json(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Json to_json(const Matrix& M) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) a.push_back(to_json(Vector(M.row(i).transpose())));
  return a;
}

inline Json to_json(const GpFit& fit) {
  Json j;
  j["scale"] = fit.hyperparams.scale;
  j["metric_diagonal"] = to_json(Vector(fit.hyperparams.metric.diagonal()));
  j["inverse_lengthscales"] = to_json(fit.inverse_lengthscales());
  j["noise_variance"] = fit.noise_variance;
  j["signal_variance"] = fit.signal_variance;
  j["log_marginal"] = fit.log_marginal;
  j["outcome_mean"] = fit.outcome_mean;
  j["fallback"] = fit.fallback;
  return j;
}

inline Json to_json(const EvalReport& r) {
  Json j;
  j["kind"] = to_string(r.kind);
  j["estimate"] = r.estimate;
  j["worst_case_bias"] = r.worst_case_bias;
  j["variance_term"] = r.variance_term;
  j["objective"] = r.objective;
  j["converged"] = r.converged;
  j["clip_hits"] = r.clip_hits;
  j["floor_hits"] = r.floor_hits;
  return j;
}

/// Names of the covariate columns a policy acts on, in coefficient order.
inline std::vector<std::string> feature_names(Eigen::Index d, const std::vector<int>& subset) {
  std::vector<std::string> out{"intercept"};
  for (Eigen::Index k = 0; k < d; ++k)
    out.push_back("x" + std::to_string(subset.empty() ? k + 1 : subset[static_cast<std::size_t>(k)] + 1));
  return out;
}

inline Json policy_to_json(const PolicyParams& params, const std::vector<int>& subset) {
  Json j;
  j["arms"] = params.m();
  j["d"] = params.d();
  j["features"] = feature_names(params.d(), subset);
  Json fs = Json::array();
  for (int k : subset) fs.push_back(k + 1);
  j["feature_subset"] = fs;
  j["covariate_scale"] = "raw";
  j["temperature"] = params.temperature;
  j["beta"] = to_json(params.beta);
  return j;
}

/// Reads a policy file and checks it against the expected shape.
inline PolicyParams policy_from_json(const Json& j, int m, Eigen::Index d) {
  try {
    const auto& rows = j.at("beta");
    PolicyParams p;
    p.temperature = j.value("temperature", 1.0);
    const auto pm = static_cast<int>(rows.size());
    const auto pd = rows.empty() ? Eigen::Index{0} : static_cast<Eigen::Index>(rows.at(0).size()) - 1;
    if (pm != m || pd != d)
      throw DataError("policy schema mismatch: expected " + std::to_string(m) + " arms and d = " + std::to_string(d) +
                      ", got " + std::to_string(pm) + " arms and d = " + std::to_string(pd));
    p.beta.resize(m, d + 1);
    for (int a = 0; a < m; ++a) {
      if (static_cast<Eigen::Index>(rows.at(static_cast<std::size_t>(a)).size()) != d + 1)
        throw DataError("policy schema mismatch: ragged beta rows");
      for (Eigen::Index k = 0; k <= d; ++k) p.beta(a, k) = rows.at(static_cast<std::size_t>(a)).at(static_cast<std::size_t>(k)).get<double>();
    }
    if (!p.beta.allFinite()) throw DataError("policy coefficients must be finite");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("policy schema error: ") + e.what());
  }
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid JSON in " + path + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) { write_text_file(path, j.dump(2) + "\n"); }

/// Shortest round-trip decimal text of a double.
inline std::string format_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace bpsurv
