#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bpsurv/error.hpp"

namespace bpsurv {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Right-censored observational sample with m treatment arms.
///
/// Arms are stored zero-based (0..m-1); the CSV format uses 1-based labels.
/// Observed times never exceed the follow-up horizon: anything at or past
/// `tau` is stored as `tau` and counted as an event, since T = min(T~, tau)
/// is then known exactly.
struct CensoredDataset {
  Matrix X;
  std::vector<int> arm;
  Vector y;
  std::vector<bool> event;
  double tau = 0.0;
  int m = 0;

  [[nodiscard]] std::size_t n() const { return arm.size(); }
  [[nodiscard]] Eigen::Index d() const { return X.cols(); }

  [[nodiscard]] std::vector<std::size_t> arm_counts() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(m), 0);
    for (int a : arm) ++counts[static_cast<std::size_t>(a)];
    return counts;
  }

  [[nodiscard]] double censoring_fraction() const {
    if (event.empty()) return 0.0;
    auto censored = std::count(event.begin(), event.end(), false);
    return static_cast<double>(censored) / static_cast<double>(event.size());
  }

  /// Applies the horizon truncation rule. Returns the number of rows changed.
  std::size_t truncate_at_tau() {
    std::size_t changed = 0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      if (y[i] >= tau) {
        if (y[i] > tau || !event[static_cast<std::size_t>(i)]) ++changed;
        y[i] = tau;
        event[static_cast<std::size_t>(i)] = true;
      }
    }
    return changed;
  }

  /// Throws DataError when any invariant is violated.
  void validate() const {
    const auto rows = static_cast<Eigen::Index>(arm.size());
    if (rows == 0) throw DataError("dataset is empty");
    require_dims(X.rows() == rows && y.size() == rows && event.size() == arm.size(),
                 "X, arm, y and event must share the row count");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw DataError("tau must be positive and finite");
    if (m < 1) throw DataError("arm count must be positive");
    if (!X.allFinite()) throw DataError("covariates must be finite");
    for (Eigen::Index i = 0; i < rows; ++i) {
      const auto a = arm[static_cast<std::size_t>(i)];
      if (a < 0 || a >= m) throw DataError("arm label out of range at row " + std::to_string(i + 1));
      if (!(y[i] >= 0.0) || y[i] > tau) throw DataError("time outside [0, tau] at row " + std::to_string(i + 1));
      if (y[i] == tau && !event[static_cast<std::size_t>(i)]) throw DataError("censored at tau at row " + std::to_string(i + 1));
    }
  }

  /// Keeps only the listed covariate columns (zero-based).
  [[nodiscard]] CensoredDataset with_features(const std::vector<int>& columns) const {
    CensoredDataset out = *this;
    out.X.resize(X.rows(), static_cast<Eigen::Index>(columns.size()));
    for (std::size_t k = 0; k < columns.size(); ++k) {
      if (columns[k] < 0 || columns[k] >= X.cols()) throw ConfigError("feature index out of range");
      out.X.col(static_cast<Eigen::Index>(k)) = X.col(columns[k]);
    }
    return out;
  }
};

/// n x m matrix whose rows are treatment probability vectors.
using PolicyMatrix = Matrix;

inline void validate_policy(const PolicyMatrix& pi, double tol = 1e-12) {
  for (Eigen::Index i = 0; i < pi.rows(); ++i) {
    if ((pi.row(i).array() < 0.0).any()) throw DataError("policy row has negative entries");
    if (std::abs(pi.row(i).sum() - 1.0) > tol) throw DataError("policy row does not sum to one");
  }
}

inline PolicyMatrix uniform_policy(Eigen::Index n, int m) {
  return PolicyMatrix::Constant(n, m, 1.0 / m);
}

/// Rowwise one-hot of the largest entry, ties to the lowest column.
inline PolicyMatrix argmax_policy(const Matrix& scores) {
  PolicyMatrix out = PolicyMatrix::Zero(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index a = 1; a < scores.cols(); ++a)
      if (scores(i, a) > scores(i, best)) best = a;
    out(i, best) = 1.0;
  }
  return out;
}

/// Error raised by the CSV reader. `kind` distinguishes the failure classes.
class ParseError : public DataError {
 public:
  enum class Kind { missing_column, non_numeric, arm_label, negative_time, bad_indicator, empty, io };

  ParseError(Kind kind, const std::string& msg) : DataError(msg), kind_(kind) {}
  [[nodiscard]] Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    auto b = cell.find_first_not_of(" \t\r");
    auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_number(const std::string& cell, std::size_t row, const std::string& column) {
  double value = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (cell.empty() || ec != std::errc{} || ptr != last || !std::isfinite(value))
    throw ParseError(ParseError::Kind::non_numeric,
                     "non-numeric cell '" + cell + "' at row " + std::to_string(row) + ", column " + column);
  return value;
}

}  // namespace detail

struct LoadReport {
  std::size_t rows = 0;
  std::size_t truncated = 0;
};

/// Parses a dataset with header `x1..xd,a,y,delta` (any column order).
/// Blank lines and lines starting with `#` are skipped.
/// Row numbers in error messages count data rows from 1.
inline CensoredDataset parse_csv(std::istream& in, int m, double tau, LoadReport* report = nullptr) {
  if (m < 1) throw ConfigError("arm count must be positive");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  std::string line;
  auto skip = [](const std::string& l) {
    const auto p = l.find_first_not_of(" \t\r");
    return p == std::string::npos || l[p] == '#';
  };
  while (std::getline(in, line)) {
    if (!skip(line)) break;
    line.clear();
  }
  if (line.empty()) throw ParseError(ParseError::Kind::empty, "dataset is empty");
  const auto header = detail::split_csv_line(line);

  auto find = [&](const std::string& name) -> std::ptrdiff_t {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : std::distance(header.begin(), it);
  };
  std::vector<std::ptrdiff_t> xcols;
  for (int k = 1;; ++k) {
    auto c = find("x" + std::to_string(k));
    if (c < 0) break;
    xcols.push_back(c);
  }
  if (xcols.empty()) throw ParseError(ParseError::Kind::missing_column, "missing column x1");
  const auto acol = find("a");
  const auto ycol = find("y");
  const auto dcol = find("delta");
  if (acol < 0) throw ParseError(ParseError::Kind::missing_column, "missing column a");
  if (ycol < 0) throw ParseError(ParseError::Kind::missing_column, "missing column y");
  if (dcol < 0) throw ParseError(ParseError::Kind::missing_column, "missing column delta");

  std::vector<std::vector<double>> xs;
  std::vector<int> arms;
  std::vector<double> ys;
  std::vector<bool> events;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (skip(line)) continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() < header.size())
      throw ParseError(ParseError::Kind::missing_column,
                       "row " + std::to_string(row) + " has " + std::to_string(cells.size()) + " cells, expected " +
                           std::to_string(header.size()));
    std::vector<double> x;
    for (std::size_t k = 0; k < xcols.size(); ++k)
      x.push_back(detail::parse_number(cells[static_cast<std::size_t>(xcols[k])], row, header[static_cast<std::size_t>(xcols[k])]));
    const double a = detail::parse_number(cells[static_cast<std::size_t>(acol)], row, "a");
    if (a != std::floor(a) || a < 1 || a > m)
      throw ParseError(ParseError::Kind::arm_label, "arm label " + cells[static_cast<std::size_t>(acol)] + " outside [1.." +
                                                        std::to_string(m) + "] at row " + std::to_string(row) + ", column a");
    const double y = detail::parse_number(cells[static_cast<std::size_t>(ycol)], row, "y");
    if (y < 0.0)
      throw ParseError(ParseError::Kind::negative_time, "negative time at row " + std::to_string(row) + ", column y");
    const double delta = detail::parse_number(cells[static_cast<std::size_t>(dcol)], row, "delta");
    if (delta != 0.0 && delta != 1.0)
      throw ParseError(ParseError::Kind::bad_indicator, "delta must be 0 or 1 at row " + std::to_string(row) + ", column delta");
    xs.push_back(std::move(x));
    arms.push_back(static_cast<int>(a) - 1);
    ys.push_back(y);
    events.push_back(delta == 1.0);
  }
  if (row == 0) throw ParseError(ParseError::Kind::empty, "dataset is empty");

  CensoredDataset ds;
  ds.m = m;
  ds.tau = tau;
  ds.X.resize(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(xcols.size()));
  ds.y.resize(static_cast<Eigen::Index>(row));
  for (std::size_t i = 0; i < row; ++i) {
    for (std::size_t k = 0; k < xcols.size(); ++k)
      ds.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = xs[i][k];
    ds.y[static_cast<Eigen::Index>(i)] = ys[i];
  }
  ds.arm = std::move(arms);
  ds.event = std::move(events);
  const auto truncated = ds.truncate_at_tau();
  ds.validate();
  if (report) *report = {row, truncated};
  return ds;
}

inline CensoredDataset load_csv(const std::string& path, int m, double tau, LoadReport* report = nullptr) {
  std::ifstream in(path);
  if (!in) throw ParseError(ParseError::Kind::io, "cannot open " + path);
  return parse_csv(in, m, tau, report);
}

inline void write_csv(std::ostream& out, const CensoredDataset& ds) {
  out.precision(17);
  for (Eigen::Index k = 0; k < ds.d(); ++k) out << 'x' << (k + 1) << ',';
  out << "a,y,delta\n";
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (Eigen::Index k = 0; k < ds.d(); ++k) out << ds.X(r, k) << ',';
    out << (ds.arm[i] + 1) << ',' << ds.y[r] << ',' << (ds.event[i] ? 1 : 0) << '\n';
  }
}

}  // namespace bpsurv
