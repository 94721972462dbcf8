#pragma once

#include <Eigen/Core>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "transynth/errors.hpp"

namespace transynth {

/// Rectangular individual-level data with one named numeric column per
/// variable. Convention used throughout the library:
///   "R"  population indicator, 1 = target population, 0 = external study
///   "A"  binary action, NaN on target rows (never observed there)
///   "V"  the continuous covariate whose support may not fully overlap
///   "Y"  outcome, NaN on target rows
/// plus any number of additional covariate columns under their own names.
class Dataset {
 public:
  Dataset() = default;

  Eigen::Index n_rows() const { return n_; }
  bool empty() const { return n_ <= 0; }

  const std::vector<std::string>& column_names() const { return names_; }

  bool has_column(const std::string& name) const {
    return columns_.find(name) != columns_.end();
  }

  const Eigen::VectorXd& column(const std::string& name) const {
    const auto it = columns_.find(name);
    if (it == columns_.end()) throw DataError("dataset has no column named '" + name + "'");
    return it->second;
  }

  void add_column(const std::string& name, Eigen::VectorXd values) {
    if (n_ >= 0 && values.size() != n_)
      throw DataError("column '" + name + "' has " + std::to_string(values.size()) +
                      " rows, dataset has " + std::to_string(n_));
    if (has_column(name)) throw DataError("duplicate column '" + name + "'");
    if (n_ < 0) n_ = values.size();
    names_.push_back(name);
    columns_.emplace(name, std::move(values));
  }

  Dataset subset(const std::vector<Eigen::Index>& rows) const {
    Dataset out;
    for (const auto& name : names_) {
      const Eigen::VectorXd& src = columns_.at(name);
      Eigen::VectorXd col(static_cast<Eigen::Index>(rows.size()));
      for (std::size_t i = 0; i < rows.size(); ++i) col[static_cast<Eigen::Index>(i)] = src[rows[i]];
      out.add_column(name, std::move(col));
    }
    if (rows.empty()) out.n_ = 0;
    return out;
  }

  /// Copy with NaN entries of the listed columns replaced by `value`.
  /// Estimating-function blocks gate those rows with masks, so the filled
  /// values never reach a result; this just keeps matrix algebra NaN-free.
  Dataset with_filled(std::initializer_list<const char*> cols, double value) const {
    Dataset out = *this;
    for (const char* name : cols) {
      auto it = out.columns_.find(name);
      if (it == out.columns_.end()) continue;
      for (Eigen::Index i = 0; i < it->second.size(); ++i)
        if (std::isnan(it->second[i])) it->second[i] = value;
    }
    return out;
  }

 private:
  Eigen::Index n_ = -1;
  std::vector<std::string> names_;
  std::unordered_map<std::string, Eigen::VectorXd> columns_;
};

inline Dataset concat_rows(const Dataset& a, const Dataset& b) {
  Dataset out;
  for (const auto& name : a.column_names()) {
    Eigen::VectorXd col(a.n_rows() + b.n_rows());
    col.head(a.n_rows()) = a.column(name);
    col.tail(b.n_rows()) = b.column(name);
    out.add_column(name, std::move(col));
  }
  return out;
}

/// Range of the continuous covariate where the external study has support.
/// Everything outside is the nonpositive range that a shift model (or a
/// restriction of the question) has to cover.
struct PositiveRegion {
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
  bool lower_closed = true;
  bool upper_closed = true;

  bool contains(double v) const {
    if (v < lower || (v == lower && !lower_closed)) return false;
    if (v > upper || (v == upper && !upper_closed)) return false;
    return true;
  }

  /// 0 inside the region, 1 below it, 2 above it.
  int region_code(double v) const {
    if (contains(v)) return 0;
    return v < lower || (v == lower && !lower_closed) ? 1 : 2;
  }
};

/// 1.0 for rows outside the positive region, 0.0 inside.
inline Eigen::ArrayXd nonpositive_indicator(const Dataset& data, const PositiveRegion& region) {
  const Eigen::VectorXd& v = data.column("V");
  Eigen::ArrayXd out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = region.contains(v[i]) ? 0.0 : 1.0;
  return out;
}

inline std::vector<Eigen::Index> rows_in_region(const Dataset& data, const PositiveRegion& region) {
  const Eigen::VectorXd& v = data.column("V");
  std::vector<Eigen::Index> rows;
  rows.reserve(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (region.contains(v[i])) rows.push_back(i);
  return rows;
}

}  // namespace transynth
