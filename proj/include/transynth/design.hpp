#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "transynth/dataset.hpp"
#include "transynth/errors.hpp"

namespace transynth {

/// (v - knot) I(v > knot). The inequality is strict.
inline double hinge(double v, double knot) { return v > knot ? v - knot : 0.0; }

/// I(v > threshold) or I(v < threshold), both strict.
inline double indicator(double v, double threshold, bool greater) {
  return (greater ? v > threshold : v < threshold) ? 1.0 : 0.0;
}

/// Quadratic hinge basis restricted to be linear beyond the last knot:
/// b_j(v) = hinge(v, k_j)^2 - hinge(v, k_4)^2 for j = 1..3. Continuous with a
/// continuous first derivative at every knot, identically zero below k_1.
inline Eigen::Vector3d restricted_quadratic_spline_basis(double v, const std::array<double, 4>& knots) {
  for (int j = 0; j < 3; ++j)
    if (!(knots[static_cast<std::size_t>(j)] < knots[static_cast<std::size_t>(j + 1)]))
      throw ConfigError("spline knots must be strictly increasing");
  const double tail = hinge(v, knots[3]);
  const double tail2 = tail * tail;
  Eigen::Vector3d out;
  for (int j = 0; j < 3; ++j) {
    const double h = hinge(v, knots[static_cast<std::size_t>(j)]);
    out[j] = h * h - tail2;
  }
  return out;
}

enum class LinkKind { identity, inverse_logit };

struct LinkFunction {
  LinkKind kind = LinkKind::identity;
};

/// Numerically stable inverse logit; saturates to 0/1 for extreme inputs.
inline double expit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double apply_link(LinkFunction link, double x) {
  return link.kind == LinkKind::identity ? x : expit(x);
}

/// One multiplicative factor of a design term.
struct Factor {
  enum class Kind { intercept, column, hinge, indicator, rqspline };
  Kind kind = Kind::intercept;
  std::string column;
  double knot = 0.0;              // hinge knot or indicator threshold
  bool greater = true;            // indicator direction
  std::array<double, 4> knots{};  // restricted quadratic spline knots
  bool knots_set = false;         // false: resolve from data percentiles

  int width() const { return kind == Kind::rqspline ? 3 : 1; }

  std::string label() const {
    char buf[160];
    switch (kind) {
      case Kind::intercept:
        return "1";
      case Kind::column:
        return column;
      case Kind::hinge:
        std::snprintf(buf, sizeof(buf), "hinge(%s,%g)", column.c_str(), knot);
        return buf;
      case Kind::indicator:
        std::snprintf(buf, sizeof(buf), "ind(%s%c%g)", column.c_str(), greater ? '>' : '<', knot);
        return buf;
      case Kind::rqspline:
        if (!knots_set) return "rqs(" + column + ")";
        std::snprintf(buf, sizeof(buf), "rqs(%s,%g,%g,%g,%g)", column.c_str(), knots[0], knots[1],
                      knots[2], knots[3]);
        return buf;
    }
    return "?";
  }
};

/// A design term: the elementwise product of its factors. Factors that expand
/// to several columns (splines) multiply out column by column.
struct Term {
  std::vector<Factor> factors;

  int width() const {
    int w = 1;
    for (const auto& f : factors) w *= f.width();
    return w;
  }
};

/// Ordered term list realised as a numeric matrix by build_design().
struct DesignSpec {
  std::vector<Term> terms;

  int column_count() const {
    int k = 0;
    for (const auto& t : terms) k += t.width();
    return k;
  }

  std::vector<std::string> column_labels() const {
    std::vector<std::string> out;
    for (const auto& t : terms) {
      std::vector<std::string> parts{std::string()};
      for (const auto& f : t.factors) {
        std::vector<std::string> next;
        const std::string base = f.label();
        for (const auto& p : parts) {
          if (f.kind == Factor::Kind::rqspline) {
            for (int j = 1; j <= 3; ++j)
              next.push_back(p.empty() ? base + "[" + std::to_string(j) + "]"
                                       : p + ":" + base + "[" + std::to_string(j) + "]");
          } else {
            next.push_back(p.empty() ? base : p + ":" + base);
          }
        }
        parts = std::move(next);
      }
      out.insert(out.end(), parts.begin(), parts.end());
    }
    return out;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

/// Splits on `sep` at parenthesis depth zero.
inline std::vector<std::string> split_top_level(const std::string& s, char sep) {
  std::vector<std::string> out;
  int depth = 0;
  std::string cur;
  for (char c : s) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (c == sep && depth == 0) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_number(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("could not parse number '" + s + "' in " + context);
  }
}

inline Factor parse_factor(const std::string& raw) {
  const std::string s = trim(raw);
  if (s.empty()) throw ConfigError("empty factor in design spec");
  Factor f;
  if (s == "1") {
    f.kind = Factor::Kind::intercept;
    return f;
  }
  const std::size_t open = s.find('(');
  if (open == std::string::npos) {
    f.kind = Factor::Kind::column;
    f.column = s;
    return f;
  }
  if (s.back() != ')') throw ConfigError("unbalanced parentheses in design factor '" + s + "'");
  const std::string fn = trim(s.substr(0, open));
  const std::string inner = s.substr(open + 1, s.size() - open - 2);
  if (fn == "hinge") {
    const auto args = split_top_level(inner, ',');
    if (args.size() != 2) throw ConfigError("hinge() takes (column, knot): '" + s + "'");
    f.kind = Factor::Kind::hinge;
    f.column = trim(args[0]);
    f.knot = parse_number(trim(args[1]), s);
    return f;
  }
  if (fn == "ind") {
    const std::size_t gt = inner.find('>');
    const std::size_t lt = inner.find('<');
    if ((gt == std::string::npos) == (lt == std::string::npos))
      throw ConfigError("ind() takes (column > threshold) or (column < threshold): '" + s + "'");
    const std::size_t cut = gt != std::string::npos ? gt : lt;
    f.kind = Factor::Kind::indicator;
    f.greater = gt != std::string::npos;
    f.column = trim(inner.substr(0, cut));
    f.knot = parse_number(trim(inner.substr(cut + 1)), s);
    return f;
  }
  if (fn == "rqs") {
    const auto args = split_top_level(inner, ',');
    f.kind = Factor::Kind::rqspline;
    if (args.size() == 1) {
      f.column = trim(args[0]);
      f.knots_set = false;  // resolved later from data percentiles
      return f;
    }
    if (args.size() != 5) throw ConfigError("rqs() takes (column) or (column, k1, k2, k3, k4): '" + s + "'");
    f.column = trim(args[0]);
    for (int j = 0; j < 4; ++j)
      f.knots[static_cast<std::size_t>(j)] = parse_number(trim(args[static_cast<std::size_t>(j + 1)]), s);
    for (int j = 0; j < 3; ++j)
      if (!(f.knots[static_cast<std::size_t>(j)] < f.knots[static_cast<std::size_t>(j + 1)]))
        throw ConfigError("rqs() knots must be strictly increasing: '" + s + "'");
    f.knots_set = true;
    return f;
  }
  throw ConfigError("unknown design function '" + fn + "'");
}

}  // namespace detail

/// Parses an ordered term string such as "1 + A + V + A:V + A:hinge(V,300)".
/// Factors: "1", a column name, hinge(col,knot), ind(col>t) / ind(col<t), and
/// rqs(col,k1,k2,k3,k4) or rqs(col) with knots resolved from the data.
inline DesignSpec parse_design(const std::string& text) {
  DesignSpec spec;
  const std::string trimmed = detail::trim(text);
  if (trimmed.empty()) return spec;  // zero-column design
  for (const auto& term_text : detail::split_top_level(trimmed, '+')) {
    Term term;
    for (const auto& factor_text : detail::split_top_level(term_text, ':'))
      term.factors.push_back(detail::parse_factor(factor_text));
    spec.terms.push_back(std::move(term));
  }
  return spec;
}

/// Linear-interpolation percentile of a sorted vector, q in [0, 1].
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw DataError("percentile of an empty sample");
  if (sorted.size() == 1) return sorted.front();
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double w = h - static_cast<double>(lo);
  return sorted[lo] + w * (sorted[lo + 1] - sorted[lo]);
}

/// Fills unset rqs() knots with the 5th/35th/65th/95th percentiles of the
/// factor's column over rows inside the positive region.
inline DesignSpec resolve_spline_knots(DesignSpec spec, const Dataset& data,
                                       const PositiveRegion& region) {
  const auto rows = rows_in_region(data, region);
  for (auto& term : spec.terms) {
    for (auto& f : term.factors) {
      if (f.kind != Factor::Kind::rqspline || f.knots_set) continue;
      const Eigen::VectorXd& col = data.column(f.column);
      std::vector<double> vals;
      vals.reserve(rows.size());
      for (const auto r : rows) vals.push_back(col[r]);
      std::sort(vals.begin(), vals.end());
      const std::array<double, 4> qs{0.05, 0.35, 0.65, 0.95};
      for (int j = 0; j < 4; ++j) f.knots[static_cast<std::size_t>(j)] = percentile_sorted(vals, qs[static_cast<std::size_t>(j)]);
      for (int j = 0; j < 3; ++j)
        if (!(f.knots[static_cast<std::size_t>(j)] < f.knots[static_cast<std::size_t>(j + 1)]))
          throw ConfigError("default spline knots for '" + f.column +
                            "' are not strictly increasing; supply rqs() knots explicitly");
      f.knots_set = true;
    }
  }
  return spec;
}

/// Constant substitutions applied to columns before term evaluation,
/// e.g. {{"A", 1.0}} realises the design with the action set to 1.
using ColumnOverrides = std::vector<std::pair<std::string, double>>;

/// Realises the spec as an n-by-k matrix. Interactions are elementwise
/// products of the factor columns evaluated after overrides.
inline Eigen::MatrixXd build_design(const DesignSpec& spec, const Dataset& data,
                                    const ColumnOverrides& overrides = {}) {
  const Eigen::Index n = data.n_rows();
  Eigen::MatrixXd out(n, spec.column_count());
  Eigen::Index col = 0;

  auto factor_columns = [&](const Factor& f) -> Eigen::MatrixXd {
    Eigen::MatrixXd fc(n, f.width());
    if (f.kind == Factor::Kind::intercept) {
      fc.setOnes();
      return fc;
    }
    double override_value = 0.0;
    bool overridden = false;
    for (const auto& [name, value] : overrides) {
      if (name == f.column) {
        override_value = value;
        overridden = true;
        break;
      }
    }
    Eigen::VectorXd values;
    if (overridden) {
      values = Eigen::VectorXd::Constant(n, override_value);
    } else {
      values = data.column(f.column);
      for (Eigen::Index i = 0; i < n; ++i)
        if (!std::isfinite(values[i]))
          throw DataError("non-finite value in column '" + f.column + "' at row " +
                          std::to_string(i));
    }
    switch (f.kind) {
      case Factor::Kind::column:
        fc.col(0) = values;
        break;
      case Factor::Kind::hinge:
        for (Eigen::Index i = 0; i < n; ++i) fc(i, 0) = hinge(values[i], f.knot);
        break;
      case Factor::Kind::indicator:
        for (Eigen::Index i = 0; i < n; ++i) fc(i, 0) = indicator(values[i], f.knot, f.greater);
        break;
      case Factor::Kind::rqspline: {
        if (!f.knots_set)
          throw ConfigError("rqs(" + f.column + ") knots unresolved; call resolve_spline_knots()");
        for (Eigen::Index i = 0; i < n; ++i)
          fc.row(i) = restricted_quadratic_spline_basis(values[i], f.knots).transpose();
        break;
      }
      case Factor::Kind::intercept:
        break;
    }
    return fc;
  };

  for (const auto& term : spec.terms) {
    Eigen::MatrixXd acc = Eigen::MatrixXd::Ones(n, 1);
    for (const auto& f : term.factors) {
      const Eigen::MatrixXd fc = factor_columns(f);
      Eigen::MatrixXd next(n, acc.cols() * fc.cols());
      for (Eigen::Index a = 0; a < acc.cols(); ++a)
        for (Eigen::Index b = 0; b < fc.cols(); ++b)
          next.col(a * fc.cols() + b) = acc.col(a).cwiseProduct(fc.col(b));
      acc = std::move(next);
    }
    out.middleCols(col, acc.cols()) = acc;
    col += acc.cols();
  }
  return out;
}

}  // namespace transynth
