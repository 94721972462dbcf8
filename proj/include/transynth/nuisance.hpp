#pragma once

#include <Eigen/Core>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "transynth/dataset.hpp"
#include "transynth/design.hpp"
#include "transynth/errors.hpp"

namespace transynth {

/// Model specifications for the nuisance fits behind the AIPW machinery:
/// action propensity (fit on external rows), sampling membership, and the
/// weighted outcome regression.
struct NuisanceSpec {
  DesignSpec z_spec;  // action propensity columns
  DesignSpec u_spec;  // sampling model columns
  DesignSpec x_spec;  // outcome model columns

  /// Fit the sampling model on positive-region rows only. The synthesis and
  /// extrapolation estimators want this on; restricting the covariate set
  /// instead uses the full sample.
  bool sampling_restricted_to_positive = true;

  /// When set, the action propensity is treated as known by design (e.g. a
  /// randomized trial) and no propensity parameters are estimated. Estimating
  /// it anyway tends to shrink the variance, so this is off by default.
  std::optional<double> fixed_propensity;
};

/// Per-unit logistic score contributions mask_i (y_i - expit(x_i b)) x_i.
/// Units with mask 0 contribute exactly zero and their response is not read.
inline Eigen::MatrixXd logistic_score(const Eigen::VectorXd& params, const Eigen::MatrixXd& design,
                                      const Eigen::ArrayXd& response, const Eigen::ArrayXd& mask) {
  if (params.size() != design.cols())
    throw ConfigError("logistic_score: parameter length does not match design columns");
  if (response.size() != design.rows() || mask.size() != design.rows())
    throw ConfigError("logistic_score: response/mask length does not match design rows");
  const Eigen::Index n = design.rows();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, design.cols());
  const Eigen::VectorXd eta = design * params;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (mask[i] == 0.0) continue;
    out.row(i) = mask[i] * (response[i] - expit(eta[i])) * design.row(i);
  }
  return out;
}

/// Per-unit weighted linear-regression score w_i (y_i - x_i b) x_i.
/// Zero-weight units contribute exactly zero without touching y_i.
inline Eigen::MatrixXd weighted_linear_score(const Eigen::VectorXd& params,
                                             const Eigen::MatrixXd& design,
                                             const Eigen::ArrayXd& response,
                                             const Eigen::ArrayXd& weights) {
  if (params.size() != design.cols())
    throw ConfigError("weighted_linear_score: parameter length does not match design columns");
  if (response.size() != design.rows() || weights.size() != design.rows())
    throw ConfigError("weighted_linear_score: response/weights length does not match design rows");
  const Eigen::Index n = design.rows();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, design.cols());
  const Eigen::VectorXd fitted = design * params;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    out.row(i) = weights[i] * (response[i] - fitted[i]) * design.row(i);
  }
  return out;
}

namespace detail {

/// Transport weight for one external unit: odds of target membership times
/// the inverse probability of the observed action.
inline double transport_weight_value(double p_sample, double p_action, double a,
                                     bool& positivity_ok) {
  const double p_observed_action = a == 1.0 ? p_action : 1.0 - p_action;
  if (p_observed_action < 1e-12 || 1.0 - p_sample < 1e-12) {
    positivity_ok = false;
    return std::numeric_limits<double>::quiet_NaN();
  }
  return p_sample / (1.0 - p_sample) / p_observed_action;
}

}  // namespace detail

/// Inverse-odds transport weights for external units; exactly zero on target
/// rows. p_sample comes from the sampling model (u_spec), p_action from the
/// propensity model (z_spec) or the fixed design value.
inline Eigen::ArrayXd transport_weights(const Dataset& data, const Eigen::VectorXd& eta1,
                                        const Eigen::VectorXd& eta2, const NuisanceSpec& spec) {
  const Dataset work = data.with_filled({"A", "Y"}, 0.0);
  const Eigen::ArrayXd r = work.column("R").array();
  const Eigen::ArrayXd a = work.column("A").array();
  const Eigen::MatrixXd u = build_design(spec.u_spec, work);
  if (eta2.size() != u.cols())
    throw ConfigError("transport_weights: sampling parameter length does not match u_spec");
  const Eigen::VectorXd sample_eta = u * eta2;

  Eigen::VectorXd action_eta;
  if (!spec.fixed_propensity) {
    const Eigen::MatrixXd z = build_design(spec.z_spec, work);
    if (eta1.size() != z.cols())
      throw ConfigError("transport_weights: propensity parameter length does not match z_spec");
    action_eta = z * eta1;
  }

  const Eigen::Index n = work.n_rows();
  Eigen::ArrayXd pi = Eigen::ArrayXd::Zero(n);
  std::vector<Eigen::Index> offending;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (r[i] != 0.0) continue;
    const double p_action =
        spec.fixed_propensity ? *spec.fixed_propensity : expit(action_eta[i]);
    const double p_sample = expit(sample_eta[i]);
    bool ok = true;
    const double w = detail::transport_weight_value(p_sample, p_action, a[i], ok);
    if (!ok) {
      offending.push_back(i);
      continue;
    }
    pi[i] = w;
  }
  if (!offending.empty()) {
    std::string rows;
    for (std::size_t k = 0; k < offending.size() && k < 10; ++k)
      rows += (k ? ", " : "") + std::to_string(offending[k]);
    if (offending.size() > 10) rows += ", ...";
    throw NumericError("positivity diagnostic: estimated action or sampling probability below "
                       "1e-12 for " +
                       std::to_string(offending.size()) + " unit(s) at rows " + rows);
  }
  return pi;
}

struct WeightDiagnostics {
  double max_weight = std::numeric_limits<double>::quiet_NaN();
  double effective_sample_size = std::numeric_limits<double>::quiet_NaN();
};

/// Max weight and Kish effective sample size over external units. Reported
/// instead of truncating: extreme weights should be seen, not hidden.
inline WeightDiagnostics weight_diagnostics(const Eigen::ArrayXd& pi, const Eigen::ArrayXd& r) {
  WeightDiagnostics out;
  double sum = 0.0, sum_sq = 0.0, max_w = 0.0;
  Eigen::Index m = 0;
  for (Eigen::Index i = 0; i < pi.size(); ++i) {
    if (r[i] != 0.0) continue;
    ++m;
    sum += pi[i];
    sum_sq += pi[i] * pi[i];
    max_w = std::max(max_w, pi[i]);
  }
  if (m == 0 || sum_sq <= 0.0) return out;
  out.max_weight = max_w;
  out.effective_sample_size = sum * sum / sum_sq;
  return out;
}

/// Model-predicted potential outcomes for target-population units, from the
/// outcome design realised with the action overridden to 1 and to 0.
struct PseudoOutcomes {
  Eigen::VectorXd y1, y0;
  std::vector<Eigen::Index> target_rows;
};

inline PseudoOutcomes pseudo_outcomes(const Dataset& data, const Eigen::VectorXd& eta3,
                                      const DesignSpec& x_spec) {
  const Dataset work = data.with_filled({"A", "Y"}, 0.0);
  const Eigen::MatrixXd x1 = build_design(x_spec, work, {{"A", 1.0}});
  const Eigen::MatrixXd x0 = build_design(x_spec, work, {{"A", 0.0}});
  if (eta3.size() != x1.cols())
    throw ConfigError("pseudo_outcomes: parameter length does not match x_spec");
  const Eigen::ArrayXd r = work.column("R").array();

  PseudoOutcomes out;
  for (Eigen::Index i = 0; i < work.n_rows(); ++i)
    if (r[i] == 1.0) out.target_rows.push_back(i);
  out.y1.resize(static_cast<Eigen::Index>(out.target_rows.size()));
  out.y0.resize(static_cast<Eigen::Index>(out.target_rows.size()));
  const Eigen::VectorXd all1 = x1 * eta3;
  const Eigen::VectorXd all0 = x0 * eta3;
  for (std::size_t k = 0; k < out.target_rows.size(); ++k) {
    out.y1[static_cast<Eigen::Index>(k)] = all1[out.target_rows[k]];
    out.y0[static_cast<Eigen::Index>(k)] = all0[out.target_rows[k]];
  }
  return out;
}

}  // namespace transynth
