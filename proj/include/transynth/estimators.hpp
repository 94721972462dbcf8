#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "transynth/dataset.hpp"
#include "transynth/design.hpp"
#include "transynth/errors.hpp"
#include "transynth/mestimation.hpp"
#include "transynth/nuisance.hpp"
#include "transynth/parallel.hpp"

namespace transynth {

// ---------------------------------------------------------------------------
// Shift-model parameter distributions
// ---------------------------------------------------------------------------

/// Distribution (or bound set) for one shift-model coefficient.
struct LambdaDist {
  enum class Kind { point_mass, normal, trapezoid, uniform, bounds_set };
  Kind kind = Kind::point_mass;
  double a = 0.0;              // point value | mean | center | lower
  double b = 0.0;              // (unused)    | sd   | sd     | upper
  std::vector<double> values;  // bounds_set

  static LambdaDist point(double v) { return {Kind::point_mass, v, 0.0, {}}; }
  static LambdaDist normal(double mean, double sd) { return {Kind::normal, mean, sd, {}}; }
  /// Flat shelf on center +- sd, support center +- 3 sd.
  static LambdaDist trapezoid(double center, double sd) { return {Kind::trapezoid, center, sd, {}}; }
  static LambdaDist uniform(double lo, double hi) { return {Kind::uniform, lo, hi, {}}; }
  static LambdaDist bounds(std::vector<double> vs) { return {Kind::bounds_set, 0.0, 0.0, std::move(vs)}; }

  void validate() const {
    switch (kind) {
      case Kind::point_mass:
        break;
      case Kind::normal:
        if (b < 0.0) throw ConfigError("normal shift distribution needs sd >= 0");
        break;
      case Kind::trapezoid:
        if (!(b > 0.0))
          throw ConfigError("trapezoid shift distribution needs sd > 0 so the support "
                            "strictly contains the shelf");
        break;
      case Kind::uniform:
        if (!(a < b)) throw ConfigError("uniform shift distribution needs lower < upper");
        break;
      case Kind::bounds_set:
        if (values.empty()) throw ConfigError("bound set for a shift coefficient is empty");
        break;
    }
  }

  bool is_point() const { return kind == Kind::point_mass; }
  bool is_bounds() const { return kind == Kind::bounds_set; }
};

/// Shift model for the nonpositive range: design columns that vanish inside
/// the positive region plus one coefficient distribution per column.
struct MathModelSpec {
  DesignSpec star_spec;
  std::vector<LambdaDist> lambda;

  /// Empty shift model: plain statistical extrapolation.
  static MathModelSpec none() { return {}; }

  void validate() const {
    if (static_cast<int>(lambda.size()) != star_spec.column_count())
      throw ConfigError("shift model has " + std::to_string(star_spec.column_count()) +
                        " column(s) but " + std::to_string(lambda.size()) +
                        " coefficient distribution(s)");
    for (const auto& d : lambda) d.validate();
  }

  bool all_point() const {
    for (const auto& d : lambda)
      if (!d.is_point()) return false;
    return true;
  }
  bool all_bounds() const {
    for (const auto& d : lambda)
      if (!d.is_bounds()) return false;
    return true;
  }

  Eigen::VectorXd point_values() const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(lambda.size()));
    for (std::size_t j = 0; j < lambda.size(); ++j) {
      if (!lambda[j].is_point())
        throw ConfigError("shift coefficient " + std::to_string(j) +
                          " is not a point mass; draw it in the bootstrap or enumerate it in "
                          "bounds mode");
      out[static_cast<Eigen::Index>(j)] = lambda[j].a;
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

enum class EstimateMode { point, bounds, bootstrap };

struct RegionSummary {
  std::string label;   // "positive", "below", "above"
  double probability;  // share of target units in the region
  double psi;          // region-specific average effect (NaN when not applicable)
};

struct ComboEstimate {
  std::vector<double> lambda;
  double psi, se, ci_lower, ci_upper;
};

struct Diagnostics {
  int iterations = 0;
  double residual = std::numeric_limits<double>::quiet_NaN();
  Eigen::Index n_target = 0;
  Eigen::Index n_external = 0;
  double max_weight = std::numeric_limits<double>::quiet_NaN();
  double effective_sample_size = std::numeric_limits<double>::quiet_NaN();
  std::vector<RegionSummary> regions;
  std::vector<ComboEstimate> combinations;  // bounds mode
};

struct EstimateResult {
  std::string estimator;
  EstimateMode mode = EstimateMode::point;
  double psi = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> lo, hi;        // bounds mode
  std::optional<double> variance;      // absent in bounds and bootstrap modes
  double ci_lower = std::numeric_limits<double>::quiet_NaN();
  double ci_upper = std::numeric_limits<double>::quiet_NaN();
  Diagnostics diagnostics;

  double se() const {
    return variance ? std::sqrt(*variance) : std::numeric_limits<double>::quiet_NaN();
  }
};

struct EstimatorOptions {
  /// Solve the whole stack jointly (sequential warm start, then damped
  /// Newton on the full system). false stops after the block-by-block pass;
  /// the stacks are block-triangular so the root is the same, but joint mode
  /// verifies it and is the supported path.
  bool joint_solve = true;
  mest::SolveOptions solve{};
};

inline constexpr double kWald95 = 1.959963984540054;

// ---------------------------------------------------------------------------
// Internal stack assembly
// ---------------------------------------------------------------------------

namespace detail {

struct StackData {
  Eigen::ArrayXd r, a, y, vstar;
  Eigen::ArrayXd sampling_mask;    // ones, or 1 - vstar
  Eigen::MatrixXd z, u, x, x1, x0;
  bool fixed_propensity = false;
  double fixed_propensity_value = 0.5;
  // effect-model matrices (synthesis only)
  Eigen::MatrixXd w1, w0, s1, s0;  // statistical and shift designs at A := 1 / 0
  Eigen::ArrayXd stat_mask;        // ones, or positive-region indicator
  LinkFunction link;
};

struct Layout {
  Eigen::Index z_off = -1, z_dim = 0;
  Eigen::Index u_off = -1, u_dim = 0;
  Eigen::Index x_off = -1, x_dim = 0;
  Eigen::Index stat_off = -1, stat_dim = 0;  // alpha or gamma
  Eigen::Index mu1_off = -1, mu0_off = -1, psi_off = -1;
};

inline std::shared_ptr<StackData> make_stack_data(const Dataset& data, const NuisanceSpec& spec,
                                                  const PositiveRegion& region) {
  auto sd = std::make_shared<StackData>();
  const Dataset work = data.with_filled({"A", "Y"}, 0.0);
  sd->r = work.column("R").array();
  sd->a = work.column("A").array();
  sd->y = work.column("Y").array();
  sd->vstar = nonpositive_indicator(work, region);
  sd->sampling_mask = spec.sampling_restricted_to_positive
                          ? (1.0 - sd->vstar).eval()
                          : Eigen::ArrayXd::Ones(work.n_rows()).eval();
  sd->fixed_propensity = spec.fixed_propensity.has_value();
  if (sd->fixed_propensity) {
    sd->fixed_propensity_value = *spec.fixed_propensity;
    if (sd->fixed_propensity_value <= 0.0 || sd->fixed_propensity_value >= 1.0)
      throw ConfigError("fixed propensity must lie strictly inside (0, 1)");
  } else {
    sd->z = build_design(spec.z_spec, work);
  }
  sd->u = build_design(spec.u_spec, work);
  sd->x = build_design(spec.x_spec, work);
  sd->x1 = build_design(spec.x_spec, work, {{"A", 1.0}});
  sd->x0 = build_design(spec.x_spec, work, {{"A", 0.0}});
  if (sd->x.cols() == 0) throw ConfigError("outcome model has no columns");
  if (sd->u.cols() == 0) throw ConfigError("sampling model has no columns");
  if (!sd->fixed_propensity && sd->z.cols() == 0)
    throw ConfigError("propensity model has no columns");
  return sd;
}

/// Transport weights at the current parameter value. May contain inf at wild
/// iterates; the solver's line search rejects those steps.
inline Eigen::ArrayXd weights_at(const StackData& sd, const Layout& lay,
                                 const Eigen::VectorXd& theta) {
  const Eigen::Index n = sd.r.size();
  const Eigen::VectorXd sample_eta = sd.u * theta.segment(lay.u_off, lay.u_dim);
  Eigen::VectorXd action_eta;
  if (!sd.fixed_propensity) action_eta = sd.z * theta.segment(lay.z_off, lay.z_dim);
  Eigen::ArrayXd w = Eigen::ArrayXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (sd.r[i] != 0.0) continue;
    const double p_action = sd.fixed_propensity ? sd.fixed_propensity_value : expit(action_eta[i]);
    const double p_obs = sd.a[i] == 1.0 ? p_action : 1.0 - p_action;
    const double p_sample = expit(sample_eta[i]);
    w[i] = p_sample / (1.0 - p_sample) / p_obs;
  }
  return w;
}

/// Adds the three nuisance blocks: action propensity (unless fixed by
/// design), sampling membership, and the weighted outcome regression.
inline void add_nuisance_blocks(mest::EfStack& stack, const std::shared_ptr<StackData>& sd,
                                Layout& lay) {
  if (!sd->fixed_propensity) {
    lay.z_off = stack.dim();
    lay.z_dim = sd->z.cols();
    stack.add_block("propensity", lay.z_dim,
                    [sd, off = lay.z_off, k = lay.z_dim](const Eigen::VectorXd& theta,
                                                         Eigen::Ref<Eigen::MatrixXd> out) {
                      const Eigen::VectorXd eta = sd->z * theta.segment(off, k);
                      for (Eigen::Index i = 0; i < sd->r.size(); ++i) {
                        if (sd->r[i] != 0.0) {
                          out.row(i).setZero();
                          continue;
                        }
                        out.row(i) = (sd->a[i] - expit(eta[i])) * sd->z.row(i);
                      }
                    });
  }

  lay.u_off = stack.dim();
  lay.u_dim = sd->u.cols();
  stack.add_block("sampling", lay.u_dim,
                  [sd, off = lay.u_off, k = lay.u_dim](const Eigen::VectorXd& theta,
                                                       Eigen::Ref<Eigen::MatrixXd> out) {
                    const Eigen::VectorXd eta = sd->u * theta.segment(off, k);
                    for (Eigen::Index i = 0; i < sd->r.size(); ++i) {
                      if (sd->sampling_mask[i] == 0.0) {
                        out.row(i).setZero();
                        continue;
                      }
                      out.row(i) =
                          sd->sampling_mask[i] * (sd->r[i] - expit(eta[i])) * sd->u.row(i);
                    }
                  });

  lay.x_off = stack.dim();
  lay.x_dim = sd->x.cols();
  stack.add_block("outcome", lay.x_dim,
                  [sd, lay_copy = lay, off = lay.x_off, k = lay.x_dim](
                      const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out) {
                    const Eigen::ArrayXd w = weights_at(*sd, lay_copy, theta);
                    const Eigen::VectorXd fitted = sd->x * theta.segment(off, k);
                    for (Eigen::Index i = 0; i < sd->r.size(); ++i) {
                      if (w[i] == 0.0) {
                        out.row(i).setZero();
                        continue;
                      }
                      out.row(i) = w[i] * (sd->y[i] - fitted[i]) * sd->x.row(i);
                    }
                  });
}

inline Eigen::VectorXd solve_stack(const mest::EfStack& stack, const EstimatorOptions& opt,
                                   mest::SolveInfo* info) {
  const Eigen::VectorXd warm =
      mest::solve_sequential(stack, Eigen::VectorXd::Zero(stack.dim()), opt.solve);
  if (!opt.joint_solve) {
    if (info) {
      const Eigen::VectorXd sum = mest::evaluate_stack(stack, warm);
      *info = {0, sum.cwiseAbs().maxCoeff() / static_cast<double>(stack.n_units())};
    }
    return warm;
  }
  return mest::solve_roots(stack, warm, opt.solve, info);
}

inline std::vector<RegionSummary> target_region_probabilities(const Dataset& data,
                                                              const PositiveRegion& region) {
  const Eigen::VectorXd& v = data.column("V");
  const Eigen::VectorXd& r = data.column("R");
  Eigen::Index counts[3] = {0, 0, 0};
  Eigen::Index n_target = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (r[i] != 1.0) continue;
    ++n_target;
    ++counts[region.region_code(v[i])];
  }
  if (n_target == 0) throw DataError("dataset has no target-population units");
  const char* labels[3] = {"positive", "below", "above"};
  std::vector<RegionSummary> out;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (int c = 0; c < 3; ++c) {
    if (c == 1 && !std::isfinite(region.lower)) continue;
    if (c == 2 && !std::isfinite(region.upper)) continue;
    out.push_back({labels[c], static_cast<double>(counts[c]) / static_cast<double>(n_target), nan});
  }
  return out;
}

inline void fill_weight_diagnostics(Diagnostics& diag, const StackData& sd, const Layout& lay,
                                    const Eigen::VectorXd& theta) {
  const Eigen::ArrayXd w = weights_at(sd, lay, theta);
  const WeightDiagnostics wd = weight_diagnostics(w, sd.r);
  diag.max_weight = wd.max_weight;
  diag.effective_sample_size = wd.effective_sample_size;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Naive estimator: difference in outcome means between arms of the external
// study, pretending it is a random sample of the target population.
// ---------------------------------------------------------------------------

inline EstimateResult estimate_naive(const Dataset& data, const EstimatorOptions& opt = {}) {
  const Dataset work = data.with_filled({"A", "Y"}, 0.0);
  const Eigen::ArrayXd r = work.column("R").array();
  const Eigen::ArrayXd a = work.column("A").array();
  const Eigen::ArrayXd y = work.column("Y").array();
  const Eigen::ArrayXd treated = (1.0 - r) * a;
  const Eigen::ArrayXd control = (1.0 - r) * (1.0 - a);
  if (treated.sum() == 0.0 || control.sum() == 0.0)
    throw DataError("naive estimator needs external units in both arms");

  mest::EfStack stack(work.n_rows());
  stack.add_block("mean_treated", 1,
                  [&treated, &y](const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out) {
                    out.col(0) = treated * (y - theta[0]);
                  });
  stack.add_block("mean_control", 1,
                  [&control, &y](const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out) {
                    out.col(0) = control * (y - theta[1]);
                  });
  stack.add_block("effect", 1,
                  [](const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out) {
                    out.col(0).setConstant(theta[0] - theta[1] - theta[2]);
                  });

  mest::SolveInfo info;
  const Eigen::VectorXd theta = detail::solve_stack(stack, opt, &info);
  const auto sw = mest::sandwich_variance(stack, theta);

  EstimateResult res;
  res.estimator = "naive";
  res.psi = theta[2];
  res.variance = sw.covariance(2, 2);
  res.ci_lower = res.psi - kWald95 * res.se();
  res.ci_upper = res.psi + kWald95 * res.se();
  res.diagnostics.iterations = info.iterations;
  res.diagnostics.residual = info.residual;
  res.diagnostics.n_external = static_cast<Eigen::Index>((1.0 - r).sum());
  res.diagnostics.n_target = static_cast<Eigen::Index>(r.sum());
  return res;
}

// ---------------------------------------------------------------------------
// Weighted-regression AIPW estimators for the three non-synthesis approaches
// ---------------------------------------------------------------------------

enum class AipwVariant { restricted_population, restricted_covariates, extrapolation };

inline const char* aipw_variant_name(AipwVariant v) {
  switch (v) {
    case AipwVariant::restricted_population: return "restricted_population";
    case AipwVariant::restricted_covariates: return "restricted_covariates";
    case AipwVariant::extrapolation: return "extrapolation";
  }
  return "?";
}

/// Transported-effect estimate via the weighted-regression AIPW stack.
/// The variant decides the data and the sampling-model mask:
///   restricted_population  drops every row outside the positive region;
///   restricted_covariates  uses the full data, unmasked sampling model
///                          (the supplied specs should omit the problem
///                          covariate);
///   extrapolation          full data, sampling model fit on the positive
///                          region only, outcome model extrapolates.
/// The spec's sampling_restricted_to_positive flag is overridden accordingly.
inline EstimateResult estimate_aipw(const Dataset& data, AipwVariant variant, NuisanceSpec spec,
                                    const PositiveRegion& region,
                                    const EstimatorOptions& opt = {}) {
  auto regions = detail::target_region_probabilities(data, region);

  Dataset use = data;
  if (variant == AipwVariant::restricted_population) {
    const auto keep = rows_in_region(data, region);
    if (keep.empty()) throw DataError("positive region contains no rows");
    use = data.subset(keep);
  }
  spec.sampling_restricted_to_positive = variant == AipwVariant::extrapolation;

  const Eigen::ArrayXd r_all = use.column("R").array();
  if (r_all.sum() == 0.0) throw DataError("no target-population units available");
  if ((1.0 - r_all).sum() == 0.0) throw DataError("no external units available");

  auto sd = detail::make_stack_data(use, spec, region);
  mest::EfStack stack(use.n_rows());
  detail::Layout lay;
  detail::add_nuisance_blocks(stack, sd, lay);

  lay.mu1_off = stack.dim();
  stack.add_block("mean_treated", 1,
                  [sd, xoff = lay.x_off, xk = lay.x_dim, off = lay.mu1_off](
                      const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out) {
                    const Eigen::VectorXd fitted = sd->x1 * theta.segment(xoff, xk);
                    out.col(0) = sd->r * (fitted.array() - theta[off]);
                  });
  lay.mu0_off = stack.dim();
  stack.add_block("mean_control", 1,
                  [sd, xoff = lay.x_off, xk = lay.x_dim, off = lay.mu0_off](
                      const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out) {
                    const Eigen::VectorXd fitted = sd->x0 * theta.segment(xoff, xk);
                    out.col(0) = sd->r * (fitted.array() - theta[off]);
                  });
  lay.psi_off = stack.dim();
  stack.add_block("effect", 1,
                  [m1 = lay.mu1_off, m0 = lay.mu0_off, off = lay.psi_off](
                      const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out) {
                    out.col(0).setConstant(theta[m1] - theta[m0] - theta[off]);
                  });

  mest::SolveInfo info;
  Eigen::VectorXd theta = detail::solve_stack(stack, opt, &info);

  // The tail parameters are explicit functionals of the fitted outcome
  // model; recompute them exactly so downstream identities hold to rounding.
  {
    const Eigen::VectorXd f1 = sd->x1 * theta.segment(lay.x_off, lay.x_dim);
    const Eigen::VectorXd f0 = sd->x0 * theta.segment(lay.x_off, lay.x_dim);
    const double n1 = sd->r.sum();
    theta[lay.mu1_off] = (sd->r * f1.array()).sum() / n1;
    theta[lay.mu0_off] = (sd->r * f0.array()).sum() / n1;
    theta[lay.psi_off] = theta[lay.mu1_off] - theta[lay.mu0_off];
  }
  const auto sw = mest::sandwich_variance(stack, theta);

  EstimateResult res;
  res.estimator = aipw_variant_name(variant);
  res.psi = theta[lay.psi_off];
  res.variance = sw.covariance(lay.psi_off, lay.psi_off);
  res.ci_lower = res.psi - kWald95 * res.se();
  res.ci_upper = res.psi + kWald95 * res.se();
  res.diagnostics.iterations = info.iterations;
  res.diagnostics.residual = info.residual;
  res.diagnostics.n_target = static_cast<Eigen::Index>(sd->r.sum());
  res.diagnostics.n_external = static_cast<Eigen::Index>((1.0 - sd->r).sum());
  res.diagnostics.regions = std::move(regions);
  detail::fill_weight_diagnostics(res.diagnostics, *sd, lay, theta);
  return res;
}

// ---------------------------------------------------------------------------
// Synthesis estimators: statistical model over the positive region plus an
// externally parameterised shift model over the nonpositive range
// ---------------------------------------------------------------------------

/// Everything needed to evaluate the synthesis prediction average for
/// target-population units without refitting: realised effect-model and
/// shift-model rows, the link, and per-row region codes.
struct SynthesisPredictor {
  Eigen::MatrixXd stat1, stat0;  // effect-model rows with action set to 1 / 0
  Eigen::MatrixXd star1, star0;  // shift-model rows with action set to 1 / 0
  Eigen::ArrayXd stat_mask;      // 1, or the positive-region indicator
  Eigen::ArrayXd region_code;    // 0 positive, 1 below, 2 above
  LinkFunction link;
  bool difference_scale = false;  // CACE: one prediction on the effect scale

  Eigen::Index n_target() const { return stat1.rows(); }

  double unit_effect(Eigen::Index i, const Eigen::VectorXd& stat,
                     const Eigen::VectorXd& lambda) const {
    if (difference_scale) {
      return stat_mask[i] * stat1.row(i).dot(stat) + star1.row(i).dot(lambda);
    }
    const double f1 =
        apply_link(link, stat_mask[i] * stat1.row(i).dot(stat) + star1.row(i).dot(lambda));
    const double f0 =
        apply_link(link, stat_mask[i] * stat0.row(i).dot(stat) + star0.row(i).dot(lambda));
    return f1 - f0;
  }

  double mean_effect(const Eigen::VectorXd& stat, const Eigen::VectorXd& lambda) const {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n_target(); ++i) sum += unit_effect(i, stat, lambda);
    return sum / static_cast<double>(n_target());
  }

  double mean_effect_resampled(const Eigen::VectorXd& stat, const Eigen::VectorXd& lambda,
                               const std::vector<std::int64_t>& rows) const {
    double sum = 0.0;
    for (const auto i : rows) sum += unit_effect(static_cast<Eigen::Index>(i), stat, lambda);
    return sum / static_cast<double>(rows.size());
  }

  /// Region-specific average effects and shares; the probability-weighted sum
  /// of the region averages reproduces the overall estimate.
  std::vector<RegionSummary> region_decomposition(const Eigen::VectorXd& stat,
                                                  const Eigen::VectorXd& lambda) const {
    const char* labels[3] = {"positive", "below", "above"};
    double sums[3] = {0, 0, 0};
    Eigen::Index counts[3] = {0, 0, 0};
    for (Eigen::Index i = 0; i < n_target(); ++i) {
      const int c = static_cast<int>(region_code[i]);
      sums[c] += unit_effect(i, stat, lambda);
      ++counts[c];
    }
    std::vector<RegionSummary> out;
    for (int c = 0; c < 3; ++c) {
      if (counts[c] == 0 && c > 0) continue;
      out.push_back({labels[c], static_cast<double>(counts[c]) / static_cast<double>(n_target()),
                     counts[c] > 0 ? sums[c] / static_cast<double>(counts[c])
                                   : std::numeric_limits<double>::quiet_NaN()});
    }
    return out;
  }
};

/// Statistical part of a synthesis fit: effect-model coefficients, their
/// sandwich covariance (nuisance uncertainty included), and the predictor.
struct SynthesisFit {
  Eigen::VectorXd stat;
  Eigen::MatrixXd stat_cov;
  SynthesisPredictor predictor;
  Diagnostics diagnostics;
};

namespace detail {

/// Shift-model columns must vanish inside the positive region, otherwise the
/// two model components are not separated and the decomposition breaks.
inline void check_star_vanishes(const Eigen::MatrixXd& star, const Eigen::ArrayXd& vstar,
                                const DesignSpec& spec, const char* which) {
  for (Eigen::Index i = 0; i < star.rows(); ++i) {
    if (vstar[i] != 0.0) continue;
    for (Eigen::Index j = 0; j < star.cols(); ++j) {
      if (star(i, j) != 0.0)
        throw ConfigError(std::string("shift-model column '") + spec.column_labels()[static_cast<std::size_t>(j)] +
                          "' (" + which + ") is nonzero inside the positive region at row " +
                          std::to_string(i));
    }
  }
}

struct SynthesisBuild {
  mest::EfStack stack;
  std::shared_ptr<StackData> sd;
  Layout lay;
  std::vector<RegionSummary> regions;
};

/// Shared assembly for both synthesis estimators. `lambda == nullptr` builds
/// the stack only through the effect-model block (enough for the bootstrap);
/// otherwise the target-mean and effect blocks are appended with the shift
/// coefficients held constant.
inline SynthesisBuild build_synthesis_stack(const Dataset& data, const NuisanceSpec& spec,
                                            const DesignSpec& effect_spec,
                                            const DesignSpec& star_spec, LinkFunction link,
                                            const PositiveRegion& region, bool cace,
                                            bool stat_masked_to_positive,
                                            const Eigen::VectorXd* lambda) {
  auto regions = target_region_probabilities(data, region);
  const Eigen::ArrayXd r_all = data.column("R").array();
  if ((1.0 - r_all).sum() == 0.0) throw DataError("no external units available");

  auto sd = make_stack_data(data, spec, region);
  const Dataset work = data.with_filled({"A", "Y"}, 0.0);
  if (cace) {
    sd->w1 = build_design(effect_spec, work);
    sd->w0.resize(work.n_rows(), 0);
    sd->s1 = build_design(star_spec, work);
    sd->s0.resize(work.n_rows(), 0);
  } else {
    sd->w1 = build_design(effect_spec, work, {{"A", 1.0}});
    sd->w0 = build_design(effect_spec, work, {{"A", 0.0}});
    sd->s1 = build_design(star_spec, work, {{"A", 1.0}});
    sd->s0 = build_design(star_spec, work, {{"A", 0.0}});
  }
  if (sd->w1.cols() == 0) throw ConfigError("effect model has no columns");
  check_star_vanishes(sd->s1, sd->vstar, star_spec, cace ? "effect scale" : "action 1");
  if (!cace) check_star_vanishes(sd->s0, sd->vstar, star_spec, "action 0");
  sd->stat_mask = stat_masked_to_positive ? (1.0 - sd->vstar).eval()
                                          : Eigen::ArrayXd::Ones(work.n_rows()).eval();
  sd->link = link;

  const Eigen::ArrayXd pos_target = sd->r * (1.0 - sd->vstar);
  if (pos_target.sum() == 0.0)
    throw DataError("no target-population units inside the positive region");

  SynthesisBuild out{mest::EfStack(work.n_rows()), sd, Layout{}, std::move(regions)};
  add_nuisance_blocks(out.stack, sd, out.lay);

  out.lay.stat_off = out.stack.dim();
  out.lay.stat_dim = sd->w1.cols();
  if (cace) {
    // Effect regressed on the effect-model columns over positive-region
    // target rows, response = difference of the two pseudo-outcomes.
    out.stack.add_block(
        "effect_model", out.lay.stat_dim,
        [sd, pos_target, xoff = out.lay.x_off, xk = out.lay.x_dim, off = out.lay.stat_off,
         k = out.lay.stat_dim](const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out_m) {
          const Eigen::VectorXd eta3 = theta.segment(xoff, xk);
          const Eigen::VectorXd diff = sd->x1 * eta3 - sd->x0 * eta3;
          const Eigen::VectorXd fitted = sd->w1 * theta.segment(off, k);
          for (Eigen::Index i = 0; i < sd->r.size(); ++i) {
            if (pos_target[i] == 0.0) {
              out_m.row(i).setZero();
              continue;
            }
            out_m.row(i) = pos_target[i] * (diff[i] - fitted[i]) * sd->w1.row(i);
          }
        });
  } else {
    // Each positive-region target unit contributes twice, once per
    // pseudo-outcome, to the effect-model score.
    out.stack.add_block(
        "effect_model", out.lay.stat_dim,
        [sd, pos_target, xoff = out.lay.x_off, xk = out.lay.x_dim, off = out.lay.stat_off,
         k = out.lay.stat_dim](const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out_m) {
          const Eigen::VectorXd eta3 = theta.segment(xoff, xk);
          const Eigen::VectorXd y1 = sd->x1 * eta3;
          const Eigen::VectorXd y0 = sd->x0 * eta3;
          const Eigen::VectorXd alpha = theta.segment(off, k);
          const Eigen::VectorXd fit1 = sd->w1 * alpha;
          const Eigen::VectorXd fit0 = sd->w0 * alpha;
          for (Eigen::Index i = 0; i < sd->r.size(); ++i) {
            if (pos_target[i] == 0.0) {
              out_m.row(i).setZero();
              continue;
            }
            out_m.row(i) = pos_target[i] * ((y1[i] - fit1[i]) * sd->w1.row(i) +
                                            (y0[i] - fit0[i]) * sd->w0.row(i));
          }
        });
  }

  if (lambda != nullptr) {
    if (lambda->size() != sd->s1.cols())
      throw ConfigError("shift coefficient vector length does not match the shift design");
    const Eigen::VectorXd lam = *lambda;
    if (cace) {
      out.lay.psi_off = out.stack.dim();
      out.stack.add_block(
          "synthesis_effect", 1,
          [sd, lam, soff = out.lay.stat_off, sk = out.lay.stat_dim, off = out.lay.psi_off](
              const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out_m) {
            const Eigen::VectorXd stat_part = sd->w1 * theta.segment(soff, sk);
            const Eigen::VectorXd shift_part = sd->s1 * lam;
            out_m.col(0) =
                sd->r * (sd->stat_mask * stat_part.array() + shift_part.array() - theta[off]);
          });
    } else {
      out.lay.mu1_off = out.stack.dim();
      out.stack.add_block(
          "mean_treated", 1,
          [sd, lam, soff = out.lay.stat_off, sk = out.lay.stat_dim, off = out.lay.mu1_off](
              const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out_m) {
            const Eigen::VectorXd eta = sd->w1 * theta.segment(soff, sk);
            const Eigen::VectorXd shift = sd->s1 * lam;
            for (Eigen::Index i = 0; i < sd->r.size(); ++i)
              out_m(i, 0) =
                  sd->r[i] *
                  (apply_link(sd->link, sd->stat_mask[i] * eta[i] + shift[i]) - theta[off]);
          });
      out.lay.mu0_off = out.stack.dim();
      out.stack.add_block(
          "mean_control", 1,
          [sd, lam, soff = out.lay.stat_off, sk = out.lay.stat_dim, off = out.lay.mu0_off](
              const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out_m) {
            const Eigen::VectorXd eta = sd->w0 * theta.segment(soff, sk);
            const Eigen::VectorXd shift = sd->s0 * lam;
            for (Eigen::Index i = 0; i < sd->r.size(); ++i)
              out_m(i, 0) =
                  sd->r[i] *
                  (apply_link(sd->link, sd->stat_mask[i] * eta[i] + shift[i]) - theta[off]);
          });
      out.lay.psi_off = out.stack.dim();
      out.stack.add_block("synthesis_effect", 1,
                          [m1 = out.lay.mu1_off, m0 = out.lay.mu0_off, off = out.lay.psi_off](
                              const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out_m) {
                            out_m.col(0).setConstant(theta[m1] - theta[m0] - theta[off]);
                          });
    }
  }
  return out;
}

inline SynthesisPredictor extract_predictor(const StackData& sd, bool cace) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < sd.r.size(); ++i)
    if (sd.r[i] == 1.0) rows.push_back(i);
  const auto m = static_cast<Eigen::Index>(rows.size());

  SynthesisPredictor p;
  p.difference_scale = cace;
  p.link = sd.link;
  p.stat1.resize(m, sd.w1.cols());
  p.stat0.resize(m, sd.w0.cols());
  p.star1.resize(m, sd.s1.cols());
  p.star0.resize(m, sd.s0.cols());
  p.stat_mask.resize(m);
  p.region_code.resize(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Eigen::Index i = rows[static_cast<std::size_t>(k)];
    p.stat1.row(k) = sd.w1.row(i);
    if (sd.w0.cols() > 0) p.stat0.row(k) = sd.w0.row(i);
    p.star1.row(k) = sd.s1.row(i);
    if (sd.s0.cols() > 0) p.star0.row(k) = sd.s0.row(i);
    p.stat_mask[k] = sd.stat_mask[i];
    p.region_code[k] = sd.vstar[i];  // refined to below/above by fill_region_codes
  }
  return p;
}

inline void fill_region_codes(SynthesisPredictor& p, const Dataset& data,
                              const PositiveRegion& region) {
  const Eigen::VectorXd& v = data.column("V");
  const Eigen::VectorXd& r = data.column("R");
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (r[i] != 1.0) continue;
    p.region_code[k++] = static_cast<double>(region.region_code(v[i]));
  }
}

inline SynthesisFit finish_synthesis_fit(SynthesisBuild& built, const Dataset& data,
                                         const PositiveRegion& region, bool cace,
                                         const EstimatorOptions& opt) {
  mest::SolveInfo info;
  const Eigen::VectorXd theta = solve_stack(built.stack, opt, &info);
  const auto sw = mest::sandwich_variance(built.stack, theta);

  SynthesisFit fit;
  fit.stat = theta.segment(built.lay.stat_off, built.lay.stat_dim);
  fit.stat_cov =
      sw.covariance.block(built.lay.stat_off, built.lay.stat_off, built.lay.stat_dim,
                          built.lay.stat_dim);
  fit.predictor = extract_predictor(*built.sd, cace);
  fill_region_codes(fit.predictor, data, region);
  fit.diagnostics.iterations = info.iterations;
  fit.diagnostics.residual = info.residual;
  fit.diagnostics.n_target = fit.predictor.n_target();
  fit.diagnostics.n_external = static_cast<Eigen::Index>((1.0 - built.sd->r).sum());
  fit.diagnostics.regions = built.regions;
  fill_weight_diagnostics(fit.diagnostics, *built.sd, built.lay, theta);
  return fit;
}

}  // namespace detail

/// Fits the statistical part of the synthesis MSM estimator (nuisance models
/// plus the effect model on stacked pseudo-outcomes). Shift coefficients do
/// not enter; combine the returned pieces with a shift draw or a point value.
inline SynthesisFit fit_synthesis_msm(const Dataset& data, const NuisanceSpec& spec,
                                      const DesignSpec& msm_spec, const DesignSpec& star_spec,
                                      LinkFunction link, const PositiveRegion& region,
                                      const EstimatorOptions& opt = {}) {
  auto built = detail::build_synthesis_stack(data, spec, msm_spec, star_spec, link, region,
                                             /*cace=*/false, /*stat_masked=*/false, nullptr);
  return detail::finish_synthesis_fit(built, data, region, /*cace=*/false, opt);
}

/// Fits the statistical part of the synthesis CACE estimator: the difference
/// of pseudo-outcomes regressed on the effect-model columns over
/// positive-region target rows.
inline SynthesisFit fit_synthesis_cace(const Dataset& data, const NuisanceSpec& spec,
                                       const DesignSpec& cace_spec, const DesignSpec& star_spec,
                                       const PositiveRegion& region,
                                       bool statistical_masked_to_positive = false,
                                       const EstimatorOptions& opt = {}) {
  auto built = detail::build_synthesis_stack(data, spec, cace_spec, star_spec, LinkFunction{},
                                             region, /*cace=*/true,
                                             statistical_masked_to_positive, nullptr);
  return detail::finish_synthesis_fit(built, data, region, /*cace=*/true, opt);
}

namespace detail {

inline EstimateResult synthesis_point_estimate(const Dataset& data, const NuisanceSpec& spec,
                                               const DesignSpec& effect_spec,
                                               const MathModelSpec& math, LinkFunction link,
                                               const PositiveRegion& region, bool cace,
                                               bool stat_masked, const std::string& label,
                                               const EstimatorOptions& opt) {
  math.validate();
  const Eigen::VectorXd lambda = math.point_values();
  auto built = build_synthesis_stack(data, spec, effect_spec, math.star_spec, link, region, cace,
                                     stat_masked, &lambda);
  mest::SolveInfo info;
  Eigen::VectorXd theta = solve_stack(built.stack, opt, &info);

  // Exact tail refresh: the target means are explicit functionals of the
  // fitted coefficients, so the decomposition identity holds to rounding.
  SynthesisPredictor predictor = extract_predictor(*built.sd, cace);
  fill_region_codes(predictor, data, region);
  const Eigen::VectorXd stat = theta.segment(built.lay.stat_off, built.lay.stat_dim);
  if (cace) {
    theta[built.lay.psi_off] = predictor.mean_effect(stat, lambda);
  } else {
    double sum1 = 0.0, sum0 = 0.0;
    for (Eigen::Index i = 0; i < predictor.n_target(); ++i) {
      sum1 += apply_link(link, predictor.stat_mask[i] * predictor.stat1.row(i).dot(stat) +
                                   predictor.star1.row(i).dot(lambda));
      sum0 += apply_link(link, predictor.stat_mask[i] * predictor.stat0.row(i).dot(stat) +
                                   predictor.star0.row(i).dot(lambda));
    }
    theta[built.lay.mu1_off] = sum1 / static_cast<double>(predictor.n_target());
    theta[built.lay.mu0_off] = sum0 / static_cast<double>(predictor.n_target());
    theta[built.lay.psi_off] = theta[built.lay.mu1_off] - theta[built.lay.mu0_off];
  }

  const auto sw = mest::sandwich_variance(built.stack, theta);

  EstimateResult res;
  res.estimator = label;
  res.psi = theta[built.lay.psi_off];
  res.variance = sw.covariance(built.lay.psi_off, built.lay.psi_off);
  res.ci_lower = res.psi - kWald95 * res.se();
  res.ci_upper = res.psi + kWald95 * res.se();
  res.diagnostics.iterations = info.iterations;
  res.diagnostics.residual = info.residual;
  res.diagnostics.n_target = predictor.n_target();
  res.diagnostics.n_external = static_cast<Eigen::Index>((1.0 - built.sd->r).sum());
  res.diagnostics.regions = predictor.region_decomposition(stat, lambda);
  fill_weight_diagnostics(res.diagnostics, *built.sd, built.lay, theta);
  return res;
}

}  // namespace detail

/// Synthesis MSM estimate with the shift coefficients fixed at point values.
/// Sandwich variance over the full stack gives a Wald interval; distribution
/// handling (bootstrap) and bound sets live in the inference layer.
inline EstimateResult estimate_synthesis_msm(const Dataset& data, const NuisanceSpec& spec,
                                             const DesignSpec& msm_spec,
                                             const MathModelSpec& math, LinkFunction link,
                                             const PositiveRegion& region,
                                             const EstimatorOptions& opt = {}) {
  return detail::synthesis_point_estimate(data, spec, msm_spec, math, link, region,
                                          /*cace=*/false, /*stat_masked=*/false, "synthesis_msm",
                                          opt);
}

/// Synthesis CACE estimate with the shift coefficients fixed at point values.
/// With statistical_masked_to_positive the statistical prediction applies
/// only inside the positive region and the shift model stands in wholesale
/// outside it (the three-part decomposition form); by default the shift adds
/// to the extrapolated statistical prediction.
inline EstimateResult estimate_synthesis_cace(const Dataset& data, const NuisanceSpec& spec,
                                              const DesignSpec& cace_spec,
                                              const MathModelSpec& math,
                                              const PositiveRegion& region,
                                              bool statistical_masked_to_positive = false,
                                              const EstimatorOptions& opt = {}) {
  return detail::synthesis_point_estimate(data, spec, cace_spec, math, LinkFunction{}, region,
                                          /*cace=*/true, statistical_masked_to_positive,
                                          "synthesis_cace", opt);
}

/// Pure statistical extrapolation through the MSM: a synthesis fit whose
/// shift model is empty.
inline EstimateResult estimate_msm_extrapolation(const Dataset& data, const NuisanceSpec& spec,
                                                 const DesignSpec& msm_spec, LinkFunction link,
                                                 const PositiveRegion& region,
                                                 const EstimatorOptions& opt = {}) {
  EstimateResult res = detail::synthesis_point_estimate(
      data, spec, msm_spec, MathModelSpec::none(), link, region, /*cace=*/false,
      /*stat_masked=*/false, "msm_extrapolation", opt);
  return res;
}

/// Pure statistical extrapolation through the CACE model.
inline EstimateResult estimate_cace_extrapolation(const Dataset& data, const NuisanceSpec& spec,
                                                  const DesignSpec& cace_spec,
                                                  const PositiveRegion& region,
                                                  const EstimatorOptions& opt = {}) {
  EstimateResult res = detail::synthesis_point_estimate(
      data, spec, cace_spec, MathModelSpec::none(), LinkFunction{}, region, /*cace=*/true,
      /*stat_masked=*/false, "cace_extrapolation", opt);
  return res;
}

// ---------------------------------------------------------------------------
// Bounds over shift-coefficient combinations
// ---------------------------------------------------------------------------

/// Evaluates `estimator_at` (a synthesis estimator closed over everything but
/// the shift coefficients) at every element of the Cartesian product of the
/// bound sets and reports the smallest and largest estimates. The outer
/// confidence limits are the Wald limits at the two extremizing combinations.
inline EstimateResult bounds_search(
    const std::function<EstimateResult(const Eigen::VectorXd&)>& estimator_at,
    const MathModelSpec& math, int workers = 1) {
  math.validate();
  if (math.lambda.empty())
    throw ConfigError("bounds mode needs at least one shift coefficient");
  for (std::size_t j = 0; j < math.lambda.size(); ++j)
    if (!math.lambda[j].is_bounds())
      throw ConfigError("bounds mode needs a bound set for every shift coefficient; coordinate " +
                        std::to_string(j) + " has a distribution instead");

  std::int64_t total = 1;
  for (const auto& d : math.lambda) total *= static_cast<std::int64_t>(d.values.size());

  auto combination = [&](std::int64_t index) {
    Eigen::VectorXd lam(static_cast<Eigen::Index>(math.lambda.size()));
    std::int64_t rem = index;
    for (std::size_t j = 0; j < math.lambda.size(); ++j) {
      const auto& vs = math.lambda[j].values;
      lam[static_cast<Eigen::Index>(j)] = vs[static_cast<std::size_t>(rem % static_cast<std::int64_t>(vs.size()))];
      rem /= static_cast<std::int64_t>(vs.size());
    }
    return lam;
  };

  std::vector<EstimateResult> results(static_cast<std::size_t>(total));
  std::vector<std::string> failures(static_cast<std::size_t>(total));
  parallel_for(total, workers, [&](std::int64_t i) {
    const Eigen::VectorXd lam = combination(i);
    try {
      results[static_cast<std::size_t>(i)] = estimator_at(lam);
    } catch (const Error& e) {
      std::string combo;
      for (Eigen::Index j = 0; j < lam.size(); ++j) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%g", lam[j]);
        combo += (j ? ", " : "") + std::string(buf);
      }
      failures[static_cast<std::size_t>(i)] = "combination (" + combo + "): " + e.what();
    }
  });
  for (const auto& f : failures)
    if (!f.empty()) throw SolverError("bounds search failed at " + f, 0.0);

  std::size_t argmin = 0, argmax = 0;
  for (std::size_t i = 1; i < results.size(); ++i) {
    if (results[i].psi < results[argmin].psi) argmin = i;
    if (results[i].psi > results[argmax].psi) argmax = i;
  }

  EstimateResult out;
  out.estimator = results[argmin].estimator;
  out.mode = EstimateMode::bounds;
  out.lo = results[argmin].psi;
  out.hi = results[argmax].psi;
  out.psi = 0.5 * (*out.lo + *out.hi);
  out.ci_lower = results[argmin].ci_lower;
  out.ci_upper = results[argmax].ci_upper;
  out.diagnostics = results[argmin].diagnostics;
  out.diagnostics.combinations.clear();
  for (std::int64_t i = 0; i < total; ++i) {
    const auto& r = results[static_cast<std::size_t>(i)];
    const Eigen::VectorXd lam = combination(i);
    ComboEstimate c;
    c.lambda.assign(lam.data(), lam.data() + lam.size());
    c.psi = r.psi;
    c.se = r.se();
    c.ci_lower = r.ci_lower;
    c.ci_upper = r.ci_upper;
    out.diagnostics.combinations.push_back(std::move(c));
  }
  return out;
}

}  // namespace transynth
