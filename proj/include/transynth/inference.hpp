#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "transynth/errors.hpp"
#include "transynth/estimators.hpp"
#include "transynth/parallel.hpp"
#include "transynth/rng.hpp"

namespace transynth {

/// Multivariate normal sampler with the factor computed once. Uses an
/// eigendecomposition so positive semidefinite inputs (including exactly
/// singular ones) are handled; eigenvalues in [-1e-10, 0) are clipped to 0,
/// anything more negative is rejected.
class MvnSampler {
 public:
  MvnSampler(Eigen::VectorXd mean, const Eigen::MatrixXd& covariance) : mean_(std::move(mean)) {
    if (covariance.rows() != covariance.cols() || covariance.rows() != mean_.size())
      throw ConfigError("mvn: covariance shape does not match the mean");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(
        0.5 * (covariance + covariance.transpose()));
    if (eig.info() != Eigen::Success) throw NumericError("mvn: eigendecomposition failed");
    Eigen::VectorXd values = eig.eigenvalues();
    for (Eigen::Index j = 0; j < values.size(); ++j) {
      if (values[j] < -1e-10)
        throw NumericError("mvn: covariance is indefinite (eigenvalue " +
                           std::to_string(values[j]) + ")");
      if (values[j] < 0.0) values[j] = 0.0;
    }
    factor_ = eig.eigenvectors() * values.cwiseSqrt().asDiagonal();
  }

  const Eigen::VectorXd& mean() const { return mean_; }

  Eigen::VectorXd draw(RngEngine& rng) const {
    Eigen::VectorXd z(mean_.size());
    for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = normal01(rng);
    return mean_ + factor_ * z;
  }

 private:
  Eigen::VectorXd mean_;
  Eigen::MatrixXd factor_;
};

inline Eigen::VectorXd mvn_draw(const Eigen::VectorXd& mean, const Eigen::MatrixXd& covariance,
                                RngEngine& rng) {
  return MvnSampler(mean, covariance).draw(rng);
}

/// Inverse-CDF draw from the symmetric trapezoid with flat shelf on
/// center +- sd and support center +- 3 sd. Half the mass sits on the shelf.
inline double sample_trapezoid(double center, double sd, RngEngine& rng) {
  if (!(sd > 0.0)) throw ConfigError("trapezoid sampling needs sd > 0");
  const double u = uniform01(rng);
  if (u < 0.25) return center - 3.0 * sd + 4.0 * sd * std::sqrt(u);
  if (u <= 0.75) return center - sd + 4.0 * sd * (u - 0.25);
  return center + 3.0 * sd - 4.0 * sd * std::sqrt(1.0 - u);
}

/// Independent draw of every shift coefficient from its distribution.
/// Bound sets are not sampleable; enumerate them in bounds mode instead.
inline Eigen::VectorXd sample_lambda(const MathModelSpec& math, RngEngine& rng) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(math.lambda.size()));
  for (std::size_t j = 0; j < math.lambda.size(); ++j) {
    const auto& d = math.lambda[j];
    double v = 0.0;
    switch (d.kind) {
      case LambdaDist::Kind::point_mass:
        v = d.a;
        break;
      case LambdaDist::Kind::normal:
        v = d.a + d.b * normal01(rng);
        break;
      case LambdaDist::Kind::trapezoid:
        v = sample_trapezoid(d.a, d.b, rng);
        break;
      case LambdaDist::Kind::uniform:
        v = uniform_range(rng, d.a, d.b);
        break;
      case LambdaDist::Kind::bounds_set:
        throw ConfigError("shift coefficient " + std::to_string(j) +
                          " is a bound set, which cannot be sampled; use bounds mode");
    }
    out[static_cast<Eigen::Index>(j)] = v;
  }
  return out;
}

/// Linear-interpolation percentile of draws, q in [0, 1].
inline double percentile(std::vector<double> draws, double q) {
  if (draws.empty()) throw DataError("percentile of an empty sample");
  std::sort(draws.begin(), draws.end());
  return percentile_sorted(draws, q);
}

struct BootstrapConfig {
  int iterations = 10000;
  std::uint64_t seed = 0;
  bool resample_target = true;  // resample target rows with replacement
  int workers = 1;
};

struct BootstrapResult {
  std::vector<double> draws;  // in iteration order, failed iterations removed
  double point = std::numeric_limits<double>::quiet_NaN();  // median of draws
  double ci_lower = std::numeric_limits<double>::quiet_NaN();
  double ci_upper = std::numeric_limits<double>::quiet_NaN();
  int failed = 0;
};

/// Semiparametric bootstrap for a fitted synthesis estimator. Per iteration:
/// draw the statistical coefficients from a multivariate normal around the
/// fit, draw the shift coefficients from their distributions, resample the
/// target rows with replacement, and average the synthesis predictions.
/// Nothing is refit inside the loop. Iteration i uses the substream
/// (seed, i), so parallel and serial runs produce identical results.
inline BootstrapResult semiparametric_bootstrap(const SynthesisPredictor& predictor,
                                                const Eigen::VectorXd& stat,
                                                const Eigen::MatrixXd& stat_cov,
                                                const MathModelSpec& math,
                                                const BootstrapConfig& cfg) {
  if (cfg.iterations < 100)
    throw ConfigError("bootstrap needs at least 100 iterations for percentile intervals");
  math.validate();
  for (std::size_t j = 0; j < math.lambda.size(); ++j)
    if (math.lambda[j].is_bounds())
      throw ConfigError("shift coefficient " + std::to_string(j) +
                        " is a bound set, which cannot be sampled; use bounds mode");
  if (predictor.n_target() <= 0) throw DataError("bootstrap needs target-population rows");
  if (static_cast<Eigen::Index>(math.lambda.size()) != predictor.star1.cols())
    throw ConfigError("shift model does not match the predictor's shift design");

  const MvnSampler sampler(stat, stat_cov);
  const Eigen::Index m = predictor.n_target();
  std::vector<double> slots(static_cast<std::size_t>(cfg.iterations),
                            std::numeric_limits<double>::quiet_NaN());

  parallel_for(cfg.iterations, cfg.workers, [&](std::int64_t i) {
    RngEngine rng = make_stream(cfg.seed, static_cast<std::uint64_t>(i));
    const Eigen::VectorXd stat_draw = sampler.draw(rng);
    const Eigen::VectorXd lambda_draw = sample_lambda(math, rng);
    double value;
    if (cfg.resample_target) {
      std::vector<std::int64_t> rows(static_cast<std::size_t>(m));
      for (auto& row : rows) row = uniform_index(rng, m);
      value = predictor.mean_effect_resampled(stat_draw, lambda_draw, rows);
    } else {
      value = predictor.mean_effect(stat_draw, lambda_draw);
    }
    if (std::isfinite(value)) slots[static_cast<std::size_t>(i)] = value;
  });

  BootstrapResult out;
  out.draws.reserve(slots.size());
  for (const double v : slots) {
    if (std::isfinite(v))
      out.draws.push_back(v);
    else
      ++out.failed;
  }
  if (out.failed > cfg.iterations / 100)
    throw NumericError("bootstrap: " + std::to_string(out.failed) + " of " +
                       std::to_string(cfg.iterations) +
                       " iterations produced non-finite estimates (budget is 1%)");

  std::vector<double> sorted = out.draws;
  std::sort(sorted.begin(), sorted.end());
  out.point = percentile_sorted(sorted, 0.5);
  out.ci_lower = percentile_sorted(sorted, 0.025);
  out.ci_upper = percentile_sorted(sorted, 0.975);
  return out;
}

/// EstimateResult wrapper around a bootstrap run.
inline EstimateResult bootstrap_estimate(const SynthesisFit& fit, const MathModelSpec& math,
                                         const BootstrapConfig& cfg, const std::string& label) {
  const BootstrapResult b =
      semiparametric_bootstrap(fit.predictor, fit.stat, fit.stat_cov, math, cfg);
  EstimateResult res;
  res.estimator = label;
  res.mode = EstimateMode::bootstrap;
  res.psi = b.point;
  res.ci_lower = b.ci_lower;
  res.ci_upper = b.ci_upper;
  res.diagnostics = fit.diagnostics;
  return res;
}

}  // namespace transynth
