#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "transynth/errors.hpp"

namespace transynth::mest {

/// Fills the n-by-dim matrix of per-unit contributions of one block at theta.
/// Blocks receive the full shared parameter vector; each block owns the theta
/// segment matching its position in the stack.
using BlockEval =
    std::function<void(const Eigen::VectorXd& theta, Eigen::Ref<Eigen::MatrixXd> out)>;

/// Ordered stack of estimating-function blocks over a shared parameter
/// vector. The stack is bound to one dataset at construction: blocks capture
/// the matrices they need and evaluate row i as unit i's contribution. All
/// evaluation is const and side-effect free, so a stack can be shared across
/// threads.
class EfStack {
 public:
  explicit EfStack(Eigen::Index n_units) : n_(n_units) {
    if (n_ <= 0) throw DataError("estimating-function stack needs a nonempty dataset");
  }

  /// Appends a block owning the next `dim` parameters.
  void add_block(std::string label, Eigen::Index dim, BlockEval eval) {
    if (dim <= 0) throw ConfigError("estimating-function block '" + label + "' has dimension 0");
    offsets_.push_back(dim_);
    dims_.push_back(dim);
    labels_.push_back(std::move(label));
    evals_.push_back(std::move(eval));
    dim_ += dim;
  }

  Eigen::Index dim() const { return dim_; }
  Eigen::Index n_units() const { return n_; }
  std::size_t block_count() const { return evals_.size(); }
  Eigen::Index block_offset(std::size_t b) const { return offsets_[b]; }
  Eigen::Index block_dim(std::size_t b) const { return dims_[b]; }
  const std::string& block_label(std::size_t b) const { return labels_[b]; }

  std::vector<std::string> parameter_labels() const {
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(dim_));
    for (std::size_t b = 0; b < labels_.size(); ++b) {
      if (dims_[b] == 1) {
        out.push_back(labels_[b]);
      } else {
        for (Eigen::Index j = 0; j < dims_[b]; ++j)
          out.push_back(labels_[b] + "[" + std::to_string(j) + "]");
      }
    }
    return out;
  }

  void check_theta(const Eigen::VectorXd& theta) const {
    if (theta.size() != dim_)
      throw ConfigError("parameter vector has length " + std::to_string(theta.size()) +
                        ", stack dimension is " + std::to_string(dim_));
  }

  /// n-by-p matrix of per-unit contributions phi(O_i, theta). With
  /// check_finite, a non-finite entry raises NumericError naming the block.
  Eigen::MatrixXd contributions(const Eigen::VectorXd& theta, bool check_finite = true) const {
    check_theta(theta);
    Eigen::MatrixXd out(n_, dim_);
    for (std::size_t b = 0; b < evals_.size(); ++b) {
      auto segment = out.middleCols(offsets_[b], dims_[b]);
      evals_[b](theta, segment);
      if (check_finite && !segment.allFinite())
        throw NumericError("estimating-function block '" + labels_[b] +
                           "' produced a non-finite contribution");
    }
    return out;
  }

  /// Contributions of a single block (n-by-dims_[b]).
  Eigen::MatrixXd block_contributions(std::size_t b, const Eigen::VectorXd& theta) const {
    check_theta(theta);
    Eigen::MatrixXd out(n_, dims_[b]);
    evals_[b](theta, out);
    return out;
  }

 private:
  Eigen::Index n_ = 0;
  Eigen::Index dim_ = 0;
  std::vector<Eigen::Index> offsets_;
  std::vector<Eigen::Index> dims_;
  std::vector<std::string> labels_;
  std::vector<BlockEval> evals_;
};

namespace detail {

/// Column sums of the contribution matrix without the finite-check throw.
/// Returns false if anything non-finite appeared (line searches treat that as
/// a rejected step rather than an error).
inline bool stack_sum_nothrow(const EfStack& stack, const Eigen::VectorXd& theta,
                              Eigen::VectorXd& out) {
  const Eigen::MatrixXd contrib = stack.contributions(theta, /*check_finite=*/false);
  out = contrib.colwise().sum().transpose();
  return out.allFinite();
}

inline std::atomic<std::uint64_t>& solver_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

}  // namespace detail

/// Sum over units of phi(O_i, theta): the unscaled estimating-equation sum.
inline Eigen::VectorXd evaluate_stack(const EfStack& stack, const Eigen::VectorXd& theta) {
  return stack.contributions(theta, /*check_finite=*/true).colwise().sum().transpose();
}

/// Central finite differences of the stacked sum, step max(1e-6, 1e-6 |theta_j|).
inline Eigen::MatrixXd numerical_jacobian(const EfStack& stack, const Eigen::VectorXd& theta) {
  stack.check_theta(theta);
  if (!theta.allFinite()) throw NumericError("numerical_jacobian at a non-finite point");
  const Eigen::Index p = stack.dim();
  Eigen::MatrixXd jac(p, p);
  Eigen::VectorXd point = theta, plus(p), minus(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    const double h = std::max(1e-6, 1e-6 * std::abs(theta[j]));
    const double saved = point[j];
    point[j] = saved + h;
    const bool ok_plus = detail::stack_sum_nothrow(stack, point, plus);
    point[j] = saved - h;
    const bool ok_minus = detail::stack_sum_nothrow(stack, point, minus);
    point[j] = saved;
    if (!ok_plus || !ok_minus)
      throw NumericError("non-finite entries in numerical Jacobian at coordinate " +
                         std::to_string(j));
    jac.col(j) = (plus - minus) / (2.0 * h);
  }
  return jac;
}

struct SolveOptions {
  double tol = 1e-9;      // on the mean residual max_j |sum_j| / n
  int max_iter = 200;
  int max_halvings = 20;  // step halvings per Newton iteration
};

struct SolveInfo {
  int iterations = 0;
  double residual = std::numeric_limits<double>::quiet_NaN();
};

/// Damped Newton with a numerical Jacobian. Converges when
/// max_j |sum_i phi_j| / n < tol. A singular Jacobian gets one ridge
/// perturbation (1e-8 I); a second singularity is a hard failure, as is
/// running out of iterations or making no line-search progress.
inline Eigen::VectorXd solve_roots(const EfStack& stack, Eigen::VectorXd theta,
                                   const SolveOptions& opt = {}, SolveInfo* info = nullptr) {
  stack.check_theta(theta);
  if (!theta.allFinite()) throw ConfigError("solve_roots needs a finite starting point");
  if (!(opt.tol > 0.0)) throw ConfigError("solve_roots needs tol > 0");
  detail::solver_counter().fetch_add(1);

  const double n = static_cast<double>(stack.n_units());
  Eigen::VectorXd sum;
  if (!detail::stack_sum_nothrow(stack, theta, sum))
    throw NumericError("estimating equations are non-finite at the starting point");
  double residual = sum.cwiseAbs().maxCoeff() / n;
  bool ridge_used = false;

  for (int iter = 0; iter < opt.max_iter; ++iter) {
    if (residual < opt.tol) {
      if (info) *info = {iter, residual};
      return theta;
    }
    Eigen::MatrixXd jac = numerical_jacobian(stack, theta);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
    if (!lu.isInvertible()) {
      if (ridge_used)
        throw SolverError("singular Jacobian persists after ridge perturbation", residual);
      jac.diagonal().array() += 1e-8;
      ridge_used = true;
      lu.compute(jac);
      if (!lu.isInvertible())
        throw SolverError("singular Jacobian in estimating-equation solve", residual);
    }
    const Eigen::VectorXd direction = lu.solve(-sum);

    double step = 1.0;
    bool accepted = false;
    Eigen::VectorXd candidate, candidate_sum;
    for (int h = 0; h <= opt.max_halvings; ++h) {
      candidate = theta + step * direction;
      if (detail::stack_sum_nothrow(stack, candidate, candidate_sum)) {
        const double r = candidate_sum.cwiseAbs().maxCoeff() / n;
        if (r < residual) {
          theta = candidate;
          sum = candidate_sum;
          residual = r;
          accepted = true;
          break;
        }
      }
      step *= 0.5;
    }
    if (!accepted)
      throw SolverError("no progress after " + std::to_string(opt.max_halvings) +
                            " step halvings",
                        residual);
  }
  if (residual < opt.tol) {
    if (info) *info = {opt.max_iter, residual};
    return theta;
  }
  throw SolverError("estimating equations did not converge within " +
                        std::to_string(opt.max_iter) + " iterations",
                    residual);
}

/// Solves block-by-block in stack order, holding earlier segments fixed. For
/// the block-triangular stacks used here this reproduces the joint root; it
/// is also the warm start for solve_roots and a debugging aid.
inline Eigen::VectorXd solve_sequential(const EfStack& stack, Eigen::VectorXd theta,
                                        const SolveOptions& opt = {}) {
  stack.check_theta(theta);
  if (!theta.allFinite()) throw ConfigError("solve_sequential needs a finite starting point");
  const double n = static_cast<double>(stack.n_units());

  for (std::size_t b = 0; b < stack.block_count(); ++b) {
    const Eigen::Index off = stack.block_offset(b);
    const Eigen::Index dim = stack.block_dim(b);

    auto block_sum = [&](const Eigen::VectorXd& seg, Eigen::VectorXd& out) -> bool {
      Eigen::VectorXd full = theta;
      full.segment(off, dim) = seg;
      const Eigen::MatrixXd contrib = stack.block_contributions(b, full);
      out = contrib.colwise().sum().transpose();
      return out.allFinite();
    };

    Eigen::VectorXd seg = theta.segment(off, dim);
    Eigen::VectorXd sum;
    if (!block_sum(seg, sum))
      throw NumericError("block '" + stack.block_label(b) + "' non-finite at its start value");
    double residual = sum.cwiseAbs().maxCoeff() / n;
    bool ridge_used = false;

    for (int iter = 0; iter < opt.max_iter && residual >= opt.tol; ++iter) {
      Eigen::MatrixXd jac(dim, dim);
      Eigen::VectorXd plus(dim), minus(dim), point = seg;
      for (Eigen::Index j = 0; j < dim; ++j) {
        const double h = std::max(1e-6, 1e-6 * std::abs(seg[j]));
        const double saved = point[j];
        point[j] = saved + h;
        const bool okp = block_sum(point, plus);
        point[j] = saved - h;
        const bool okm = block_sum(point, minus);
        point[j] = saved;
        if (!okp || !okm)
          throw NumericError("non-finite block Jacobian in '" + stack.block_label(b) + "'");
        jac.col(j) = (plus - minus) / (2.0 * h);
      }
      Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
      if (!lu.isInvertible()) {
        if (ridge_used)
          throw SolverError("singular Jacobian in block '" + stack.block_label(b) + "'", residual);
        jac.diagonal().array() += 1e-8;
        ridge_used = true;
        lu.compute(jac);
        if (!lu.isInvertible())
          throw SolverError("singular Jacobian in block '" + stack.block_label(b) + "'", residual);
      }
      const Eigen::VectorXd direction = lu.solve(-sum);
      double step = 1.0;
      bool accepted = false;
      for (int h = 0; h <= opt.max_halvings; ++h) {
        Eigen::VectorXd cand = seg + step * direction;
        Eigen::VectorXd cand_sum;
        if (block_sum(cand, cand_sum)) {
          const double r = cand_sum.cwiseAbs().maxCoeff() / n;
          if (r < residual) {
            seg = std::move(cand);
            sum = std::move(cand_sum);
            residual = r;
            accepted = true;
            break;
          }
        }
        step *= 0.5;
      }
      if (!accepted)
        throw SolverError("no progress in block '" + stack.block_label(b) + "'", residual);
    }
    if (residual >= opt.tol)
      throw SolverError("block '" + stack.block_label(b) + "' did not converge", residual);
    theta.segment(off, dim) = seg;
  }
  return theta;
}

/// Number of solve_roots invocations so far. Lets callers assert that
/// plug-in procedures (the semiparametric bootstrap in particular) never
/// refit anything.
inline std::uint64_t solver_invocations() { return detail::solver_counter().load(); }

struct SandwichResult {
  Eigen::VectorXd theta_hat;
  Eigen::MatrixXd bread;       // mean of -d phi / d theta
  Eigen::MatrixXd meat;        // mean of phi phi^T
  Eigen::MatrixXd covariance;  // bread^-1 meat bread^-T / n
};

/// Empirical sandwich variance at a root of the stacked equations.
inline SandwichResult sandwich_variance(const EfStack& stack, const Eigen::VectorXd& theta_hat) {
  stack.check_theta(theta_hat);
  const double n = static_cast<double>(stack.n_units());

  const Eigen::MatrixXd contrib = stack.contributions(theta_hat, /*check_finite=*/true);
  const Eigen::VectorXd sum = contrib.colwise().sum().transpose();
  if (sum.cwiseAbs().maxCoeff() >= 1e-5 * n)
    throw ConfigError("sandwich_variance requires a root (residual " +
                      std::to_string(sum.cwiseAbs().maxCoeff() / n) + " per unit)");

  SandwichResult out;
  out.theta_hat = theta_hat;
  out.bread = -numerical_jacobian(stack, theta_hat) / n;
  out.meat = contrib.transpose() * contrib / n;

  Eigen::FullPivLU<Eigen::MatrixXd> lu(out.bread);
  if (!lu.isInvertible()) {
    const Eigen::MatrixXd kernel = lu.kernel();
    const auto labels = stack.parameter_labels();
    std::string names;
    for (Eigen::Index k = 0; k < kernel.cols(); ++k) {
      Eigen::Index worst = 0;
      kernel.col(k).cwiseAbs().maxCoeff(&worst);
      if (!names.empty()) names += ", ";
      names += labels[static_cast<std::size_t>(worst)];
    }
    throw NumericError("sandwich bread is singular; parameters not identified: " + names);
  }
  const Eigen::MatrixXd bread_inv = lu.inverse();
  Eigen::MatrixXd cov = bread_inv * out.meat * bread_inv.transpose() / n;
  cov = 0.5 * (cov + cov.transpose()).eval();
  for (Eigen::Index j = 0; j < cov.rows(); ++j)
    if (cov(j, j) < 0.0 && cov(j, j) > -1e-12) cov(j, j) = 0.0;
  out.covariance = std::move(cov);
  return out;
}

}  // namespace transynth::mest
