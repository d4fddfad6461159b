#pragma once

// Discrete dynamic movement primitive: canonical phase, Gaussian basis
// forcing term, forward integration and its exact discrete inverse.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "cvdmp/error.hpp"

namespace cvdmp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct DmpConfig {
  double alpha = 25.0;
  double beta = 25.0 / 4.0;
  double tau = 1.0;
  double alpha_x = 4.6;
  std::size_t n_basis = 50;
  std::size_t n_steps = 100;
  double dt = 0.01;
  std::size_t dims = 2;

  /// Time covered by a rollout, (n_steps - 1) * dt.
  double duration() const { return dt * static_cast<double>(n_steps - 1); }

  void validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) throw UsageError(std::string("invalid DMP config: ") + what);
    };
    require(std::isfinite(alpha) && alpha > 0.0, "alpha must be > 0");
    require(std::isfinite(beta) && beta > 0.0, "beta must be > 0");
    require(std::isfinite(tau) && tau > 0.0, "tau must be > 0");
    require(std::isfinite(alpha_x) && alpha_x > 0.0, "alpha_x must be > 0");
    require(n_basis >= 2, "n_basis must be >= 2");
    require(n_steps >= 2, "n_steps must be >= 2");
    require(std::isfinite(dt) && dt > 0.0, "dt must be > 0");
    require(dims >= 1, "dims must be >= 1");
    // the Euler phase update must stay positive
    require(dt * alpha_x / tau < 1.0, "dt * alpha_x / tau must be < 1");
  }
};

/// Per-step forcing values, rows aligned with the canonical phase samples.
struct ForceProfile {
  Mat f;      // n_steps x dims
  Vec phase;  // n_steps

  std::size_t steps() const { return static_cast<std::size_t>(f.rows()); }
  std::size_t dims() const { return static_cast<std::size_t>(f.cols()); }
};

struct Trajectory {
  Mat points;  // n_steps x dims
  double dt = 0.01;
  std::optional<int> task_id;

  std::size_t steps() const { return static_cast<std::size_t>(points.rows()); }
  std::size_t dims() const { return static_cast<std::size_t>(points.cols()); }
  Vec front() const { return points.row(0).transpose(); }
  Vec back() const { return points.row(points.rows() - 1).transpose(); }
  Vec at(std::size_t i) const { return points.row(static_cast<Eigen::Index>(i)).transpose(); }
};

struct BasisWeights {
  Mat w;        // n_basis x dims
  Vec centers;  // strictly decreasing in (0, 1]
  Vec widths;   // > 0

  std::size_t size() const { return static_cast<std::size_t>(centers.size()); }
};

/// First-order Euler decay x <- x + dt * (-alpha_x * x / tau), starting at 1.
inline Vec phase_sequence(double alpha_x, double tau, double dt, std::size_t n) {
  Vec phase(static_cast<Eigen::Index>(n));
  double x = 1.0;
  for (std::size_t t = 0; t < n; ++t) {
    phase[static_cast<Eigen::Index>(t)] = x;
    x += dt * (-alpha_x * x / tau);
  }
  return phase;
}

inline Vec canonical_rollout(const DmpConfig& cfg) {
  cfg.validate();
  return phase_sequence(cfg.alpha_x, cfg.tau, cfg.dt, cfg.n_steps);
}

/// Zero weights with centers spread evenly in time over the rollout and
/// widths chosen so neighbouring kernels cross at half activation.
inline BasisWeights make_basis(const DmpConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<Eigen::Index>(cfg.n_basis);
  BasisWeights b;
  b.w = Mat::Zero(n, static_cast<Eigen::Index>(cfg.dims));
  b.centers.resize(n);
  b.widths.resize(n);
  const double span = cfg.duration() / cfg.tau;
  for (Eigen::Index i = 0; i < n; ++i) {
    b.centers[i] = std::exp(-cfg.alpha_x * span * static_cast<double>(i) /
                            static_cast<double>(n - 1));
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const double gap = (i + 1 < n) ? b.centers[i] - b.centers[i + 1]
                                   : b.centers[i - 1] - b.centers[i];
    b.widths[i] = 4.0 * std::log(2.0) / (gap * gap);
  }
  return b;
}

namespace detail {

inline constexpr double kBasisFloor = 1e-10;

inline void require_finite_vec(const Vec& v, const char* what) {
  if (!v.allFinite()) throw DataError(std::string(what) + " contains non-finite values");
}

}  // namespace detail

/// Normalized basis activations times phase: row t holds
/// psi_i(x_t) * x_t / sum_j psi_j(x_t). Counts samples whose activation sum
/// fell below the floor.
inline Mat basis_design(const BasisWeights& basis, const Vec& phase,
                        std::size_t* floored = nullptr) {
  const Eigen::Index steps = phase.size();
  const Eigen::Index n = basis.centers.size();
  Mat design(steps, n);
  std::size_t low = 0;
  for (Eigen::Index t = 0; t < steps; ++t) {
    const double x = phase[t];
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = x - basis.centers[i];
      design(t, i) = std::exp(-basis.widths[i] * d * d);
      sum += design(t, i);
    }
    if (sum < detail::kBasisFloor) {
      sum = detail::kBasisFloor;
      ++low;
    }
    design.row(t) *= x / sum;
  }
  if (floored) *floored = low;
  return design;
}

struct ForceEvaluation {
  ForceProfile force;
  std::size_t floored_samples = 0;  // samples where the basis sum was clamped
};

inline ForceEvaluation force_from_weights(const BasisWeights& weights, const Vec& phase,
                                          const Vec& y0, const Vec& g) {
  if (weights.w.rows() != weights.centers.size() || weights.widths.size() != weights.centers.size())
    throw DataError("basis weights, centers and widths disagree in size");
  if (y0.size() != weights.w.cols() || g.size() != weights.w.cols())
    throw DataError("start/goal dimensionality does not match basis weights");
  ForceEvaluation out;
  const Mat design = basis_design(weights, phase, &out.floored_samples);
  out.force.phase = phase;
  out.force.f = (design * weights.w) * (g - y0).asDiagonal();
  return out;
}

/// Semi-implicit Euler rollout of tau*ydd = alpha*(beta*(g - y) - yd) + f,
/// starting at rest in y0.
inline Trajectory integrate(const DmpConfig& cfg, const ForceProfile& force, const Vec& y0,
                            const Vec& g) {
  cfg.validate();
  const auto steps = static_cast<Eigen::Index>(cfg.n_steps);
  const Eigen::Index d = y0.size();
  if (force.f.rows() != steps)
    throw DataError("force profile has " + std::to_string(force.f.rows()) + " steps, expected " +
                    std::to_string(steps));
  if (force.f.cols() != d || g.size() != d)
    throw DataError("force/start/goal dimensionality mismatch");
  Trajectory traj;
  traj.dt = cfg.dt;
  traj.points.resize(steps, d);
  Vec y = y0;
  Vec v = Vec::Zero(d);
  traj.points.row(0) = y.transpose();
  for (Eigen::Index t = 0; t + 1 < steps; ++t) {
    const Vec acc =
        (cfg.alpha * (cfg.beta * (g - y) - v) + force.f.row(t).transpose()) / cfg.tau;
    v += cfg.dt * acc;
    y += cfg.dt * v;
    if (!y.allFinite() || !v.allFinite())
      throw NumericalError("integration produced a non-finite state at step " +
                           std::to_string(t + 1));
    traj.points.row(t + 1) = y.transpose();
  }
  return traj;
}

/// Vector-Jacobian product of integrate() with respect to the force: given
/// dL/dpoints, returns dL/dforce. The rollout is affine in the force, so the
/// product does not depend on the force, start or goal.
inline Mat integrate_vjp(const DmpConfig& cfg, const Mat& points_grad) {
  const Eigen::Index steps = points_grad.rows();
  const Eigen::Index d = points_grad.cols();
  Mat ybar = points_grad;
  Mat vbar = Mat::Zero(steps, d);
  Mat fbar = Mat::Zero(steps, d);
  for (Eigen::Index t = steps - 2; t >= 0; --t) {
    // y[t+1] = y[t] + dt * v[t+1]
    vbar.row(t + 1) += cfg.dt * ybar.row(t + 1);
    ybar.row(t) += ybar.row(t + 1);
    // v[t+1] = v[t] + dt * acc[t]
    const Eigen::RowVectorXd accbar = cfg.dt * vbar.row(t + 1);
    vbar.row(t) += vbar.row(t + 1) - accbar * (cfg.alpha / cfg.tau);
    ybar.row(t) -= accbar * (cfg.alpha * cfg.beta / cfg.tau);
    fbar.row(t) = accbar / cfg.tau;
  }
  return fbar;
}

/// Force that makes integrate() reproduce the trajectory, using g = last point.
/// Velocities are backward differences and accelerations central second
/// differences, which is the exact discrete inverse of the semi-implicit
/// rollout. The final row is unused by integration and repeats its neighbour.
inline ForceProfile inverse_dynamics(const DmpConfig& cfg, const Trajectory& traj) {
  cfg.validate();
  const Eigen::Index steps = traj.points.rows();
  if (steps < 3)
    throw DataError("inverse dynamics needs at least 3 points, got " + std::to_string(steps));
  if (static_cast<std::size_t>(steps) != cfg.n_steps)
    throw DataError("trajectory has " + std::to_string(steps) + " points, expected " +
                    std::to_string(cfg.n_steps));
  if (!traj.points.allFinite()) throw DataError("trajectory contains non-finite points");
  const Eigen::Index d = traj.points.cols();
  const Vec g = traj.back();
  const double dt = cfg.dt;
  ForceProfile out;
  out.phase = phase_sequence(cfg.alpha_x, cfg.tau, cfg.dt, cfg.n_steps);
  out.f.resize(steps, d);
  for (Eigen::Index t = 0; t + 1 < steps; ++t) {
    const Vec y = traj.points.row(t).transpose();
    const Vec next = traj.points.row(t + 1).transpose();
    Vec vel = Vec::Zero(d);
    Vec acc;
    if (t == 0) {
      acc = (next - y) / (dt * dt);
    } else {
      const Vec prev = traj.points.row(t - 1).transpose();
      vel = (y - prev) / dt;
      acc = (next - 2.0 * y + prev) / (dt * dt);
    }
    out.f.row(t) = (cfg.tau * acc - cfg.alpha * (cfg.beta * (g - y) - vel)).transpose();
  }
  out.f.row(steps - 1) = out.f.row(steps - 2);
  return out;
}

struct WeightFit {
  BasisWeights weights;
  Vec rms;                        // per-dimension reconstruction RMS
  std::vector<bool> degenerate;   // dims where |g - y0| was too small to fit
};

inline constexpr double kSpanEpsilon = 1e-8;
inline constexpr double kRidgeLambda = 1e-8;

/// Ridge least squares for the basis weights reproducing a force profile.
inline WeightFit fit_weights(const DmpConfig& cfg, const ForceProfile& force, const Vec& y0,
                             const Vec& g) {
  WeightFit fit;
  fit.weights = make_basis(cfg);
  const Eigen::Index d = force.f.cols();
  if (y0.size() != d || g.size() != d)
    throw DataError("start/goal dimensionality does not match force profile");
  fit.weights.w = Mat::Zero(static_cast<Eigen::Index>(cfg.n_basis), d);
  fit.rms = Vec::Zero(d);
  fit.degenerate.assign(static_cast<std::size_t>(d), false);

  const Mat design = basis_design(fit.weights, force.phase);
  Mat gram = design.transpose() * design;
  gram.diagonal().array() += kRidgeLambda;
  const Eigen::LDLT<Mat> solver(gram);
  for (Eigen::Index c = 0; c < d; ++c) {
    const double span = g[c] - y0[c];
    if (std::abs(span) < kSpanEpsilon) {
      fit.degenerate[static_cast<std::size_t>(c)] = true;
      fit.rms[c] = std::sqrt(force.f.col(c).squaredNorm() / static_cast<double>(force.f.rows()));
      continue;
    }
    const Vec target = force.f.col(c) / span;
    fit.weights.w.col(c) = solver.solve(design.transpose() * target);
    const Vec residual = design * fit.weights.w.col(c) * span - force.f.col(c);
    fit.rms[c] = std::sqrt(residual.squaredNorm() / static_cast<double>(residual.size()));
  }
  return fit;
}

}  // namespace cvdmp
