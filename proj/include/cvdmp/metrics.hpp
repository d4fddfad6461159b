#pragma once

// Trajectory comparison: discrete Hausdorff distance and nearest-template
// digit classification.

#include <limits>
#include <map>

#include "cvdmp/dmp.hpp"
#include "cvdmp/error.hpp"

namespace cvdmp {

/// Largest distance from a point of `a` to its nearest point of `b`.
inline double directed_hausdorff(const Mat& a, const Mat& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < b.rows(); ++j)
      best = std::min(best, (a.row(i) - b.row(j)).squaredNorm());
    worst = std::max(worst, best);
  }
  return std::sqrt(worst);
}

inline double hausdorff(const Mat& a, const Mat& b) {
  if (a.rows() == 0 || b.rows() == 0 || a.cols() != b.cols())
    throw DataError("hausdorff distance needs two non-empty point sets of equal dimension");
  return std::max(directed_hausdorff(a, b), directed_hausdorff(b, a));
}

inline double hausdorff(const Trajectory& a, const Trajectory& b) {
  return hausdorff(a.points, b.points);
}

/// Per-dimension min-max map onto [0, 1]; a flat dimension maps to 0.5.
inline Mat unit_box(const Mat& points) {
  Mat out = points;
  for (Eigen::Index c = 0; c < points.cols(); ++c) {
    const double lo = points.col(c).minCoeff();
    const double hi = points.col(c).maxCoeff();
    if (hi - lo > 1e-12)
      out.col(c) = (points.col(c).array() - lo) / (hi - lo);
    else
      out.col(c).setConstant(0.5);
  }
  return out;
}

struct Classification {
  int label = 0;
  double distance = 0.0;
  std::map<int, double> distances;
};

/// Nearest template by Hausdorff distance after mapping both shapes onto the
/// unit box, so goal scaling does not change the verdict.
inline Classification classify(const Trajectory& traj, const std::map<int, Trajectory>& templates) {
  if (templates.empty()) throw UsageError("no templates to classify against");
  Classification c;
  c.distance = std::numeric_limits<double>::infinity();
  const Mat shape = unit_box(traj.points);
  for (const auto& [id, tmpl] : templates) {
    const double d = hausdorff(shape, unit_box(tmpl.points));
    c.distances[id] = d;
    if (d < c.distance) {
      c.distance = d;
      c.label = id;
    }
  }
  return c;
}

}  // namespace cvdmp
