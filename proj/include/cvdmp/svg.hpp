#pragma once

// Minimal deterministic SVG writer for 2D trajectory plots.

#include <algorithm>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "cvdmp/dmp.hpp"
#include "cvdmp/error.hpp"
#include "cvdmp/io.hpp"

namespace cvdmp {

enum class MarkerKind { kStart, kGoal, kVia };

class SvgPlot {
 public:
  explicit SvgPlot(std::string title = {}, double size_px = 480.0)
      : title_(std::move(title)), size_(size_px) {}

  void add_polyline(const Mat& points, std::string color = "#1f77b4", double width = 1.5,
                    double opacity = 1.0) {
    if (points.cols() != 2) throw DataError("SVG plots need two-dimensional points");
    lines_.push_back({points, std::move(color), width, opacity});
    extend(points);
  }

  void add_marker(const Vec& p, MarkerKind kind) {
    if (p.size() != 2) throw DataError("SVG markers need two-dimensional points");
    markers_.push_back({p, kind});
    extend(p.transpose());
  }

  void add_square(const Vec& center, double half_extent, std::string color) {
    squares_.push_back({center, half_extent, std::move(color)});
    Mat corners(2, 2);
    corners << center[0] - half_extent, center[1] - half_extent, center[0] + half_extent,
        center[1] + half_extent;
    extend(corners);
  }

  std::size_t polylines() const { return lines_.size(); }

  std::string render(const ArtifactStamp* stamp = nullptr) const {
    double x0 = lo_[0], y0 = lo_[1], x1 = hi_[0], y1 = hi_[1];
    if (!(x1 >= x0)) x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
    const double span = std::max({x1 - x0, y1 - y0, 1e-9});
    const double pad = 0.06 * span;
    const double scale = (size_ - 2.0 * margin_) / (span + 2.0 * pad);
    const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
    auto px = [&](double x) { return 0.5 * size_ + (x - cx) * scale; };
    auto py = [&](double y) { return 0.5 * size_ - (y - cy) * scale; };

    std::string out = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(size_) + "\" height=\"" +
           num(size_) + "\" viewBox=\"0 0 " + num(size_) + " " + num(size_) + "\">\n";
    if (stamp) {
      out += "<!-- seed=" + std::to_string(stamp->seed) + " config_hash=" + stamp->config_hash +
             " -->\n";
      out += "<metadata>" + stamp->to_json().dump() + "</metadata>\n";
    }
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (!title_.empty())
      out += "<text x=\"" + num(0.5 * size_) + "\" y=\"18\" text-anchor=\"middle\" "
             "font-family=\"sans-serif\" font-size=\"13\">" + escape(title_) + "</text>\n";
    for (const auto& s : squares_) {
      const double w = 2.0 * s.half * scale;
      out += "<rect x=\"" + num(px(s.center[0] - s.half)) + "\" y=\"" + num(py(s.center[1] + s.half)) +
             "\" width=\"" + num(w) + "\" height=\"" + num(w) + "\" fill=\"" + s.color +
             "\" fill-opacity=\"0.6\"/>\n";
    }
    for (const auto& l : lines_) {
      out += "<polyline fill=\"none\" stroke=\"" + l.color + "\" stroke-width=\"" + num(l.width) +
             "\" stroke-opacity=\"" + num(l.opacity) + "\" points=\"";
      for (Eigen::Index i = 0; i < l.points.rows(); ++i) {
        if (i) out += ' ';
        out += num(px(l.points(i, 0))) + "," + num(py(l.points(i, 1)));
      }
      out += "\"/>\n";
    }
    for (const auto& m : markers_) {
      const double x = px(m.p[0]), y = py(m.p[1]);
      switch (m.kind) {
        case MarkerKind::kStart:
          out += "<circle cx=\"" + num(x) + "\" cy=\"" + num(y) + "\" r=\"5\" fill=\"#2ca02c\"/>\n";
          break;
        case MarkerKind::kGoal:
          out += "<rect x=\"" + num(x - 5) + "\" y=\"" + num(y - 5) +
                 "\" width=\"10\" height=\"10\" fill=\"#d62728\"/>\n";
          break;
        case MarkerKind::kVia:
          out += "<path d=\"M " + num(x - 5) + " " + num(y - 5) + " L " + num(x + 5) + " " +
                 num(y + 5) + " M " + num(x - 5) + " " + num(y + 5) + " L " + num(x + 5) + " " +
                 num(y - 5) + "\" stroke=\"#ff7f0e\" stroke-width=\"2\"/>\n";
          break;
      }
    }
    out += "</svg>\n";
    return out;
  }

 private:
  struct Line {
    Mat points;
    std::string color;
    double width;
    double opacity;
  };
  struct Marker {
    Vec p;
    MarkerKind kind;
  };
  struct Square {
    Vec center;
    double half;
    std::string color;
  };

  void extend(const Mat& pts) {
    for (Eigen::Index i = 0; i < pts.rows(); ++i)
      for (int c = 0; c < 2; ++c) {
        lo_[c] = std::min(lo_[c], pts(i, c));
        hi_[c] = std::max(hi_[c], pts(i, c));
      }
  }

  static std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
  }

  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        default: out += c;
      }
    }
    return out;
  }

  std::string title_;
  double size_;
  double margin_ = 28.0;
  std::vector<Line> lines_;
  std::vector<Marker> markers_;
  std::vector<Square> squares_;
  double lo_[2] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  double hi_[2] = {-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
};

/// Distinct stroke colours cycling through a fixed palette.
inline std::string palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return colors[i % 10];
}

}  // namespace cvdmp
