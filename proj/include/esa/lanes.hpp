#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "esa/tensor.hpp"

namespace esa {

struct LanePoint {
  double x = 0.0;
  int y = 0;
  friend bool operator==(const LanePoint&, const LanePoint&) = default;
};

/// Polyline lane with strictly increasing integer rows. class_id 0 means unclassed.
struct LanePoints {
  std::vector<LanePoint> points;
  int class_id = 0;

  void validate() const {
    if (points.size() < 2) throw std::invalid_argument("LanePoints: need at least 2 points");
    for (std::size_t i = 1; i < points.size(); ++i) {
      if (points[i].y <= points[i - 1].y) {
        throw std::invalid_argument("LanePoints: rows must be strictly increasing");
      }
    }
  }

  /// x at row y, or NaN when the lane has no point there.
  double x_at(int y) const {
    auto it = std::lower_bound(points.begin(), points.end(), y,
                               [](const LanePoint& p, int v) { return p.y < v; });
    return (it != points.end() && it->y == y) ? it->x : std::nan("");
  }
};

/// A lane as real-valued (x, y) vertices, as stored by dataset annotations.
using Polyline = std::vector<std::pair<double, double>>;

inline Polyline to_polyline(const LanePoints& lane) {
  Polyline p;
  p.reserve(lane.points.size());
  for (const auto& pt : lane.points) p.emplace_back(pt.x, static_cast<double>(pt.y));
  return p;
}

enum class RasterMode { classes, binary };

namespace detail {

inline void paint(Tensor<int>& label, long long y, long long x, int cls) {
  const auto h = static_cast<long long>(label.dim(0)), w = static_cast<long long>(label.dim(1));
  if (y >= 0 && y < h && x >= 0 && x < w) {
    label(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = cls;
  }
}

// x of the polyline extended linearly to row `y` from its lowest segment.
inline double bottom_intercept(const Polyline& line, double y) {
  auto sorted = line;
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.second < b.second; });
  const auto& b = sorted.back();
  if (sorted.size() < 2 || sorted[sorted.size() - 2].second == b.second) return b.first;
  const auto& a = sorted[sorted.size() - 2];
  return b.first + (y - b.second) * (b.first - a.first) / (b.second - a.second);
}

inline void draw_segment(Tensor<int>& label, std::pair<double, double> p0,
                         std::pair<double, double> p1, double thickness, int cls) {
  const auto t = static_cast<long long>(std::llround(thickness));
  const double half = (static_cast<double>(t) - 1.0) / 2.0;
  auto [x0, y0] = p0;
  auto [x1, y1] = p1;
  if (x0 == x1 && y0 == y1) {
    const auto left = static_cast<long long>(std::floor(x0 - half + 0.5));
    const auto y = static_cast<long long>(std::llround(y0));
    for (long long k = 0; k < t; ++k) paint(label, y, left + k, cls);
    return;
  }
  // Horizontal spans of exactly t pixels centred on the segment, one per row.
  if (y0 != y1) {
    const double ylo = std::min(y0, y1), yhi = std::max(y0, y1);
    for (auto y = static_cast<long long>(std::ceil(ylo)); y <= static_cast<long long>(std::floor(yhi)); ++y) {
      const double xc = x0 + (static_cast<double>(y) - y0) * (x1 - x0) / (y1 - y0);
      const auto left = static_cast<long long>(std::floor(xc - half + 0.5));
      for (long long k = 0; k < t; ++k) paint(label, y, left + k, cls);
    }
  }
  // Shallow segments also get vertical spans so they stay connected.
  if (std::abs(x1 - x0) > std::abs(y1 - y0)) {
    const double xlo = std::min(x0, x1), xhi = std::max(x0, x1);
    for (auto x = static_cast<long long>(std::ceil(xlo)); x <= static_cast<long long>(std::floor(xhi)); ++x) {
      const double yc = y0 + (static_cast<double>(x) - x0) * (y1 - y0) / (x1 - x0);
      const auto top = static_cast<long long>(std::floor(yc - half + 0.5));
      for (long long k = 0; k < t; ++k) paint(label, top + k, x, cls);
    }
  }
}

}  // namespace detail

/// Draws each polyline with the given thickness into an [H, W] class map.
/// In class mode, ids 1..n are assigned left to right by where each lane
/// meets the bottom row, and later (more rightward) lanes win overlaps.
/// Binary mode paints every lane as class 1.
inline Tensor<int> rasterize_lanes(const std::vector<Polyline>& lanes, double thickness,
                                   std::size_t height, std::size_t width,
                                   RasterMode mode = RasterMode::classes,
                                   std::size_t max_lanes = 4) {
  if (thickness < 1.0) throw std::invalid_argument("rasterize_lanes: thickness must be >= 1");
  if (mode == RasterMode::classes && lanes.size() > max_lanes) {
    throw std::invalid_argument("rasterize_lanes: " + std::to_string(lanes.size()) +
                                " lanes exceed the " + std::to_string(max_lanes) + " lane classes");
  }
  Tensor<int> label({height, width});
  std::vector<std::size_t> order(lanes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> bottom(lanes.size());
  for (std::size_t i = 0; i < lanes.size(); ++i) {
    bottom[i] = lanes[i].empty() ? 0.0
                                 : detail::bottom_intercept(lanes[i], static_cast<double>(height) - 1.0);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return bottom[a] < bottom[b]; });
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const auto& line = lanes[order[rank]];
    const int cls = mode == RasterMode::binary ? 1 : static_cast<int>(rank + 1);
    if (line.size() == 1) detail::draw_segment(label, line[0], line[0], thickness, cls);
    for (std::size_t i = 1; i < line.size(); ++i) {
      detail::draw_segment(label, line[i - 1], line[i], thickness, cls);
    }
  }
  return label;
}

}  // namespace esa
