#pragma once

#include <algorithm>
#include <cmath>

namespace ots {

// Half-open pixel rectangle [x0,x1) x [y0,y1), origin top-left.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double w() const { return x1 - x0; }
  double h() const { return y1 - y0; }
  double area() const { return std::max(0.0, w()) * std::max(0.0, h()); }
  double cx() const { return (x0 + x1) / 2; }
  double cy() const { return (y0 + y1) / 2; }

  Box clipped(double width, double height) const {
    return {std::clamp(x0, 0.0, width), std::clamp(y0, 0.0, height),
            std::clamp(x1, 0.0, width), std::clamp(y1, 0.0, height)};
  }
  bool valid() const { return x1 > x0 && y1 > y0; }
};

inline double intersection_area(const Box& a, const Box& b) {
  double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (w <= 0 || h <= 0) return 0.0;
  return w * h;
}

inline double iou(const Box& a, const Box& b) {
  double inter = intersection_area(a, b);
  double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace ots
