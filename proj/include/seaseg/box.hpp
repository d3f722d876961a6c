#pragma once

#include <algorithm>
#include <array>
#include <cmath>

namespace seaseg {

// Axis-aligned box in continuous pixel coordinates: [x, x+w) x [y, y+h).
struct Box {
  double x = 0;
  double y = 0;
  double w = 0;
  double h = 0;

  [[nodiscard]] double area() const { return w > 0 && h > 0 ? w * h : 0.0; }
  [[nodiscard]] double x2() const { return x + w; }
  [[nodiscard]] double y2() const { return y + h; }
  [[nodiscard]] double cx() const { return x + 0.5 * w; }
  [[nodiscard]] double cy() const { return y + 0.5 * h; }
  bool operator==(const Box&) const = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x, b.x);
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y, b.y);
  return iw > 0 && ih > 0 ? iw * ih : 0.0;
}

// Intersection over union; 0 when the union is empty.
inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Box clip_box(const Box& b, double width, double height) {
  const double x1 = std::clamp(b.x, 0.0, width);
  const double y1 = std::clamp(b.y, 0.0, height);
  const double x2 = std::clamp(b.x2(), 0.0, width);
  const double y2 = std::clamp(b.y2(), 0.0, height);
  return {x1, y1, x2 - x1, y2 - y1};
}

// Center/size regression parameterization.
using BoxDeltas = std::array<double, 4>;

inline BoxDeltas encode_deltas(const Box& proposal, const Box& target) {
  return {(target.cx() - proposal.cx()) / proposal.w, (target.cy() - proposal.cy()) / proposal.h,
          std::log(target.w / proposal.w), std::log(target.h / proposal.h)};
}

// Inverse of encode_deltas. Size deltas are clamped so exp() stays finite.
inline Box decode_deltas(const Box& proposal, const BoxDeltas& d) {
  constexpr double kMaxLogScale = 4.135;  // log(1000/16)
  const double cx = proposal.cx() + d[0] * proposal.w;
  const double cy = proposal.cy() + d[1] * proposal.h;
  const double w = proposal.w * std::exp(std::min(d[2], kMaxLogScale));
  const double h = proposal.h * std::exp(std::min(d[3], kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, w, h};
}

}  // namespace seaseg
