#pragma once

namespace cqa {

// Pixel coordinates, image convention: y grows downward.
struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

struct Rect {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  Point center() const { return {x + w / 2.0, y + h / 2.0}; }
  double top() const { return y; }
  double bottom() const { return y + h; }
  double left() const { return x; }
  double right() const { return x + w; }
  bool operator==(const Rect&) const = default;
};

}  // namespace cqa
