#include "layerforge/metrics.hpp"

#include <cmath>
#include <numbers>

#include "layerforge/errors.hpp"

namespace layerforge::metrics {

namespace {

struct Centroid {
  double x = 0.0, y = 0.0, weight = 0.0;
  void add(int px, int py, double w) {
    x += w * (px + 0.5);
    y += w * (py + 0.5);
    weight += w;
  }
  bool empty() const { return weight <= 0.0; }
  double cx() const { return x / weight; }
  double cy() const { return y / weight; }
};

}  // namespace

LayoutAgreement layout_agreement(const AlphaMap& alpha, const AlphaMap& mask) {
  if (alpha.height != mask.height || alpha.width != mask.width) throw DimensionError("layout_agreement: size mismatch");
  std::size_t inter = 0, uni = 0;
  Centroid ca, cm;
  for (int y = 0; y < alpha.height; ++y)
    for (int x = 0; x < alpha.width; ++x) {
      const bool a = alpha.at(y, x) >= kBinarize, m = mask.at(y, x) >= kBinarize;
      inter += a && m;
      uni += a || m;
      if (a) ca.add(x, y, 1.0);
      if (m) cm.add(x, y, 1.0);
    }
  LayoutAgreement r;
  r.iou = uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
  if (!ca.empty() && !cm.empty()) r.centroid_distance = std::hypot(ca.cx() - cm.cx(), ca.cy() - cm.cy());
  return r;
}

double occupancy_ratio(const AlphaMap& alpha) {
  if (alpha.values.empty()) return 0.0;
  std::size_t n = 0;
  for (double a : alpha.values) n += a >= kBinarize;
  return static_cast<double>(n) / static_cast<double>(alpha.values.size());
}

std::optional<double> shadow_direction(const AlphaMap& alpha, double floor) {
  Centroid body, pen;
  for (int y = 0; y < alpha.height; ++y)
    for (int x = 0; x < alpha.width; ++x) {
      const double a = alpha.at(y, x);
      if (a > kOpaque) body.add(x, y, 1.0);
      else if (a >= floor && a < kBinarize) pen.add(x, y, a);
    }
  if (body.empty() || pen.empty()) return std::nullopt;
  const double dx = pen.cx() - body.cx();
  const double dy = body.cy() - pen.cy();  // flip to y-up
  if (dx == 0.0 && dy == 0.0) return std::nullopt;
  double deg = std::atan2(dy, dx) * 180.0 / std::numbers::pi;
  if (deg < 0.0) deg += 360.0;
  return deg;
}

double angular_deviation(double a, double b) {
  double d = std::fmod(std::fabs(a - b), 360.0);
  return d > 180.0 ? 360.0 - d : d;
}

AlphaMap upsample_nearest(const AlphaMap& mask, int height, int width) {
  if (mask.height <= 0 || mask.width <= 0) throw DimensionError("upsample_nearest: empty mask");
  AlphaMap out(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out.at(y, x) = mask.at(y * mask.height / height, x * mask.width / width);
  return out;
}

}  // namespace layerforge::metrics
