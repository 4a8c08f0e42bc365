#pragma once

// Geometric proxies for layout agreement and shadow plausibility.

#include <optional>
#include <vector>

#include "layerforge/compositing.hpp"

namespace layerforge::metrics {

inline constexpr double kBinarize = 0.5;         // support threshold, inclusive
inline constexpr double kOpaque = 0.9;           // body region, exclusive
inline constexpr double kPenumbraFloor = 0.05;   // ignore alpha noise below this

struct LayoutAgreement {
  double iou = 0.0;
  std::optional<double> centroid_distance;  // pixels; empty if either support is empty
};

// Both inputs are binarized at 0.5 and must share dimensions.
LayoutAgreement layout_agreement(const AlphaMap& alpha, const AlphaMap& mask);

double occupancy_ratio(const AlphaMap& alpha);

// Direction from the alpha > 0.9 centroid to the alpha-weighted centroid of
// the penumbra (floor <= alpha < 0.5), in degrees in [0, 360), counter-
// clockwise from +x with y pointing up. Empty when either region is empty.
std::optional<double> shadow_direction(const AlphaMap& alpha, double floor = kPenumbraFloor);
inline std::optional<double> shadow_direction(const RgbaLayer& layer) { return shadow_direction(layer.alpha); }

// Absolute angular difference folded into [0, 180].
double angular_deviation(double a_deg, double b_deg);

// Nearest-neighbour resize of a mask grid to a target resolution.
AlphaMap upsample_nearest(const AlphaMap& mask, int height, int width);

}  // namespace layerforge::metrics
