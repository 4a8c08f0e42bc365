#include <gtest/gtest.h>

#include "layerforge/errors.hpp"
#include "layerforge/metrics.hpp"

using namespace layerforge;
using namespace layerforge::metrics;

namespace {

AlphaMap square(int n, int x0, int y0, int side, double value = 1.0) {
  AlphaMap m(n, n);
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x) m.at(y, x) = value;
  return m;
}

}  // namespace

TEST(Layout, IdenticalAndDisjoint) {
  auto a = square(8, 2, 2, 3);
  auto same = layout_agreement(a, a);
  EXPECT_EQ(same.iou, 1.0);
  EXPECT_EQ(*same.centroid_distance, 0.0);
  auto apart = layout_agreement(a, square(8, 6, 6, 2));
  EXPECT_EQ(apart.iou, 0.0);
}

TEST(Layout, ShiftedSquareHandCount) {
  auto r = layout_agreement(square(8, 2, 2, 2), square(8, 3, 2, 2));
  EXPECT_NEAR(r.iou, 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(*r.centroid_distance, 1.0, 1e-15);
}

TEST(Layout, SymmetricAndTranslationInvariant) {
  auto a = square(16, 2, 3, 4), b = square(16, 4, 4, 5);
  auto ab = layout_agreement(a, b), ba = layout_agreement(b, a);
  EXPECT_EQ(ab.iou, ba.iou);
  EXPECT_EQ(*ab.centroid_distance, *ba.centroid_distance);
  auto moved = layout_agreement(square(16, 7, 8, 4), square(16, 9, 9, 5));
  EXPECT_EQ(moved.iou, ab.iou);
  EXPECT_NEAR(*moved.centroid_distance, *ab.centroid_distance, 1e-12);
}

TEST(Layout, EmptySupportFlagsCentroid) {
  auto r = layout_agreement(AlphaMap(8, 8), square(8, 1, 1, 2));
  EXPECT_EQ(r.iou, 0.0);
  EXPECT_FALSE(r.centroid_distance.has_value());
  EXPECT_THROW(layout_agreement(AlphaMap(8, 8), AlphaMap(4, 4)), DimensionError);
}

TEST(Layout, BinarizationIsInclusive) {
  auto a = square(4, 0, 0, 2, 0.5);
  EXPECT_EQ(layout_agreement(a, square(4, 0, 0, 2)).iou, 1.0);
}

TEST(Occupancy, Examples) {
  EXPECT_EQ(occupancy_ratio(AlphaMap(8, 8, 1.0)), 1.0);
  EXPECT_EQ(occupancy_ratio(AlphaMap(8, 8, 0.0)), 0.0);
  AlphaMap half(8, 8);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 8; ++x) half.at(y, x) = 1.0;
  EXPECT_EQ(occupancy_ratio(half), 0.5);
}

TEST(Shadow, SoutheastFixture) {
  AlphaMap m(32, 32);
  for (int y = 13; y < 19; ++y)
    for (int x = 13; x < 19; ++x) m.at(y + 3, x + 3) = 0.4;  // shadow offset right and down
  for (int y = 13; y < 19; ++y)
    for (int x = 13; x < 19; ++x) m.at(y, x) = 1.0;
  auto d = shadow_direction(m);
  ASSERT_TRUE(d.has_value());
  EXPECT_NEAR(*d, 315.0, 1.0);
}

TEST(Shadow, AllQuadrants) {
  const int dirs[4][2] = {{3, -3}, {-3, -3}, {-3, 3}, {3, 3}};
  const double expect[4] = {45.0, 135.0, 225.0, 315.0};
  for (int i = 0; i < 4; ++i) {
    AlphaMap m(32, 32);
    for (int y = 12; y < 20; ++y)
      for (int x = 12; x < 20; ++x) m.at(y + dirs[i][1], x + dirs[i][0]) = 0.3;
    for (int y = 12; y < 20; ++y)
      for (int x = 12; x < 20; ++x) m.at(y, x) = 1.0;
    EXPECT_NEAR(*shadow_direction(m), expect[i], 1e-9);
  }
}

TEST(Shadow, MissingPenumbraIsUndefined) {
  EXPECT_FALSE(shadow_direction(square(16, 4, 4, 5)).has_value());
  EXPECT_FALSE(shadow_direction(AlphaMap(16, 16)).has_value());
}

TEST(Shadow, InvariantToPenumbraScaling) {
  AlphaMap m(32, 32);
  for (int y = 10; y < 20; ++y)
    for (int x = 12; x < 22; ++x) m.at(y + 2, x - 4) = 0.4;
  for (int y = 10; y < 20; ++y)
    for (int x = 12; x < 22; ++x) m.at(y, x) = 1.0;
  auto scaled = m;
  for (double& a : scaled.values)
    if (a < 0.5) a *= 0.5;
  EXPECT_NEAR(*shadow_direction(m), *shadow_direction(scaled), 1e-12);
}

TEST(Angles, Deviation) {
  EXPECT_EQ(angular_deviation(10, 350), 20.0);
  EXPECT_EQ(angular_deviation(0, 180), 180.0);
  EXPECT_EQ(angular_deviation(45, 45), 0.0);
  EXPECT_EQ(angular_deviation(-90, 270), 0.0);
}

TEST(Upsample, NearestReplicatesCells) {
  AlphaMap m(2, 2);
  m.at(0, 1) = 1.0;
  auto u = upsample_nearest(m, 4, 4);
  EXPECT_EQ(u.at(0, 2), 1.0);
  EXPECT_EQ(u.at(1, 3), 1.0);
  EXPECT_EQ(u.at(2, 2), 0.0);
  EXPECT_EQ(u.at(1, 1), 0.0);
}
