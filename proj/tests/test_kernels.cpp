#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "layerforge/kernels.hpp"

namespace kernels = layerforge::kernels;
using kernels::Trans;

namespace {

std::vector<float> random_vec(std::size_t n, std::mt19937& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (float& x : v) x = u(rng);
  return v;
}

float max_diff(const std::vector<float>& a, const std::vector<float>& b) {
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Gemm, MatchesReferenceForAllTransposes) {
  std::mt19937 rng(11);
  for (int M : {1, 5, 37, 130}) {
    for (int N : {1, 7, 33, 300}) {
      for (int K : {1, 9, 64, 270}) {
        for (Trans ta : {Trans::No, Trans::Yes}) {
          for (Trans tb : {Trans::No, Trans::Yes}) {
            const int lda = ta == Trans::No ? K : M;
            const int ldb = tb == Trans::No ? N : K;
            auto a = random_vec(static_cast<std::size_t>(M) * K, rng);
            auto b = random_vec(static_cast<std::size_t>(K) * N, rng);
            auto c0 = random_vec(static_cast<std::size_t>(M) * N, rng);
            auto c1 = c0;
            kernels::gemm<float>(ta, tb, M, N, K, 0.7f, a.data(), lda, b.data(), ldb, 0.5f, c0.data(), N);
            kernels::reference::gemm<float>(ta, tb, M, N, K, 0.7f, a.data(), lda, b.data(), ldb, 0.5f, c1.data(), N);
            ASSERT_LT(max_diff(c0, c1), 1e-4f * std::max(1, K / 16)) << M << "x" << N << "x" << K;
          }
        }
      }
    }
  }
}

TEST(Gemm, BetaZeroIgnoresGarbageInOutput) {
  std::vector<float> a{1, 2, 3, 4}, b{1, 0, 0, 1};
  std::vector<float> c(4, std::numeric_limits<float>::quiet_NaN());
  kernels::gemm<float>(Trans::No, Trans::No, 2, 2, 2, 1.0f, a.data(), 2, b.data(), 2, 0.0f, c.data(), 2);
  EXPECT_EQ(c, a);
}

TEST(Gemm, DoublePrecisionInstantiation) {
  std::vector<double> a{1, 2, 3}, b{4, 5, 6};
  double c = 0.0;
  kernels::gemm<double>(Trans::No, Trans::No, 1, 1, 3, 1.0, a.data(), 3, b.data(), 1, 0.0, &c, 1);
  EXPECT_DOUBLE_EQ(c, 32.0);
}

class ConvTest : public ::testing::TestWithParam<std::tuple<int, int, int>> {};

TEST_P(ConvTest, ForwardAndBackwardMatchReference) {
  const auto [kernel, stride, pad] = GetParam();
  std::mt19937 rng(3);
  kernels::ConvGeometry g;
  g.batch = 2;
  g.in_channels = 3;
  g.height = 9;
  g.width = 7;
  g.out_channels = 5;
  g.kernel = kernel;
  g.stride = stride;
  g.pad = pad;
  const std::size_t xs = static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width;
  const std::size_t ws = static_cast<std::size_t>(g.out_channels) * g.patch();
  const std::size_t ys = static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width();
  auto x = random_vec(xs, rng), w = random_vec(ws, rng), b = random_vec(g.out_channels, rng);
  std::vector<float> y0(ys), y1(ys);
  kernels::conv2d_forward(g, x.data(), w.data(), b.data(), y0.data());
  kernels::reference::conv2d_forward(g, x.data(), w.data(), b.data(), y1.data());
  EXPECT_LT(max_diff(y0, y1), 1e-5f);

  auto dy = random_vec(ys, rng);
  std::vector<float> dx0(xs, 0.5f), dx1(xs, 0.5f), dw0(ws), dw1(ws), db0(g.out_channels), db1(g.out_channels);
  kernels::conv2d_backward(g, x.data(), w.data(), dy.data(), dx0.data(), dw0.data(), db0.data());
  kernels::reference::conv2d_backward(g, x.data(), w.data(), dy.data(), dx1.data(), dw1.data(), db1.data());
  EXPECT_LT(max_diff(dx0, dx1), 1e-5f);
  EXPECT_LT(max_diff(dw0, dw1), 1e-4f);
  EXPECT_LT(max_diff(db0, db1), 1e-4f);
}

INSTANTIATE_TEST_SUITE_P(Geometries, ConvTest,
                         ::testing::Values(std::make_tuple(3, 1, 1), std::make_tuple(3, 2, 1),
                                           std::make_tuple(1, 1, 0)));

TEST(GroupNorm, MatchesReference) {
  std::mt19937 rng(5);
  const int n = 3, c = 8, hw = 20, groups = 4;
  auto x = random_vec(static_cast<std::size_t>(n) * c * hw, rng);
  auto gamma = random_vec(c, rng), beta = random_vec(c, rng);
  std::vector<float> y0(x.size()), y1(x.size()), m0(n * groups), m1(n * groups), r0(n * groups), r1(n * groups);
  kernels::group_norm_forward(n, c, hw, groups, x.data(), gamma.data(), beta.data(), 1e-5f, y0.data(), m0.data(),
                              r0.data());
  kernels::reference::group_norm_forward(n, c, hw, groups, x.data(), gamma.data(), beta.data(), 1e-5f, y1.data(),
                                         m1.data(), r1.data());
  EXPECT_LT(max_diff(y0, y1), 1e-5f);
  auto dy = random_vec(x.size(), rng);
  std::vector<float> dx0(x.size()), dx1(x.size()), dg0(c), dg1(c), db0(c), db1(c);
  kernels::group_norm_backward(n, c, hw, groups, x.data(), gamma.data(), m0.data(), r0.data(), dy.data(), dx0.data(),
                               dg0.data(), db0.data());
  kernels::reference::group_norm_backward(n, c, hw, groups, x.data(), gamma.data(), m1.data(), r1.data(), dy.data(),
                                          dx1.data(), dg1.data(), db1.data());
  EXPECT_LT(max_diff(dx0, dx1), 1e-4f);
  EXPECT_LT(max_diff(dg0, dg1), 1e-4f);
  EXPECT_LT(max_diff(db0, db1), 1e-4f);
}

TEST(Softmax, MatchesReferenceAndSumsToOne) {
  std::mt19937 rng(9);
  auto v = random_vec(17 * 40, rng);
  for (float& x : v) x *= 20.0f;
  auto r = v;
  kernels::softmax_rows(v.data(), 17, 40);
  kernels::reference::softmax_rows(r.data(), 17, 40);
  EXPECT_LT(max_diff(v, r), 1e-6f);
  for (int i = 0; i < 17; ++i) {
    float s = 0.0f;
    for (int j = 0; j < 40; ++j) s += v[i * 40 + j];
    EXPECT_NEAR(s, 1.0f, 1e-5f);
  }
}
