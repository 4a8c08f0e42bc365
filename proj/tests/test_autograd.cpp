// Finite-difference checks of every autograd op. The ops are float-only, so
// steps are larger and tolerances looser than the double-precision attention
// checks.
#include <gtest/gtest.h>

#include <random>

#include "layerforge/autograd.hpp"
#include "layerforge/errors.hpp"

using namespace layerforge;
using ag::Var;

namespace {

Tensor randn(Shape s, std::mt19937_64& rng, float scale = 1.0f) {
  std::normal_distribution<float> n(0.0f, scale);
  Tensor t(std::move(s));
  for (float& v : t.values()) v = n(rng);
  return t;
}

// loss = sum(f(inputs) * r) with a fixed random projection r.
using Fn = std::function<Var(const std::vector<Var>&)>;

double project(const Var& out, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) s += static_cast<double>(out->value[i]) * r[i];
  return s;
}

void check_op(const Fn& f, std::vector<Tensor> inputs, std::mt19937_64& rng, float step = 1e-2f, double tol = 2e-2) {
  std::vector<Var> params;
  for (auto& t : inputs) params.push_back(ag::parameter(t));
  Var out = f(params);
  const Tensor r = randn(out->value.shape(), rng);
  ag::backward(ag::sum(ag::mul(out, ag::constant(r))));
  for (std::size_t k = 0; k < params.size(); ++k) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      std::vector<Var> probe;
      for (auto& t : inputs) probe.push_back(ag::constant(t));
      const float orig = inputs[k][i];
      probe[k]->value[i] = orig + step;
      const double up = project(f(probe), r);
      probe[k]->value[i] = orig - step;
      const double down = project(f(probe), r);
      const double num = (up - down) / (2.0 * step);
      const double ana = params[k]->has_grad() ? params[k]->grad[i] : 0.0;
      diff = std::max(diff, std::fabs(num - ana));
      scale = std::max(scale, std::fabs(num));
    }
    EXPECT_LT(diff / std::max(scale, 1e-6), tol) << "input " << k;
  }
}

}  // namespace

TEST(Autograd, Elementwise) {
  std::mt19937_64 rng(1);
  check_op([](auto& v) { return ag::add(v[0], v[1]); }, {randn({3, 4}, rng), randn({3, 4}, rng)}, rng);
  check_op([](auto& v) { return ag::sub(v[0], v[1]); }, {randn({3, 4}, rng), randn({3, 4}, rng)}, rng);
  check_op([](auto& v) { return ag::mul(v[0], v[1]); }, {randn({3, 4}, rng), randn({3, 4}, rng)}, rng);
  check_op([](auto& v) { return ag::scale(v[0], -1.5f); }, {randn({5}, rng)}, rng);
  check_op([](auto& v) { return ag::silu(v[0]); }, {randn({2, 7}, rng)}, rng);
}

TEST(Autograd, Linear) {
  std::mt19937_64 rng(2);
  check_op([](auto& v) { return ag::linear(v[0], v[1], v[2]); }, {randn({4, 5}, rng), randn({5, 3}, rng), randn({3}, rng)},
           rng);
  check_op([](auto& v) { return ag::linear(v[0], v[1], nullptr); }, {randn({2, 3}, rng), randn({3, 6}, rng)}, rng);
}

TEST(Autograd, ConvAndNorm) {
  std::mt19937_64 rng(3);
  check_op([](auto& v) { return ag::conv2d(v[0], v[1], v[2], 1, 1); },
           {randn({2, 3, 5, 5}, rng), randn({4, 3, 3, 3}, rng, 0.3f), randn({4}, rng)}, rng);
  check_op([](auto& v) { return ag::conv2d(v[0], v[1], v[2], 2, 1); },
           {randn({1, 2, 6, 6}, rng), randn({3, 2, 3, 3}, rng, 0.3f), randn({3}, rng)}, rng);
  check_op([](auto& v) { return ag::group_norm(v[0], v[1], v[2], 2); },
           {randn({2, 4, 3, 3}, rng), randn({4}, rng), randn({4}, rng)}, rng, 1e-2f, 3e-2);
}

TEST(Autograd, ShapeOps) {
  std::mt19937_64 rng(4);
  check_op([](auto& v) { return ag::upsample2x(v[0]); }, {randn({2, 2, 3, 3}, rng)}, rng);
  check_op([](auto& v) { return ag::concat_channels(v[0], v[1]); }, {randn({2, 1, 2, 2}, rng), randn({2, 3, 2, 2}, rng)},
           rng);
  check_op([](auto& v) { return ag::take_rows(v[0], {2, 0, 2}); }, {randn({3, 4}, rng)}, rng);
  check_op([](auto& v) { return ag::concat_rows({v[0], v[1]}); }, {randn({1, 4}, rng), randn({2, 4}, rng)}, rng);
  check_op([](auto& v) { return ag::add_channel_vector(v[0], v[1]); }, {randn({2, 3, 2, 2}, rng), randn({2, 3}, rng)}, rng);
  check_op([](auto& v) { return ag::embedding(v[0], {1, 1, 3}); }, {randn({4, 5}, rng)}, rng);
}

TEST(Autograd, WeightedSquareError) {
  std::mt19937_64 rng(5);
  const Tensor target = randn({6}, rng), weight = randn({6}, rng);
  check_op([&](auto& v) { return ag::weighted_square_error(v[0], target, weight); }, {randn({6}, rng)}, rng);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  Var x = ag::parameter(Tensor({1}, {3.0f}));
  Var y = ag::mul(x, x);                    // x^2
  Var z = ag::add(y, ag::scale(x, 2.0f));  // x^2 + 2x
  ag::backward(ag::sum(z));
  EXPECT_FLOAT_EQ(x->grad[0], 8.0f);
}

TEST(Autograd, NoGradBuildsNothing) {
  Var x = ag::parameter(Tensor({2}, {1.0f, 2.0f}));
  ag::NoGradGuard guard;
  Var y = ag::silu(x);
  EXPECT_FALSE(y->requires_grad);
  EXPECT_TRUE(y->parents.empty());
}

TEST(Autograd, ShapeErrors) {
  Var a = ag::constant(Tensor({2, 3}));
  Var b = ag::constant(Tensor({3, 2}));
  EXPECT_THROW(ag::add(a, b), DimensionError);
  EXPECT_THROW(ag::linear(a, a, nullptr), DimensionError);
  EXPECT_THROW(ag::embedding(a, {2}), ValidationError);
}
