#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"

using namespace minv;

namespace {

Tensor triple_loop(const Tensor& a, const Tensor& b) {
  const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
  Tensor out({p, r});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < q; ++k) s += static_cast<long double>(a.at(i, k)) * b.at(k, j);
      out.at(i, j) = static_cast<Real>(s);
    }
  return out;
}

}  // namespace

TEST(Tensor, ConstructionValidatesExtents) {
  EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<Real>(3)), ShapeError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.at(1, 2), 1.5);
}

TEST(Tensor, MatmulIdentity) {
  Tensor i({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {3, 4, 5, 6});
  EXPECT_EQ(matmul(i, b), b);
}

TEST(Tensor, MatmulHandArithmetic) {
  Tensor a({1, 2}, {1, 2});
  Tensor b({2, 1}, {3, 4});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c[0], 11);
}

TEST(Tensor, MatmulMatchesTripleLoop) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = randn({4, 5}, rng), b = randn({5, 3}, rng);
    auto c = matmul(a, b), o = triple_loop(a, b);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], o[i], 1e-12 * std::max(1.0, std::abs(o[i])));
  }
}

TEST(Tensor, MatmulBroadcastsBatch) {
  Rng rng(4);
  auto a = randn({3, 2, 4}, rng), b = randn({1, 4, 5}, rng);
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  Tensor b2({4, 5}, std::vector<Real>(b.data().begin(), b.data().end()));
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor an({2, 4});
    for (std::size_t i = 0; i < 8; ++i) an[i] = a[n * 8 + i];
    auto o = triple_loop(an, b2);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(c[n * 10 + i], o[i], 1e-12);
  }
}

TEST(Tensor, MatmulMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({4, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,2]"), std::string::npos) << msg;
  }
}

TEST(Tensor, SoftmaxUniform) {
  auto s = softmax(Tensor({3}, {0, 0, 0}), 0);
  for (auto v : s.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Tensor, SoftmaxLargeLogitsStable) {
  auto s = softmax(Tensor({2}, {1000, 1000}), 0);
  EXPECT_EQ(s[0], 0.5);
  EXPECT_EQ(s[1], 0.5);
}

TEST(Tensor, SoftmaxMatchesExtendedPrecision) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = randn({9}, rng, 4.0);
    auto s = softmax(x, 0);
    long double z = 0;
    for (auto v : x.data()) z += std::exp(static_cast<long double>(v));
    double total = 0;
    for (std::size_t i = 0; i < 9; ++i) {
      EXPECT_NEAR(s[i], static_cast<double>(std::exp(static_cast<long double>(x[i])) / z), 1e-12);
      EXPECT_GT(s[i], 0.0);
      total += s[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-10);
  }
}

TEST(Tensor, SoftmaxAlongInnerAxisSumsToOne) {
  Rng rng(6);
  auto x = randn({3, 4, 5}, rng, 10.0);
  auto s = softmax(x, 1);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t c = 0; c < 5; ++c) {
      double t = 0;
      for (std::size_t b = 0; b < 4; ++b) t += s.at(a, b, c);
      EXPECT_NEAR(t, 1.0, 1e-10);
    }
  EXPECT_THROW(softmax(x, 3), ShapeError);
}

TEST(Tensor, BroadcastAddExpandsUnitExtents) {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({1, 3}, {10, 20, 30});
  EXPECT_EQ(add(a, b), Tensor({2, 3}, {11, 22, 33, 14, 25, 36}));
  Tensor c({3}, {1, 1, 1});
  EXPECT_EQ(add(a, c), Tensor({2, 3}, {2, 3, 4, 5, 6, 7}));
  EXPECT_THROW(add(a, Tensor({2, 2})), ShapeError);
  EXPECT_EQ(sub(a, a), Tensor({2, 3}));
  EXPECT_EQ(mul(a, b), Tensor({2, 3}, {10, 40, 90, 40, 100, 180}));
}

TEST(Tensor, ReduceToShapeSumsBroadcastAxes) {
  Tensor g({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(reduce_to_shape(g, {1, 3}), Tensor({1, 3}, {5, 7, 9}));
  EXPECT_EQ(reduce_to_shape(g, {2, 1}), Tensor({2, 1}, {6, 15}));
}

TEST(Tensor, ReshapeRoundTrip) {
  Rng rng(7);
  auto x = randn({2, 3, 4}, rng);
  EXPECT_EQ(x.reshaped({6, 4}).reshaped({2, 3, 4}), x);
  EXPECT_THROW(x.reshaped({5, 5}), ShapeError);
}

TEST(Tensor, PermuteAndInverse) {
  Rng rng(8);
  auto x = randn({2, 3, 4, 5}, rng);
  const std::vector<std::size_t> axes{2, 0, 3, 1};
  auto y = permute(x, axes);
  ASSERT_EQ(y.shape(), (Shape{4, 2, 5, 3}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t d = 0; d < 5; ++d) EXPECT_EQ(y.at(c, a, d, b), x.at(a, b, c, d));
  EXPECT_EQ(permute(y, inverse_permutation(axes)), x);
}

TEST(Tensor, MeanOverAxesKeepsDims) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(mean(x, {0}), Tensor({1, 3}, {2.5, 3.5, 4.5}));
  EXPECT_EQ(mean(x, {1}), Tensor({2, 1}, {2, 5}));
  EXPECT_EQ(mean(x, {0, 1}), Tensor({1, 1}, {3.5}));
}

TEST(Tensor, PoolAndUpsample) {
  Tensor x({2, 2, 1}, {1, 2, 3, 4});
  EXPECT_EQ(avg_pool2(x), Tensor({1, 1, 1}, {2.5}));
  auto u = upsample2(Tensor({1, 2, 1}, {7, 9}));
  EXPECT_EQ(u, Tensor({2, 4, 1}, {7, 7, 9, 9, 7, 7, 9, 9}));
  EXPECT_THROW(avg_pool2(Tensor({3, 2, 1})), ShapeError);
}

TEST(Tensor, SiluValues) {
  auto s = silu(Tensor({3}, {0, 1, -2}));
  EXPECT_EQ(s[0], 0);
  EXPECT_NEAR(s[1], 1 / (1 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(s[2], -2 / (1 + std::exp(2.0)), 1e-15);
}

TEST(Rng, SeededStreamsAreReproducible) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    (void)c;
  }
  Rng d(1), e(1);
  EXPECT_EQ(randn({5, 5}, d), randn({5, 5}, e));
  Rng f(1), h(2);
  EXPECT_FALSE(randn({5, 5}, f) == randn({5, 5}, h));
}

TEST(Rng, UniformIntInRangeAndNormalMoments) {
  Rng rng(9);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[rng.uniform_int(7)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
  double s = 0, s2 = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.02);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}
