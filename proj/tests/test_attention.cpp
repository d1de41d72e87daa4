#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace minv;
using minv::testing::random_weights;

namespace {

// out[r] = softmax(Q_r K_r^T / sqrt(C)) V_r, one spatial row at a time, with
// explicitly materialized embeddings.
Tensor per_row_oracle(const Tensor& f, const AttentionWeights& w, const Tensor* mqk = nullptr, const Tensor* mv = nullptr) {
  const std::size_t hw = f.dim(0), n = f.dim(1), c = f.dim(2);
  Tensor out(f.shape());
  auto emb = [&](const Tensor* m, std::size_t r, std::size_t j, std::size_t k) -> long double {
    if (!m) return 0;
    return m->at(m->dim(0) == 1 ? 0 : r, j, k);
  };
  for (std::size_t r = 0; r < hw; ++r) {
    std::vector<std::vector<long double>> q(n, std::vector<long double>(c)), kk = q, v = q;
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t o = 0; o < c; ++o) {
        long double sq = 0, sk = 0, sv = 0;
        for (std::size_t i = 0; i < c; ++i) {
          const long double xqk = f.at(r, j, i) + emb(mqk, r, j, i);
          const long double xv = f.at(r, j, i) + emb(mv, r, j, i);
          sq += xqk * w.wq.at(o, i);
          sk += xqk * w.wk.at(o, i);
          sv += xv * w.wv.at(o, i);
        }
        q[j][o] = sq;
        kk[j][o] = sk;
        v[j][o] = sv;
      }
    for (std::size_t j = 0; j < n; ++j) {
      std::vector<long double> a(n);
      long double mx = -1e300L, z = 0;
      for (std::size_t l = 0; l < n; ++l) {
        long double d = 0;
        for (std::size_t o = 0; o < c; ++o) d += q[j][o] * kk[l][o];
        a[l] = d / std::sqrt(static_cast<long double>(c));
        mx = std::max(mx, a[l]);
      }
      for (auto& x : a) z += (x = std::exp(x - mx));
      for (std::size_t o = 0; o < c; ++o) {
        long double s = 0;
        for (std::size_t l = 0; l < n; ++l) s += a[l] / z * v[l][o];
        out.at(r, j, o) = static_cast<Real>(s);
      }
    }
  }
  return out;
}

void expect_near(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

}  // namespace

TEST(FrameMajor, ShapeArithmetic) {
  EXPECT_EQ(to_frame_major(Tensor({1, 2, 3, 2, 2})).shape(), (Shape{4, 3, 2}));
  EXPECT_THROW(to_frame_major(Tensor({2, 3, 2, 2})), ShapeError);
  EXPECT_THROW(to_frame_major(Tensor({2, 2, 3, 2, 2})), ShapeError);
}

TEST(FrameMajor, RoundTrip) {
  Rng rng(1);
  auto x = randn({1, 3, 4, 2, 5}, rng);
  EXPECT_EQ(from_frame_major(to_frame_major(x), 2, 5), x);
}

TEST(FrameMajor, MatchesFiveLoopIndexOracle) {
  Rng rng(2);
  const std::size_t C = 3, N = 4, H = 2, W = 5;
  auto x = randn({1, C, N, H, W}, rng);
  auto f = to_frame_major(x);
  for (std::size_t b = 0; b < 1; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t w = 0; w < W; ++w) EXPECT_EQ(f.at(h * W + w, n, c), x.at(b, c, n, h, w));
}

TEST(TemporalAttention, SingleFrameIsValueProjection) {
  Rng rng(3);
  auto w = random_weights(5, rng);
  auto f = randn({3, 1, 5}, rng);
  EXPECT_EQ(temporal_attention(f, w), linear(f, w.wv));
}

TEST(TemporalAttention, ZeroQueryGivesFrameMeanOfValues) {
  Rng rng(4);
  auto w = random_weights(4, rng);
  w.wq = Tensor({4, 4});
  auto f = randn({2, 5, 4}, rng);
  auto out = temporal_attention(f, w);
  auto vbar = mean(linear(f, w.wv), {1});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.at(r, j, c), vbar.at(r, 0, c), 1e-14);
}

TEST(TemporalAttention, MatchesPerRowOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto w = random_weights(8, rng, 2.0);
    auto f = randn({4, 3, 8}, rng);
    expect_near(temporal_attention(f, w), per_row_oracle(f, w), 1e-10);
  }
}

TEST(TemporalAttention, ChannelMismatchRejected) {
  Rng rng(6);
  auto w = random_weights(4, rng);
  EXPECT_THROW(temporal_attention(randn({2, 3, 5}, rng), w), ShapeError);
  w.wk = Tensor({3, 3});
  EXPECT_THROW(temporal_attention(randn({2, 3, 4}, rng), w), ShapeError);
}

TEST(TemporalAttention, AttentionRowsSumToOne) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto w = random_weights(6, rng, 5.0);
    auto map = temporal_attention_map(randn({3, 7, 6}, rng, 3.0), w);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t j = 0; j < 7; ++j) {
        double s = 0;
        for (std::size_t l = 0; l < 7; ++l) s += map.at(r, j, l);
        EXPECT_NEAR(s, 1.0, 1e-10);
      }
  }
}

TEST(InjectedAttention, ZeroEmbeddingsAreBitwiseIdentical) {
  Rng rng(8);
  for (auto [sq, sv] : {std::pair{1, 1}, std::pair{1, 6}, std::pair{6, 1}, std::pair{6, 6}}) {
    auto w = random_weights(4, rng);
    auto f = randn({6, 3, 4}, rng);
    const Tensor mqk({static_cast<std::size_t>(sq), 3, 4}), mv({static_cast<std::size_t>(sv), 3, 4});
    EXPECT_EQ(temporal_attention_injected(f, w, mqk, mv), temporal_attention(f, w));
  }
}

TEST(InjectedAttention, UniformAttentionAlgebra) {
  Rng rng(9);
  auto w = random_weights(4, rng);
  w.wq = Tensor({4, 4});
  w.wk = Tensor({4, 4});
  auto f = randn({3, 5, 4}, rng);
  auto mv = randn({3, 5, 4}, rng);
  auto mqk = randn({1, 5, 4}, rng);
  auto out = temporal_attention_injected(f, w, mqk, mv);
  auto expect = mean(linear(add(f, mv), w.wv), {1});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.at(r, j, c), expect.at(r, 0, c), 1e-13);
  // A frame-constant shift of m_v moves every output by W_v applied to it.
  auto shift = randn({1, 1, 4}, rng);
  auto out2 = temporal_attention_injected(f, w, mqk, add(mv, shift));
  auto proj = linear(shift, w.wv);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out2.at(r, j, c) - out.at(r, j, c), proj[c], 1e-13);
}

TEST(InjectedAttention, MatchesExplicitBroadcastOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    auto w = random_weights(8, rng);
    auto f = randn({4, 3, 8}, rng);
    auto mqk = randn({1, 3, 8}, rng);
    auto mv = randn({4, 3, 8}, rng);
    expect_near(temporal_attention_injected(f, w, mqk, mv), per_row_oracle(f, w, &mqk, &mv), 1e-10);
    auto mqk2 = randn({4, 3, 8}, rng);
    auto mv1 = randn({1, 3, 8}, rng);
    expect_near(temporal_attention_injected(f, w, mqk2, mv1), per_row_oracle(f, w, &mqk2, &mv1), 1e-10);
  }
}

TEST(InjectedAttention, FrameCountMismatchRejected) {
  Rng rng(11);
  auto w = random_weights(4, rng);
  auto f = randn({2, 3, 4}, rng);
  try {
    temporal_attention_injected(f, w, Tensor({1, 4, 4}), Tensor({2, 3, 4}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("mismatched checkpoint"), std::string::npos);
  }
  EXPECT_THROW(temporal_attention_injected(f, w, Tensor({1, 3, 4}), Tensor({3, 3, 4})), ShapeError);
}

TEST(InjectedAttention, SpatialRowPermutationCommutes) {
  Rng rng(12);
  auto w = random_weights(4, rng);
  auto f = randn({5, 3, 4}, rng);
  auto mqk = randn({1, 3, 4}, rng);
  auto mv = randn({5, 3, 4}, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  auto permute_rows = [&](const Tensor& t) {
    Tensor o(t.shape());
    const std::size_t row = t.size() / t.dim(0);
    for (std::size_t r = 0; r < t.dim(0); ++r)
      for (std::size_t k = 0; k < row; ++k) o[r * row + k] = t[perm[r] * row + k];
    return o;
  };
  auto out = temporal_attention_injected(f, w, mqk, mv);
  auto outp = temporal_attention_injected(permute_rows(f), w, mqk, permute_rows(mv));
  EXPECT_EQ(outp, permute_rows(out));
}

TEST(InjectedAttention, GradientsMatchFiniteDifferences) {
  Rng rng(13);
  for (const auto& [sq, sv] : {std::pair<std::size_t, std::size_t>{1, 4}, {4, 1}, {1, 1}, {4, 4}}) {
    auto w = random_weights(8, rng);
    auto f = randn({4, 2, 8}, rng);
    auto target = randn({4, 2, 8}, rng);
    auto build = [&](Graph& g, const std::vector<Var>& v) {
      ad::AttentionVars<Real> wv{g.constant(w.wq), g.constant(w.wk), g.constant(w.wv)};
      auto out = ad::temporal_attention(g.constant(f), wv, std::optional{v[0]}, std::optional{v[1]});
      auto d = ad::sub(out, g.constant(target));
      return ad::mean_all(ad::mul(d, d));
    };
    auto r = minv::testing::check_gradients(build, {randn({sq, 2, 8}, rng, 0.5), randn({sv, 2, 8}, rng, 0.5)});
    EXPECT_LT(r.worst_rel, 1e-4);
  }
}
