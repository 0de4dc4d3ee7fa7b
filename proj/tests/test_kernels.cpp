#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "par/kernels.hpp"

using namespace par;
using namespace par::kernels;

namespace {

std::vector<float> randn(size_t n, std::uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, scale);
  std::vector<float> v(n);
  for (float& x : v) x = nd(rng);
  return v;
}

std::vector<double> matmul_ref(const std::vector<float>& x, int rows, int k, const std::vector<float>& w, int cols) {
  std::vector<double> y(static_cast<size_t>(rows) * cols, 0.0);
  for (int a = 0; a < rows; ++a)
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < cols; ++j) y[a * cols + j] += static_cast<double>(x[a * k + i]) * w[i * cols + j];
  return y;
}

struct Shape {
  int k, cols;
};

const Shape kShapes[] = {{24, 72}, {24, 24}, {7, 5}, {256, 768}, {300, 100}, {33, 64}, {1024, 40}};

}  // namespace

TEST(Matmul, CloseToDoubleReference) {
  for (Shape s : kShapes)
    for (int rows : {1, 3, 4, 9, 16}) {
      const auto x = randn(static_cast<size_t>(rows) * s.k, 1);
      const auto w = randn(static_cast<size_t>(s.k) * s.cols, 2);
      std::vector<float> y(static_cast<size_t>(rows) * s.cols);
      matmul_f32(x.data(), rows, s.k, w.data(), s.cols, y.data());
      const auto ref = matmul_ref(x, rows, s.k, w, s.cols);
      for (size_t i = 0; i < y.size(); ++i)
        ASSERT_NEAR(y[i], ref[i], 1e-5 * s.k) << "k " << s.k << " cols " << s.cols << " rows " << rows;
    }
}

TEST(Matmul, RowAloneEqualsRowInBatch) {
  for (Shape s : kShapes) {
    const int rows = 17;
    const auto x = randn(static_cast<size_t>(rows) * s.k, 3);
    const auto w = randn(static_cast<size_t>(s.k) * s.cols, 4);
    std::vector<float> batch(static_cast<size_t>(rows) * s.cols), one(s.cols);
    matmul_f32(x.data(), rows, s.k, w.data(), s.cols, batch.data());
    for (int a = 0; a < rows; ++a) {
      matmul_f32(x.data() + static_cast<size_t>(a) * s.k, 1, s.k, w.data(), s.cols, one.data());
      for (int j = 0; j < s.cols; ++j) ASSERT_EQ(one[j], batch[a * s.cols + j]) << "row " << a << " col " << j;
    }
  }
}

TEST(Matmul, PackedIsBitwiseEqual) {
  for (Shape s : kShapes) {
    const auto w = randn(static_cast<size_t>(s.k) * s.cols, 5);
    const PackedWeights p = pack_weights(w.data(), s.k, s.cols);
    EXPECT_EQ(p.k, s.k);
    EXPECT_EQ(p.cols, s.cols);
    for (int rows : {1, 2, 5, 8, 13, 16}) {
      const auto x = randn(static_cast<size_t>(rows) * s.k, 6 + rows);
      std::vector<float> a(static_cast<size_t>(rows) * s.cols), b(a.size(), -1.0f);
      matmul_f32(x.data(), rows, s.k, w.data(), s.cols, a.data());
      matmul_packed_f32(x.data(), rows, p, b.data());
      ASSERT_EQ(a, b) << "k " << s.k << " cols " << s.cols << " rows " << rows;
    }
  }
}

TEST(Matmul, PackingPadsWithZeros) {
  const std::vector<float> w{1, 2, 3, 4, 5, 6};  // 2 x 3
  const PackedWeights p = pack_weights(w.data(), 2, 3);
  ASSERT_EQ(p.data.size(), 2u * PackedWeights::kStrip);
  EXPECT_EQ(p.data[0], 1);
  EXPECT_EQ(p.data[2], 3);
  EXPECT_EQ(p.data[3], 0);
  EXPECT_EQ(p.data[PackedWeights::kStrip], 4);
  EXPECT_EQ(p.data[PackedWeights::kStrip + 2], 6);
}

namespace {

std::vector<double> probs_ref(const float* q, const float* k, size_t stride, const std::vector<std::uint8_t>& vis,
                              int hd, double scale) {
  const int n = static_cast<int>(vis.size());
  std::vector<double> p(n, 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < n; ++j) {
    if (!vis[j]) continue;
    double d = 0;
    for (int i = 0; i < hd; ++i) d += static_cast<double>(q[i]) * k[j * stride + i];
    p[j] = d * scale;
    mx = std::max(mx, p[j]);
  }
  double sum = 0;
  for (int j = 0; j < n; ++j)
    if (vis[j]) sum += p[j] = std::exp(p[j] - mx);
  for (int j = 0; j < n; ++j)
    if (vis[j]) p[j] /= sum;
  return p;
}

std::vector<std::uint8_t> random_visibility(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> v(n);
  for (auto& b : v) b = rng() % 3 != 0;
  v[0] = 1;
  return v;
}

}  // namespace

TEST(Attention, ProbsMatchReference) {
  for (int hd : {12, 16, 32, 48, 64})
    for (int n : {1, 15, 16, 17, 100}) {
      const size_t stride = hd + 8;
      const auto q = randn(hd, 10, 0.5f);
      const auto k = randn(n * stride, 11, 0.5f);
      const auto vis = random_visibility(n, n);
      const double scale = 1.0 / std::sqrt(hd);
      std::vector<float> p(n, -1.0f);
      attention_probs_f32(q.data(), k.data(), stride, vis.data(), n, hd, static_cast<float>(scale), p.data());
      const auto ref = probs_ref(q.data(), k.data(), stride, vis, hd, scale);
      double total = 0;
      for (int j = 0; j < n; ++j) {
        if (!vis[j]) {
          ASSERT_EQ(p[j], 0.0f);
        }
        ASSERT_NEAR(p[j], ref[j], 1e-6) << "hd " << hd << " n " << n << " key " << j;
        total += p[j];
      }
      EXPECT_NEAR(total, 1.0, 1e-5);
    }
}

TEST(Attention, HiddenKeysAppendedLeaveResultsUnchanged) {
  for (int hd : {12, 16, 32, 64}) {
    const int n = 37, extra = 29;
    const auto q = randn(hd, 20);
    const auto k = randn(static_cast<size_t>(n + extra) * hd, 21);
    const auto v = randn(static_cast<size_t>(n + extra) * hd, 22);
    auto vis = random_visibility(n, 23);
    std::vector<float> p(n), o(hd);
    attention_probs_f32(q.data(), k.data(), hd, vis.data(), n, hd, 0.3f, p.data());
    weighted_sum_f32(p.data(), vis.data(), n, v.data(), hd, hd, o.data());
    vis.resize(n + extra, 0);
    std::vector<float> p2(n + extra), o2(hd);
    attention_probs_f32(q.data(), k.data(), hd, vis.data(), n + extra, hd, 0.3f, p2.data());
    weighted_sum_f32(p2.data(), vis.data(), n + extra, v.data(), hd, hd, o2.data());
    for (int j = 0; j < n; ++j) ASSERT_EQ(p[j], p2[j]);
    for (int j = n; j < n + extra; ++j) ASSERT_EQ(p2[j], 0.0f);
    ASSERT_EQ(o, o2) << "hd " << hd;
  }
}

TEST(Attention, WeightedSumMatchesReference) {
  for (int hd : {12, 16, 32, 64, 80}) {
    const int n = 45;
    const auto p = randn(n, 30);
    const auto v = randn(static_cast<size_t>(n) * (hd + 3), 31);
    const auto vis = random_visibility(n, 32);
    std::vector<float> o(hd);
    weighted_sum_f32(p.data(), vis.data(), n, v.data(), hd + 3, hd, o.data());
    for (int i = 0; i < hd; ++i) {
      double r = 0;
      for (int j = 0; j < n; ++j)
        if (vis[j]) r += static_cast<double>(p[j]) * v[j * (hd + 3) + i];
      ASSERT_NEAR(o[i], r, 1e-5) << "hd " << hd << " lane " << i;
    }
  }
}

TEST(Swiglu, MatchesReference) {
  for (int n : {1, 16, 37, 1024}) {
    const auto g = randn(n, 40, 4.0f), u = randn(n, 41);
    std::vector<float> a(n);
    swiglu_f32(g.data(), u.data(), a.data(), n);
    for (int j = 0; j < n; ++j) {
      const double r = g[j] / (1.0 + std::exp(-static_cast<double>(g[j]))) * u[j];
      ASSERT_NEAR(a[j], r, 1e-6 * (1.0 + std::abs(r))) << j;
    }
  }
}
