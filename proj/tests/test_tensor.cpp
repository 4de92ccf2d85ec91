#include <gtest/gtest.h>

#include "mqvq/kernels.hpp"
#include "mqvq/ops.hpp"
#include "support.hpp"

using namespace mqvq;
using mqvq::testing::grad_error;
using mqvq::testing::random_tensor;

TEST(Tensor, ShapeMismatchOnConstruction) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_NO_THROW(Tensor({2, 3}, std::vector<float>(6)));
}

TEST(Tensor, BackwardRequiresScalar) {
  Tensor64 x({3}, 1.0, true);
  EXPECT_THROW(scale(x, 2.0).backward(), ShapeError);
}

TEST(Tensor, LeafGradientsAccumulateAcrossBackwardCalls) {
  Tensor64 x({2}, std::vector<double>{1.0, 2.0}, true);
  sum(scale(x, 3.0)).backward();
  sum(scale(x, 3.0)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  sum(x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[1], 1.0);
}

TEST(Tensor, SharedSubexpressionReceivesBothPaths) {
  // y = x*x + x  ->  dy/dx = 2x + 1
  Tensor64 x({1}, std::vector<double>{3.0}, true);
  const auto sq = mul(x, x);
  add(sq, x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Tensor, InteriorGradientsResetBetweenBackwardCalls) {
  Tensor64 x({1}, std::vector<double>{2.0}, true);
  const auto y = mul(x, x);
  scale(y, 1.0).backward();
  scale(y, 1.0).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);  // 2 * (2x), not inflated by a stale interior grad
}

TEST(Tensor, NoGradGuardSkipsRecording) {
  Tensor64 x({2}, 1.0, true);
  Tensor64 y;
  {
    NoGradGuard guard;
    y = scale(x, 2.0);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
  EXPECT_TRUE(scale(x, 2.0).requires_grad());
}

TEST(Tensor, DetachCutsTheGraph) {
  Tensor64 x({1}, std::vector<double>{2.0}, true);
  const auto y = add(mul(x, x.detach()), x);
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

TEST(Tensor, CastPreservesValues) {
  Tensor t({3}, std::vector<float>{0.5f, -1.25f, 3.0f});
  const auto d = t.cast<double>();
  EXPECT_EQ(d.shape(), t.shape());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(d[i], double(t[i]));
}

TEST(Tensor, DeepChainDoesNotOverflowTheStack) {
  Tensor64 x({1}, std::vector<double>{1.0}, true);
  auto y = x;
  for (int i = 0; i < 20000; ++i) y = scale(y, 1.0);
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

// Triple-loop oracle for the GEMM kernels.
TEST(Kernels, GemmVariantsMatchNaiveLoops) {
  Rng rng(3);
  const std::size_t m = 7, n = 5, k = 9;
  std::vector<double> a(m * k), b(k * n), at(k * m), bt(n * k);
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  std::vector<double> want(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) want[i * n + j] += a[i * k + p] * b[p * n + j];

  std::vector<double> nn(m * n, 0.0), tn(m * n, 0.0), nt(m * n, 0.0);
  kernels::gemm_nn(m, n, k, a.data(), b.data(), nn.data());
  kernels::gemm_tn(m, n, k, at.data(), b.data(), tn.data());
  kernels::gemm_nt(m, n, k, a.data(), bt.data(), nt.data());
  for (std::size_t i = 0; i < m * n; ++i) {
    EXPECT_NEAR(nn[i], want[i], 1e-12);
    EXPECT_NEAR(tn[i], want[i], 1e-12);
    EXPECT_NEAR(nt[i], want[i], 1e-12);
  }
}

TEST(Kernels, GemmAccumulatesIntoOutput) {
  std::vector<double> a{1, 2}, b{3, 4}, c{10.0};
  kernels::gemm_nn(1, 1, 2, a.data(), b.data(), c.data());
  EXPECT_DOUBLE_EQ(c[0], 21.0);
}

TEST(Gradients, ElementwiseOpsMatchFiniteDifferences) {
  Rng rng(11);
  auto x = random_tensor({4, 3}, rng);
  auto y = random_tensor({4, 3}, rng);
  const auto w = random_tensor({4, 3}, rng, 1.0, false);
  const auto dot = [&](const Tensor64& t) { return sum(mul(t, w)); };
  EXPECT_LT(grad_error(x, [&] { return dot(add(x, y)); }), 1e-7);
  EXPECT_LT(grad_error(y, [&] { return dot(sub(x, y)); }), 1e-7);
  EXPECT_LT(grad_error(x, [&] { return dot(mul(x, y)); }), 1e-7);
  EXPECT_LT(grad_error(x, [&] { return dot(silu(x)); }), 1e-7);
  EXPECT_LT(grad_error(x, [&] { return dot(sigmoid(x)); }), 1e-7);
  EXPECT_LT(grad_error(x, [&] { return dot(tanh(x)); }), 1e-7);
  EXPECT_LT(grad_error(x, [&] { return dot(gelu(x)); }), 1e-7);
  EXPECT_LT(grad_error(x, [&] { return mean(mul(x, x)); }), 1e-7);
  EXPECT_LT(grad_error(x, [&] { return mse_loss(x, y); }), 1e-7);
  EXPECT_LT(grad_error(y, [&] { return mse_loss(x, y); }), 1e-7);
}

TEST(Gradients, BroadcastOpsMatchFiniteDifferences) {
  Rng rng(12);
  auto x = random_tensor({5, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto s = random_tensor({5}, rng);
  const auto w = random_tensor({5, 3}, rng, 1.0, false);
  EXPECT_LT(grad_error(b, [&] { return sum(mul(add_bias(x, b), w)); }), 1e-7);
  EXPECT_LT(grad_error(x, [&] { return sum(mul(mul_rows(x, s), w)); }), 1e-7);
  EXPECT_LT(grad_error(s, [&] { return sum(mul(mul_rows(x, s), w)); }), 1e-7);
}

TEST(Gradients, LayoutOpsMatchFiniteDifferences) {
  Rng rng(13);
  auto x = random_tensor({4, 3}, rng);
  auto fill = random_tensor({3}, rng);
  const std::vector<int> idx{2, 0, 2, 3};
  const std::vector<int> pos{4, 1};
  EXPECT_LT(grad_error(x, [&] { return sum(mul(transpose(x), transpose(x))); }), 1e-7);
  EXPECT_LT(grad_error(x, [&] { return sum(mul(index_rows(x, idx), index_rows(x, idx))); }), 1e-7);
  auto kept = random_tensor({2, 3}, rng);
  const auto w = random_tensor({6, 3}, rng, 1.0, false);
  EXPECT_LT(grad_error(kept, [&] { return sum(mul(fill_rows(kept, pos, fill, 6), w)); }), 1e-7);
  EXPECT_LT(grad_error(fill, [&] { return sum(mul(fill_rows(kept, pos, fill, 6), w)); }), 1e-7);
}

TEST(Ops, FillRowsPlacesKeptAndFill) {
  Tensor kept({2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor fill({2}, std::vector<float>{-1, -2});
  const std::vector<int> pos{3, 0};
  const auto out = fill_rows(kept, std::span<const int>(pos), fill, 4);
  const std::vector<float> want{3, 4, -1, -2, -1, -2, 1, 2};
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(out[i], want[i]);
  const std::vector<int> dup{1, 1};
  EXPECT_THROW(fill_rows(kept, std::span<const int>(dup), fill, 4), std::invalid_argument);
}

TEST(Ops, StraightThroughForwardsQuantizedAndPassesGradient) {
  Tensor64 z({2}, std::vector<double>{0.3, -0.7}, true);
  Tensor64 q({2}, std::vector<double>{1.0, 2.0});
  const auto st = straight_through(z, q);
  EXPECT_EQ(st[0], 1.0);
  EXPECT_EQ(st[1], 2.0);
  sum(scale(st, 5.0)).backward();
  EXPECT_EQ(z.grad()[0], 5.0);
  EXPECT_EQ(z.grad()[1], 5.0);
}
