#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mqvq/quantizer.hpp"
#include "support.hpp"

using namespace mqvq;
using mqvq::testing::random_tensor;

namespace {

// Exhaustive scan: every distance materialized, first minimum wins.
std::vector<int> scan_nearest(const Tensor& z, const Tensor& e) {
  const std::size_t n = z.dim(0), d = z.dim(1), k = e.dim(0);
  std::vector<int> out;
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<double> dist(k);
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += std::pow(double(z[r * d + j]) - double(e[c * d + j]), 2);
      dist[c] = s;
    }
    out.push_back(static_cast<int>(std::min_element(dist.begin(), dist.end()) - dist.begin()));
  }
  return out;
}

}  // namespace

TEST(NearestCodes, MatchesExhaustiveScan) {
  Rng rng(1);
  Codebook<float> cb(64, 8, rng);
  for (auto& v : cb.embeddings.mutable_values()) v = float(rng.normal());
  const auto z = random_tensor<float>({1000, 8}, rng, 1.0, false);
  EXPECT_EQ(nearest_codes(z, cb.embeddings), scan_nearest(z, cb.embeddings));
}

TEST(NearestCodes, TiesResolveToSmallestIndex) {
  Tensor e({4, 2}, std::vector<float>{5, 5, 1, 0, 1, 0, 0, 1});
  Tensor z({2, 2}, std::vector<float>{1, 0, 0.5f, 0.5f});
  const auto codes = nearest_codes(z, e);
  EXPECT_EQ(codes[0], 1);  // rows 1 and 2 are identical
  EXPECT_EQ(codes[1], 1);  // equidistant from 1, 2 and 3
}

TEST(NearestCodes, RejectsWidthMismatch) {
  EXPECT_THROW(nearest_codes(Tensor({2, 3}), Tensor({4, 2})), std::invalid_argument);
}

TEST(Quantize, ForwardValuesAreCodebookRows) {
  Rng rng(2);
  Codebook<double> cb(16, 4, rng);
  const auto z = random_tensor<double>({10, 4}, rng, 0.1);
  const auto q = quantize(z, cb);
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(q.quantized[r * 4 + j], cb.embeddings[q.codes[r] * 4 + j]);
}

TEST(Quantize, StraightThroughPassesGradientToFeaturesOnly) {
  Rng rng(3);
  Codebook<double> cb(8, 3, rng);
  auto z = random_tensor<double>({5, 3}, rng, 0.1);
  const auto w = random_tensor<double>({5, 3}, rng, 1.0, false);
  const auto q = quantize(z, cb);
  sum(mul(q.quantized, w)).backward();
  for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(z.grad()[i], w[i]);
  EXPECT_FALSE(cb.embeddings.has_grad());
}

TEST(VqLoss, ValueAndGradientsFollowStopGradientSplit) {
  Rng rng(4);
  Codebook<double> cb(8, 3, rng);
  auto z = random_tensor<double>({6, 3}, rng, 0.2);
  const double beta = 0.25;
  const auto q = quantize(z, cb);
  const auto loss = vq_loss(z, q, beta);
  double sq = 0.0;
  for (std::size_t i = 0; i < 18; ++i) sq += std::pow(z[i] - q.codebook_rows[i], 2);
  EXPECT_NEAR(loss.item(), (1.0 + beta) * sq / 18.0, 1e-14);
  EXPECT_NEAR(q.commit_distance, sq / 18.0, 1e-14);

  loss.backward();
  // d/dz = beta * 2 (z - e) / n; d/de_k = sum over rows using k of 2 (e - z) / n
  std::vector<double> de(cb.embeddings.size(), 0.0);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t j = 0; j < 3; ++j) {
      const double diff = z[r * 3 + j] - q.codebook_rows[r * 3 + j];
      EXPECT_NEAR(z.grad()[r * 3 + j], beta * 2.0 * diff / 18.0, 1e-14);
      de[q.codes[r] * 3 + j] -= 2.0 * diff / 18.0;
    }
  for (std::size_t i = 0; i < de.size(); ++i) EXPECT_NEAR(cb.embeddings.grad()[i], de[i], 1e-14);
}

TEST(Codebook, InitializationBoundsAndNames) {
  Rng rng(5);
  Codebook<float> cb(32, 4, rng);
  for (float v : cb.embeddings.values()) EXPECT_LE(std::abs(v), 1.0f / 32.0f);
  ParameterList<float> p;
  cb.collect(p, "cb");
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[0].name, "cb.embeddings");
  EXPECT_EQ(p[1].name, "cb.mask_embedding");
  EXPECT_THROW(Codebook<float>(0, 4, rng), std::invalid_argument);
}

TEST(CodebookUsage, HandBuiltMultisets) {
  const std::vector<std::vector<int>> one{{7, 7, 7}};
  EXPECT_DOUBLE_EQ(codebook_usage(one, 1024), 0.09765625);
  const std::vector<std::vector<int>> half{{0, 1}, {1, 2, 3}};
  EXPECT_DOUBLE_EQ(codebook_usage(half, 8), 50.0);
  const std::vector<std::vector<int>> all{{0, 1, 2, 3}};
  EXPECT_DOUBLE_EQ(codebook_usage(all, 4), 100.0);
  const std::vector<std::vector<int>> none;
  EXPECT_DOUBLE_EQ(codebook_usage(none, 4), 0.0);
}

TEST(CodebookUsage, MatchesSetConstructionOnRandomMultisets) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng.index(200);
    std::vector<std::vector<int>> lists(1 + rng.index(5));
    std::set<int> distinct;
    for (auto& l : lists)
      for (std::size_t i = rng.index(50); i > 0; --i) {
        l.push_back(static_cast<int>(rng.index(k)));
        distinct.insert(l.back());
      }
    EXPECT_DOUBLE_EQ(codebook_usage(lists, k), 100.0 * double(distinct.size()) / double(k));
  }
}

TEST(CodebookUsage, RejectsOutOfRangeCodes) {
  const std::vector<std::vector<int>> bad{{0, 4}};
  EXPECT_THROW(codebook_usage(bad, 4), std::out_of_range);
  const std::vector<std::vector<int>> neg{{-1}};
  EXPECT_THROW(codebook_usage(neg, 4), std::out_of_range);
}

TEST(UsageTracker, IsNonDecreasing) {
  Rng rng(7);
  UsageTracker t(64);
  double last = 0.0;
  for (int i = 0; i < 50; ++i) {
    std::vector<int> codes(5);
    for (auto& c : codes) c = static_cast<int>(rng.index(64));
    t.observe(codes);
    EXPECT_GE(t.percentage(), last);
    last = t.percentage();
  }
}

namespace {

// Power iteration with deflation on the sample covariance.
std::vector<std::vector<double>> power_axes(const std::vector<std::vector<double>>& x, std::size_t dims) {
  const std::size_t n = x.size(), d = x[0].size();
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (const auto& row : x)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i][j] += row[i] * row[j] / double(n - 1);
  std::vector<std::vector<double>> axes;
  for (std::size_t c = 0; c < dims; ++c) {
    std::vector<double> v(d, 1.0);
    double lambda = 0.0;
    for (int it = 0; it < 5000; ++it) {
      std::vector<double> w(d, 0.0);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) w[i] += cov[i][j] * v[j];
      double norm = 0.0;
      for (double a : w) norm += a * a;
      norm = std::sqrt(norm);
      lambda = norm;
      for (std::size_t i = 0; i < d; ++i) v[i] = w[i] / norm;
    }
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i][j] -= lambda * v[i] * v[j];
    axes.push_back(v);
  }
  return axes;
}

}  // namespace

TEST(CodebookPca, MatchesPowerIterationOracle) {
  Rng rng(8);
  Codebook<double> cb(40, 5, rng);
  // Anisotropic cloud so the top two axes are well separated.
  const std::vector<double> spread{3.0, 1.5, 0.5, 0.2, 0.1};
  auto e = cb.embeddings.mutable_values();
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t j = 0; j < 5; ++j) e[i * 5 + j] = rng.normal() * spread[j] + 0.7;
  std::vector<std::vector<double>> x(40, std::vector<double>(5));
  for (std::size_t j = 0; j < 5; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < 40; ++i) mu += e[i * 5 + j] / 40.0;
    for (std::size_t i = 0; i < 40; ++i) x[i][j] = e[i * 5 + j] - mu;
  }
  const auto axes = power_axes(x, 2);
  const auto proj = codebook_pca(cb, 2);
  for (std::size_t c = 0; c < 2; ++c) {
    // Match up to sign, then check the sign convention separately.
    std::vector<double> p(40);
    for (std::size_t i = 0; i < 40; ++i)
      for (std::size_t j = 0; j < 5; ++j) p[i] += x[i][j] * axes[c][j];
    const double sign = (proj[0 * 2 + c] * p[0] >= 0.0) ? 1.0 : -1.0;
    for (std::size_t i = 0; i < 40; ++i) EXPECT_NEAR(proj[i * 2 + c], sign * p[i], 1e-8);
  }
}

TEST(CodebookPca, WritesCsvWithHeader) {
  Rng rng(9);
  Codebook<float> cb(6, 3, rng);
  const auto path = (std::filesystem::temp_directory_path() / "mqvq_pca_test.csv").string();
  write_pca_csv(path, codebook_pca(cb));
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "code_index,pc1,pc2");
  std::size_t rows = 0;
  for (std::string line; std::getline(is, line);) ++rows;
  EXPECT_EQ(rows, 6u);
  std::filesystem::remove(path);
}
