#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "mqvq/dataset.hpp"
#include "mqvq/mqvae.hpp"
#include "support.hpp"

using namespace mqvq;
using mqvq::testing::relative_error;

namespace {

MqvaeConfig tiny_config() {
  MqvaeConfig c;
  c.resolution = 16;
  c.downsample = 4;
  c.widths = {4, 8};
  c.n_z = 8;
  c.codes = 16;
  c.demask.sub_modules = 2;
  return c;
}

Tensor64 tiny_image(std::uint64_t seed) {
  return generate_synthetic(1, 16, seed).images[0].cast<double>();
}

// Kept set by sorting (score, index) pairs with a full comparator.
std::set<int> sort_oracle(const std::vector<double>& s, std::size_t n) {
  std::vector<std::pair<double, int>> v;
  for (std::size_t i = 0; i < s.size(); ++i) v.emplace_back(-s[i], int(i));
  std::sort(v.begin(), v.end());
  std::set<int> out;
  for (std::size_t i = 0; i < n; ++i) out.insert(v[i].second);
  return out;
}

}  // namespace

TEST(KeepCount, FloorOfAlphaTimesPositions) {
  EXPECT_EQ(keep_count(0.75, 64), 48u);
  EXPECT_EQ(keep_count(0.75, 16), 12u);
  EXPECT_EQ(keep_count(6.0 / 16.0, 16), 6u);
  EXPECT_EQ(keep_count(0.7, 10), 7u);  // 0.7 * 10 is 6.999... in binary
  EXPECT_EQ(keep_count(1.0, 16), 16u);
  EXPECT_THROW(keep_count(0.01, 16), std::invalid_argument);
  EXPECT_THROW(keep_count(0.0, 16), std::invalid_argument);
  EXPECT_THROW(keep_count(1.5, 16), std::invalid_argument);
}

TEST(MaskSchedule, MatchesClosedFormChain) {
  for (std::size_t h = 1; h <= 8; ++h)
    EXPECT_NEAR(masked_key_scale(0.02, h), std::pow(0.02, 1.0 / std::pow(2.0, double(h - 1))), 1e-12);
  EXPECT_EQ(masked_key_scale(0.02, 1), 0.02);
}

TEST(MaskSchedule, EachStepIsTheSquareRootOfThePrevious) {
  for (std::size_t h = 1; h < 8; ++h)
    EXPECT_EQ(masked_key_scale(0.02, h + 1), std::sqrt(masked_key_scale(0.02, h)));
  EXPECT_EQ(masked_key_scale(0.0, 5), 0.0);
}

TEST(MaskSchedule, ColumnScaleIsOneOnKeptKeys) {
  Rng rng(1);
  Mqvae<double> vae(tiny_config(), rng);
  const std::vector<int> kept{3, 0, 9};
  for (std::size_t h = 1; h <= 2; ++h) {
    const auto s = vae.column_scale(h, kept);
    for (std::size_t p = 0; p < 16; ++p) {
      const bool k = std::find(kept.begin(), kept.end(), int(p)) != kept.end();
      EXPECT_EQ(s[p], k ? 1.0 : masked_key_scale(0.02, h));
    }
  }
}

TEST(SelectTop, MatchesFullSortOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> s(64);
    for (auto& v : s) v = rng.uniform();
    const auto top = select_top<double>(s, 48);
    EXPECT_EQ(std::set<int>(top.begin(), top.end()), sort_oracle(s, 48));
  }
}

TEST(SelectTop, InvariantUnderMonotoneMaps) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(64), t(64);
    for (auto& v : s) v = rng.uniform(-2.0, 2.0);
    const double a = rng.uniform(0.1, 5.0), b = rng.uniform(-3.0, 3.0);
    const int kind = trial % 4;
    for (std::size_t i = 0; i < 64; ++i) {
      const double x = s[i];
      t[i] = kind == 0 ? a * x + b : kind == 1 ? std::exp(a * x) : kind == 2 ? x * x * x + b : std::atan(a * x);
    }
    EXPECT_EQ(select_top<double>(s, 48), select_top<double>(t, 48));
  }
}

TEST(SelectTop, EqualScoresKeepAscendingIndex) {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.5, 0.1};
  EXPECT_EQ(select_top<double>(s, 3), (std::vector<int>{1, 0, 2}));
}

TEST(AdaptiveMask, SixOfSixteenOperatingPoint) {
  Rng rng(4);
  Mqvae<double> vae(tiny_config(), rng);
  const auto z = vae.encode(tiny_image(1));
  const auto sel = vae.adaptive_mask(z, 6.0 / 16.0);
  EXPECT_EQ(sel.count, 6u);
  EXPECT_EQ(sel.kept_positions.size(), 6u);
  EXPECT_EQ(16 - sel.kept_positions.size(), 10u);
}

TEST(AdaptiveMask, KeepsHighestScoringRowsScaledByScore) {
  Rng rng(5);
  Mqvae<double> vae(tiny_config(), rng);
  const auto z = vae.encode(tiny_image(2));
  const auto sel = vae.adaptive_mask(z);
  ASSERT_EQ(sel.count, 12u);
  std::vector<double> s(sel.scores.values().begin(), sel.scores.values().end());
  for (double v : s) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_EQ(std::set<int>(sel.kept_positions.begin(), sel.kept_positions.end()), sort_oracle(s, 12));
  for (std::size_t i = 1; i < sel.count; ++i)
    EXPECT_GE(s[sel.kept_positions[i - 1]], s[sel.kept_positions[i]]);

  // Row i = LayerNorm(z[p_i]) * s[p_i] (unit gain, zero bias at init).
  for (std::size_t i = 0; i < sel.count; ++i) {
    const int p = sel.kept_positions[i];
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mu += z[p * 8 + j] / 8.0;
    for (std::size_t j = 0; j < 8; ++j) var += std::pow(z[p * 8 + j] - mu, 2) / 8.0;
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_NEAR(sel.kept_features[i * 8 + j], (z[p * 8 + j] - mu) / std::sqrt(var + 1e-5) * s[p], 1e-12);
  }
}

TEST(AdaptiveMask, ScorerReceivesGradientThroughKeptRows) {
  Rng rng(6);
  Mqvae<double> vae(tiny_config(), rng);
  const auto fwd = vae.forward(tiny_image(3));
  fwd.loss.backward();
  for (const auto& p : vae.parameters()) {
    if (p.name.rfind("vae.mask.score", 0) != 0) continue;
    double norm = 0.0;
    for (double g : p.tensor.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0) << p.name;
  }
}

TEST(Demask, UnmaskedOutputsIgnoreMaskEmbeddingWhenEpsilonIsZero) {
  auto cfg = tiny_config();
  cfg.demask.epsilon = 0.0;
  Rng rng(7);
  Mqvae<double> vae(cfg, rng);
  const auto z = vae.encode(tiny_image(4));
  const auto sel = vae.adaptive_mask(z);
  const auto q = quantize(sel.kept_features, vae.codebook());
  auto mask = vae.codebook().mask_embedding;
  const std::vector<double> base(mask.values().begin(), mask.values().end());
  const auto reference = vae.attention_block(1, vae.fill(q.quantized, sel.kept_positions), sel.kept_positions);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> delta(8);
    double norm = 0.0;
    for (auto& d : delta) {
      d = rng.normal();
      norm += d * d;
    }
    const double r = rng.uniform() / std::sqrt(norm);
    auto m = mask.mutable_values();
    for (std::size_t j = 0; j < 8; ++j) m[j] = base[j] + delta[j] * r;
    const auto out = vae.attention_block(1, vae.fill(q.quantized, sel.kept_positions), sel.kept_positions);
    for (int p : sel.kept_positions)
      for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out[p * 8 + j], reference[p * 8 + j], 1e-12);
  }
  auto m = mask.mutable_values();
  std::copy(base.begin(), base.end(), m.begin());
}

TEST(Demask, LiteralUnrenormalizedModeLeaksThroughTheNormalizer) {
  // Without renormalization the softmax denominator still sees masked keys.
  auto cfg = tiny_config();
  cfg.demask.epsilon = 0.0;
  cfg.demask.renormalize = false;
  Rng rng(8);
  Mqvae<double> vae(cfg, rng);
  const auto z = vae.encode(tiny_image(5));
  const auto sel = vae.adaptive_mask(z);
  const auto q = quantize(sel.kept_features, vae.codebook());
  const auto before = vae.attention_block(1, vae.fill(q.quantized, sel.kept_positions), sel.kept_positions);
  for (auto& v : vae.codebook().mask_embedding.mutable_values()) v += 0.5;
  const auto after = vae.attention_block(1, vae.fill(q.quantized, sel.kept_positions), sel.kept_positions);
  double diff = 0.0;
  for (int p : sel.kept_positions)
    for (std::size_t j = 0; j < 8; ++j) diff = std::max(diff, std::abs(after[p * 8 + j] - before[p * 8 + j]));
  EXPECT_GT(diff, 1e-6);
}

TEST(Demask, MaskedSlotsReceiveInformationFromKeptSlots) {
  Rng rng(9);
  Mqvae<double> vae(tiny_config(), rng);
  const auto z = vae.encode(tiny_image(6));
  const auto sel = vae.adaptive_mask(z);
  auto q = quantize(sel.kept_features, vae.codebook()).quantized.detach();
  const auto before = vae.attention_block(1, vae.fill(q, sel.kept_positions), sel.kept_positions);
  auto qv = q.mutable_values();
  for (std::size_t j = 0; j < 8; ++j) qv[j] += 1.0;  // perturb one kept slot
  const auto after = vae.attention_block(1, vae.fill(q, sel.kept_positions), sel.kept_positions);
  std::set<int> kept(sel.kept_positions.begin(), sel.kept_positions.end());
  for (int p = 0; p < 16; ++p) {
    if (kept.count(p)) continue;
    double diff = 0.0;
    for (std::size_t j = 0; j < 8; ++j) diff += std::abs(after[p * 8 + j] - before[p * 8 + j]);
    EXPECT_GT(diff, 0.0) << "masked slot " << p;
  }
}

TEST(Mqvae, ShapesAndOutputRange) {
  Rng rng(10);
  Mqvae<float> vae(MqvaeConfig{}, rng);
  const auto img = generate_synthetic(1, 32, 0).images[0];
  const auto fwd = vae.forward(img);
  EXPECT_EQ(fwd.features.shape(), (Shape{16, 16}));
  EXPECT_EQ(fwd.selection.count, 12u);
  EXPECT_EQ(fwd.demasked.shape(), (Shape{16, 16}));
  EXPECT_EQ(fwd.reconstruction.shape(), (Shape{1, 32, 32}));
  for (float v : fwd.reconstruction.values()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(vae.encode(Tensor({1, 16, 16})), ShapeError);
}

TEST(Mqvae, DecodeCodesMatchesForwardPath) {
  Rng rng(11);
  Mqvae<double> vae(tiny_config(), rng);
  const auto fwd = vae.forward(tiny_image(7));
  const auto dec = vae.decode_codes(fwd.quant.codes, fwd.selection.kept_positions);
  for (std::size_t i = 0; i < dec.size(); ++i) EXPECT_NEAR(dec[i], fwd.reconstruction[i], 1e-12);
}

TEST(MqvaeConfig, RejectsInconsistentSettings) {
  auto c = tiny_config();
  c.resolution = 18;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.widths = {4};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.downsample = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.demask.epsilon = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(FrozenQuantization, ReproducesTheRealForwardValue) {
  Rng rng(12);
  Mqvae<double> vae(tiny_config(), rng);
  const auto img = tiny_image(8);
  const auto fwd = vae.forward(img);
  const auto frozen = freeze_quantization(fwd);
  const auto again = vae.forward(img, &frozen);
  EXPECT_EQ(again.quant.codes, fwd.quant.codes);
  EXPECT_NEAR(again.loss.item(), fwd.loss.item(), 1e-15);
}

// Every parameter of the miniature graph against central differences of the
// frozen-quantization surrogate.
TEST(Stage1Gradients, AllParametersMatchFiniteDifferences) {
  Rng rng(13);
  Mqvae<double> vae(tiny_config(), rng);
  const auto img = tiny_image(9);
  const auto frozen = freeze_quantization(vae.forward(img));
  const auto loss = [&] { return vae.forward(img, &frozen).loss; };
  auto params = vae.parameters();
  zero_grads(params);
  loss().backward();
  for (auto& p : params) {
    std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    const auto numeric = mqvq::testing::numeric_grad(p.tensor, loss);
    EXPECT_LT(relative_error(analytic, numeric), 1e-4) << p.name;
  }
}
