#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mqvq/stackformer.hpp"
#include "support.hpp"

using namespace mqvq;
using mqvq::testing::relative_error;

namespace {

StackformerConfig tiny_config(std::size_t classes = 0) {
  StackformerConfig c;
  c.code_layers = 2;
  c.position_layers = 1;
  c.width = 16;
  c.heads = 2;
  c.ff_mult = 2;
  c.codes = 10;
  c.positions = 16;
  c.classes = classes;
  return c;
}

TokenPositionSequence random_sequence(const StackformerConfig& cfg, std::size_t n, Rng& rng) {
  std::vector<int> pos(cfg.positions);
  std::iota(pos.begin(), pos.end(), 0);
  for (std::size_t i = pos.size(); i > 1; --i) std::swap(pos[i - 1], pos[rng.index(i)]);
  pos.resize(n);
  std::vector<int> codes(n);
  for (auto& c : codes) c = static_cast<int>(rng.index(cfg.codes));
  return make_sequence(rearrange(codes, pos), cfg);
}

template <typename T>
std::vector<double> row(const BasicTensor<T>& t, std::size_t r) {
  const std::size_t w = t.dim(1);
  return std::vector<double>(t.values().begin() + r * w, t.values().begin() + (r + 1) * w);
}

}  // namespace

TEST(Rearrange, MatchesSortOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> pos(64);
    std::iota(pos.begin(), pos.end(), 0);
    for (std::size_t i = pos.size(); i > 1; --i) std::swap(pos[i - 1], pos[rng.index(i)]);
    pos.resize(48);
    std::vector<int> codes(48);
    for (auto& c : codes) c = static_cast<int>(rng.index(64));
    std::vector<std::pair<int, int>> oracle;
    for (std::size_t i = 0; i < 48; ++i) oracle.emplace_back(pos[i], codes[i]);
    std::sort(oracle.begin(), oracle.end());
    const auto out = rearrange(codes, pos);
    for (std::size_t i = 0; i < 48; ++i) {
      EXPECT_EQ(out.positions[i], oracle[i].first);
      EXPECT_EQ(out.codes[i], oracle[i].second);
    }
  }
}

TEST(Rearrange, RejectsDuplicatesAndLengthMismatch) {
  const std::vector<int> codes{1, 2, 3}, pos{4, 0, 4}, short_pos{1, 2};
  EXPECT_THROW(rearrange(codes, pos), std::invalid_argument);
  EXPECT_THROW(rearrange(codes, short_pos), std::invalid_argument);
}

TEST(Sequence, ConditionPrefixLayout) {
  const auto cfg = tiny_config(3);
  const CodePositionPairs pairs{{4, 7}, {2, 9}};
  const auto plain = make_sequence(pairs, cfg);
  EXPECT_EQ(plain.codes, (std::vector<int>{10, 4, 7}));
  EXPECT_EQ(plain.positions, (std::vector<int>{16, 2, 9}));
  EXPECT_EQ(plain.condition_length, 1u);
  const auto cond = make_sequence(pairs, cfg, 2);
  EXPECT_EQ(cond.codes.front(), 10 + 1 + 2);
  EXPECT_EQ(cfg.code_vocab(), 14u);
  EXPECT_EQ(cfg.position_vocab(), 17u);
  EXPECT_THROW(cfg.class_code(3), std::out_of_range);
  EXPECT_NO_THROW(validate_sequence(cond, cfg));
}

TEST(Sequence, ValidationRejectsMalformedPayloads) {
  const auto cfg = tiny_config();
  auto s = make_sequence({{1, 2}, {5, 3}}, cfg);
  EXPECT_THROW(validate_sequence(s, cfg), std::invalid_argument);  // positions not increasing
  s = make_sequence({{1, 10}, {3, 5}}, cfg);
  EXPECT_THROW(validate_sequence(s, cfg), std::out_of_range);  // start code in payload
  s = make_sequence({{1, 2}, {3, 16}}, cfg);
  EXPECT_THROW(validate_sequence(s, cfg), std::out_of_range);  // start position in payload
}

TEST(Stackformer, CodeTransformerIsCausal) {
  const auto cfg = tiny_config();
  Rng rng(2);
  Stackformer<double> model(cfg, rng);
  auto seq = random_sequence(cfg, 8, rng);
  const std::vector<TokenPositionSequence> a{seq};
  const auto base = model.code_forward(a);
  for (std::size_t t = 1; t < seq.length(); ++t) {
    auto changed = seq;
    changed.codes[t] = (changed.codes[t] + 1) % int(cfg.codes);
    changed.positions[t] = (changed.positions[t] + 5) % int(cfg.positions);
    const std::vector<TokenPositionSequence> b{changed};
    const auto hc = model.code_forward(b);
    for (std::size_t r = 0; r < t; ++r) EXPECT_EQ(row(hc, r), row(base, r)) << "row " << r << " saw token " << t;
    EXPECT_NE(row(hc, t), row(base, t));
  }
}

TEST(Stackformer, PositionTransformerSeesCurrentCodeButNotTheFuture) {
  const auto cfg = tiny_config();
  Rng rng(3);
  Stackformer<double> model(cfg, rng);
  auto seq = random_sequence(cfg, 8, rng);
  const std::vector<TokenPositionSequence> a{seq};
  const auto base = model.position_logits(model.position_forward(model.code_forward(a), a));
  for (std::size_t l = 0; l < seq.payload_length(); ++l) {
    auto changed = seq;
    changed.codes[1 + l] = (changed.codes[1 + l] + 3) % int(cfg.codes);
    const std::vector<TokenPositionSequence> b{changed};
    const auto out = model.position_logits(model.position_forward(model.code_forward(b), b));
    for (std::size_t r = 0; r < l; ++r) EXPECT_EQ(row(out, r), row(base, r));
    EXPECT_NE(row(out, l), row(base, l)) << "position step " << l << " ignores its own code";
  }
  // The position target itself is never an input to its own prediction.
  for (std::size_t l = 0; l < seq.payload_length(); ++l) {
    auto changed = seq;
    changed.positions[1 + l] = 15 - changed.positions[1 + l];
    const std::vector<TokenPositionSequence> b{changed};
    const auto out = model.position_logits(model.position_forward(model.code_forward(b), b));
    for (std::size_t r = 0; r <= l; ++r) EXPECT_EQ(row(out, r), row(base, r));
  }
}

TEST(Stackformer, ZeroedHeadsGiveUniformNllAnchors) {
  for (std::size_t classes : {0u, 4u}) {
    StackformerConfig cfg;
    cfg.classes = classes;
    Rng rng(4);
    Stackformer<float> model(cfg, rng);
    model.zero_heads();
    std::vector<TokenPositionSequence> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(random_sequence(cfg, 12, rng));
    const auto l = model.losses(batch);
    EXPECT_NEAR(l.code.item(), std::log(double(cfg.code_vocab())), 1e-4);
    EXPECT_NEAR(l.position.item(), std::log(double(cfg.position_vocab())), 1e-4);
    EXPECT_NEAR(l.total.item(), l.code.item() + l.position.item(), 1e-6);
  }
}

TEST(Stackformer, BatchLossIsTheMeanOfPerSequenceLosses) {
  const auto cfg = tiny_config();
  Rng rng(5);
  Stackformer<double> model(cfg, rng);
  const auto s1 = random_sequence(cfg, 6, rng), s2 = random_sequence(cfg, 6, rng);
  const std::vector<TokenPositionSequence> both{s1, s2}, one{s1}, two{s2};
  const auto l = model.losses(both);
  EXPECT_NEAR(l.code.item(), 0.5 * (model.losses(one).code.item() + model.losses(two).code.item()), 1e-12);
  EXPECT_NEAR(l.position.item(),
              0.5 * (model.losses(one).position.item() + model.losses(two).position.item()), 1e-12);
}

TEST(Stackformer, RejectsRaggedBatchesAndOutOfVocabularyTokens) {
  const auto cfg = tiny_config();
  Rng rng(6);
  Stackformer<double> model(cfg, rng);
  const std::vector<TokenPositionSequence> ragged{random_sequence(cfg, 4, rng), random_sequence(cfg, 5, rng)};
  EXPECT_THROW(model.losses(ragged), std::invalid_argument);
  auto bad = random_sequence(cfg, 4, rng);
  bad.codes[2] = 99;
  const std::vector<TokenPositionSequence> b{bad};
  EXPECT_THROW(model.losses(b), std::out_of_range);
}

TEST(Stackformer, GradientsMatchFiniteDifferences) {
  auto cfg = tiny_config();
  cfg.width = 8;
  cfg.code_layers = 1;
  Rng rng(7);
  Stackformer<double> model(cfg, rng);
  std::vector<TokenPositionSequence> batch{random_sequence(cfg, 5, rng), random_sequence(cfg, 5, rng)};
  const auto loss = [&] { return model.losses(batch).total; };
  auto params = model.parameters();
  zero_grads(params);
  loss().backward();
  for (auto& p : params) {
    std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    EXPECT_LT(relative_error(analytic, mqvq::testing::numeric_grad(p.tensor, loss)), 1e-5) << p.name;
  }
}

TEST(Stackformer, ParameterNamesAreUniqueAndPrefixed) {
  Rng rng(8);
  Stackformer<float> model(tiny_config(), rng);
  std::vector<std::string> names;
  for (const auto& p : model.parameters()) {
    EXPECT_EQ(p.name.rfind("ar.", 0), 0u) << p.name;
    names.push_back(p.name);
  }
  std::sort(names.begin(), names.end());
  EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end());
}
