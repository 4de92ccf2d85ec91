#pragma once

// Interleaved next-code / next-position sampling with conflict masking,
// followed by decoding through the stage-1 model.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mqvq/mqvae.hpp"
#include "mqvq/random.hpp"
#include "mqvq/stackformer.hpp"

namespace mqvq {

struct SamplerConfig {
  std::size_t steps = 12;
  std::size_t top_k = 0;  // 0 disables
  double top_p = 1.0;     // 1 disables
  double temperature = 1.0;
  std::uint64_t seed = 0;
  bool greedy = false;

  void validate(std::size_t positions) const {
    if (steps == 0) throw std::invalid_argument("sampler: steps must be >= 1");
    if (steps > positions)
      throw std::invalid_argument("sampler: " + std::to_string(steps) + " steps exceed " +
                                  std::to_string(positions) +
                                  " grid positions; conflicts cannot be avoided");
    if (!(temperature > 0.0)) throw std::invalid_argument("sampler: temperature must be > 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("sampler: top_p must lie in (0, 1]");
    if (greedy && (top_k > 0 || top_p < 1.0))
      throw std::invalid_argument("sampler: greedy decoding cannot be combined with top-k/top-p");
  }
};

// temperature -> top-k -> top-p -> renormalize. Entries equal to -inf are
// never selected. If nothing survives, the argmax gets all the mass.
inline std::vector<double> filter_logits(std::span<const double> logits, std::size_t top_k,
                                         double top_p, double temperature) {
  const std::size_t n = logits.size();
  if (n == 0) throw std::invalid_argument("filter_logits: empty logits");
  const std::size_t argmax =
      static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  std::vector<double> probs(n, 0.0);
  const double mx = logits[argmax];
  if (!std::isfinite(mx)) {
    probs[argmax] = 1.0;
    return probs;
  }
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    probs[i] = std::isfinite(logits[i]) ? std::exp((logits[i] - mx) / temperature) : 0.0;
    z += probs[i];
  }
  for (auto& p : probs) p /= z;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  std::vector<bool> keep(n, true);
  if (top_k > 0)
    for (std::size_t r = top_k; r < n; ++r) keep[order[r]] = false;
  if (top_p < 1.0) {
    double cum = 0.0;
    bool reached = false;
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t i = order[r];
      if (!keep[i]) continue;
      if (reached) {
        keep[i] = false;
        continue;
      }
      cum += probs[i];
      if (cum >= top_p) reached = true;
    }
  }
  double kept = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!keep[i]) probs[i] = 0.0;
    kept += probs[i];
  }
  if (!(kept > 0.0)) {
    std::fill(probs.begin(), probs.end(), 0.0);
    probs[argmax] = 1.0;
    return probs;
  }
  for (auto& p : probs) p /= kept;
  return probs;
}

inline std::size_t draw(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last = i;
    cum += probs[i];
    if (u < cum) return i;
  }
  return last;
}

template <typename T>
struct SampleResult {
  BasicTensor<T> image;
  TokenPositionSequence sequence;
  // Probability of each chosen token under the unfiltered model.
  std::vector<double> code_probabilities;
  std::vector<double> position_probabilities;
};

namespace detail {

template <typename T>
std::vector<double> row_logits(const BasicTensor<T>& logits, std::size_t row) {
  const std::size_t v = logits.dim(1);
  std::vector<double> out(v);
  for (std::size_t j = 0; j < v; ++j) out[j] = double(logits[row * v + j]);
  return out;
}

inline double softmax_prob(std::span<const double> logits, std::size_t i) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits)
    if (std::isfinite(l)) z += std::exp(l - mx);
  return std::exp(logits[i] - mx) / z;
}

}  // namespace detail

// Autoregressive sampling. `prefix` optionally forces the first payload pairs
// (teacher-forced), after which sampling continues up to config.steps.
template <typename T>
SampleResult<T> sample(const Stackformer<T>& model, const Mqvae<T>& vae, const SamplerConfig& config,
                       std::optional<std::size_t> class_id = std::nullopt,
                       const CodePositionPairs* prefix = nullptr) {
  const auto& cfg = model.config();
  config.validate(cfg.positions);
  NoGradGuard no_grad;
  Rng rng(config.seed);

  SampleResult<T> out;
  auto& seq = out.sequence;
  seq.codes = {class_id ? cfg.class_code(*class_id) : cfg.start_code()};
  seq.positions = {cfg.start_position()};
  seq.condition_length = 1;
  std::vector<bool> used(cfg.positions, false);

  const auto choose = [&](std::vector<double> logits) {
    if (config.greedy)
      return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    const auto probs = filter_logits(logits, config.top_k, config.top_p, config.temperature);
    return draw(probs, rng);
  };

  for (std::size_t n = 1; n <= config.steps; ++n) {
    const std::size_t len = seq.length();
    const std::span<const TokenPositionSequence> one(&seq, 1);
    const auto hc = model.code_forward(one);
    const int last_row = static_cast<int>(len - 1);
    auto code_logits = detail::row_logits(model.code_logits_at(hc, std::span<const int>(&last_row, 1)), 0);
    for (std::size_t c = cfg.codes; c < code_logits.size(); ++c)
      code_logits[c] = -std::numeric_limits<double>::infinity();
    const bool forced = prefix && n <= prefix->codes.size();
    const std::size_t code = forced ? static_cast<std::size_t>(prefix->codes[n - 1]) : choose(code_logits);
    out.code_probabilities.push_back(detail::softmax_prob(code_logits, code));
    seq.codes.push_back(static_cast<int>(code));

    const auto payload = seq.payload_codes();
    const auto hp = model.position_forward(hc, 1, len, seq.condition_length, payload.size(), payload);
    auto pos_logits = detail::row_logits(model.position_logits(hp), payload.size() - 1);
    pos_logits[cfg.start_position()] = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < cfg.positions; ++p)
      if (used[p]) pos_logits[p] = -std::numeric_limits<double>::infinity();
    const std::size_t pos =
        forced ? static_cast<std::size_t>(prefix->positions[n - 1]) : choose(pos_logits);
    if (pos >= cfg.positions || used[pos])
      throw std::logic_error("sampler: produced an invalid or repeated position");
    out.position_probabilities.push_back(detail::softmax_prob(pos_logits, pos));
    used[pos] = true;
    seq.positions.push_back(static_cast<int>(pos));
  }

  out.image = vae.decode_codes(seq.payload_codes(), seq.payload_positions());
  return out;
}

}  // namespace mqvq
