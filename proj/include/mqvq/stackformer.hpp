#pragma once

// Stage 2: a Code-Transformer predicting the next code from previous
// (code, position) pairs, stacked under a Position-Transformer predicting
// that code's grid position from the code hidden state plus the code itself.

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mqvq/nn.hpp"

namespace mqvq {

struct StackformerConfig {
  std::size_t code_layers = 4;
  std::size_t position_layers = 2;
  std::size_t width = 128;
  std::size_t heads = 4;
  std::size_t ff_mult = 4;
  std::size_t codes = 64;      // K
  std::size_t positions = 16;  // L
  std::size_t classes = 0;

  // Code vocabulary: [0, K) codes, K = start, K + 1 + c = class c.
  std::size_t code_vocab() const { return codes + 1 + classes; }
  // Position vocabulary: [0, L) positions, L = start.
  std::size_t position_vocab() const { return positions + 1; }
  int start_code() const { return static_cast<int>(codes); }
  int class_code(std::size_t c) const {
    if (c >= classes)
      throw std::out_of_range("class id " + std::to_string(c) + " outside [0, " +
                              std::to_string(classes) + ")");
    return static_cast<int>(codes + 1 + c);
  }
  int start_position() const { return static_cast<int>(positions); }
  std::size_t max_length() const { return 1 + positions; }

  void validate() const {
    if (width == 0 || heads == 0 || width % heads != 0)
      throw std::invalid_argument("stackformer: width " + std::to_string(width) +
                                  " not divisible by " + std::to_string(heads) + " heads");
    if (codes == 0 || positions == 0) throw std::invalid_argument("stackformer: K and L must be >= 1");
    if (code_layers == 0 || position_layers == 0)
      throw std::invalid_argument("stackformer: need at least one block per transformer");
  }
};

struct CodePositionPairs {
  std::vector<int> codes;
  std::vector<int> positions;
};

// Condition prefix followed by the raster-ordered payload.
struct TokenPositionSequence {
  std::vector<int> codes;
  std::vector<int> positions;
  std::size_t condition_length = 1;

  std::size_t length() const { return codes.size(); }
  std::size_t payload_length() const { return codes.size() - condition_length; }
  std::span<const int> payload_codes() const {
    return std::span<const int>(codes).subspan(condition_length);
  }
  std::span<const int> payload_positions() const {
    return std::span<const int>(positions).subspan(condition_length);
  }
};

// Sorts pairs by ascending position (raster-scan order).
inline CodePositionPairs rearrange(std::span<const int> codes, std::span<const int> positions) {
  if (codes.size() != positions.size())
    throw std::invalid_argument("rearrange: " + std::to_string(codes.size()) + " codes but " +
                                std::to_string(positions.size()) + " positions");
  std::vector<std::size_t> order(codes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return positions[a] < positions[b]; });
  CodePositionPairs out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0 && positions[order[i]] == positions[order[i - 1]])
      throw std::invalid_argument("rearrange: duplicate position " +
                                  std::to_string(positions[order[i]]));
    out.codes.push_back(codes[order[i]]);
    out.positions.push_back(positions[order[i]]);
  }
  return out;
}

inline TokenPositionSequence make_sequence(const CodePositionPairs& pairs,
                                           const StackformerConfig& cfg,
                                           std::optional<std::size_t> class_id = std::nullopt) {
  TokenPositionSequence seq;
  seq.codes.push_back(class_id ? cfg.class_code(*class_id) : cfg.start_code());
  seq.positions.push_back(cfg.start_position());
  seq.condition_length = 1;
  seq.codes.insert(seq.codes.end(), pairs.codes.begin(), pairs.codes.end());
  seq.positions.insert(seq.positions.end(), pairs.positions.begin(), pairs.positions.end());
  return seq;
}

inline void validate_sequence(const TokenPositionSequence& seq, const StackformerConfig& cfg) {
  if (seq.codes.size() != seq.positions.size())
    throw std::invalid_argument("sequence: code/position length mismatch");
  if (seq.condition_length == 0 || seq.condition_length > seq.codes.size())
    throw std::invalid_argument("sequence: bad condition length");
  for (int c : seq.codes)
    if (c < 0 || static_cast<std::size_t>(c) >= cfg.code_vocab())
      throw std::out_of_range("sequence: code token " + std::to_string(c) +
                              " outside vocabulary " + std::to_string(cfg.code_vocab()));
  for (int p : seq.positions)
    if (p < 0 || static_cast<std::size_t>(p) >= cfg.position_vocab())
      throw std::out_of_range("sequence: position token " + std::to_string(p) +
                              " outside vocabulary " + std::to_string(cfg.position_vocab()));
  for (std::size_t i = seq.condition_length; i < seq.codes.size(); ++i) {
    if (static_cast<std::size_t>(seq.codes[i]) >= cfg.codes)
      throw std::out_of_range("sequence: special code in payload");
    if (seq.positions[i] >= cfg.start_position())
      throw std::out_of_range("sequence: special position in payload");
    if (i > seq.condition_length && seq.positions[i] <= seq.positions[i - 1])
      throw std::invalid_argument("sequence: payload positions not strictly increasing");
  }
  if (seq.length() > seq.condition_length + cfg.positions)
    throw std::invalid_argument("sequence: longer than the position grid");
}

// Pre-norm GPT block.
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  Linear<T> qkv, proj, fc, fc_out;
  std::size_t heads = 1;

  TransformerBlock() = default;
  TransformerBlock(std::size_t d, std::size_t heads_, std::size_t ff_mult, Rng& rng)
      : ln1(d),
        ln2(d),
        qkv(d, 3 * d, rng, Init::kNormal002),
        proj(d, d, rng, Init::kNormal002),
        fc(d, ff_mult * d, rng, Init::kNormal002),
        fc_out(ff_mult * d, d, rng, Init::kNormal002),
        heads(heads_) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x, std::size_t batch, std::size_t seq) const {
    auto h = add(x, proj(causal_attention(qkv(ln1(x)), batch, seq, heads)));
    return add(h, fc_out(gelu(fc(ln2(h)))));
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    ln1.collect(out, prefix + ".ln1");
    qkv.collect(out, prefix + ".qkv");
    proj.collect(out, prefix + ".proj");
    ln2.collect(out, prefix + ".ln2");
    fc.collect(out, prefix + ".fc");
    fc_out.collect(out, prefix + ".fc_out");
  }
};

template <typename T>
class Stackformer {
 public:
  Stackformer() = default;

  Stackformer(StackformerConfig config, Rng& rng) : cfg_(std::move(config)) {
    cfg_.validate();
    const std::size_t d = cfg_.width;
    code_embed_ = normal_parameter<T>({cfg_.code_vocab(), d}, 0.02, rng);
    code_pos_embed_ = normal_parameter<T>({cfg_.position_vocab(), d}, 0.02, rng);
    abs_pos_embed_ = normal_parameter<T>({cfg_.max_length(), d}, 0.02, rng);
    for (std::size_t i = 0; i < cfg_.code_layers; ++i)
      code_blocks_.emplace_back(d, cfg_.heads, cfg_.ff_mult, rng);
    code_ln_ = LayerNorm<T>(d);
    code_head_ = Linear<T>(d, cfg_.code_vocab(), rng, Init::kNormal002);
    pos_code_embed_ = normal_parameter<T>({cfg_.code_vocab(), d}, 0.02, rng);
    for (std::size_t i = 0; i < cfg_.position_layers; ++i)
      pos_blocks_.emplace_back(d, cfg_.heads, cfg_.ff_mult, rng);
    pos_ln_ = LayerNorm<T>(d);
    pos_head_ = Linear<T>(d, cfg_.position_vocab(), rng, Init::kNormal002);
  }

  const StackformerConfig& config() const { return cfg_; }

  // Code-Transformer over equal-length sequences; returns H_c[(B*T) x d].
  // Row t depends on tokens 0..t only.
  BasicTensor<T> code_forward(std::span<const TokenPositionSequence> batch) const {
    const std::size_t seq = check_batch(batch);
    std::vector<int> codes, positions, steps;
    for (const auto& s : batch) {
      codes.insert(codes.end(), s.codes.begin(), s.codes.end());
      positions.insert(positions.end(), s.positions.begin(), s.positions.end());
      for (std::size_t t = 0; t < seq; ++t) steps.push_back(static_cast<int>(t));
    }
    auto x = add(add(index_rows(code_embed_, codes), index_rows(code_pos_embed_, positions)),
                 index_rows(abs_pos_embed_, steps));
    for (const auto& blk : code_blocks_) x = blk(x, batch.size(), seq);
    return code_ln_(x);
  }

  // Rows of H_c that predict payload steps: condition_length-1 ... T-2.
  std::vector<int> predicting_rows(std::span<const TokenPositionSequence> batch,
                                   std::size_t steps) const {
    const std::size_t seq = batch.front().length();
    const std::size_t cond = batch.front().condition_length;
    std::vector<int> rows;
    for (std::size_t b = 0; b < batch.size(); ++b)
      for (std::size_t l = 0; l < steps; ++l) rows.push_back(static_cast<int>(b * seq + cond - 1 + l));
    return rows;
  }

  BasicTensor<T> code_logits_at(const BasicTensor<T>& hc, std::span<const int> rows) const {
    return code_head_(index_rows(hc, rows));
  }

  BasicTensor<T> code_logits(const BasicTensor<T>& hc,
                             std::span<const TokenPositionSequence> batch) const {
    const std::size_t n = batch.front().payload_length();
    return code_head_(index_rows(hc, predicting_rows(batch, n)));
  }

  // Mean over payload steps of -log p(code_l | codes_<l, positions_<l).
  BasicTensor<T> code_nll(const BasicTensor<T>& hc,
                          std::span<const TokenPositionSequence> batch) const {
    std::vector<int> targets;
    for (const auto& s : batch) targets.insert(targets.end(), s.payload_codes().begin(), s.payload_codes().end());
    return cross_entropy(code_logits(hc, batch), targets);
  }

  // Position-Transformer input for step l: H_c[cond-1+l] + e(code_l).
  // `steps` payload codes per sequence are read from `payload_codes`
  // (flattened, batch-major); H_c must cover rows up to cond-1+steps-1.
  BasicTensor<T> position_forward(const BasicTensor<T>& hc, std::size_t batch, std::size_t seq,
                                  std::size_t cond, std::size_t steps,
                                  std::span<const int> payload_codes) const {
    detail::require(payload_codes.size() == batch * steps && cond - 1 + steps <= seq &&
                        hc.dim(0) == batch * seq,
                    "position_forward: length mismatch between hidden states and codes");
    std::vector<int> rows;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t l = 0; l < steps; ++l) rows.push_back(static_cast<int>(b * seq + cond - 1 + l));
    for (int c : payload_codes)
      if (c < 0 || static_cast<std::size_t>(c) >= cfg_.code_vocab())
        throw std::out_of_range("position_forward: code token out of vocabulary");
    auto x = add(index_rows(hc, rows), index_rows(pos_code_embed_, payload_codes));
    for (const auto& blk : pos_blocks_) x = blk(x, batch, steps);
    return pos_ln_(x);
  }

  BasicTensor<T> position_forward(const BasicTensor<T>& hc,
                                  std::span<const TokenPositionSequence> batch) const {
    const std::size_t seq = check_batch(batch);
    std::vector<int> payload;
    for (const auto& s : batch) payload.insert(payload.end(), s.payload_codes().begin(), s.payload_codes().end());
    return position_forward(hc, batch.size(), seq, batch.front().condition_length,
                            batch.front().payload_length(), payload);
  }

  BasicTensor<T> position_logits(const BasicTensor<T>& hp) const { return pos_head_(hp); }

  // Mean over payload steps of -log p(position_l | codes_<=l, positions_<l).
  BasicTensor<T> position_nll(const BasicTensor<T>& hp,
                              std::span<const TokenPositionSequence> batch) const {
    std::vector<int> targets;
    for (const auto& s : batch)
      targets.insert(targets.end(), s.payload_positions().begin(), s.payload_positions().end());
    return cross_entropy(position_logits(hp), targets);
  }

  struct Losses {
    BasicTensor<T> code, position, total;
  };

  Losses losses(std::span<const TokenPositionSequence> batch) const {
    Losses l;
    const auto hc = code_forward(batch);
    l.code = code_nll(hc, batch);
    l.position = position_nll(position_forward(hc, batch), batch);
    l.total = total_loss(l.code, l.position);
    return l;
  }

  static BasicTensor<T> total_loss(const BasicTensor<T>& code, const BasicTensor<T>& position) {
    return add(code, position);
  }

  // Test hooks: zero the output layers so both heads emit uniform logits.
  void zero_heads() {
    for (auto* lin : {&code_head_, &pos_head_}) {
      for (auto& v : lin->weight.mutable_values()) v = T(0);
      for (auto& v : lin->bias.mutable_values()) v = T(0);
    }
  }

  ParameterList<T> parameters() const {
    ParameterList<T> p;
    p.push_back({"ar.code.embed", code_embed_});
    p.push_back({"ar.code.pos_embed", code_pos_embed_});
    p.push_back({"ar.code.abs_embed", abs_pos_embed_});
    for (std::size_t i = 0; i < code_blocks_.size(); ++i)
      code_blocks_[i].collect(p, "ar.code.block" + std::to_string(i));
    code_ln_.collect(p, "ar.code.ln_f");
    code_head_.collect(p, "ar.code.head");
    p.push_back({"ar.pos.code_embed", pos_code_embed_});
    for (std::size_t i = 0; i < pos_blocks_.size(); ++i)
      pos_blocks_[i].collect(p, "ar.pos.block" + std::to_string(i));
    pos_ln_.collect(p, "ar.pos.ln_f");
    pos_head_.collect(p, "ar.pos.head");
    return p;
  }

 private:
  std::size_t check_batch(std::span<const TokenPositionSequence> batch) const {
    if (batch.empty()) throw std::invalid_argument("stackformer: empty batch");
    const std::size_t seq = batch.front().length();
    const std::size_t cond = batch.front().condition_length;
    for (const auto& s : batch) {
      if (s.length() != seq || s.condition_length != cond || s.positions.size() != seq)
        throw std::invalid_argument("stackformer: batch sequences must share length and prefix");
      for (int c : s.codes)
        if (c < 0 || static_cast<std::size_t>(c) >= cfg_.code_vocab())
          throw std::out_of_range("stackformer: code token " + std::to_string(c) +
                                  " outside vocabulary " + std::to_string(cfg_.code_vocab()));
      for (int p : s.positions)
        if (p < 0 || static_cast<std::size_t>(p) >= cfg_.position_vocab())
          throw std::out_of_range("stackformer: position token " + std::to_string(p) +
                                  " outside vocabulary " + std::to_string(cfg_.position_vocab()));
    }
    if (seq > cfg_.max_length())
      throw std::invalid_argument("stackformer: sequence length " + std::to_string(seq) +
                                  " exceeds " + std::to_string(cfg_.max_length()));
    return seq;
  }

  StackformerConfig cfg_;
  BasicTensor<T> code_embed_, code_pos_embed_, abs_pos_embed_, pos_code_embed_;
  std::vector<TransformerBlock<T>> code_blocks_, pos_blocks_;
  LayerNorm<T> code_ln_, pos_ln_;
  Linear<T> code_head_, pos_head_;
};

}  // namespace mqvq
