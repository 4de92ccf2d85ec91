#pragma once

// Stage 1: encoder -> adaptive mask -> quantize -> fill + adaptive de-mask
// -> decoder.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mqvq/nn.hpp"
#include "mqvq/quantizer.hpp"

namespace mqvq {

struct DemaskConfig {
  std::size_t sub_modules = 8;
  double epsilon = 0.02;  // initial masked-key scale; 0 only in test mode
  // Divide each attention row by its sum after the column scaling, so scaled
  // keys are also discounted in the normalizer.
  bool renormalize = true;
};

struct MqvaeConfig {
  std::size_t resolution = 32;
  std::size_t channels = 1;
  std::size_t downsample = 8;
  std::vector<std::size_t> widths{16, 32, 64};  // one per stride-2 stage
  std::size_t n_z = 16;
  std::size_t codes = 64;
  double alpha = 0.75;  // keep fraction; mask ratio is 1 - alpha
  double beta = 0.25;
  std::size_t score_hidden = 0;  // 0 means n_z
  DemaskConfig demask;

  std::size_t stages() const {
    std::size_t s = 0;
    for (std::size_t f = downsample; f > 1; f /= 2) ++s;
    return s;
  }
  std::size_t grid() const { return resolution / downsample; }
  std::size_t positions() const { return grid() * grid(); }

  void validate() const {
    if (downsample != 4 && downsample != 8 && downsample != 16)
      throw std::invalid_argument("mqvae: downsampling factor must be 4, 8 or 16");
    if (resolution == 0 || resolution % downsample != 0)
      throw std::invalid_argument("mqvae: resolution " + std::to_string(resolution) +
                                  " not divisible by " + std::to_string(downsample));
    if (widths.size() != stages())
      throw std::invalid_argument("mqvae: need " + std::to_string(stages()) +
                                  " channel widths for factor " + std::to_string(downsample));
    if (channels != 1 && channels != 3) throw std::invalid_argument("mqvae: channels must be 1 or 3");
    if (n_z == 0 || codes == 0) throw std::invalid_argument("mqvae: n_z and K must be >= 1");
    if (demask.sub_modules == 0) throw std::invalid_argument("mqvae: need >= 1 de-mask sub-module");
    if (demask.epsilon < 0.0 || demask.epsilon >= 1.0)
      throw std::invalid_argument("mqvae: de-mask epsilon must lie in [0, 1)");
  }
};

// N = floor(alpha * L).
inline std::size_t keep_count(double alpha, std::size_t positions) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw std::invalid_argument("adaptive_mask: alpha must lie in (0, 1]");
  const auto n = static_cast<std::size_t>(std::floor(alpha * double(positions) + 1e-9));
  if (n == 0)
    throw std::invalid_argument("adaptive_mask: alpha " + std::to_string(alpha) +
                                " keeps no positions out of " + std::to_string(positions));
  return n;
}

// Masked-key scale of sub-module h (1-based): epsilon, sqrt(epsilon), ...
inline double masked_key_scale(double epsilon, std::size_t h) {
  double b = epsilon;
  for (std::size_t i = 1; i < h; ++i) b = std::sqrt(b);
  return b;
}

// Indices of the n largest scores, in descending score order; equal scores
// keep ascending index order.
template <typename T>
std::vector<int> select_top(std::span<const T> scores, std::size_t n) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  order.resize(std::min(n, order.size()));
  return order;
}

template <typename T>
struct MaskSelection {
  BasicTensor<T> kept_features;     // [N x n_z], LayerNorm(z') * s'
  std::vector<int> kept_positions;  // flat raster indices, descending score
  BasicTensor<T> scores;            // [L], every position
  double alpha = 1.0;
  std::size_t count = 0;
};

// Quantization captured at a probe point, for finite-difference checks.
// Forward passes that use it replace quantization by kept + offset and the
// stop-gradient operands of the VQ loss by their probe-point values. The
// value is unchanged there, and its true derivative equals the
// straight-through / stop-gradient gradient everywhere.
template <typename T>
struct FrozenQuantization {
  std::vector<int> codes;
  BasicTensor<T> offsets;
  BasicTensor<T> kept;  // sg(z)
  BasicTensor<T> rows;  // sg(e)
};

template <typename T>
struct Stage1Forward {
  BasicTensor<T> features;  // [L x n_z]
  MaskSelection<T> selection;
  QuantizationResult<T> quant;
  BasicTensor<T> filled;          // [L x n_z] before de-masking
  BasicTensor<T> demasked;        // [L x n_z]
  BasicTensor<T> reconstruction;  // [C x H0 x W0]
  BasicTensor<T> recon_mse;
  BasicTensor<T> vq;
  BasicTensor<T> loss;
};

// mean squared reconstruction error + VQ terms.
template <typename T>
BasicTensor<T> stage1_loss(const BasicTensor<T>& image, const BasicTensor<T>& reconstruction,
                           const BasicTensor<T>& vq_terms) {
  return add(mse_loss(reconstruction, image), vq_terms);
}

// [L x c] <-> [c x H x W]
template <typename T>
BasicTensor<T> rows_to_grid(const BasicTensor<T>& rows, std::size_t h, std::size_t w) {
  return reshape(transpose(rows), Shape{rows.dim(1), h, w});
}

template <typename T>
BasicTensor<T> grid_to_rows(const BasicTensor<T>& grid) {
  return transpose(reshape(grid, Shape{grid.dim(0), grid.dim(1) * grid.dim(2)}));
}

template <typename T>
class Mqvae {
 public:
  Mqvae() = default;

  Mqvae(MqvaeConfig config, Rng& rng) : cfg_(std::move(config)) {
    cfg_.validate();
    const auto& w = cfg_.widths;
    const std::size_t s = w.size();
    enc_in_ = Conv2d<T>(cfg_.channels, w[0], 3, 1, 1, rng);
    for (std::size_t i = 0; i < s; ++i) {
      const std::size_t next = i + 1 < s ? w[i + 1] : w[i];
      enc_norm_.emplace_back(w[i]);
      enc_down_.emplace_back(w[i], next, 4, 2, 1, rng);
    }
    enc_mid_ = ResBlock<T>(w.back(), rng);
    enc_norm_out_ = GroupNorm<T>(w.back());
    enc_out_ = Conv2d<T>(w.back(), cfg_.n_z, 1, 1, 0, rng);

    const std::size_t hidden = cfg_.score_hidden ? cfg_.score_hidden : cfg_.n_z;
    score1_ = Linear<T>(cfg_.n_z, hidden, rng);
    score2_ = Linear<T>(hidden, 1, rng);
    mask_norm_ = LayerNorm<T>(cfg_.n_z);

    codebook_ = Codebook<T>(cfg_.codes, cfg_.n_z, rng);

    for (std::size_t h = 0; h < cfg_.demask.sub_modules; ++h) {
      SubModule m;
      m.wq = Linear<T>(cfg_.n_z, cfg_.n_z, rng, Init::kFanIn, false);
      m.wk = Linear<T>(cfg_.n_z, cfg_.n_z, rng, Init::kFanIn, false);
      m.wv = Linear<T>(cfg_.n_z, cfg_.n_z, rng, Init::kFanIn, false);
      m.res = ResBlock<T>(cfg_.n_z, rng);
      demask_.push_back(std::move(m));
    }

    dec_in_ = Conv2d<T>(cfg_.n_z, w.back(), 1, 1, 0, rng);
    dec_mid_ = ResBlock<T>(w.back(), rng);
    for (std::size_t i = s; i-- > 0;) {
      const std::size_t from = i + 1 < s ? w[i + 1] : w[i];
      dec_up_.emplace_back(from, w[i], 3, 1, 1, rng);
      dec_norm_.emplace_back(w[i]);
    }
    dec_out_ = Conv2d<T>(w[0], cfg_.channels, 3, 1, 1, rng);
  }

  const MqvaeConfig& config() const { return cfg_; }
  const Codebook<T>& codebook() const { return codebook_; }
  Codebook<T>& codebook() { return codebook_; }

  // image[C x H0 x W0] -> [L x n_z], row l is raster position l.
  BasicTensor<T> encode(const BasicTensor<T>& image) const {
    const Shape want{cfg_.channels, cfg_.resolution, cfg_.resolution};
    if (image.shape() != want)
      throw ShapeError("encode: expected image " + shape_str(want) + ", got " +
                       shape_str(image.shape()));
    auto h = enc_in_(image);
    for (std::size_t i = 0; i < enc_down_.size(); ++i) h = enc_down_[i](silu(enc_norm_[i](h)));
    h = enc_mid_(h);
    h = enc_out_(silu(enc_norm_out_(h)));
    return grid_to_rows(h);
  }

  BasicTensor<T> scores(const BasicTensor<T>& features) const {
    auto s = sigmoid(score2_(silu(score1_(features))));
    return reshape(s, Shape{features.dim(0)});
  }

  MaskSelection<T> adaptive_mask(const BasicTensor<T>& features, double alpha) const {
    detail::require(features.rank() == 2 && features.dim(1) == cfg_.n_z,
                    "adaptive_mask: expected [L x " + std::to_string(cfg_.n_z) + "], got " +
                        shape_str(features.shape()));
    MaskSelection<T> sel;
    sel.alpha = alpha;
    sel.count = keep_count(alpha, features.dim(0));
    sel.scores = scores(features);
    sel.kept_positions = select_top<T>(sel.scores.values(), sel.count);
    auto sorted = index_rows(features, sel.kept_positions);
    auto kept_scores = index_rows(sel.scores, sel.kept_positions);
    sel.kept_features = mul_rows(mask_norm_(sorted), kept_scores);
    return sel;
  }

  MaskSelection<T> adaptive_mask(const BasicTensor<T>& features) const {
    return adaptive_mask(features, cfg_.alpha);
  }

  // Kept slots take the quantized rows; all others the mask embedding.
  BasicTensor<T> fill(const BasicTensor<T>& quantized, std::span<const int> positions) const {
    return fill_rows(quantized, positions, codebook_.mask_embedding, cfg_.positions());
  }

  // Per-key scale used by sub-module h (1-based).
  std::vector<T> column_scale(std::size_t h, std::span<const int> kept_positions) const {
    std::vector<T> s(cfg_.positions(), static_cast<T>(masked_key_scale(cfg_.demask.epsilon, h)));
    for (int p : kept_positions) s.at(p) = T(1);
    return s;
  }

  // Direction-constrained attention of sub-module h (1-based), with residual.
  BasicTensor<T> attention_block(std::size_t h, const BasicTensor<T>& rows,
                                 std::span<const int> kept_positions) const {
    const auto& m = demask_.at(h - 1);
    const auto scale_h = column_scale(h, kept_positions);
    return add(rows, masked_attention<T>(m.wq(rows), m.wk(rows), m.wv(rows), scale_h,
                                         cfg_.demask.renormalize));
  }

  BasicTensor<T> demask(const BasicTensor<T>& filled, std::span<const int> kept_positions) const {
    const std::size_t g = cfg_.grid();
    auto x = filled;
    for (std::size_t h = 1; h <= demask_.size(); ++h) {
      x = attention_block(h, x, kept_positions);
      x = grid_to_rows(demask_[h - 1].res(rows_to_grid(x, g, g)));
    }
    return x;
  }

  BasicTensor<T> fill_and_demask(const BasicTensor<T>& quantized,
                                 std::span<const int> positions) const {
    return demask(fill(quantized, positions), positions);
  }

  // [L x n_z] -> image in [-1, 1].
  BasicTensor<T> decode(const BasicTensor<T>& rows) const {
    detail::require(rows.rank() == 2 && rows.dim(0) == cfg_.positions() && rows.dim(1) == cfg_.n_z,
                    "decode: expected [" + std::to_string(cfg_.positions()) + " x " +
                        std::to_string(cfg_.n_z) + "], got " + shape_str(rows.shape()));
    auto h = dec_in_(rows_to_grid(rows, cfg_.grid(), cfg_.grid()));
    h = dec_mid_(h);
    for (std::size_t i = 0; i < dec_up_.size(); ++i)
      h = silu(dec_norm_[i](dec_up_[i](upsample_nearest(h, 2))));
    return tanh(dec_out_(h));
  }

  // Image from (code, position) pairs, as at sampling time.
  BasicTensor<T> decode_codes(std::span<const int> codes, std::span<const int> positions) const {
    auto rows = index_rows(codebook_.embeddings, codes);
    return decode(fill_and_demask(rows, positions));
  }

  Stage1Forward<T> forward(const BasicTensor<T>& image,
                           const FrozenQuantization<T>* frozen = nullptr) const {
    Stage1Forward<T> out;
    out.features = encode(image);
    out.selection = adaptive_mask(out.features);
    const auto& kept = out.selection.kept_features;
    if (frozen) {
      detail::require(frozen->codes.size() == kept.dim(0) && frozen->offsets.shape() == kept.shape(),
                      "forward: frozen quantization does not match selection");
      out.quant.codes = frozen->codes;
      out.quant.codebook_rows = index_rows(codebook_.embeddings, frozen->codes);
      out.quant.quantized = add(kept, frozen->offsets);
      out.vq = add(mse_loss(frozen->kept, out.quant.codebook_rows),
                   scale(mse_loss(kept, frozen->rows), static_cast<T>(cfg_.beta)));
    } else {
      out.quant = quantize(kept, codebook_);
      out.vq = vq_loss(kept, out.quant, static_cast<T>(cfg_.beta));
    }
    out.filled = fill(out.quant.quantized, out.selection.kept_positions);
    out.demasked = demask(out.filled, out.selection.kept_positions);
    out.reconstruction = decode(out.demasked);
    out.recon_mse = mse_loss(out.reconstruction, image);
    out.loss = add(out.recon_mse, out.vq);
    return out;
  }

  ParameterList<T> parameters() const {
    ParameterList<T> p;
    enc_in_.collect(p, "vae.enc.in");
    for (std::size_t i = 0; i < enc_down_.size(); ++i) {
      enc_norm_[i].collect(p, "vae.enc.norm" + std::to_string(i));
      enc_down_[i].collect(p, "vae.enc.down" + std::to_string(i));
    }
    enc_mid_.collect(p, "vae.enc.mid");
    enc_norm_out_.collect(p, "vae.enc.norm_out");
    enc_out_.collect(p, "vae.enc.out");
    score1_.collect(p, "vae.mask.score1");
    score2_.collect(p, "vae.mask.score2");
    mask_norm_.collect(p, "vae.mask.norm");
    codebook_.collect(p, "vae.codebook");
    for (std::size_t h = 0; h < demask_.size(); ++h) {
      const std::string pre = "vae.demask" + std::to_string(h);
      demask_[h].wq.collect(p, pre + ".wq");
      demask_[h].wk.collect(p, pre + ".wk");
      demask_[h].wv.collect(p, pre + ".wv");
      demask_[h].res.collect(p, pre + ".res");
    }
    dec_in_.collect(p, "vae.dec.in");
    dec_mid_.collect(p, "vae.dec.mid");
    for (std::size_t i = 0; i < dec_up_.size(); ++i) {
      dec_up_[i].collect(p, "vae.dec.up" + std::to_string(i));
      dec_norm_[i].collect(p, "vae.dec.norm" + std::to_string(i));
    }
    dec_out_.collect(p, "vae.dec.out");
    return p;
  }

 private:
  struct SubModule {
    Linear<T> wq, wk, wv;
    ResBlock<T> res;
  };

  MqvaeConfig cfg_;
  Conv2d<T> enc_in_, enc_out_;
  std::vector<GroupNorm<T>> enc_norm_;
  std::vector<Conv2d<T>> enc_down_;
  ResBlock<T> enc_mid_;
  GroupNorm<T> enc_norm_out_;
  Linear<T> score1_, score2_;
  LayerNorm<T> mask_norm_;
  Codebook<T> codebook_;
  std::vector<SubModule> demask_;
  Conv2d<T> dec_in_, dec_out_;
  ResBlock<T> dec_mid_;
  std::vector<Conv2d<T>> dec_up_;
  std::vector<GroupNorm<T>> dec_norm_;
};

// Offsets that make `kept + offset` equal the quantized rows at this point.
template <typename T>
FrozenQuantization<T> freeze_quantization(const Stage1Forward<T>& fwd) {
  FrozenQuantization<T> f;
  f.codes = fwd.quant.codes;
  const auto& kept = fwd.selection.kept_features;
  std::vector<T> off(kept.size());
  for (std::size_t i = 0; i < off.size(); ++i) off[i] = fwd.quant.codebook_rows[i] - kept[i];
  f.offsets = BasicTensor<T>(kept.shape(), std::move(off));
  f.kept = kept.detach();
  f.rows = fwd.quant.codebook_rows.detach();
  return f;
}

}  // namespace mqvq
