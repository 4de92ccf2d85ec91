#pragma once

// Two-stage training loops, checkpoint/resume, and sequence extraction.
//
// Batches for step s are drawn from a generator seeded by (seed, s) alone, so
// a run resumed from a step-k checkpoint replays exactly the batches of an
// uninterrupted run.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mqvq/checkpoint.hpp"
#include "mqvq/config.hpp"
#include "mqvq/dataset.hpp"
#include "mqvq/image_io.hpp"
#include "mqvq/mqvae.hpp"
#include "mqvq/optim.hpp"
#include "mqvq/quantizer.hpp"
#include "mqvq/stackformer.hpp"

namespace mqvq {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using LogFn = std::function<void(const std::string&)>;

struct Stage1Options {
  MqvaeConfig model;
  AdamWConfig optim;
  std::size_t steps = 5000;
  std::size_t batch = 8;
  std::size_t eval_every = 250;
  std::size_t dump_every = 1000;
  std::size_t checkpoint_every = 1000;
  double target_mse = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t digest = 0;
  std::string out_dir;     // empty: no files
  std::string resume;      // checkpoint to continue from
  std::size_t stop_after = 0;  // halt (with a checkpoint) at this step, 0 = never
  std::size_t log_every = 0;
  LogFn log;
};

struct Stage1Step {
  std::size_t step;
  double loss, recon_mse, commit_distance, usage;
};

struct Stage1Eval {
  std::size_t step;
  double mse, usage_window, usage_cumulative;
};

struct Stage1Result {
  Mqvae<float> model;
  std::vector<Stage1Step> steps;
  std::vector<Stage1Eval> evals;
  std::size_t final_step = 0;
  std::string checkpoint;
};

struct Stage2Options {
  StackformerConfig model;
  AdamWConfig optim;
  std::size_t steps = 3000;
  std::size_t batch = 8;
  std::size_t eval_every = 100;
  std::size_t checkpoint_every = 1000;
  double target_nll = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t digest = 0;
  std::uint64_t vae_digest = 0;
  std::string out_dir;
  std::string resume;
  std::size_t stop_after = 0;
  std::size_t log_every = 0;
  LogFn log;
};

struct Stage2Step {
  std::size_t step;
  double loss, code_nll, position_nll, lr;
};

struct Stage2Eval {
  std::size_t step;
  double joint_nll, code_nll, position_nll;
};

struct Stage2Result {
  Stackformer<float> model;
  std::vector<TokenPositionSequence> sequences;
  std::vector<Stage2Step> steps;
  std::vector<Stage2Eval> evals;
  std::size_t final_step = 0;
  std::string checkpoint;
};

inline Stage1Options stage1_options(const RunConfig& cfg) {
  Stage1Options o;
  o.model = cfg.vae();
  o.optim = cfg.optim("train1");
  o.steps = cfg.get_size("train1.steps");
  o.batch = cfg.get_size("train1.batch");
  o.eval_every = cfg.get_size("train1.eval_every");
  o.dump_every = cfg.get_size("train1.dump_every");
  o.checkpoint_every = cfg.get_size("train1.checkpoint_every");
  o.target_mse = cfg.get_double("train1.target_mse");
  o.seed = cfg.get_u64("seed");
  o.digest = cfg.vae_digest();
  o.out_dir = cfg.get("out_dir");
  return o;
}

inline Stage2Options stage2_options(const RunConfig& cfg, std::size_t classes) {
  Stage2Options o;
  o.model = cfg.ar(classes);
  o.optim = cfg.optim("train2");
  o.steps = cfg.get_size("train2.steps");
  o.batch = cfg.get_size("train2.batch");
  o.eval_every = cfg.get_size("train2.eval_every");
  o.checkpoint_every = cfg.get_size("train2.checkpoint_every");
  o.target_nll = cfg.get_double("train2.target_nll");
  o.seed = cfg.get_u64("seed");
  o.digest = cfg.ar_digest();
  o.vae_digest = cfg.vae_digest();
  o.out_dir = cfg.get("out_dir");
  return o;
}

namespace detail {

// Indices for one step: the whole set in order if the batch covers it,
// otherwise a seeded draw without replacement.
inline std::vector<std::size_t> batch_indices(std::size_t n, std::size_t batch, std::uint64_t seed,
                                              Stream stream, std::size_t step) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (batch >= n) return idx;
  Rng rng(derive_seed(derive_seed(seed, stream), step));
  for (std::size_t i = 0; i < batch; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(batch);
  return idx;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline std::ofstream open_csv(const std::string& path, const std::string& header, bool append) {
  const bool exists = std::filesystem::exists(path);
  std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  if (!append || !exists) os << header << '\n';
  os << std::setprecision(9);
  return os;
}

inline void check_digest(const Checkpoint& ckpt, const std::string& key, std::uint64_t want,
                         const std::string& path) {
  const auto it = ckpt.meta.find(key);
  if (it == ckpt.meta.end())
    throw ArchitectureMismatchError(path + ": checkpoint has no " + key);
  if (it->second != hex64(want))
    throw ArchitectureMismatchError(path + ": config digest " + hex64(want) +
                                    " does not match checkpoint " + key + " " + it->second);
}

inline std::size_t meta_size(const Checkpoint& ckpt, const std::string& key) {
  const auto it = ckpt.meta.find(key);
  if (it == ckpt.meta.end()) throw CheckpointError("checkpoint: missing metadata " + key);
  return std::stoull(it->second);
}

inline Tensor code_set_tensor(const std::vector<bool>& seen) {
  std::vector<float> v(seen.size());
  for (std::size_t i = 0; i < seen.size(); ++i) v[i] = seen[i] ? 1.0f : 0.0f;
  return Tensor({seen.size()}, std::move(v));
}

inline double percent(const std::vector<bool>& seen) {
  std::size_t n = 0;
  for (bool b : seen) n += b;
  return 100.0 * double(n) / double(seen.size());
}

// Originals on the top row, reconstructions below.
inline Tensor tile_pairs(const std::vector<Tensor>& top, const std::vector<Tensor>& bottom) {
  const std::size_t c = top.front().dim(0), h = top.front().dim(1), w = top.front().dim(2);
  const std::size_t cols = top.size(), W = cols * w, H = 2 * h;
  std::vector<float> v(c * H * W);
  for (std::size_t k = 0; k < cols; ++k)
    for (std::size_t row = 0; row < 2; ++row) {
      const auto& img = row == 0 ? top[k] : bottom[k];
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            v[(ch * H + row * h + y) * W + k * w + x] = img[(ch * h + y) * w + x];
    }
  return Tensor({c, H, W}, std::move(v));
}

}  // namespace detail

inline Mqvae<float> init_vae(const MqvaeConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, Stream::kInit));
  return Mqvae<float>(cfg, rng);
}

inline Stackformer<float> init_ar(const StackformerConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, Stream::kInitStage2));
  return Stackformer<float>(cfg, rng);
}

// Stage-1 model from a checkpoint; the config's architecture digest must match.
inline Mqvae<float> load_vae(const RunConfig& cfg, const std::string& path) {
  const auto ckpt = load_checkpoint(path);
  detail::check_digest(ckpt, "vae_digest", cfg.vae_digest(), path);
  auto vae = init_vae(cfg.vae(), cfg.get_u64("seed"));
  auto params = vae.parameters();
  load_parameters(ckpt, params, "vae.");
  return vae;
}

inline Stackformer<float> load_ar(const RunConfig& cfg, const std::string& path) {
  const auto ckpt = load_checkpoint(path);
  detail::check_digest(ckpt, "ar_digest", cfg.ar_digest(), path);
  detail::check_digest(ckpt, "vae_digest", cfg.vae_digest(), path);
  auto ar = init_ar(cfg.ar(detail::meta_size(ckpt, "classes")), cfg.get_u64("seed"));
  auto params = ar.parameters();
  load_parameters(ckpt, params, "ar.");
  return ar;
}

// Mean reconstruction MSE over a dataset, plus the codes chosen per image.
inline std::pair<double, std::vector<std::vector<int>>> evaluate_reconstruction(
    const Mqvae<float>& vae, const Dataset& data) {
  NoGradGuard no_grad;
  double total = 0.0;
  std::vector<std::vector<int>> codes;
  for (const auto& img : data.images) {
    const auto fwd = vae.forward(img);
    total += double(fwd.recon_mse.item());
    codes.push_back(fwd.quant.codes);
  }
  return {data.size() ? total / double(data.size()) : 0.0, codes};
}

inline Stage1Result train_stage1(const Stage1Options& opt, const Dataset& data) {
  if (data.size() == 0) throw TrainingError("stage 1: empty training set");
  if (opt.batch == 0) throw TrainingError("stage 1: batch must be >= 1");
  if (data.resolution != opt.model.resolution || data.channels != opt.model.channels)
    throw TrainingError("stage 1: dataset images do not match the configured resolution/channels");

  Stage1Result res;
  res.model = init_vae(opt.model, opt.seed);
  auto params = res.model.parameters();
  AdamWConfig oc = opt.optim;
  oc.total_steps = opt.steps;
  AdamW<float> optim(params, oc);
  const std::size_t K = opt.model.codes;
  std::vector<bool> seen_all(K, false), seen_window(K, false);

  std::size_t start = 0;
  if (!opt.resume.empty()) {
    const auto ckpt = load_checkpoint(opt.resume);
    detail::check_digest(ckpt, "vae_digest", opt.digest, opt.resume);
    load_parameters(ckpt, params, "vae.");
    auto state = optim.state();
    load_parameters(ckpt, state, "optim.");
    start = detail::meta_size(ckpt, "step");
    optim.restore(state, start);
    const auto all = ckpt.get<float>("train.usage_seen");
    const auto win = ckpt.get<float>("train.usage_window");
    for (std::size_t k = 0; k < K; ++k) {
      seen_all[k] = all[k] > 0.5f;
      seen_window[k] = win[k] > 0.5f;
    }
  }

  const bool files = !opt.out_dir.empty();
  std::ofstream metrics, evals;
  if (files) {
    std::filesystem::create_directories(opt.out_dir);
    const bool append = start > 0;
    metrics = detail::open_csv(detail::join_path(opt.out_dir, "stage1_metrics.csv"),
                               "step,loss,recon_mse,commit_distance,usage", append);
    evals = detail::open_csv(detail::join_path(opt.out_dir, "stage1_eval.csv"),
                             "step,mse,usage_window,usage_cumulative", append);
  }

  const auto save = [&](std::size_t step, const std::string& name) {
    Checkpoint ckpt;
    ckpt.put_all(params);
    ckpt.put_all(optim.state());
    ckpt.put("train.usage_seen", detail::code_set_tensor(seen_all));
    ckpt.put("train.usage_window", detail::code_set_tensor(seen_window));
    ckpt.meta["stage"] = "1";
    ckpt.meta["step"] = std::to_string(step);
    ckpt.meta["seed"] = std::to_string(opt.seed);
    ckpt.meta["vae_digest"] = detail::hex64(opt.digest);
    const auto path = detail::join_path(opt.out_dir, name);
    save_checkpoint(path, ckpt);
    return path;
  };

  const auto dump = [&](std::size_t step) {
    NoGradGuard no_grad;
    const std::size_t n = std::min<std::size_t>(4, data.size());
    std::vector<Tensor> orig, recon;
    for (std::size_t i = 0; i < n; ++i) {
      orig.push_back(data.images[i]);
      recon.push_back(res.model.forward(data.images[i]).reconstruction);
    }
    std::filesystem::create_directories(detail::join_path(opt.out_dir, "recon"));
    write_image(detail::join_path(opt.out_dir, "recon/step" + std::to_string(step) + ".pgm"),
                detail::tile_pairs(orig, recon));
  };

  std::size_t step = start;
  while (step < opt.steps) {
    const auto idx = detail::batch_indices(data.size(), opt.batch, opt.seed, Stream::kBatch, step);
    const float inv = 1.0f / float(idx.size());
    optim.zero_grad();
    double loss = 0.0, mse = 0.0, commit = 0.0;
    std::vector<std::vector<int>> batch_codes;
    for (auto i : idx) {
      const auto fwd = res.model.forward(data.images[i]);
      const double l = double(fwd.loss.item());
      if (!std::isfinite(l))
        throw TrainingError("stage 1: non-finite loss at step " + std::to_string(step) + " on image " +
                            std::to_string(i) + " (recon_mse=" + std::to_string(fwd.recon_mse.item()) +
                            ", vq=" + std::to_string(fwd.vq.item()) + ")");
      scale(fwd.loss, inv).backward();
      loss += l;
      mse += double(fwd.recon_mse.item());
      commit += fwd.quant.commit_distance;
      for (int c : fwd.quant.codes) seen_all[c] = seen_window[c] = true;
      batch_codes.push_back(fwd.quant.codes);
    }
    const double gnorm = optim.step();
    if (!std::isfinite(gnorm))
      throw TrainingError("stage 1: non-finite gradient norm at step " + std::to_string(step));
    const double n = double(idx.size());
    const Stage1Step rec{step, loss / n, mse / n, commit / n, codebook_usage(batch_codes, K)};
    res.steps.push_back(rec);
    if (files)
      metrics << rec.step << ',' << rec.loss << ',' << rec.recon_mse << ',' << rec.commit_distance << ','
              << rec.usage << '\n';
    if (opt.log && opt.log_every && step % opt.log_every == 0) {
      std::ostringstream os;
      os << "stage1 step " << step << " loss " << rec.loss << " mse " << rec.recon_mse << " usage "
         << rec.usage << "%";
      opt.log(os.str());
    }
    ++step;

    bool stop = false;
    if ((opt.eval_every && step % opt.eval_every == 0) || step == opt.steps) {
      const auto [eval_mse, codes] = evaluate_reconstruction(res.model, data);
      (void)codes;
      const Stage1Eval ev{step, eval_mse, detail::percent(seen_window), detail::percent(seen_all)};
      res.evals.push_back(ev);
      std::fill(seen_window.begin(), seen_window.end(), false);
      if (files)
        evals << ev.step << ',' << ev.mse << ',' << ev.usage_window << ',' << ev.usage_cumulative << '\n';
      if (opt.log) {
        std::ostringstream os;
        os << "stage1 eval step " << step << " mse " << ev.mse << " usage " << ev.usage_cumulative << "%";
        opt.log(os.str());
      }
      stop = opt.target_mse > 0.0 && eval_mse < opt.target_mse;
    }
    if (files && opt.dump_every && step % opt.dump_every == 0) dump(step);
    if (files && opt.checkpoint_every && step % opt.checkpoint_every == 0 && step < opt.steps)
      save(step, "vae_step" + std::to_string(step) + ".ckpt");
    if (stop || (opt.stop_after && step >= opt.stop_after)) break;
  }
  res.final_step = step;
  if (files) {
    metrics.flush();
    evals.flush();
    if (opt.dump_every) dump(step);
    res.checkpoint = save(step, "vae.ckpt");
  }
  return res;
}

// encode -> adaptive mask -> quantize -> raster order, without gradients.
inline TokenPositionSequence extract_sequence(const Mqvae<float>& vae, const Tensor& image,
                                              const StackformerConfig& cfg,
                                              std::optional<std::size_t> class_id = std::nullopt) {
  NoGradGuard no_grad;
  const auto features = vae.encode(image);
  const auto sel = vae.adaptive_mask(features);
  const auto codes = nearest_codes(sel.kept_features, vae.codebook().embeddings);
  return make_sequence(rearrange(codes, sel.kept_positions), cfg, class_id);
}

inline std::vector<TokenPositionSequence> extract_sequences(const Mqvae<float>& vae, const Dataset& data,
                                                            const StackformerConfig& cfg) {
  std::vector<TokenPositionSequence> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::optional<std::size_t> cls;
    if (cfg.classes > 0) cls = static_cast<std::size_t>(data.labels.at(i));
    out.push_back(extract_sequence(vae, data.images[i], cfg, cls));
  }
  return out;
}

inline Stage2Eval evaluate_nll(const Stackformer<float>& model,
                               const std::vector<TokenPositionSequence>& seqs, std::size_t step = 0) {
  NoGradGuard no_grad;
  const auto l = model.losses(seqs);
  return {step, double(l.total.item()), double(l.code.item()), double(l.position.item())};
}

inline Stage2Result train_stage2(const Stage2Options& opt, const Mqvae<float>& vae, const Dataset& data) {
  if (data.size() == 0) throw TrainingError("stage 2: empty training set");
  if (opt.batch == 0) throw TrainingError("stage 2: batch must be >= 1");
  const auto& vc = vae.config();
  if (vc.codes != opt.model.codes || vc.positions() != opt.model.positions)
    throw ArchitectureMismatchError("stage 2: stage-1 model has K=" + std::to_string(vc.codes) + ", L=" +
                                    std::to_string(vc.positions()) + " but the Stackformer expects K=" +
                                    std::to_string(opt.model.codes) + ", L=" +
                                    std::to_string(opt.model.positions));

  Stage2Result res;
  res.sequences = extract_sequences(vae, data, opt.model);
  res.model = init_ar(opt.model, opt.seed);
  auto params = res.model.parameters();
  AdamWConfig oc = opt.optim;
  oc.total_steps = opt.steps;
  AdamW<float> optim(params, oc);

  std::size_t start = 0;
  if (!opt.resume.empty()) {
    const auto ckpt = load_checkpoint(opt.resume);
    detail::check_digest(ckpt, "ar_digest", opt.digest, opt.resume);
    detail::check_digest(ckpt, "vae_digest", opt.vae_digest, opt.resume);
    load_parameters(ckpt, params, "ar.");
    auto state = optim.state();
    load_parameters(ckpt, state, "optim.");
    start = detail::meta_size(ckpt, "step");
    optim.restore(state, start);
  }

  const bool files = !opt.out_dir.empty();
  std::ofstream metrics, evals;
  if (files) {
    std::filesystem::create_directories(opt.out_dir);
    metrics = detail::open_csv(detail::join_path(opt.out_dir, "stage2_metrics.csv"),
                               "step,loss,code_nll,position_nll,lr", start > 0);
    evals = detail::open_csv(detail::join_path(opt.out_dir, "stage2_eval.csv"),
                             "step,joint_nll,code_nll,position_nll", start > 0);
  }

  const auto save = [&](std::size_t step, const std::string& name) {
    Checkpoint ckpt;
    ckpt.put_all(params);
    ckpt.put_all(optim.state());
    ckpt.meta["stage"] = "2";
    ckpt.meta["step"] = std::to_string(step);
    ckpt.meta["seed"] = std::to_string(opt.seed);
    ckpt.meta["classes"] = std::to_string(opt.model.classes);
    ckpt.meta["ar_digest"] = detail::hex64(opt.digest);
    ckpt.meta["vae_digest"] = detail::hex64(opt.vae_digest);
    const auto path = detail::join_path(opt.out_dir, name);
    save_checkpoint(path, ckpt);
    return path;
  };

  std::size_t step = start;
  while (step < opt.steps) {
    const auto idx =
        detail::batch_indices(res.sequences.size(), opt.batch, opt.seed, Stream::kBatchStage2, step);
    std::vector<TokenPositionSequence> batch;
    for (auto i : idx) batch.push_back(res.sequences[i]);
    const double lr = optim.current_lr();
    optim.zero_grad();
    const auto l = res.model.losses(batch);
    const Stage2Step rec{step, double(l.total.item()), double(l.code.item()), double(l.position.item()), lr};
    if (!std::isfinite(rec.loss))
      throw TrainingError("stage 2: non-finite loss at step " + std::to_string(step) +
                          " (code_nll=" + std::to_string(rec.code_nll) +
                          ", position_nll=" + std::to_string(rec.position_nll) + ")");
    l.total.backward();
    optim.step();
    res.steps.push_back(rec);
    if (files)
      metrics << rec.step << ',' << rec.loss << ',' << rec.code_nll << ',' << rec.position_nll << ','
              << rec.lr << '\n';
    if (opt.log && opt.log_every && step % opt.log_every == 0) {
      std::ostringstream os;
      os << "stage2 step " << step << " code " << rec.code_nll << " position " << rec.position_nll;
      opt.log(os.str());
    }
    ++step;

    bool stop = false;
    if ((opt.eval_every && step % opt.eval_every == 0) || step == opt.steps) {
      const auto ev = evaluate_nll(res.model, res.sequences, step);
      res.evals.push_back(ev);
      if (files) evals << ev.step << ',' << ev.joint_nll << ',' << ev.code_nll << ',' << ev.position_nll << '\n';
      if (opt.log) {
        std::ostringstream os;
        os << "stage2 eval step " << step << " joint nll " << ev.joint_nll;
        opt.log(os.str());
      }
      stop = opt.target_nll > 0.0 && ev.joint_nll < opt.target_nll;
    }
    if (files && opt.checkpoint_every && step % opt.checkpoint_every == 0 && step < opt.steps)
      save(step, "ar_step" + std::to_string(step) + ".ckpt");
    if (stop || (opt.stop_after && step >= opt.stop_after)) break;
  }
  res.final_step = step;
  if (files) {
    metrics.flush();
    evals.flush();
    res.checkpoint = save(step, "ar.ckpt");
  }
  return res;
}

}  // namespace mqvq
