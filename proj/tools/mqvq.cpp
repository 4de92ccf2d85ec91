// mqvq: command-line front end for data generation, both training stages,
// reconstruction, sampling and evaluation.
//
// Exit codes: 0 success, 1 usage error (offending token named), 2 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "mqvq/mqvq.hpp"

namespace fs = std::filesystem;
using namespace mqvq;

namespace {

struct UsageError : std::runtime_error {
  std::string token;
  UsageError(std::string tok, const std::string& msg) : std::runtime_error(msg), token(std::move(tok)) {}
};

struct Globals {
  std::string config_file;
  std::vector<std::string> overrides;
  std::size_t log_every = 50;
};

RunConfig build_config(const Globals& g) {
  RunConfig cfg;
  if (!g.config_file.empty()) cfg.load_file(g.config_file);
  for (const auto& o : g.overrides) cfg.apply_override(o);
  return cfg;
}

std::string out_path(const RunConfig& cfg, const std::string& rel) {
  const fs::path p = fs::path(cfg.get("out_dir")) / rel;
  fs::create_directories(p.parent_path());
  return p.string();
}

std::string or_default(const std::string& given, const RunConfig& cfg, const std::string& name) {
  return given.empty() ? (fs::path(cfg.get("out_dir")) / name).string() : given;
}

void print_line(const std::string& s) { std::cout << s << '\n' << std::flush; }

std::pair<Dataset, Dataset> load_split(const RunConfig& cfg) {
  const auto spec = cfg.data();
  return split_dataset(load_dataset(spec), spec.test_fraction, spec.seed);
}

const char* shape_name(int label) {
  switch (label) {
    case 0: return "0_rectangle";
    case 1: return "1_ellipse";
    default: return "2_line";
  }
}

int cmd_gen_data(const RunConfig& cfg) {
  const auto spec = cfg.data();
  if (spec.source != "synthetic") throw UsageError("data.source", "gen-data needs data.source=synthetic");
  const auto ds = generate_synthetic(spec.count, spec.resolution, spec.seed, spec.channels);
  const char* ext = spec.channels == 3 ? ".ppm" : ".pgm";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::ostringstream name;
    name << "data/" << shape_name(ds.labels[i]) << "/img_" << std::setw(5) << std::setfill('0') << i << ext;
    write_image(out_path(cfg, name.str()), ds.images[i]);
  }
  save_tensor_file(out_path(cfg, "data.tensor"), ds);
  print_line("wrote " + std::to_string(ds.size()) + " images under " + out_path(cfg, "data") +
             " and data.tensor");
  return 0;
}

int cmd_train_vae(const RunConfig& cfg, const Globals& g, const std::string& resume, std::size_t stop_after) {
  const auto [train, test] = load_split(cfg);
  auto opt = stage1_options(cfg);
  opt.resume = resume;
  opt.stop_after = stop_after;
  opt.log_every = g.log_every;
  opt.log = print_line;
  fs::create_directories(opt.out_dir);
  std::ofstream(out_path(cfg, "config.txt")) << cfg.dump();
  const auto res = train_stage1(opt, train);
  if (test.size() > 0) {
    const auto [mse, codes] = evaluate_reconstruction(res.model, test);
    print_line("held-out mse " + std::to_string(mse));
  }
  print_line("stage 1 finished at step " + std::to_string(res.final_step) + ", checkpoint " + res.checkpoint);
  return 0;
}

int cmd_train_ar(const RunConfig& cfg, const Globals& g, const std::string& vae_path,
                 const std::string& resume, std::size_t stop_after) {
  const auto [train, test] = load_split(cfg);
  const auto vae = load_vae(cfg, or_default(vae_path, cfg, "vae.ckpt"));
  auto opt = stage2_options(cfg, train.classes);
  opt.resume = resume;
  opt.stop_after = stop_after;
  opt.log_every = g.log_every;
  opt.log = print_line;
  const auto res = train_stage2(opt, vae, train);
  print_line("stage 2 finished at step " + std::to_string(res.final_step) + ", checkpoint " + res.checkpoint);
  return 0;
}

int cmd_reconstruct(const RunConfig& cfg, const std::string& vae_path, const std::string& input) {
  const auto vae = load_vae(cfg, or_default(vae_path, cfg, "vae.ckpt"));
  const auto& mc = vae.config();
  Tensor img;
  try {
    img = detail::convert_channels(read_image<float>(input), mc.channels);
  } catch (const ImageFormatError& e) {
    throw UsageError(input, e.what());
  }
  if (img.dim(1) != mc.resolution || img.dim(2) != mc.resolution)
    throw UsageError(input, input + " is not " + std::to_string(mc.resolution) + "x" +
                                std::to_string(mc.resolution));
  NoGradGuard no_grad;
  const auto fwd = vae.forward(img);
  const std::string stem = fs::path(input).stem().string();
  write_image(out_path(cfg, "reconstruct/" + stem + "_recon" + fs::path(input).extension().string()),
              fwd.reconstruction);
  const std::size_t grid = mc.resolution / mc.downsample;
  write_heatmap(out_path(cfg, "reconstruct/" + stem + "_heatmap.pgm"), fwd.selection.scores.values(), grid,
                mc.downsample);
  // Kept regions in black-and-white: white where a feature survived the mask.
  std::vector<float> kept(grid * grid, 0.0f);
  for (int p : fwd.selection.kept_positions) kept[static_cast<std::size_t>(p)] = 1.0f;
  write_heatmap(out_path(cfg, "reconstruct/" + stem + "_mask.pgm"), std::span<const float>(kept), grid,
                mc.downsample);
  print_line("mse " + std::to_string(double(fwd.recon_mse.item())) + ", kept " +
             std::to_string(fwd.selection.kept_positions.size()) + "/" + std::to_string(grid * grid));
  return 0;
}

struct SampleArgs {
  std::string vae, ar;
  bool sequences = false;
  std::optional<std::size_t> class_id, top_k, steps, count;
  std::optional<double> top_p, temperature;
  std::optional<std::uint64_t> seed;
  bool greedy = false;
};

int cmd_sample(RunConfig cfg, const SampleArgs& a) {
  if (a.top_k) cfg.set("sample.top_k", std::to_string(*a.top_k));
  if (a.top_p) cfg.set("sample.top_p", detail::canonical_double(*a.top_p));
  if (a.temperature) cfg.set("sample.temperature", detail::canonical_double(*a.temperature));
  if (a.steps) cfg.set("sample.steps", std::to_string(*a.steps));
  if (a.count) cfg.set("sample.count", std::to_string(*a.count));
  if (a.greedy) cfg.set("sample.greedy", "true");
  auto sc = cfg.sampler();
  try {
    sc.validate(cfg.vae().positions());
  } catch (const std::invalid_argument& e) {
    throw UsageError("sample", e.what());
  }
  const auto vae = load_vae(cfg, or_default(a.vae, cfg, "vae.ckpt"));
  const auto ar = load_ar(cfg, or_default(a.ar, cfg, "ar.ckpt"));
  if (a.class_id && *a.class_id >= ar.config().classes)
    throw UsageError("--class-id", "--class-id " + std::to_string(*a.class_id) + " but the model has " +
                                       std::to_string(ar.config().classes) + " classes");
  const std::uint64_t base = a.seed ? derive_seed(*a.seed, Stream::kSample) : sc.seed;
  const std::size_t count = cfg.get_size("sample.count");
  for (std::size_t i = 0; i < count; ++i) {
    sc.seed = derive_seed(base, i);
    const auto r = sample(ar, vae, sc, a.class_id);
    std::ostringstream stem;
    stem << "samples/sample_" << std::setw(4) << std::setfill('0') << i;
    write_image(out_path(cfg, stem.str() + (vae.config().channels == 3 ? ".ppm" : ".pgm")), r.image);
    if (a.sequences) {
      std::ofstream csv(out_path(cfg, stem.str() + ".csv"));
      csv << "step,code,position\n";
      const auto codes = r.sequence.payload_codes();
      const auto pos = r.sequence.payload_positions();
      for (std::size_t s = 0; s < codes.size(); ++s) csv << s << ',' << codes[s] << ',' << pos[s] << '\n';
    }
  }
  print_line("wrote " + std::to_string(count) + " samples under " + out_path(cfg, "samples"));
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& vae_path, const std::string& split) {
  const auto [train, test] = load_split(cfg);
  const Dataset* ds = nullptr;
  if (split == "train") {
    ds = &train;
  } else if (split == "test") {
    ds = &test;
  } else {
    throw UsageError(split, "--split must be train or test, got '" + split + "'");
  }
  if (ds->size() == 0) throw UsageError(split, "split '" + split + "' is empty (see data.test_fraction)");
  const auto vae = load_vae(cfg, or_default(vae_path, cfg, "vae.ckpt"));
  const auto [mse, codes] = evaluate_reconstruction(vae, *ds);
  const double usage = codebook_usage(codes, vae.config().codes);
  write_pca_csv(out_path(cfg, "eval/codebook_pca.csv"), codebook_pca(vae.codebook()));
  std::ofstream os(out_path(cfg, "eval/eval_" + split + ".csv"));
  os << "split,images,mse,usage\n" << split << ',' << ds->size() << ',' << mse << ',' << usage << '\n';
  print_line(split + ": " + std::to_string(ds->size()) + " images, mse " + std::to_string(mse) +
             ", codebook usage " + std::to_string(usage) + "%");
  return 0;
}

int cmd_show_config(const RunConfig& cfg) {
  for (const auto& k : config_keys())
    std::cout << k.name << " = " << cfg.get(k.name) << "    # " << k.doc << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked vector-quantized image generator"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_file, "key = value config file");
  app.add_option("--set", g.overrides, "override, key=value (repeatable)");
  app.add_option("--log-every", g.log_every, "training log interval in steps (0 = quiet)");

  auto* gen = app.add_subcommand("gen-data", "write the synthetic corpus under out_dir/data");

  std::string resume;
  std::size_t stop_after = 0;
  auto* tv = app.add_subcommand("train-vae", "train the stage-1 autoencoder");
  tv->add_option("--resume", resume, "checkpoint to continue from");
  tv->add_option("--stop-after", stop_after, "checkpoint and exit at this step");

  std::string vae_path, ar_path;
  auto* ta = app.add_subcommand("train-ar", "train the stage-2 transformer on a frozen autoencoder");
  ta->add_option("--vae", vae_path, "stage-1 checkpoint (default out_dir/vae.ckpt)");
  ta->add_option("--resume", resume, "checkpoint to continue from");
  ta->add_option("--stop-after", stop_after, "checkpoint and exit at this step");

  std::string input;
  auto* rc = app.add_subcommand("reconstruct", "reconstruct an image and write its importance heatmap");
  rc->add_option("input", input, "PGM/PPM image")->required();
  rc->add_option("--vae", vae_path, "stage-1 checkpoint (default out_dir/vae.ckpt)");

  SampleArgs sa;
  auto* sm = app.add_subcommand("sample", "generate images from both checkpoints");
  sm->add_option("--vae", sa.vae, "stage-1 checkpoint (default out_dir/vae.ckpt)");
  sm->add_option("--ar", sa.ar, "stage-2 checkpoint (default out_dir/ar.ckpt)");
  sm->add_option("--class-id", sa.class_id, "class to condition on");
  sm->add_option("--top-k", sa.top_k, "keep the k most likely tokens (0 = off)");
  sm->add_option("--top-p", sa.top_p, "nucleus mass (1 = off)");
  sm->add_option("--temperature", sa.temperature, "logit temperature");
  sm->add_flag("--greedy", sa.greedy, "argmax decoding");
  sm->add_option("--seed", sa.seed, "sampling seed");
  sm->add_option("--count", sa.count, "number of images");
  sm->add_option("--steps", sa.steps, "tokens per image (default: the training keep count)");
  sm->add_flag("--sequences", sa.sequences, "also write each sampled (code, position) sequence as CSV");

  std::string split = "test";
  auto* ev = app.add_subcommand("eval", "codebook usage, reconstruction MSE and codebook PCA");
  ev->add_option("--vae", vae_path, "stage-1 checkpoint (default out_dir/vae.ckpt)");
  ev->add_option("--split", split, "train or test");

  auto* sc = app.add_subcommand("show-config", "print every config key with its value and meaning");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what();
    const auto extra = app.remaining();
    if (!extra.empty()) std::cerr << " [" << extra.front() << "]";
    std::cerr << '\n';
    return 1;
  }

  try {
    const auto cfg = build_config(g);
    if (gen->parsed()) return cmd_gen_data(cfg);
    if (tv->parsed()) return cmd_train_vae(cfg, g, resume, stop_after);
    if (ta->parsed()) return cmd_train_ar(cfg, g, vae_path, resume, stop_after);
    if (rc->parsed()) return cmd_reconstruct(cfg, vae_path, input);
    if (sm->parsed()) return cmd_sample(cfg, sa);
    if (ev->parsed()) return cmd_eval(cfg, vae_path, split);
    if (sc->parsed()) return cmd_show_config(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << " [" << e.token() << "]\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << " [" << e.token << "]\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
