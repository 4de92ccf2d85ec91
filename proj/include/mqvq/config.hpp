#pragma once

// Flat `key = value` run configuration. Every key has a default; unknown
// keys and unparsable values are errors that name the offending token.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mqvq/dataset.hpp"
#include "mqvq/mqvae.hpp"
#include "mqvq/optim.hpp"
#include "mqvq/sampler.hpp"
#include "mqvq/stackformer.hpp"

namespace mqvq {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string token, const std::string& message)
      : std::runtime_error(message), token_(std::move(token)) {}
  const std::string& token() const { return token_; }

 private:
  std::string token_;
};

enum class KeyType { kInt, kFloat, kBool, kString, kList };

struct ConfigKey {
  const char* name;
  KeyType type;
  const char* default_value;
  const char* doc;
  bool vae_arch;  // part of the stage-1 architecture digest
  bool ar_arch;   // part of the stage-2 architecture digest
};

inline const std::vector<ConfigKey>& config_keys() {
  using K = KeyType;
  static const std::vector<ConfigKey> keys = {
      {"seed", K::kInt, "0", "master seed for data, init, batch and sampling streams", false, false},
      {"out_dir", K::kString, "out", "every output file is written below this directory", false, false},

      {"data.source", K::kString, "synthetic", "synthetic | dir | tensor", false, false},
      {"data.path", K::kString, "", "image directory or packed tensor file", false, false},
      {"data.count", K::kInt, "8", "synthetic corpus size", false, false},
      {"data.resolution", K::kInt, "32", "image side length", true, true},
      {"data.channels", K::kInt, "1", "1 (grayscale) or 3 (RGB)", true, true},
      {"data.test_fraction", K::kFloat, "0", "fraction held out as the test split", false, false},

      {"vae.downsample", K::kInt, "8", "f: 4, 8 or 16", true, true},
      {"vae.widths", K::kList, "16,32,64", "encoder channel width per stride-2 stage", true, false},
      {"vae.n_z", K::kInt, "16", "code embedding dimension", true, false},
      {"vae.codes", K::kInt, "64", "K: codebook size", true, true},
      {"vae.alpha", K::kFloat, "0.75", "keep fraction; mask ratio is 1 - alpha", true, false},
      {"vae.beta", K::kFloat, "0.25", "commitment weight", false, false},
      {"vae.score_hidden", K::kInt, "0", "importance scorer hidden width, 0 = n_z", true, false},
      {"vae.sub_modules", K::kInt, "8", "H: de-mask sub-modules", true, false},
      {"vae.epsilon", K::kFloat, "0.02", "initial masked-key scale", true, false},
      {"vae.renormalize", K::kBool, "true", "renormalize attention rows after key scaling", true, false},

      {"train1.steps", K::kInt, "5000", "stage-1 optimizer steps", false, false},
      {"train1.batch", K::kInt, "8", "images per step (capped at the split size)", false, false},
      {"train1.lr", K::kFloat, "0.002", "peak learning rate", false, false},
      {"train1.warmup", K::kInt, "100", "linear warmup steps", false, false},
      {"train1.min_lr_ratio", K::kFloat, "0.1", "final lr as a fraction of the peak", false, false},
      {"train1.weight_decay", K::kFloat, "0", "decoupled weight decay on matrices", false, false},
      {"train1.clip_norm", K::kFloat, "1", "global gradient-norm clip, 0 disables", false, false},
      {"train1.eval_every", K::kInt, "250", "steps per evaluation window", false, false},
      {"train1.dump_every", K::kInt, "1000", "steps between reconstruction dumps, 0 disables", false, false},
      {"train1.checkpoint_every", K::kInt, "1000", "steps between checkpoints, 0 = final only", false, false},
      {"train1.target_mse", K::kFloat, "0", "stop once eval MSE falls below this, 0 disables", false, false},

      {"ar.code_layers", K::kInt, "4", "Code-Transformer blocks", false, true},
      {"ar.position_layers", K::kInt, "2", "Position-Transformer blocks", false, true},
      {"ar.width", K::kInt, "128", "model width d", false, true},
      {"ar.heads", K::kInt, "4", "attention heads", false, true},
      {"ar.ff_mult", K::kInt, "4", "feed-forward expansion", false, true},
      {"ar.conditional", K::kBool, "false", "prefix sequences with a class token", false, true},

      {"train2.steps", K::kInt, "3000", "stage-2 optimizer steps", false, false},
      {"train2.batch", K::kInt, "8", "sequences per step (capped at the split size)", false, false},
      {"train2.lr", K::kFloat, "0.001", "peak learning rate", false, false},
      {"train2.warmup", K::kInt, "100", "linear warmup steps", false, false},
      {"train2.min_lr_ratio", K::kFloat, "0.1", "final lr as a fraction of the peak", false, false},
      {"train2.weight_decay", K::kFloat, "0", "decoupled weight decay on matrices", false, false},
      {"train2.clip_norm", K::kFloat, "1", "global gradient-norm clip, 0 disables", false, false},
      {"train2.eval_every", K::kInt, "100", "steps between full-set NLL evaluations", false, false},
      {"train2.checkpoint_every", K::kInt, "1000", "steps between checkpoints, 0 = final only", false, false},
      {"train2.target_nll", K::kFloat, "0", "stop once joint NLL falls below this, 0 disables", false, false},

      {"sample.steps", K::kInt, "0", "pairs per sample, 0 = keep count N", false, false},
      {"sample.top_k", K::kInt, "0", "0 disables", false, false},
      {"sample.top_p", K::kFloat, "1", "1 disables", false, false},
      {"sample.temperature", K::kFloat, "1", "softmax temperature", false, false},
      {"sample.greedy", K::kBool, "false", "argmax decoding", false, false},
      {"sample.count", K::kInt, "1", "images per sample command", false, false},
  };
  return keys;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string canonical_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline bool parse_int(const std::string& s, long long& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

inline bool parse_double(const std::string& s, double& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
  }

  static const ConfigKey& key_info(const std::string& key) {
    for (const auto& k : config_keys())
      if (key == k.name) return k;
    throw ConfigError(key, "unknown config key '" + key + "'");
  }

  // Parses and canonicalizes; throws ConfigError naming the key.
  void set(const std::string& key, const std::string& raw) {
    const auto& info = key_info(key);
    const std::string v = detail::trim(raw);
    const auto bad = [&](const char* what) {
      return ConfigError(key, "config key '" + key + "': '" + v + "' is not " + what);
    };
    switch (info.type) {
      case KeyType::kInt: {
        long long i = 0;
        if (!detail::parse_int(v, i) || i < 0) throw bad("a non-negative integer");
        values_[key] = std::to_string(i);
        break;
      }
      case KeyType::kFloat: {
        double d = 0;
        if (!detail::parse_double(v, d) || !std::isfinite(d)) throw bad("a finite number");
        values_[key] = detail::canonical_double(d);
        break;
      }
      case KeyType::kBool:
        if (v == "true" || v == "1") {
          values_[key] = "true";
        } else if (v == "false" || v == "0") {
          values_[key] = "false";
        } else {
          throw bad("true/false");
        }
        break;
      case KeyType::kList: {
        std::vector<std::size_t> items;
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) {
          long long i = 0;
          if (!detail::parse_int(detail::trim(item), i) || i <= 0) throw bad("a comma-separated list of positive integers");
          items.push_back(static_cast<std::size_t>(i));
        }
        if (items.empty()) throw bad("a comma-separated list of positive integers");
        std::string canon;
        for (std::size_t i = 0; i < items.size(); ++i) canon += (i ? "," : "") + std::to_string(items[i]);
        values_[key] = canon;
        break;
      }
      case KeyType::kString:
        values_[key] = v;
        break;
    }
  }

  // "key=value"
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
      throw ConfigError(assignment, "override '" + assignment + "' is not of the form key=value");
    set(detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
  }

  void load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(path, "cannot open config file " + path);
    std::string line;
    for (std::size_t n = 1; std::getline(is, line); ++n) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(line, path + ":" + std::to_string(n) + ": expected key = value, got '" + line + "'");
      set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    }
  }

  const std::string& get(const std::string& key) const {
    key_info(key);
    return values_.at(key);
  }
  std::size_t get_size(const std::string& key) const { return std::stoull(get(key)); }
  std::uint64_t get_u64(const std::string& key) const { return std::stoull(get(key)); }
  double get_double(const std::string& key) const {
    double d = 0;
    detail::parse_double(get(key), d);
    return d;
  }
  bool get_bool(const std::string& key) const { return get(key) == "true"; }
  std::vector<std::size_t> get_list(const std::string& key) const {
    std::vector<std::size_t> out;
    std::stringstream ss(get(key));
    for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stoull(item));
    return out;
  }

  // "key = value" lines in registry order.
  std::string dump() const {
    std::ostringstream os;
    for (const auto& k : config_keys()) os << k.name << " = " << values_.at(k.name) << '\n';
    return os.str();
  }

  std::uint64_t vae_digest() const { return digest(true); }
  std::uint64_t ar_digest() const { return digest(false); }

  DatasetSpec data() const {
    DatasetSpec d;
    d.source = get("data.source");
    d.path = get("data.path");
    d.count = get_size("data.count");
    d.resolution = get_size("data.resolution");
    d.channels = get_size("data.channels");
    d.test_fraction = get_double("data.test_fraction");
    d.seed = get_u64("seed");
    return d;
  }

  MqvaeConfig vae() const {
    MqvaeConfig c;
    c.resolution = get_size("data.resolution");
    c.channels = get_size("data.channels");
    c.downsample = get_size("vae.downsample");
    c.widths = get_list("vae.widths");
    c.n_z = get_size("vae.n_z");
    c.codes = get_size("vae.codes");
    c.alpha = get_double("vae.alpha");
    c.beta = get_double("vae.beta");
    c.score_hidden = get_size("vae.score_hidden");
    c.demask.sub_modules = get_size("vae.sub_modules");
    c.demask.epsilon = get_double("vae.epsilon");
    c.demask.renormalize = get_bool("vae.renormalize");
    return c;
  }

  StackformerConfig ar(std::size_t classes) const {
    const auto v = vae();
    StackformerConfig c;
    c.code_layers = get_size("ar.code_layers");
    c.position_layers = get_size("ar.position_layers");
    c.width = get_size("ar.width");
    c.heads = get_size("ar.heads");
    c.ff_mult = get_size("ar.ff_mult");
    c.codes = v.codes;
    c.positions = v.positions();
    c.classes = get_bool("ar.conditional") ? classes : 0;
    return c;
  }

  AdamWConfig optim(const std::string& stage) const {
    AdamWConfig c;
    c.lr = get_double(stage + ".lr");
    c.warmup_steps = get_size(stage + ".warmup");
    c.total_steps = get_size(stage + ".steps");
    c.min_lr_ratio = get_double(stage + ".min_lr_ratio");
    c.weight_decay = get_double(stage + ".weight_decay");
    c.clip_norm = get_double(stage + ".clip_norm");
    return c;
  }

  SamplerConfig sampler() const {
    SamplerConfig s;
    const auto v = vae();
    s.steps = get_size("sample.steps");
    if (s.steps == 0) s.steps = keep_count(v.alpha, v.positions());
    s.top_k = get_size("sample.top_k");
    s.top_p = get_double("sample.top_p");
    s.temperature = get_double("sample.temperature");
    s.greedy = get_bool("sample.greedy");
    s.seed = derive_seed(get_u64("seed"), Stream::kSample);
    return s;
  }

 private:
  std::uint64_t digest(bool vae_keys) const {
    std::string text;
    for (const auto& k : config_keys())
      if (vae_keys ? k.vae_arch : k.ar_arch) text += std::string(k.name) + "=" + values_.at(k.name) + "\n";
    return detail::fnv1a(text);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace mqvq
