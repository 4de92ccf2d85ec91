#pragma once

// Image corpora: a seeded synthetic-shapes generator, PGM/PPM directories,
// and packed tensor files.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mqvq/checkpoint.hpp"
#include "mqvq/image_io.hpp"
#include "mqvq/random.hpp"

namespace mqvq {

struct Dataset {
  std::vector<Tensor> images;  // each [C x R x R], values in [-1, 1]
  std::vector<int> labels;
  // Per-pixel foreground flags (synthetic source only).
  std::vector<std::vector<unsigned char>> foreground;
  std::size_t channels = 1;
  std::size_t resolution = 32;
  std::size_t classes = 0;

  std::size_t size() const { return images.size(); }
};

struct DatasetSpec {
  std::string source = "synthetic";  // synthetic | dir | tensor
  std::string path;
  std::size_t count = 8;
  std::size_t resolution = 32;
  std::size_t channels = 1;
  double test_fraction = 0.0;
  std::uint64_t seed = 0;
};

enum class ShapeKind { kRectangle = 0, kEllipse = 1, kLine = 2 };
inline constexpr std::size_t kSyntheticClasses = 3;

// Flat background with 1-3 rectangles, ellipses or thick lines in colours at
// least 0.5 away from the background. The label is the first shape's kind.
inline Dataset generate_synthetic(std::size_t count, std::size_t resolution, std::uint64_t seed,
                                  std::size_t channels = 1) {
  if (count == 0) throw std::invalid_argument("generate_synthetic: count must be >= 1");
  if (resolution < 8) throw std::invalid_argument("generate_synthetic: resolution must be >= 8");
  if (channels != 1 && channels != 3) throw std::invalid_argument("generate_synthetic: channels must be 1 or 3");
  Rng rng(derive_seed(seed, Stream::kData));
  Dataset ds;
  ds.channels = channels;
  ds.resolution = resolution;
  ds.classes = kSyntheticClasses;
  const double r = double(resolution);
  for (std::size_t n = 0; n < count; ++n) {
    std::vector<double> bg(channels);
    for (auto& b : bg) b = rng.uniform(-0.9, 0.9);
    std::vector<float> px(channels * resolution * resolution);
    for (std::size_t c = 0; c < channels; ++c)
      std::fill_n(px.begin() + c * resolution * resolution, resolution * resolution, float(bg[c]));
    std::vector<unsigned char> fg(resolution * resolution, 0);
    const std::size_t shapes = 1 + rng.index(3);
    int label = 0;
    for (std::size_t s = 0; s < shapes; ++s) {
      const auto kind = static_cast<ShapeKind>(rng.index(3));
      if (s == 0) label = static_cast<int>(kind);
      std::vector<double> colour(channels);
      for (std::size_t c = 0; c < channels; ++c) {
        const double delta = rng.uniform(0.5, 1.0);
        colour[c] = bg[c] + delta <= 1.0 ? bg[c] + delta : bg[c] - delta;
      }
      // Shape geometry in pixel units.
      const double cx = rng.uniform(0.2 * r, 0.8 * r), cy = rng.uniform(0.2 * r, 0.8 * r);
      const double a = rng.uniform(r / 8.0, r / 3.5), b = rng.uniform(r / 8.0, r / 3.5);
      const double x1 = rng.uniform(0.0, r), y1 = rng.uniform(0.0, r);
      const double x2 = rng.uniform(0.0, r), y2 = rng.uniform(0.0, r);
      for (std::size_t y = 0; y < resolution; ++y)
        for (std::size_t x = 0; x < resolution; ++x) {
          const double px_x = double(x) + 0.5, px_y = double(y) + 0.5;
          bool inside = false;
          switch (kind) {
            case ShapeKind::kRectangle:
              inside = std::abs(px_x - cx) <= a && std::abs(px_y - cy) <= b;
              break;
            case ShapeKind::kEllipse: {
              const double u = (px_x - cx) / a, v = (px_y - cy) / b;
              inside = u * u + v * v <= 1.0;
              break;
            }
            case ShapeKind::kLine: {
              const double dx = x2 - x1, dy = y2 - y1;
              const double len2 = std::max(dx * dx + dy * dy, 1e-9);
              const double t = std::clamp(((px_x - x1) * dx + (px_y - y1) * dy) / len2, 0.0, 1.0);
              const double ex = x1 + t * dx - px_x, ey = y1 + t * dy - px_y;
              inside = ex * ex + ey * ey <= 1.2 * 1.2;
              break;
            }
          }
          if (!inside) continue;
          fg[y * resolution + x] = 1;
          for (std::size_t c = 0; c < channels; ++c)
            px[(c * resolution + y) * resolution + x] = float(colour[c]);
        }
    }
    ds.images.emplace_back(Shape{channels, resolution, resolution}, std::move(px));
    ds.labels.push_back(label);
    ds.foreground.push_back(std::move(fg));
  }
  return ds;
}

namespace detail {

inline Tensor convert_channels(const Tensor& img, std::size_t channels) {
  if (img.dim(0) == channels) return img;
  const std::size_t hw = img.dim(1) * img.dim(2);
  if (channels == 1) {
    std::vector<float> g(hw);
    for (std::size_t i = 0; i < hw; ++i) g[i] = (img[i] + img[hw + i] + img[2 * hw + i]) / 3.0f;
    return Tensor({1, img.dim(1), img.dim(2)}, std::move(g));
  }
  std::vector<float> rgb(3 * hw);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) rgb[c * hw + i] = img[i];
  return Tensor({3, img.dim(1), img.dim(2)}, std::move(rgb));
}

inline std::vector<std::filesystem::path> image_files(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace detail

// Images directly in `path` are class 0; if `path` has subdirectories, each
// (sorted by name) is one class.
inline Dataset load_image_directory(const std::string& path, std::size_t resolution,
                                    std::size_t channels) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(path)) throw std::runtime_error("dataset: " + path + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  Dataset ds;
  ds.channels = channels;
  ds.resolution = resolution;
  const auto add_files = [&](const fs::path& dir, int label) {
    for (const auto& f : detail::image_files(dir)) {
      auto img = detail::convert_channels(read_image<float>(f.string()), channels);
      if (img.dim(1) != resolution || img.dim(2) != resolution)
        throw std::runtime_error("dataset: " + f.string() + " is " + std::to_string(img.dim(2)) +
                                 "x" + std::to_string(img.dim(1)) + ", expected " +
                                 std::to_string(resolution) + "x" + std::to_string(resolution));
      ds.images.push_back(std::move(img));
      ds.labels.push_back(label);
    }
  };
  if (dirs.empty()) {
    add_files(path, 0);
    ds.classes = 1;
  } else {
    for (std::size_t i = 0; i < dirs.size(); ++i) add_files(dirs[i], static_cast<int>(i));
    ds.classes = dirs.size();
  }
  if (ds.images.empty()) throw std::runtime_error("dataset: no .pgm/.ppm files under " + path);
  return ds;
}

// Packed corpus: tensor "images" [n x C x R x R] and optional "labels" [n].
inline void save_tensor_file(const std::string& path, const Dataset& ds) {
  std::vector<float> all;
  for (const auto& img : ds.images) all.insert(all.end(), img.values().begin(), img.values().end());
  Checkpoint ckpt;
  ckpt.put("images", Tensor({ds.size(), ds.channels, ds.resolution, ds.resolution}, std::move(all)));
  std::vector<float> labels(ds.labels.begin(), ds.labels.end());
  ckpt.put("labels", Tensor({ds.size()}, std::move(labels)));
  ckpt.meta["classes"] = std::to_string(ds.classes);
  save_checkpoint(path, ckpt);
}

inline Dataset load_tensor_file(const std::string& path) {
  const auto ckpt = load_checkpoint(path);
  const auto images = ckpt.get<float>("images");
  if (images.rank() != 4 || images.dim(2) != images.dim(3))
    throw std::runtime_error("dataset: images tensor must be [n x C x R x R]");
  Dataset ds;
  ds.channels = images.dim(1);
  ds.resolution = images.dim(2);
  const std::size_t per = ds.channels * ds.resolution * ds.resolution;
  for (std::size_t i = 0; i < images.dim(0); ++i) {
    std::vector<float> v(images.values().begin() + i * per, images.values().begin() + (i + 1) * per);
    ds.images.emplace_back(Shape{ds.channels, ds.resolution, ds.resolution}, std::move(v));
  }
  if (const auto* l = ckpt.find("labels")) {
    for (double v : l->data) ds.labels.push_back(static_cast<int>(v));
  } else {
    ds.labels.assign(ds.size(), 0);
  }
  const auto it = ckpt.meta.find("classes");
  ds.classes = it != ckpt.meta.end() ? std::stoul(it->second) : 1;
  return ds;
}

inline Dataset load_dataset(const DatasetSpec& spec) {
  Dataset ds;
  if (spec.source == "synthetic") {
    ds = generate_synthetic(spec.count, spec.resolution, spec.seed, spec.channels);
  } else if (spec.source == "dir") {
    ds = load_image_directory(spec.path, spec.resolution, spec.channels);
  } else if (spec.source == "tensor") {
    ds = load_tensor_file(spec.path);
    if (ds.resolution != spec.resolution || ds.channels != spec.channels)
      throw std::runtime_error("dataset: tensor file does not match configured resolution/channels");
  } else {
    throw std::invalid_argument("dataset: unknown source '" + spec.source + "'");
  }
  return ds;
}

// Deterministic train/test partition; test takes round(fraction * n) images.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double test_fraction,
                                                 std::uint64_t seed) {
  if (test_fraction < 0.0 || test_fraction >= 1.0)
    throw std::invalid_argument("dataset: test fraction must lie in [0, 1)");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, Stream::kSplit));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * double(ds.size())));
  std::pair<Dataset, Dataset> out;
  for (auto* part : {&out.first, &out.second}) {
    part->channels = ds.channels;
    part->resolution = ds.resolution;
    part->classes = ds.classes;
  }
  std::vector<std::size_t> train_idx(order.begin() + static_cast<long>(n_test), order.end());
  std::vector<std::size_t> test_idx(order.begin(), order.begin() + static_cast<long>(n_test));
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  const auto copy = [&](Dataset& dst, const std::vector<std::size_t>& idx) {
    for (auto i : idx) {
      dst.images.push_back(ds.images[i]);
      dst.labels.push_back(ds.labels[i]);
      if (!ds.foreground.empty()) dst.foreground.push_back(ds.foreground[i]);
    }
  };
  copy(out.first, train_idx);
  copy(out.second, test_idx);
  return out;
}

}  // namespace mqvq
