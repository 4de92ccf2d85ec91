#pragma once

// Binary PGM (P5) / PPM (P6) with maxval 255. In memory an image is a
// [C x H x W] tensor with values in [-1, 1].

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mqvq/tensor.hpp"

namespace mqvq {

class ImageFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline unsigned char to_byte(double v) {
  const double s = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<unsigned char>(s);
}

inline double from_byte(unsigned char b) { return double(b) / 127.5 - 1.0; }

namespace detail {

inline std::size_t read_header_int(std::istream& is, const std::string& path) {
  int c = is.get();
  while (is && (std::isspace(c) || c == '#')) {
    if (c == '#')
      while (is && c != '\n') c = is.get();
    c = is.get();
  }
  if (!is || !std::isdigit(c)) throw ImageFormatError(path + ": malformed header");
  std::size_t v = 0;
  while (is && std::isdigit(c)) {
    v = v * 10 + static_cast<std::size_t>(c - '0');
    c = is.get();
  }
  return v;  // the single whitespace after the number is consumed
}

}  // namespace detail

template <typename T = float>
BasicTensor<T> read_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageFormatError("cannot open " + path);
  char magic[2] = {0, 0};
  is.read(magic, 2);
  if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw ImageFormatError(path + ": not a binary PGM/PPM file");
  const std::size_t channels = magic[1] == '5' ? 1 : 3;
  const std::size_t w = detail::read_header_int(is, path);
  const std::size_t h = detail::read_header_int(is, path);
  const std::size_t maxval = detail::read_header_int(is, path);
  if (maxval != 255) throw ImageFormatError(path + ": only maxval 255 is supported");
  std::vector<unsigned char> raw(w * h * channels);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size())
    throw ImageFormatError(path + ": truncated pixel data");
  std::vector<T> v(raw.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        v[(c * h + y) * w + x] = static_cast<T>(from_byte(raw[(y * w + x) * channels + c]));
  return BasicTensor<T>({channels, h, w}, std::move(v));
}

template <typename T>
void write_image(const std::string& path, const BasicTensor<T>& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw ImageFormatError("write_image: expected [1|3 x H x W], got " + shape_str(img.shape()));
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ImageFormatError("cannot open " + path + " for writing");
  os << (c == 1 ? "P5" : "P6") << '\n' << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> raw(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        raw[(y * w + x) * c + ch] = to_byte(double(img[(ch * h + y) * w + x]));
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw ImageFormatError("write failed: " + path);
}

// Min-max normalized grid of scores, each cell enlarged to `cell` pixels.
template <typename T>
void write_heatmap(const std::string& path, std::span<const T> scores, std::size_t grid,
                   std::size_t cell) {
  if (scores.size() != grid * grid) throw ImageFormatError("write_heatmap: score count mismatch");
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = double(*lo_it), hi = double(*hi_it);
  const std::size_t side = grid * cell;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ImageFormatError("cannot open " + path + " for writing");
  os << "P5\n" << side << ' ' << side << "\n255\n";
  std::vector<unsigned char> raw(side * side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double s = double(scores[(y / cell) * grid + x / cell]);
      const double u = hi > lo ? (s - lo) / (hi - lo) : 0.0;
      raw[y * side + x] = static_cast<unsigned char>(std::lround(u * 255.0));
    }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

}  // namespace mqvq
