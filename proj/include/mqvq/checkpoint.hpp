#pragma once

// Named-tensor checkpoint file.
//
//   "MQVQCKPT"                 8 bytes
//   version                    u32
//   tensor count               u32
//   per tensor:
//     name length u32, UTF-8 name
//     dtype u8 (0 = f32, 1 = f64), rank u8, dims u64 * rank
//     payload, little-endian
//   metadata block length u32, UTF-8 "key=value\n" lines
//
// All integers little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mqvq/nn.hpp"

namespace mqvq {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class ArchitectureMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

inline constexpr char kCheckpointMagic[8] = {'M', 'Q', 'V', 'Q', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<double> data;  // widened; narrowed back on f32 write/read
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<StoredTensor> tensors;
  std::map<std::string, std::string> meta;

  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  template <typename T>
  void put(const std::string& name, const BasicTensor<T>& t) {
    StoredTensor s;
    s.name = name;
    s.dtype = sizeof(T) == 4 ? DType::kF32 : DType::kF64;
    s.shape = t.shape();
    s.data.assign(t.values().begin(), t.values().end());
    tensors.push_back(std::move(s));
  }

  template <typename T>
  void put_all(const ParameterList<T>& params) {
    for (const auto& p : params) put(p.name, p.tensor);
  }

  template <typename T>
  BasicTensor<T> get(const std::string& name) const {
    const auto* s = find(name);
    if (!s) throw ArchitectureMismatchError("checkpoint: missing tensor " + name);
    std::vector<T> v(s->data.begin(), s->data.end());
    return BasicTensor<T>(s->shape, std::move(v));
  }
};

namespace detail {

template <typename U>
void write_le(std::ostream& os, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i)
    os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : buf_(std::move(bytes)) {}

  const char* take(std::size_t n, const char* what) {
    if (n > buf_.size() - pos_)
      throw TruncatedError(std::string("checkpoint truncated while reading ") + what);
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }

  template <typename U>
  U read_le(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(sizeof(U), what));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return static_cast<U>(v);
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 8);
  detail::write_le<std::uint32_t>(os, ckpt.version);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype));
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) detail::write_le<std::uint64_t>(os, d);
    for (double v : t.data) {
      if (t.dtype == DType::kF32) {
        detail::write_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        detail::write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  std::ostringstream meta;
  for (const auto& [k, v] : ckpt.meta) meta << k << '=' << v << '\n';
  const std::string block = meta.str();
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(block.size()));
  os.write(block.data(), static_cast<std::streamsize>(block.size()));
  if (!os) throw CheckpointError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path);
  detail::Reader r(std::string(std::istreambuf_iterator<char>(is), {}));
  const char* magic = r.take(8, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw BadMagicError(path + " is not a checkpoint (bad magic)");
  Checkpoint ckpt;
  ckpt.version = r.read_le<std::uint32_t>("version");
  if (ckpt.version != kCheckpointVersion)
    throw VersionMismatchError("checkpoint version " + std::to_string(ckpt.version) +
                               ", expected " + std::to_string(kCheckpointVersion));
  const auto count = r.read_le<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const auto name_len = r.read_le<std::uint32_t>("name length");
    t.name.assign(r.take(name_len, "name"), name_len);
    const auto dtype = r.read_le<std::uint8_t>("dtype");
    if (dtype > 1) throw CheckpointError("checkpoint: unknown dtype for " + t.name);
    t.dtype = static_cast<DType>(dtype);
    const auto rank = r.read_le<std::uint8_t>("rank");
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(r.read_le<std::uint64_t>("dims"));
    const std::size_t n = numel(t.shape);
    t.data.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      if (t.dtype == DType::kF32) {
        t.data[j] = std::bit_cast<float>(r.read_le<std::uint32_t>("payload"));
      } else {
        t.data[j] = std::bit_cast<double>(r.read_le<std::uint64_t>("payload"));
      }
    }
    ckpt.tensors.push_back(std::move(t));
  }
  const auto meta_len = r.read_le<std::uint32_t>("metadata length");
  std::istringstream meta(std::string(r.take(meta_len, "metadata"), meta_len));
  for (std::string line; std::getline(meta, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("checkpoint: malformed metadata line");
    ckpt.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return ckpt;
}

// Copies stored values into `params`. Every parameter must be present with
// the same shape, and every stored tensor under `prefix` must belong to the
// model.
template <typename T>
void load_parameters(const Checkpoint& ckpt, ParameterList<T>& params, const std::string& prefix) {
  for (auto& p : params) {
    const auto* s = ckpt.find(p.name);
    if (!s) throw ArchitectureMismatchError("checkpoint: missing tensor " + p.name);
    if (s->shape != p.tensor.shape())
      throw ArchitectureMismatchError("checkpoint: tensor " + p.name + " has shape " +
                                      shape_str(s->shape) + ", model expects " +
                                      shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(s->data[i]);
  }
  for (const auto& s : ckpt.tensors) {
    if (s.name.rfind(prefix, 0) != 0) continue;
    bool known = false;
    for (const auto& p : params) known = known || p.name == s.name;
    if (!known) throw ArchitectureMismatchError("checkpoint: unknown tensor " + s.name);
  }
}

}  // namespace mqvq
