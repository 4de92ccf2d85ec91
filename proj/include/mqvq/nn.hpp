#pragma once

// Parameterized layers and the named-parameter registry shared by the
// optimizer and checkpointing.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mqvq/ops.hpp"
#include "mqvq/random.hpp"

namespace mqvq {

template <typename T>
struct NamedParameter {
  std::string name;
  BasicTensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

template <typename T>
BasicTensor<T> uniform_parameter(Shape shape, double bound, Rng& rng) {
  BasicTensor<T> t(std::move(shape), T(0), true);
  for (auto& v : t.mutable_values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
BasicTensor<T> normal_parameter(Shape shape, double stddev, Rng& rng) {
  BasicTensor<T> t(std::move(shape), T(0), true);
  for (auto& v : t.mutable_values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <typename T>
BasicTensor<T> constant_parameter(Shape shape, T value) {
  return BasicTensor<T>(std::move(shape), value, true);
}

template <typename T>
void zero_grads(ParameterList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

enum class Init { kFanIn, kNormal002 };

template <typename T>
struct Linear {
  BasicTensor<T> weight;  // [in x out]
  BasicTensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, Init init = Init::kFanIn,
         bool with_bias = true) {
    if (init == Init::kNormal002) {
      weight = normal_parameter<T>({in, out}, 0.02, rng);
    } else {
      weight = uniform_parameter<T>({in, out}, 1.0 / std::sqrt(double(in)), rng);
    }
    if (with_bias) bias = constant_parameter<T>({out}, T(0));
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return linear(x, weight, bias); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct LayerNorm {
  BasicTensor<T> gain, bias;
  T eps = T(1e-5);

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d)
      : gain(constant_parameter<T>({d}, T(1))), bias(constant_parameter<T>({d}, T(0))) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return layer_norm(x, gain, bias, eps);
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct Conv2d {
  BasicTensor<T> weight, bias;
  std::size_t stride = 1, padding = 0;

  Conv2d() = default;
  Conv2d(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride_,
         std::size_t padding_, Rng& rng)
      : stride(stride_), padding(padding_) {
    const double bound = 1.0 / std::sqrt(double(c_in * kernel * kernel));
    weight = uniform_parameter<T>({c_out, c_in, kernel, kernel}, bound, rng);
    bias = uniform_parameter<T>({c_out}, bound, rng);
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return conv2d(x, weight, bias, stride, padding);
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

// Largest group count <= 8 dividing the channel count.
inline std::size_t default_groups(std::size_t channels) {
  for (std::size_t g = std::min<std::size_t>(8, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

template <typename T>
struct GroupNorm {
  BasicTensor<T> gain, bias;
  std::size_t groups = 1;
  T eps = T(1e-5);

  GroupNorm() = default;
  explicit GroupNorm(std::size_t channels)
      : gain(constant_parameter<T>({channels}, T(1))),
        bias(constant_parameter<T>({channels}, T(0))),
        groups(default_groups(channels)) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return group_norm(x, groups, gain, bias, eps);
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

// norm -> swish -> conv3x3 -> norm -> swish -> conv3x3, plus identity skip.
template <typename T>
struct ResBlock {
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2;

  ResBlock() = default;
  ResBlock(std::size_t channels, Rng& rng)
      : norm1(channels),
        norm2(channels),
        conv1(channels, channels, 3, 1, 1, rng),
        conv2(channels, channels, 3, 1, 1, rng) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    auto h = conv1(silu(norm1(x)));
    h = conv2(silu(norm2(h)));
    return add(x, h);
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    norm1.collect(out, prefix + ".norm1");
    conv1.collect(out, prefix + ".conv1");
    norm2.collect(out, prefix + ".norm2");
    conv2.collect(out, prefix + ".conv2");
  }
};

}  // namespace mqvq
