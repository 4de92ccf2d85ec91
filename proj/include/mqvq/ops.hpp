#pragma once

// Differentiable operations over BasicTensor. Shapes are checked strictly;
// the only broadcasts are the ones named in the function (add_bias,
// mul_rows, the column scale of masked_attention).

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mqvq/kernels.hpp"
#include "mqvq/tensor.hpp"

namespace mqvq {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
void require_same_shape(const char* op, const BasicTensor<T>& a,
                        const BasicTensor<T>& b) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

template <typename T>
void require_rank(const char* op, const BasicTensor<T>& a, std::size_t rank) {
  require(a.rank() == rank, std::string(op) + ": expected rank " +
                                std::to_string(rank) + ", got shape " +
                                shape_str(a.shape()));
}

// Runs fn(grad_buffer) only when the parent wants a gradient.
template <typename T, typename Fn>
void accumulate(Node<T>& parent, Fn&& fn) {
  if (parent.requires_grad) fn(parent.ensure_grad());
}

template <typename T, typename F, typename DF>
BasicTensor<T> unary(const BasicTensor<T>& x, F f, DF df) {
  std::vector<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, [df](Node<T>& n) {
    accumulate(*n.parents[0], [&](std::vector<T>& g) {
      const auto& xin = n.parents[0]->value;
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += n.grad[i] * df(xin[i], n.value[i]);
    });
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    for (int p = 0; p < 2; ++p)
      detail::accumulate(*n.parents[p], [&](std::vector<T>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      });
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
    detail::accumulate(*n.parents[1], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    });
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    });
    detail::accumulate(*n.parents[1], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    });
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T s) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return make_result<T>(x.shape(), std::move(out), {x}, [s](Node<T>& n) {
    detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
    });
  });
}

// x[..., n] + b[n], broadcast over leading dimensions.
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& b) {
  const std::size_t n = b.size();
  detail::require(x.rank() >= 1 && x.shape().back() == n,
                  "add_bias: bias " + shape_str(b.shape()) +
                      " does not match last extent of " + shape_str(x.shape()));
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[i % n];
  return make_result<T>(x.shape(), std::move(out), {x, b}, [n](Node<T>& node) {
    detail::accumulate(*node.parents[0], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    });
    detail::accumulate(*node.parents[1], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < node.grad.size(); ++i) g[i % n] += node.grad[i];
    });
  });
}

// x[m x n] * s[m], each row scaled by its own factor.
template <typename T>
BasicTensor<T> mul_rows(const BasicTensor<T>& x, const BasicTensor<T>& s) {
  detail::require_rank("mul_rows", x, 2);
  const std::size_t m = x.dim(0), n = x.dim(1);
  detail::require(s.size() == m, "mul_rows: factors " + shape_str(s.shape()) +
                                     " do not match rows of " +
                                     shape_str(x.shape()));
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * s[i];
  return make_result<T>(x.shape(), std::move(out), {x, s}, [m, n](Node<T>& node) {
    const auto& xv = node.parents[0]->value;
    const auto& sv = node.parents[1]->value;
    detail::accumulate(*node.parents[0], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += node.grad[i * n + j] * sv[i];
    });
    detail::accumulate(*node.parents[1], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i] += node.grad[i * n + j] * xv[i * n + j];
    });
  });
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// tanh approximation of GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = static_cast<T>(0.044715);
  return detail::unary<T>(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(c * (v + a * v * v * v));
        return T(0.5) * (T(1) + t) +
               T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * a * v * v);
      });
}

// ---------------------------------------------------------------- reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  return make_result<T>(Shape{1}, {acc}, {x}, [](Node<T>& n) {
    detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
      for (auto& gi : g) gi += n.grad[0];
    });
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// mean((a - b)^2) over all elements.
template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape("mse_loss", a, b);
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a[i] - b[i];
    acc += d * d;
  }
  const T inv = T(1) / static_cast<T>(a.size());
  return make_result<T>(Shape{1}, {acc * inv}, {a, b}, [inv](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    const T g0 = n.grad[0] * T(2) * inv;
    detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * (av[i] - bv[i]);
    });
    detail::accumulate(*n.parents[1], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * (av[i] - bv[i]);
    });
  });
}

// ---------------------------------------------------------------- layout

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.size(), "reshape: cannot view " +
                                                shape_str(x.shape()) + " as " +
                                                shape_str(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  return make_result<T>(std::move(shape), std::move(out), {x}, [](Node<T>& n) {
    detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
  });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  detail::require_rank("transpose", x, 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(x.size());
  kernels::transpose(r, c, x.values().data(), out.data());
  return make_result<T>(Shape{c, r}, std::move(out), {x}, [r, c](Node<T>& n) {
    detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j * r + i];
    });
  });
}

// Row gather: out[i] = x[idx[i]]. Rank-1 inputs are treated as one column.
// Repeated indices accumulate gradient.
template <typename T>
BasicTensor<T> index_rows(const BasicTensor<T>& x, std::span<const int> idx) {
  detail::require(x.rank() == 1 || x.rank() == 2,
                  "index_rows: expected rank 1 or 2, got " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.rank() == 2 ? x.dim(1) : 1;
  std::vector<T> out(idx.size() * width);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::require(idx[i] >= 0 && static_cast<std::size_t>(idx[i]) < rows,
                    "index_rows: index " + std::to_string(idx[i]) +
                        " out of range for " + std::to_string(rows) + " rows");
    std::copy_n(x.values().begin() + idx[i] * width, width, out.begin() + i * width);
  }
  Shape shape = x.rank() == 2 ? Shape{idx.size(), width} : Shape{idx.size()};
  std::vector<int> ids(idx.begin(), idx.end());
  return make_result<T>(std::move(shape), std::move(out), {x},
                        [ids = std::move(ids), width](Node<T>& n) {
                          detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
                            for (std::size_t i = 0; i < ids.size(); ++i)
                              for (std::size_t j = 0; j < width; ++j)
                                g[ids[i] * width + j] += n.grad[i * width + j];
                          });
                        });
}

// Scatters kept[N x d] into an L-row grid at `positions`; every other row
// receives `fill`[d].
template <typename T>
BasicTensor<T> fill_rows(const BasicTensor<T>& kept, std::span<const int> positions,
                         const BasicTensor<T>& fill, std::size_t rows) {
  detail::require_rank("fill_rows", kept, 2);
  const std::size_t d = kept.dim(1);
  detail::require(kept.dim(0) == positions.size(),
                  "fill_rows: " + std::to_string(kept.dim(0)) + " rows but " +
                      std::to_string(positions.size()) + " positions");
  detail::require(fill.size() == d, "fill_rows: fill " + shape_str(fill.shape()) +
                                        " does not match width " + std::to_string(d));
  std::vector<int> slot(rows, -1);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const int p = positions[i];
    detail::require(p >= 0 && static_cast<std::size_t>(p) < rows,
                    "fill_rows: position " + std::to_string(p) + " out of range");
    detail::require(slot[p] < 0, "fill_rows: duplicate position " + std::to_string(p));
    slot[p] = static_cast<int>(i);
  }
  std::vector<T> out(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j)
      out[r * d + j] = slot[r] >= 0 ? kept[slot[r] * d + j] : fill[j];
  }
  return make_result<T>(Shape{rows, d}, std::move(out), {kept, fill},
                        [slot = std::move(slot), d](Node<T>& n) {
                          detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
                            for (std::size_t r = 0; r < slot.size(); ++r)
                              if (slot[r] >= 0)
                                for (std::size_t j = 0; j < d; ++j)
                                  g[slot[r] * d + j] += n.grad[r * d + j];
                          });
                          detail::accumulate(*n.parents[1], [&](std::vector<T>& g) {
                            for (std::size_t r = 0; r < slot.size(); ++r)
                              if (slot[r] < 0)
                                for (std::size_t j = 0; j < d; ++j)
                                  g[j] += n.grad[r * d + j];
                          });
                        });
}

// Forward value of `quantized`, gradient passed unchanged to `features`.
template <typename T>
BasicTensor<T> straight_through(const BasicTensor<T>& features,
                                const BasicTensor<T>& quantized) {
  detail::require_same_shape("straight_through", features, quantized);
  std::vector<T> out(quantized.values().begin(), quantized.values().end());
  return make_result<T>(features.shape(), std::move(out), {features}, [](Node<T>& n) {
    detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
  });
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                      shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  kernels::gemm_nn(m, n, k, a.values().data(), b.values().data(), out.data());
  return make_result<T>(Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& node) {
    const auto& av = node.parents[0]->value;
    const auto& bv = node.parents[1]->value;
    detail::accumulate(*node.parents[0], [&](std::vector<T>& g) {
      kernels::gemm_nt(m, k, n, node.grad.data(), bv.data(), g.data());
    });
    detail::accumulate(*node.parents[1], [&](std::vector<T>& g) {
      kernels::gemm_tn(k, n, m, av.data(), node.grad.data(), g.data());
    });
  });
}

// x[m x in] * w[in x out] + b[out]; `b` may be undefined.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>& b) {
  auto y = matmul(x, w);
  return b.defined() ? add_bias(y, b) : y;
}

// ---------------------------------------------------------------- normalization

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  detail::require(axis < x.rank(), "softmax: axis " + std::to_string(axis) +
                                       " out of range for " + shape_str(x.shape()));
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < inner; ++r) {
      const std::size_t base = o * n * inner + r;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
      T z = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        out[base + i * inner] = std::exp(x[base + i * inner] - mx);
        z += out[base + i * inner];
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= z;
    }
  return make_result<T>(s, std::move(out), {x}, [outer, inner, n](Node<T>& node) {
    detail::accumulate(*node.parents[0], [&](std::vector<T>& g) {
      const auto& y = node.value;
      const auto& dy = node.grad;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t r = 0; r < inner; ++r) {
          const std::size_t base = o * n * inner + r;
          T dot = T(0);
          for (std::size_t i = 0; i < n; ++i) dot += dy[base + i * inner] * y[base + i * inner];
          for (std::size_t i = 0; i < n; ++i)
            g[base + i * inner] += y[base + i * inner] * (dy[base + i * inner] - dot);
        }
    });
  });
}

// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets) {
  detail::require_rank("cross_entropy", logits, 2);
  const std::size_t rows = logits.dim(0), v = logits.dim(1);
  detail::require(rows == targets.size(), "cross_entropy: " + std::to_string(rows) +
                                              " rows but " +
                                              std::to_string(targets.size()) + " targets");
  std::vector<T> probs(logits.size());
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    detail::require(t >= 0 && static_cast<std::size_t>(t) < v,
                    "cross_entropy: target " + std::to_string(t) + " outside vocabulary " +
                        std::to_string(v));
    const T* row = logits.values().data() + r * v;
    const T mx = *std::max_element(row, row + v);
    T z = T(0);
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(row[j] - mx);
      z += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
    total += -(row[t] - mx - std::log(z));
  }
  const T inv = T(1) / static_cast<T>(rows);
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result<T>(Shape{1}, {total * inv}, {logits},
                        [probs = std::move(probs), tg = std::move(tg), v, inv](Node<T>& n) {
                          detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
                            const T s = n.grad[0] * inv;
                            for (std::size_t r = 0; r < tg.size(); ++r) {
                              for (std::size_t j = 0; j < v; ++j) g[r * v + j] += s * probs[r * v + j];
                              g[r * v + tg[r]] -= s;
                            }
                          });
                        });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps) {
  detail::require(x.rank() >= 1, "layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  detail::require(gain.size() == d && bias.size() == d,
                  "layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                      shape_str(bias.shape()) + " do not match width " + std::to_string(d));
  const std::size_t rows = x.size() / d;
  std::vector<T> xhat(x.size()), rstd(rows), out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.values().data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gain[j] + bias[j];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gain, bias},
                        [xhat = std::move(xhat), rstd = std::move(rstd), d, rows](Node<T>& n) {
                          const auto& gv = n.parents[1]->value;
                          detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
                            for (std::size_t r = 0; r < rows; ++r) {
                              T m1 = T(0), m2 = T(0);
                              for (std::size_t j = 0; j < d; ++j) {
                                const T dxh = n.grad[r * d + j] * gv[j];
                                m1 += dxh;
                                m2 += dxh * xhat[r * d + j];
                              }
                              m1 /= static_cast<T>(d);
                              m2 /= static_cast<T>(d);
                              for (std::size_t j = 0; j < d; ++j) {
                                const T dxh = n.grad[r * d + j] * gv[j];
                                g[r * d + j] += rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                              }
                            }
                          });
                          detail::accumulate(*n.parents[1], [&](std::vector<T>& g) {
                            for (std::size_t i = 0; i < n.grad.size(); ++i)
                              g[i % d] += n.grad[i] * xhat[i];
                          });
                          detail::accumulate(*n.parents[2], [&](std::vector<T>& g) {
                            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % d] += n.grad[i];
                          });
                        });
}

// x[c x h x w]; statistics per group of c/groups channels.
template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, std::size_t groups,
                          const BasicTensor<T>& gain, const BasicTensor<T>& bias, T eps) {
  detail::require_rank("group_norm", x, 3);
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  detail::require(groups >= 1 && c % groups == 0,
                  "group_norm: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  detail::require(gain.size() == c && bias.size() == c, "group_norm: gain/bias size mismatch");
  const std::size_t cg = c / groups, count = cg * hw;
  std::vector<T> xhat(x.size()), rstd(groups), out(x.size());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t base = gi * count;
    T mu = T(0);
    for (std::size_t i = 0; i < count; ++i) mu += x[base + i];
    mu /= static_cast<T>(count);
    T var = T(0);
    for (std::size_t i = 0; i < count; ++i) var += (x[base + i] - mu) * (x[base + i] - mu);
    var /= static_cast<T>(count);
    rstd[gi] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t ch = gi * cg + i / hw;
      xhat[base + i] = (x[base + i] - mu) * rstd[gi];
      out[base + i] = xhat[base + i] * gain[ch] + bias[ch];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), rstd = std::move(rstd), groups, cg, hw, count](Node<T>& n) {
        const auto& gv = n.parents[1]->value;
        detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = gi * count;
            T m1 = T(0), m2 = T(0);
            for (std::size_t i = 0; i < count; ++i) {
              const T dxh = n.grad[base + i] * gv[gi * cg + i / hw];
              m1 += dxh;
              m2 += dxh * xhat[base + i];
            }
            m1 /= static_cast<T>(count);
            m2 /= static_cast<T>(count);
            for (std::size_t i = 0; i < count; ++i) {
              const T dxh = n.grad[base + i] * gv[gi * cg + i / hw];
              g[base + i] += rstd[gi] * (dxh - m1 - xhat[base + i] * m2);
            }
          }
        });
        detail::accumulate(*n.parents[1], [&](std::vector<T>& g) {
          for (std::size_t i = 0; i < n.grad.size(); ++i) g[i / hw] += n.grad[i] * xhat[i];
        });
        detail::accumulate(*n.parents[2], [&](std::vector<T>& g) {
          for (std::size_t i = 0; i < n.grad.size(); ++i) g[i / hw] += n.grad[i];
        });
      });
}

// ---------------------------------------------------------------- convolution

struct Conv2dGeometry {
  std::size_t c_in, h, w, c_out, kh, kw, stride, padding, h_out, w_out;
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride,
                                      std::size_t padding) {
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  detail::require(in + 2 * padding >= k, "conv2d: kernel extent " + std::to_string(k) +
                                             " exceeds padded input " +
                                             std::to_string(in + 2 * padding));
  detail::require((in + 2 * padding - k) % stride == 0,
                  "conv2d: non-integer output extent (" + std::to_string(in) + " + 2*" +
                      std::to_string(padding) + " - " + std::to_string(k) + ") / " +
                      std::to_string(stride));
  return (in + 2 * padding - k) / stride + 1;
}

namespace detail {

template <typename T>
void im2col(const Conv2dGeometry& g, const T* x, T* cols) {
  const std::size_t p = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oi = 0; oi < g.h_out; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.padding);
          for (std::size_t oj = 0; oj < g.w_out; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.padding);
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<long>(g.h) &&
                                jj < static_cast<long>(g.w);
            row[oi * g.w_out + oj] = inside ? x[(c * g.h + ii) * g.w + jj] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const Conv2dGeometry& g, const T* cols, T* dx) {
  const std::size_t p = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oi = 0; oi < g.h_out; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.padding);
          if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
          for (std::size_t oj = 0; oj < g.w_out; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.padding);
            if (jj < 0 || jj >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + ii) * g.w + jj] += row[oi * g.w_out + oj];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation. x[c_in x h x w], weight[c_out x c_in x kh x kw],
// bias[c_out] or undefined.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding) {
  detail::require_rank("conv2d", x, 3);
  detail::require_rank("conv2d", weight, 4);
  detail::require(weight.dim(1) == x.dim(0), "conv2d: weight " + shape_str(weight.shape()) +
                                                 " does not match input " +
                                                 shape_str(x.shape()));
  Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), weight.dim(0), weight.dim(2), weight.dim(3),
                   stride, padding, 0, 0};
  g.h_out = conv_output_extent(g.h, g.kh, stride, padding);
  g.w_out = conv_output_extent(g.w, g.kw, stride, padding);
  const bool has_bias = bias.defined();
  if (has_bias) {
    detail::require(bias.size() == g.c_out, "conv2d: bias " + shape_str(bias.shape()) +
                                                " does not match " + std::to_string(g.c_out) +
                                                " output channels");
  }
  const std::size_t kdim = g.c_in * g.kh * g.kw, p = g.h_out * g.w_out;
  std::vector<T> cols(kdim * p);
  detail::im2col(g, x.values().data(), cols.data());
  std::vector<T> out(g.c_out * p, T(0));
  if (has_bias)
    for (std::size_t o = 0; o < g.c_out; ++o) std::fill_n(out.begin() + o * p, p, bias[o]);
  kernels::gemm_nn(g.c_out, p, kdim, weight.values().data(), cols.data(), out.data());

  auto fn = [g, cols = std::move(cols), kdim, p, has_bias](Node<T>& n) {
    const auto& wv = n.parents[1]->value;
    detail::accumulate(*n.parents[0], [&](std::vector<T>& gx) {
      std::vector<T> dcols(kdim * p, T(0));
      kernels::gemm_tn(kdim, p, g.c_out, wv.data(), n.grad.data(), dcols.data());
      detail::col2im(g, dcols.data(), gx.data());
    });
    detail::accumulate(*n.parents[1], [&](std::vector<T>& gw) {
      kernels::gemm_nt(g.c_out, kdim, p, n.grad.data(), cols.data(), gw.data());
    });
    if (has_bias)
      detail::accumulate(*n.parents[2], [&](std::vector<T>& gb) {
        for (std::size_t o = 0; o < g.c_out; ++o)
          for (std::size_t i = 0; i < p; ++i) gb[o] += n.grad[o * p + i];
      });
  };
  Shape shape{g.c_out, g.h_out, g.w_out};
  if (has_bias)
    return make_result<T>(std::move(shape), std::move(out), {x, weight, bias}, std::move(fn));
  return make_result<T>(std::move(shape), std::move(out), {x, weight}, std::move(fn));
}

// x[c x h x w] -> [c x h*factor x w*factor], nearest neighbour.
template <typename T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& x, std::size_t factor) {
  detail::require_rank("upsample_nearest", x, 3);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t ho = h * factor, wo = w * factor;
  std::vector<T> out(c * ho * wo);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        out[(ch * ho + i) * wo + j] = x[(ch * h + i / factor) * w + j / factor];
  return make_result<T>(Shape{c, ho, wo}, std::move(out), {x},
                        [c, h, w, ho, wo, factor](Node<T>& n) {
                          detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
                            for (std::size_t ch = 0; ch < c; ++ch)
                              for (std::size_t i = 0; i < ho; ++i)
                                for (std::size_t j = 0; j < wo; ++j)
                                  g[(ch * h + i / factor) * w + j / factor] +=
                                      n.grad[(ch * ho + i) * wo + j];
                          });
                        });
}

// ---------------------------------------------------------------- attention

// Single-head attention whose key columns are scaled after the softmax:
//   A = softmax(q k^T / sqrt(e)) * column_scale, out = A v.
// With `renormalize`, each row of A is divided by its sum, which removes the
// scaled-out keys from the normalizer entirely.
template <typename T>
BasicTensor<T> masked_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                const BasicTensor<T>& v, std::span<const T> column_scale,
                                bool renormalize) {
  detail::require_rank("masked_attention", q, 2);
  detail::require_rank("masked_attention", k, 2);
  detail::require_rank("masked_attention", v, 2);
  const std::size_t lq = q.dim(0), e = q.dim(1), lk = k.dim(0), ev = v.dim(1);
  detail::require(k.dim(1) == e && v.dim(0) == lk,
                  "masked_attention: incompatible q/k/v " + shape_str(q.shape()) + " " +
                      shape_str(k.shape()) + " " + shape_str(v.shape()));
  detail::require(column_scale.size() == lk,
                  "masked_attention: column scale has " + std::to_string(column_scale.size()) +
                      " entries for " + std::to_string(lk) + " keys");
  if (renormalize) {
    detail::require(std::any_of(column_scale.begin(), column_scale.end(),
                                [](T s) { return s > T(0); }),
                    "masked_attention: every key column is scaled to zero");
  }
  const T sc = T(1) / std::sqrt(static_cast<T>(e));
  std::vector<T> probs(lq * lk, T(0));
  kernels::gemm_nt(lq, lk, e, q.values().data(), k.values().data(), probs.data());
  std::vector<T> weights(lq * lk), rowsum(lq, T(1));
  std::vector<T> bscale(column_scale.begin(), column_scale.end());
  for (std::size_t i = 0; i < lq; ++i) {
    T* row = probs.data() + i * lk;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < lk; ++j) {
      row[j] *= sc;
      mx = std::max(mx, row[j]);
    }
    T z = T(0);
    for (std::size_t j = 0; j < lk; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    T r = T(0);
    for (std::size_t j = 0; j < lk; ++j) {
      row[j] /= z;
      weights[i * lk + j] = row[j] * bscale[j];
      r += weights[i * lk + j];
    }
    if (renormalize) {
      rowsum[i] = r;
      for (std::size_t j = 0; j < lk; ++j) weights[i * lk + j] /= r;
    }
  }
  std::vector<T> out(lq * ev, T(0));
  kernels::gemm_nn(lq, ev, lk, weights.data(), v.values().data(), out.data());

  return make_result<T>(
      Shape{lq, ev}, std::move(out), {q, k, v},
      [probs = std::move(probs), weights = std::move(weights), rowsum = std::move(rowsum),
       bscale = std::move(bscale), lq, lk, e, ev, sc, renormalize](Node<T>& n) {
        const auto& qv = n.parents[0]->value;
        const auto& kv = n.parents[1]->value;
        const auto& vv = n.parents[2]->value;
        detail::accumulate(*n.parents[2], [&](std::vector<T>& g) {
          kernels::gemm_tn(lk, ev, lq, weights.data(), n.grad.data(), g.data());
        });
        if (!n.parents[0]->requires_grad && !n.parents[1]->requires_grad) return;
        std::vector<T> dw(lq * lk, T(0));
        kernels::gemm_nt(lq, lk, ev, n.grad.data(), vv.data(), dw.data());
        std::vector<T> ds(lq * lk);
        for (std::size_t i = 0; i < lq; ++i) {
          T* drow = dw.data() + i * lk;
          if (renormalize) {
            T dot = T(0);
            for (std::size_t j = 0; j < lk; ++j) dot += drow[j] * weights[i * lk + j];
            for (std::size_t j = 0; j < lk; ++j) drow[j] = (drow[j] - dot) / rowsum[i];
          }
          T dot = T(0);
          for (std::size_t j = 0; j < lk; ++j) {
            drow[j] *= bscale[j];
            dot += drow[j] * probs[i * lk + j];
          }
          for (std::size_t j = 0; j < lk; ++j)
            ds[i * lk + j] = probs[i * lk + j] * (drow[j] - dot) * sc;
        }
        detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
          kernels::gemm_nn(lq, e, lk, ds.data(), kv.data(), g.data());
        });
        detail::accumulate(*n.parents[1], [&](std::vector<T>& g) {
          kernels::gemm_tn(lk, e, lq, ds.data(), qv.data(), g.data());
        });
      });
}

// Multi-head causal self-attention over a batch of equal-length sequences.
// qkv[(batch*seq) x 3d] holds q | k | v column blocks; returns [(batch*seq) x d].
template <typename T>
BasicTensor<T> causal_attention(const BasicTensor<T>& qkv, std::size_t batch, std::size_t seq,
                                std::size_t heads) {
  detail::require_rank("causal_attention", qkv, 2);
  detail::require(qkv.dim(0) == batch * seq && qkv.dim(1) % 3 == 0,
                  "causal_attention: qkv " + shape_str(qkv.shape()) + " does not match batch " +
                      std::to_string(batch) + " x seq " + std::to_string(seq));
  const std::size_t d = qkv.dim(1) / 3;
  detail::require(heads >= 1 && d % heads == 0, "causal_attention: width " +
                                                    std::to_string(d) + " not divisible by " +
                                                    std::to_string(heads) + " heads");
  const std::size_t hd = d / heads, stride = 3 * d;
  const T sc = T(1) / std::sqrt(static_cast<T>(hd));
  const auto x = qkv.values();
  std::vector<T> probs(batch * heads * seq * seq, T(0));
  std::vector<T> out(batch * seq * d, T(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* qi = x.data() + (b * seq + i) * stride + h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = x.data() + (b * seq + j) * stride + d + h * hd;
          T s = T(0);
          for (std::size_t t = 0; t < hd; ++t) s += qi[t] * kj[t];
          p[i * seq + j] = s * sc;
          mx = std::max(mx, p[i * seq + j]);
        }
        T z = T(0);
        for (std::size_t j = 0; j <= i; ++j) {
          p[i * seq + j] = std::exp(p[i * seq + j] - mx);
          z += p[i * seq + j];
        }
        T* oi = out.data() + (b * seq + i) * d + h * hd;
        for (std::size_t j = 0; j <= i; ++j) {
          p[i * seq + j] /= z;
          const T* vj = x.data() + (b * seq + j) * stride + 2 * d + h * hd;
          for (std::size_t t = 0; t < hd; ++t) oi[t] += p[i * seq + j] * vj[t];
        }
      }
    }
  return make_result<T>(
      Shape{batch * seq, d}, std::move(out), {qkv},
      [probs = std::move(probs), batch, seq, heads, d, hd, stride, sc](Node<T>& n) {
        detail::accumulate(*n.parents[0], [&](std::vector<T>& g) {
          const auto& xv = n.parents[0]->value;
          std::vector<T> dp(seq);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < heads; ++h) {
              const T* p = probs.data() + (b * heads + h) * seq * seq;
              for (std::size_t i = 0; i < seq; ++i) {
                const T* doi = n.grad.data() + (b * seq + i) * d + h * hd;
                T dot = T(0);
                for (std::size_t j = 0; j <= i; ++j) {
                  const T* vj = xv.data() + (b * seq + j) * stride + 2 * d + h * hd;
                  T* dvj = g.data() + (b * seq + j) * stride + 2 * d + h * hd;
                  T s = T(0);
                  for (std::size_t t = 0; t < hd; ++t) {
                    s += doi[t] * vj[t];
                    dvj[t] += p[i * seq + j] * doi[t];
                  }
                  dp[j] = s;
                  dot += s * p[i * seq + j];
                }
                const T* qi = xv.data() + (b * seq + i) * stride + h * hd;
                T* dqi = g.data() + (b * seq + i) * stride + h * hd;
                for (std::size_t j = 0; j <= i; ++j) {
                  const T ds = p[i * seq + j] * (dp[j] - dot) * sc;
                  if (ds == T(0)) continue;
                  const T* kj = xv.data() + (b * seq + j) * stride + d + h * hd;
                  T* dkj = g.data() + (b * seq + j) * stride + d + h * hd;
                  for (std::size_t t = 0; t < hd; ++t) {
                    dqi[t] += ds * kj[t];
                    dkj[t] += ds * qi[t];
                  }
                }
              }
            }
        });
      });
}

}  // namespace mqvq
