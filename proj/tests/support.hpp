#pragma once

// Shared test oracles: seeded random tensors and central finite differences.

#include <cmath>
#include <functional>
#include <vector>

#include "mqvq/ops.hpp"
#include "mqvq/random.hpp"

namespace mqvq::testing {

template <typename T = double>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, scale));
  return BasicTensor<T>(std::move(shape), std::move(v), requires_grad);
}

// Central differences of a scalar function with respect to `param`.
inline std::vector<double> numeric_grad(Tensor64 param, const std::function<Tensor64()>& loss,
                                        double h = 1e-5) {
  NoGradGuard no_grad;
  auto w = param.mutable_values();
  std::vector<double> g(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double keep = w[i];
    w[i] = keep + h;
    const double up = loss().item();
    w[i] = keep - h;
    const double down = loss().item();
    w[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline std::vector<double> analytic_grad(Tensor64 param, const std::function<Tensor64()>& loss) {
  param.zero_grad();
  loss().backward();
  if (!param.has_grad()) return std::vector<double>(param.size(), 0.0);
  return {param.grad().begin(), param.grad().end()};
}

// ||a - b|| / max(||a||, ||b||); zero when both are below `floor`. The floor
// sits above central-difference roundoff (~1e-16 / h per entry) so that
// gradients which vanish identically are not scored on noise.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b,
                             double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max(std::sqrt(na), std::sqrt(nb));
  if (scale < floor) return 0.0;
  return std::sqrt(diff) / scale;
}

inline double grad_error(Tensor64 param, const std::function<Tensor64()>& loss, double h = 1e-5) {
  const auto a = analytic_grad(param, loss);
  const auto n = numeric_grad(param, loss, h);
  return relative_error(a, n);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace mqvq::testing
