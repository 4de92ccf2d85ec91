#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "mqvq/nn.hpp"

namespace mqvq {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; applied to rank >= 2 tensors only
  double clip_norm = 1.0;     // global gradient norm; <= 0 disables
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 1000;
  double min_lr_ratio = 0.1;
};

// Linear warmup to lr, then cosine decay to min_lr_ratio * lr at total_steps.
inline double scheduled_lr(const AdamWConfig& c, std::size_t step) {
  if (c.warmup_steps > 0 && step < c.warmup_steps)
    return c.lr * double(step + 1) / double(c.warmup_steps);
  if (c.total_steps <= c.warmup_steps) return c.lr;
  const double progress =
      std::min(1.0, double(step - c.warmup_steps) / double(c.total_steps - c.warmup_steps));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return c.lr * (c.min_lr_ratio + (1.0 - c.min_lr_ratio) * cosine);
}

template <typename T>
class AdamW {
 public:
  AdamW(ParameterList<T> params, AdamWConfig config)
      : params_(std::move(params)), cfg_(config) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.size(), T(0));
      v_.emplace_back(p.tensor.size(), T(0));
    }
  }

  std::size_t step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }
  double current_lr() const { return scheduled_lr(cfg_, step_); }

  void zero_grad() { zero_grads(params_); }

  // Applies one update from the accumulated gradients. Returns the global
  // gradient norm before clipping.
  double step() {
    double sq = 0.0;
    for (const auto& p : params_)
      if (p.tensor.has_grad())
        for (T g : p.tensor.grad()) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    const double lr = scheduled_lr(cfg_, step_);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& t = params_[i].tensor;
      if (!t.has_grad()) continue;
      const auto g = t.grad();
      auto w = t.mutable_values();
      const bool decay = cfg_.weight_decay > 0.0 && t.rank() >= 2;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = double(g[j]) * clip;
        m_[i][j] = static_cast<T>(cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * gj);
        v_[i][j] = static_cast<T>(cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * gj * gj);
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        double wj = w[j];
        if (decay) wj -= lr * cfg_.weight_decay * wj;
        wj -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        w[j] = static_cast<T>(wj);
      }
    }
    return norm;
  }

  // Moment buffers as named tensors, for checkpointing.
  ParameterList<T> state() const {
    ParameterList<T> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.push_back({"optim.m." + params_[i].name, BasicTensor<T>(params_[i].tensor.shape(), m_[i])});
      out.push_back({"optim.v." + params_[i].name, BasicTensor<T>(params_[i].tensor.shape(), v_[i])});
    }
    return out;
  }

  void restore(const ParameterList<T>& state, std::size_t step) {
    if (state.size() != 2 * params_.size())
      throw std::invalid_argument("optimizer: state does not match parameter list");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& m = state[2 * i].tensor;
      const auto& v = state[2 * i + 1].tensor;
      if (m.size() != m_[i].size() || v.size() != v_[i].size())
        throw std::invalid_argument("optimizer: state shape mismatch for " + params_[i].name);
      m_[i].assign(m.values().begin(), m.values().end());
      v_[i].assign(v.values().begin(), v.values().end());
    }
    step_ = step;
  }

 private:
  ParameterList<T> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace mqvq
