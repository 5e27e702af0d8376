#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "gcnas/tensor.hpp"

namespace gcnas {

struct OptimizerConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double grad_clip = 0.0;  // max global gradient norm; 0 disables
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
};

// Linear warm-up to the peak rate, then cosine decay to zero.
inline double scheduled_lr(const OptimizerConfig& c, std::size_t step) {
  if (step < c.warmup_steps) return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  const std::size_t span = c.total_steps > c.warmup_steps ? c.total_steps - c.warmup_steps : 1;
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / static_cast<double>(span));
  return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// AdamW with decoupled weight decay. Moments are tracked per parameter slot;
// a slot without a gradient in a step is left untouched.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg) : cfg_(cfg) {}

  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("AdamW: params/grads length mismatch");
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      t_.assign(params.size(), 0);
    }
    if (m_.size() != params.size()) throw std::invalid_argument("AdamW: parameter list changed size");

    double clip = 1.0;
    if (cfg_.grad_clip > 0.0) {
      double sq = 0.0;
      for (const Tensor* g : grads)
        if (g)
          for (double x : g->data) sq += x * x;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.grad_clip) clip = cfg_.grad_clip / norm;
    }

    const double lr = scheduled_lr(cfg_, step_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!grads[i]) continue;
      Tensor& p = *params[i];
      const Tensor& g = *grads[i];
      if (g.numel() != p.numel()) throw ShapeError("AdamW: gradient shape mismatch");
      if (m_[i].numel() == 0) {
        m_[i] = Tensor(p.shape);
        v_[i] = Tensor(p.shape);
      }
      ++t_[i];
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_[i]));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_[i]));
      for (std::size_t k = 0; k < p.numel(); ++k) {
        const double gk = g.data[k] * clip;
        double& m = m_[i].data[k];
        double& v = v_[i].data[k];
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gk;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gk * gk;
        p.data[k] -= lr * (cfg_.weight_decay * p.data[k] + (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps));
      }
    }
    ++step_;
  }

  std::size_t steps_taken() const { return step_; }
  double current_lr() const { return scheduled_lr(cfg_, step_); }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::vector<std::size_t> t_;
  std::size_t step_ = 0;
};

}  // namespace gcnas
