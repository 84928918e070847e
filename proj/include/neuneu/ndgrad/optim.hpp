#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "neuneu/ndgrad/params.hpp"

namespace neuneu::nd {

struct AdamWConfig {
  double base_lr = 6e-4;
  double weight_decay = 0.033;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Linear warmup from 0 to base_lr over warmup_ratio * total_steps, then
// cosine decay to 0 at total_steps.
inline double lr_at_step(std::size_t step, std::size_t total_steps, double warmup_ratio, double base_lr) {
  if (total_steps == 0) throw InvalidArgument("lr_at_step: total_steps must be positive");
  if (step > total_steps) throw InvalidArgument("lr_at_step: step beyond total_steps");
  const double total = static_cast<double>(total_steps);
  const double warmup = warmup_ratio * total;
  const double s = static_cast<double>(step);
  if (s < warmup) return base_lr * s / warmup;
  if (warmup >= total) return base_lr;
  const double progress = (s - warmup) / (total - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double global_grad_norm(const ParameterStore& params) {
  double sq = 0.0;
  for (const auto& e : params.entries())
    for (double g : e.tensor.grad()) sq += g * g;
  return std::sqrt(sq);
}

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(ParameterStore& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (auto& e : params.entries()) {
      auto& g = e.tensor.node()->ensure_grad();
      for (auto& v : g) v *= factor;
    }
  }
  return norm;
}

// Adaptive-moment optimizer with decoupled weight decay and bias-corrected
// moments. Decay applies only to entries registered with decay = true.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const { return config_; }
  std::size_t steps() const { return step_; }

  void step(ParameterStore& params, double lr_now) {
    if (first_.empty()) {
      for (const auto& e : params.entries()) {
        first_.emplace_back(e.tensor.size(), 0.0);
        second_.emplace_back(e.tensor.size(), 0.0);
      }
    }
    if (first_.size() != params.size()) throw InvalidArgument("AdamW: parameter set changed between steps");
    for (std::size_t p = 0; p < params.size(); ++p) {
      for (double g : params.entries()[p].tensor.grad()) {
        if (!std::isfinite(g)) {
          throw NumericError("non-finite gradient in parameter '" + params.entries()[p].name + "'");
        }
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& entry = params.entries()[p];
      auto w = entry.tensor.mutable_data();
      auto g = entry.tensor.grad();
      auto& m = first_[p];
      auto& v = second_[p];
      const double decay = entry.decay ? config_.weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= lr_now * decay * w[i];
        w[i] -= lr_now * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
  }

 private:
  AdamWConfig config_;
  std::size_t step_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

}  // namespace neuneu::nd
