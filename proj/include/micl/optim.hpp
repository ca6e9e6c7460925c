#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace micl {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
};

// Decoupled weight decay with bias-corrected moments:
//   theta -= lr * wd * theta
//   theta -= lr * m_hat / (sqrt(v_hat) + eps)
// step_index counts from 1. `name` labels the tensor in error messages.
void adamw_step(std::span<double> params, std::span<const double> grads, AdamWState& state,
                std::size_t step_index, double lr, const AdamWConfig& cfg,
                std::string_view name = "params");

/// Linear warmup to `peak` over `warmup_steps`, then cosine annealing to 0
/// at step == total_steps. Valid for 0 <= step <= total_steps.
double lr_at_step(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                  double peak);

}  // namespace micl
