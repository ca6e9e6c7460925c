#include "micl/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "micl/error.hpp"

namespace micl {

void adamw_step(std::span<double> params, std::span<const double> grads, AdamWState& state,
                std::size_t step_index, double lr, const AdamWConfig& cfg,
                std::string_view name) {
  if (step_index < 1) throw Error(ErrorCode::kInvalidArgument, "adamw step_index starts at 1");
  if (grads.size() != params.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "gradient shape differs for " + std::string(name));
  }
  for (double g : grads) {
    if (!std::isfinite(g)) {
      throw Error(ErrorCode::kNonFinite, "non-finite gradient in " + std::string(name));
    }
  }
  if (state.m.empty()) state.m.assign(params.size(), 0.0);
  if (state.v.empty()) state.v.assign(params.size(), 0.0);
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "optimizer state shape differs for " +
                                                   std::string(name));
  }
  const double t = static_cast<double>(step_index);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / bias1;
    const double v_hat = state.v[i] / bias2;
    params[i] -= lr * cfg.weight_decay * params[i];
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
  }
}

double lr_at_step(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                  double peak) {
  if (total_steps == 0 || warmup_steps >= total_steps || step > total_steps || !(peak > 0)) {
    throw Error(ErrorCode::kInvalidArgument,
                "invalid schedule: step " + std::to_string(step) + ", total " +
                    std::to_string(total_steps) + ", warmup " + std::to_string(warmup_steps));
  }
  if (step < warmup_steps) {
    return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace micl
