#include "cpt/optim.hpp"

#include <algorithm>
#include <cmath>

namespace cpt {

void LrSchedule::validate() const {
  if (peak_lr < 0.0) throw std::invalid_argument("schedule: peak_lr must be non-negative");
  if (warmup_steps < 0 || total_steps <= 0) throw std::invalid_argument("schedule: step counts must be positive");
  if (warmup_steps > total_steps) throw std::invalid_argument("schedule: warmup_steps exceeds total_steps");
}

double LrSchedule::at(std::int64_t step) const {
  if (step <= 0) return warmup_steps == 0 ? peak_lr : 0.0;
  if (step < warmup_steps) return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step >= total_steps) return 0.0;
  const auto decay_span = static_cast<double>(total_steps - warmup_steps);
  return peak_lr * static_cast<double>(total_steps - step) / decay_span;
}

AdamState make_adam(const LrSchedule& schedule, double weight_decay) {
  schedule.validate();
  AdamState state;
  state.schedule = schedule;
  state.weight_decay = weight_decay;
  return state;
}

double adam_step(std::vector<NamedParam>& params, AdamState& state) {
  if (!(state.beta1 > 0.0 && state.beta1 < 1.0 && state.beta2 > 0.0 && state.beta2 < 1.0)) {
    throw std::invalid_argument("adam: betas must lie in (0, 1)");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor.numel()) {
      throw std::invalid_argument("adam: moment shape mismatch for " + params[i].name);
    }
    if (!params[i].tensor.has_grad()) continue;
    for (double g : params[i].tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient in parameter " + params[i].name);
    }
  }

  ++state.step;
  const double lr = state.lr_at_step(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].tensor.mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has_grad = params[i].tensor.has_grad();
    std::span<const double> g = has_grad ? params[i].tensor.grad() : std::span<const double>{};
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has_grad ? g[k] : 0.0;
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + state.eps);
      w[k] -= lr * (update + state.weight_decay * w[k]);
    }
  }
  return lr;
}

}  // namespace cpt
