#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpt/tensor.hpp"

namespace cpt {

/// Raised when training produces a non-finite gradient or loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Linear warmup to the peak rate, then linear decay to zero at total_steps.
struct LrSchedule {
  double peak_lr = 1e-4;
  std::int64_t warmup_steps = 10'000;
  std::int64_t total_steps = 500'000;

  void validate() const;
  double at(std::int64_t step) const;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

/// Adam with bias correction and decoupled weight decay.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
  LrSchedule schedule;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  double lr_at_step(std::int64_t s) const { return schedule.at(s); }
};

AdamState make_adam(const LrSchedule& schedule, double weight_decay = 0.01);

/// Applies one update using each parameter's current gradient buffer.
/// Throws NumericError naming the first parameter whose gradient is not
/// finite; no parameter is modified in that case. Returns the learning
/// rate used.
double adam_step(std::vector<NamedParam>& params, AdamState& state);

}  // namespace cpt
