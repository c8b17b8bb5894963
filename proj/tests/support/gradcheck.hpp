#pragma once

// Central finite-difference oracle. Independent of the tape: it only reads
// and perturbs leaf values and re-evaluates the forward closure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cpt/tensor.hpp"

namespace cpt::testing {

struct GradCheckResult {
  std::size_t checked = 0;
  double worst_relative_error = 0.0;
  std::string worst_location;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

/// `loss` rebuilds the forward graph from the current leaf values. Samples
/// up to `per_tensor` entries of each leaf (all of them when 0).
inline GradCheckResult grad_check(const std::function<Tensor()>& loss, std::vector<std::pair<std::string, Tensor>> leaves,
                                  std::size_t per_tensor = 0, std::uint64_t seed = 1, double h = 1e-5) {
  for (auto& [name, t] : leaves) t.zero_grad();
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : leaves) analytic.emplace_back(t.grad().begin(), t.grad().end());

  std::mt19937_64 rng(seed);
  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& [name, t] = leaves[li];
    auto values = t.mutable_values();
    std::vector<std::size_t> idx(values.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (per_tensor && per_tensor < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(per_tensor);
    }
    for (std::size_t i : idx) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = relative_error(analytic[li][i], numeric);
      ++result.checked;
      if (err > result.worst_relative_error) {
        result.worst_relative_error = err;
        result.worst_location = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic[li][i]) +
                                " numeric=" + std::to_string(numeric);
      }
    }
  }
  return result;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace cpt::testing
