#include "cpt/params.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cpt {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("uniform_below: empty range");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

double standard_normal(std::mt19937_64& rng) {
  double u1;
  do {
    u1 = uniform01(rng);
  } while (u1 <= 0.0);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor ParamStore::add(const std::string& name, Shape shape, Init init, std::mt19937_64& rng, double stddev) {
  if (contains(name)) throw std::invalid_argument("param store: duplicate name " + name);
  const std::size_t n = shape_numel(shape);
  std::vector<double> values(n, init == Init::ones ? 1.0 : 0.0);
  if (init == Init::normal) {
    for (auto& v : values) v = stddev * standard_normal(rng);
  }
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  index_[name] = params_.size();
  params_.push_back({name, t});
  return t;
}

void ParamStore::alias(const std::string& alias_name, const std::string& canonical_name) {
  if (contains(alias_name)) throw std::invalid_argument("param store: duplicate name " + alias_name);
  if (!index_.contains(canonical_name)) throw std::invalid_argument("param store: unknown alias target " + canonical_name);
  aliases_[alias_name] = canonical_name;
}

bool ParamStore::contains(const std::string& name) const { return index_.contains(name) || aliases_.contains(name); }

const std::string& ParamStore::canonical(const std::string& name) const {
  if (auto it = aliases_.find(name); it != aliases_.end()) return it->second;
  if (!index_.contains(name)) throw std::out_of_range("param store: unknown parameter " + name);
  return name;
}

const Tensor& ParamStore::get(const std::string& name) const { return params_[index_.at(canonical(name))].tensor; }

std::size_t ParamStore::total_elements() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.tensor.numel();
  return total;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

}  // namespace cpt
