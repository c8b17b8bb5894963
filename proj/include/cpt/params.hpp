#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cpt/optim.hpp"
#include "cpt/tensor.hpp"

namespace cpt {

enum class Init { normal, zeros, ones };

/// Ordered registry of named trainable arrays. Aliases map extra names onto
/// an existing array's storage (weight tying).
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape, Init init, std::mt19937_64& rng, double stddev = 0.02);
  void alias(const std::string& alias_name, const std::string& canonical);

  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  // Canonical name for `name` (itself unless it is an alias).
  const std::string& canonical(const std::string& name) const;

  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<NamedParam>& params() { return params_; }
  const std::map<std::string, std::string>& aliases() const { return aliases_; }

  std::size_t total_elements() const;
  void zero_grad();

 private:
  std::vector<NamedParam> params_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::string> aliases_;
};

/// Draws the standard normal with Box-Muller on top of a mt19937_64 stream;
/// stdlib distributions are implementation-defined and would break
/// cross-platform reproducibility.
double standard_normal(std::mt19937_64& rng);
double uniform01(std::mt19937_64& rng);
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound);

}  // namespace cpt
