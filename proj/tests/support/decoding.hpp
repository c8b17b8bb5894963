#pragma once

// Shared decoding fixtures: random models at a scale where logits vary,
// and an enumerable toy model with a brute-force optimum.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "cpt/inference.hpp"

namespace cpt::testing {

inline ModelConfig decoding_config(std::size_t vocab = 16) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.hidden = 8;
  c.heads = 2;
  c.layers_enc = 2;
  c.layers_udec = 2;
  c.layers_gdec = 2;
  c.max_positions = 24;
  return c;
}

inline CPTParams random_model(std::uint64_t seed, std::size_t vocab = 16) {
  auto p = CPTParams::create(decoding_config(vocab), seed);
  std::mt19937_64 rng(seed * 31 + 7);
  for (auto& np : p.store.params()) {
    if (np.name.ends_with("weight") || np.name.starts_with("embeddings")) {
      for (auto& v : np.tensor.mutable_values()) v = 0.5 * standard_normal(rng);
    }
  }
  return p;
}

inline std::vector<std::int64_t> random_source(std::mt19937_64& rng, std::size_t vocab, std::size_t n) {
  std::vector<std::int64_t> s(n);
  for (auto& t : s) t = special::count + static_cast<std::int64_t>(uniform_below(rng, vocab - special::count));
  return s;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Three-step toy model over 9 ids. After [BOS] token 7 is the likeliest;
// token 8 is a little less likely but leads to a confident continuation.
inline std::vector<double> toy_log_probs(std::span<const std::int64_t> prefix) {
  std::vector<double> logits(9, -3.0);
  const std::int64_t last = prefix.empty() ? special::bos : prefix.back();
  if (last == special::bos) {
    logits[7] = 2.0;
    logits[8] = 1.8;
    logits[special::eos] = 0.5;
  } else if (last == 7) {
    logits[7] = 0.5;
    logits[8] = 0.4;
    logits[special::eos] = 0.3;
  } else if (last == 8) {
    logits[8] = 3.0;
    logits[special::eos] = 2.5;
    logits[7] = -1.0;
  }
  double m = *std::max_element(logits.begin(), logits.end()), s = 0.0;
  for (double x : logits) s += std::exp(x - m);
  for (double& x : logits) x -= m + std::log(s);
  return logits;
}

struct ToyModel {
  std::vector<std::vector<std::int64_t>> rows;

  BeamModel beam_model() {
    BeamModel m;
    m.vocab = 9;
    m.advance = [this](std::span<const std::size_t> parents, std::span<const std::int64_t> tokens) {
      std::vector<std::vector<std::int64_t>> next;
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        auto seq = parents.empty() ? std::vector<std::int64_t>{} : rows[parents[i]];
        if (tokens[i] != special::bos) seq.push_back(tokens[i]);
        next.push_back(std::move(seq));
      }
      rows = std::move(next);
      std::vector<std::vector<double>> out;
      for (const auto& r : rows) out.push_back(toy_log_probs(r));
      return out;
    };
    return m;
  }
};

/// Enumerates every toy sequence of up to `max_len` tokens; a sequence
/// stops at its first [EOS] or at `max_len`.
inline Hypothesis toy_brute_force(std::size_t max_len, double length_penalty) {
  Hypothesis best;
  best.score = -INFINITY;
  std::function<void(std::vector<std::int64_t>, double)> walk = [&](std::vector<std::int64_t> seq, double lp) {
    const bool stop = !seq.empty() && (seq.back() == special::eos || seq.size() == max_len);
    if (stop) {
      const double score = hypothesis_score(lp, seq.size(), length_penalty);
      if (score > best.score) best = {seq, lp, score, seq.back() == special::eos};
      return;
    }
    const auto lps = toy_log_probs(seq);
    for (std::int64_t v = 0; v < 9; ++v) {
      auto next = seq;
      next.push_back(v);
      walk(next, lp + lps[static_cast<std::size_t>(v)]);
    }
  };
  walk({}, 0.0);
  return best;
}

}  // namespace cpt::testing
