#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cpt/blocks.hpp"
#include "cpt/ops.hpp"
#include "support/gradcheck.hpp"

using namespace cpt;
using cpt::testing::grad_check;
using cpt::testing::random_tensor;

namespace {

BlockShape small_shape() { return {8, 2, 16}; }

struct Fixture {
  ParamStore store;
  BlockWeights enc, dec;
  explicit Fixture(std::uint64_t seed = 5, double stddev = 0.3) {
    std::mt19937_64 rng(seed);
    enc = make_block(store, "enc", small_shape(), false, rng);
    dec = make_block(store, "dec", small_shape(), true, rng);
    // Larger weights than the 0.02 default so the checks see non-trivial attention.
    for (auto& p : store.params()) {
      if (p.name.ends_with("weight")) {
        for (auto& v : p.tensor.mutable_values()) v = stddev * standard_normal(rng);
      }
    }
  }
};

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST_CASE("mask semantics") {
  const auto causal = AttentionMask::causal(4);
  CHECK(causal.allows(2, 2));
  CHECK_FALSE(causal.allows(1, 2));
  const auto offset = AttentionMask::causal(5, 3);
  CHECK(offset.allows(0, 3));
  CHECK_FALSE(offset.allows(0, 4));
  const auto pad = AttentionMask::padding({1, 1, 0});
  CHECK(pad.allows(0, 1));
  CHECK_FALSE(pad.allows(1, 2));
  CHECK_THROWS_AS(pad.allowed(1, 4), TensorError);
}

TEST_CASE("block shape validation") {
  CHECK_THROWS_AS((BlockShape{10, 3, 40}.validate()), ConfigError);
  CHECK_NOTHROW((BlockShape{12, 3, 48}.validate()));
  ParamStore store;
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(make_block(store, "x", BlockShape{10, 4, 40}, false, rng), ConfigError);
}

TEST_CASE("block layout names and init") {
  const auto layout = block_layout("b", small_shape(), true);
  CHECK(layout.size() == 26);
  CHECK(layout.front().first == "b.self_attn.q.weight");
  Fixture f;
  ParamStore store;
  std::mt19937_64 rng(2);
  const auto w = make_block(store, "b", small_shape(), true, rng);
  for (double v : w.self_attn.q_bias.values()) CHECK(v == 0.0);
  for (double v : w.ffn_norm.gain.values()) CHECK(v == 1.0);
  CHECK(w.ffn.in_weight.shape() == Shape{8, 16});
  CHECK(w.ffn.out_weight.shape() == Shape{16, 8});
  CHECK(store.total_elements() == [&] {
    std::size_t n = 0;
    for (const auto& [name, shape] : layout) n += shape_numel(shape);
    return n;
  }());
}

TEST_CASE("attention probabilities are normalised and respect the mask") {
  Fixture f;
  std::mt19937_64 rng(3);
  const auto x = random_tensor({5, 8}, rng, 1.0, false);
  AttentionTrace trace;
  multi_head_attention(x, x, x, AttentionMask::causal(5), f.enc.self_attn, &trace);
  REQUIRE(trace.probabilities.size() == 2);
  for (const auto& p : trace.probabilities) {
    for (std::size_t q = 0; q < 5; ++q) {
      double sum = 0.0;
      for (std::size_t k = 0; k < 5; ++k) {
        const double v = p.values()[q * 5 + k];
        if (k > q) CHECK(v == 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("causal decoder: future tokens never change earlier outputs") {
  Fixture f;
  std::mt19937_64 rng(4);
  const auto mem = random_tensor({3, 8}, rng, 1.0, false);
  const auto x = random_tensor({6, 8}, rng, 1.0, false);
  const auto base = decoder_layer(x, mem, AttentionMask::causal(6), AttentionMask::full(3), f.dec);
  for (std::size_t t = 0; t < 6; ++t) {
    auto perturbed = Tensor::from(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
    for (std::size_t j = 0; j < 8; ++j) perturbed.mutable_values()[t * 8 + j] += 3.0 * standard_normal(rng);
    const auto out = decoder_layer(perturbed, mem, AttentionMask::causal(6), AttentionMask::full(3), f.dec);
    for (std::size_t r = 0; r < t; ++r) {
      CHECK(max_abs_diff(base.values().subspan(r * 8, 8), out.values().subspan(r * 8, 8)) == 0.0);
    }
    CHECK(max_abs_diff(base.values().subspan(t * 8, 8), out.values().subspan(t * 8, 8)) > 1e-6);
  }
}

TEST_CASE("padding neutrality for encoder and cross-attention") {
  Fixture f;
  std::mt19937_64 rng(6);
  const auto x = random_tensor({4, 8}, rng, 1.0, false);
  const auto junk = random_tensor({3, 8}, rng, 5.0, false);
  const auto padded = ops::concat_rows(std::vector<Tensor>{x, junk});
  const std::vector<char> real{1, 1, 1, 1, 0, 0, 0};

  const auto plain = encoder_layer(x, AttentionMask::full(4), f.enc);
  const auto with_pad = encoder_layer(padded, AttentionMask::padding(real), f.enc);
  CHECK(max_abs_diff(plain.values(), with_pad.values().subspan(0, 32)) < 1e-10);

  const auto y = random_tensor({2, 8}, rng, 1.0, false);
  const auto d1 = decoder_layer(y, x, AttentionMask::causal(2), AttentionMask::full(4), f.dec);
  const auto d2 = decoder_layer(y, padded, AttentionMask::causal(2), AttentionMask::padding(real), f.dec);
  CHECK(max_abs_diff(d1.values(), d2.values()) < 1e-10);
}

TEST_CASE("encoder layer is permutation-equivariant without positions") {
  Fixture f;
  std::mt19937_64 rng(7);
  const auto x = random_tensor({5, 8}, rng, 1.0, false);
  const std::vector<std::int64_t> perm{3, 0, 4, 1, 2};
  const auto out = encoder_layer(x, AttentionMask::full(5), f.enc);
  const auto out_perm = encoder_layer(ops::gather_rows(x, perm), AttentionMask::full(5), f.enc);
  CHECK(max_abs_diff(ops::gather_rows(out, perm).values(), out_perm.values()) < 1e-12);
}

TEST_CASE("decoder layer requires cross-attention weights") {
  Fixture f;
  std::mt19937_64 rng(8);
  const auto x = random_tensor({2, 8}, rng, 1.0, false);
  CHECK_THROWS_AS(decoder_layer(x, x, AttentionMask::causal(2), AttentionMask::full(2), f.enc), ConfigError);
}

TEST_CASE("embedding rejects positions beyond the table") {
  std::mt19937_64 rng(9);
  const auto tokens = random_tensor({10, 8}, rng, 1.0, false);
  const auto positions = random_tensor({4, 8}, rng, 1.0, false);
  NormWeights norm{Tensor::full({8}, 1.0), Tensor::zeros({8})};
  const std::vector<std::int64_t> ids{1, 2, 3};
  CHECK_NOTHROW(embed(ids, 1, tokens, positions, norm));
  CHECK_THROWS_WITH_AS(embed(ids, 2, tokens, positions, norm), doctest::Contains("max_positions 4"), TensorError);
}

TEST_CASE("gradient check through encoder and decoder layers") {
  Fixture f(11, 0.4);
  std::mt19937_64 rng(12);
  const auto x = random_tensor({4, 8}, rng, 1.0, true);
  const auto mem = random_tensor({3, 8}, rng, 1.0, true);
  const auto proj = random_tensor({8, 1}, rng, 1.0, false);
  auto loss = [&] {
    const auto h = encoder_layer(x, AttentionMask::padding({1, 1, 1, 0}), f.enc);
    const auto d = decoder_layer(h, mem, AttentionMask::causal(4), AttentionMask::full(3), f.dec);
    return ops::sum(ops::tanh(ops::matmul(d, proj)));
  };
  std::vector<std::pair<std::string, Tensor>> leaves{{"x", x}, {"mem", mem}};
  for (const auto& p : f.store.params()) leaves.emplace_back(p.name, p.tensor);
  const auto r = grad_check(loss, leaves, 6, 13);
  INFO(r.worst_location);
  CHECK(r.worst_relative_error < 1e-4);
  CHECK(r.checked > 200);
}
