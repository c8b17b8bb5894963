#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <functional>

#include "cpt/inference.hpp"
#include "cpt/ops.hpp"
#include "support/decoding.hpp"

using namespace cpt;

using cpt::testing::argmax;
using cpt::testing::max_abs_diff;
using cpt::testing::random_model;
using cpt::testing::random_source;
using cpt::testing::ToyModel;

TEST_CASE("generation config validation") {
  GenerationConfig g;
  CHECK_NOTHROW(g.validate());
  g.beam_size = 0;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g = {};
  g.max_new_tokens = 0;
  CHECK_THROWS_AS(g.validate(), ConfigError);
}

TEST_CASE("greedy decoding basics") {
  const auto p = random_model(1);
  std::mt19937_64 rng(2);
  const auto src = random_source(rng, 16, 6);
  GenerationConfig g;
  g.max_new_tokens = 1;
  g.force_length = true;
  CHECK(greedy_decode(src, p, g).tokens.size() == 1);
  g.max_new_tokens = 10;
  g.force_length = false;
  const auto a = greedy_decode(src, p, g);
  const auto b = greedy_decode(src, p, g);
  CHECK(a.tokens == b.tokens);
  CHECK(a.log_prob == b.log_prob);
  g.force_length = true;
  const auto forced = greedy_decode(src, p, g);
  CHECK(forced.tokens.size() == 10);
  CHECK(std::find(forced.tokens.begin(), forced.tokens.end(), special::eos) == forced.tokens.end());
}

TEST_CASE("first cached step equals the full forward on [BOS]") {
  const auto p = random_model(3);
  std::mt19937_64 rng(4);
  const auto src = random_source(rng, 16, 5);
  const auto memory = prepare_memory(src, p);
  auto cache = empty_cache(p);
  const auto cached = cached_step(special::bos, cache, memory, p);
  const std::vector<std::int64_t> prefix{special::bos};
  CHECK(max_abs_diff(cached.values(), uncached_next_logits(prefix, memory, p).values()) < 1e-9);
  CHECK(cache.length() == 1);
}

TEST_CASE("cached and uncached decoding agree on 100 random models") {
  double worst = 0.0;
  for (std::uint64_t m = 0; m < 100; ++m) {
    const auto p = random_model(100 + m);
    std::mt19937_64 rng(m);
    const auto src = random_source(rng, 16, 3 + m % 6);
    const auto memory = prepare_memory(src, p);
    auto cache = empty_cache(p);
    std::vector<std::int64_t> prefix{special::bos};
    for (int step = 0; step < 10; ++step) {
      const auto fast = cached_step(prefix.back(), cache, memory, p);
      const auto slow = uncached_next_logits(prefix, memory, p);
      worst = std::max(worst, max_abs_diff(fast.values(), slow.values()));
      const auto a = argmax(fast.values());
      REQUIRE(a == argmax(slow.values()));
      prefix.push_back(static_cast<std::int64_t>(a));
    }
    check_cache_prefix(cache, std::span(prefix).first(10));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("cross-attention keys and values are built once per source") {
  const auto p = random_model(5);
  std::mt19937_64 rng(6);
  const auto src = random_source(rng, 16, 4);
  reset_inference_counters();
  const auto memory = prepare_memory(src, p);
  auto cache = empty_cache(p);
  std::int64_t tok = special::bos;
  for (int i = 0; i < 10; ++i) tok = static_cast<std::int64_t>(argmax(cached_step(tok, cache, memory, p).values()));
  CHECK(inference_counters().cross_kv_builds == 1);
  CHECK(inference_counters().encoder_passes == 1);
  CHECK(inference_counters().decoder_rows == 10);
}

TEST_CASE("cache misuse is rejected") {
  const auto p = random_model(7);
  const auto other = CPTParams::create([] {
    auto c = cpt::testing::decoding_config();
    c.layers_enc = 3;
    c.layers_udec = c.layers_gdec = 1;
    return c;
  }(), 1);
  std::mt19937_64 rng(8);
  const auto memory = prepare_memory(random_source(rng, 16, 4), p);
  auto foreign = empty_cache(other);
  CHECK_THROWS_AS(cached_step(special::bos, foreign, memory, p), TensorError);

  auto cache = empty_cache(p);
  cached_step(special::bos, cache, memory, p);
  const std::vector<std::int64_t> wrong{special::bos, 9};
  CHECK_THROWS_AS(check_cache_prefix(cache, wrong), TensorError);

  auto broken = cache;
  broken.keys[0].pop_back();
  CHECK_THROWS_AS(cached_step(9, broken, memory, p), TensorError);

  for (std::size_t i = 1; i < p.config.max_positions; ++i) cached_step(9, cache, memory, p);
  CHECK_THROWS_WITH_AS(cached_step(9, cache, memory, p), doctest::Contains("max_positions"), TensorError);
}

TEST_CASE("beam size 1 is exactly greedy") {
  for (std::uint64_t m = 0; m < 30; ++m) {
    const auto p = random_model(300 + m);
    std::mt19937_64 rng(m);
    const auto src = random_source(rng, 16, 5);
    GenerationConfig g;
    g.beam_size = 1;
    g.max_new_tokens = 12;
    g.force_length = m % 2 == 1;
    const auto greedy = greedy_decode(src, p, g);
    const auto beam = beam_search(src, p, g);
    CHECK(beam.tokens == greedy.tokens);
    CHECK(beam.score == greedy.score);
    CHECK(beam.finished == greedy.finished);
  }
}

TEST_CASE("beam search scores at least as well as greedy") {
  for (std::uint64_t m = 0; m < 30; ++m) {
    const auto p = random_model(400 + m);
    std::mt19937_64 rng(m);
    const auto src = random_source(rng, 16, 5);
    GenerationConfig g;
    g.beam_size = 4;
    g.max_new_tokens = 8;
    g.force_length = true;
    CHECK(beam_search(src, p, g).score >= greedy_decode(src, p, g).score - 1e-12);
  }
}

TEST_CASE("lockstep batch decoding equals per-source decoding") {
  const auto p = random_model(9);
  std::mt19937_64 rng(10);
  std::vector<std::vector<std::int64_t>> sources;
  for (std::size_t i = 0; i < 3; ++i) sources.push_back(random_source(rng, 16, 3 + 2 * i));
  GenerationConfig g;
  g.beam_size = 3;
  g.max_new_tokens = 9;
  const auto batch = beam_search_batch(sources, p, g);
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto single = beam_search(sources[i], p, g);
    CHECK(batch[i].tokens == single.tokens);
    CHECK(batch[i].score == single.score);
  }
}


TEST_CASE("beam 2 finds the exhaustive optimum of the toy model") {
  const Hypothesis best = cpt::testing::toy_brute_force(3, 1.0);

  GenerationConfig g;
  g.max_new_tokens = 3;
  g.beam_size = 2;
  ToyModel toy;
  auto model = toy.beam_model();
  const auto beam = beam_search_groups(1, model, g).front();
  CHECK(beam.tokens == best.tokens);
  CHECK(std::abs(beam.score - best.score) < 1e-12);

  g.beam_size = 1;
  const auto greedy = beam_search_groups(1, model, g).front();
  CHECK(greedy.tokens != best.tokens);
}

TEST_CASE("benchmark harness") {
  const std::vector<BenchConfig> configs{{"deep-enc", 3, 1}, {"balanced", 2, 2}};
  GenerationConfig g;
  g.beam_size = 2;
  g.batch_size = 4;
  g.max_new_tokens = 24;
  BenchWorkload w;
  w.hidden = 32;
  w.heads = 2;
  w.vocab_size = 64;
  w.source_length = 16;
  w.reference = "balanced";
  const auto reports = throughput_bench(configs, g, w);
  REQUIRE(reports.size() == 2);
  for (const auto& r : reports) {
    CHECK(r.tokens == 96);
    CHECK(r.samples.size() == 3);
    CHECK(std::abs(r.tokens_per_second - r.tokens / r.seconds) < 1e-9 * r.tokens_per_second);
  }
  CHECK(reports[1].speedup == 1.0);

  const auto csv = reports_to_csv(reports);
  const auto back = reports_from_csv(csv);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].label == reports[i].label);
    CHECK(back[i].dec_layers == reports[i].dec_layers);
    CHECK(back[i].seconds == reports[i].seconds);
    CHECK(back[i].tokens_per_second == reports[i].tokens_per_second);
    CHECK(back[i].speedup == reports[i].speedup);
  }
  CHECK(reports_to_csv(back) == csv);
  CHECK(reports_to_svg(reports).find("balanced") != std::string::npos);

  const std::vector<BenchConfig> uneven{{"a", 3, 1}, {"b", 3, 2}};
  CHECK_THROWS_AS(throughput_bench(uneven, g, w), ConfigError);

  setenv("OMP_NUM_THREADS", "4", 1);
  CHECK_THROWS_AS(throughput_bench(configs, g, w), ConfigError);
  unsetenv("OMP_NUM_THREADS");
}

TEST_CASE("benchmark refuses workloads below timer resolution") {
  const std::vector<BenchConfig> configs{{"x", 1, 1}};
  GenerationConfig g;
  g.beam_size = 1;
  g.batch_size = 1;
  g.max_new_tokens = 1;
  BenchWorkload w;
  w.hidden = 4;
  w.heads = 1;
  w.vocab_size = 9;
  w.source_length = 2;
  CHECK_THROWS_AS(throughput_bench(configs, g, w), WorkloadTooSmall);
}

TEST_CASE("self comparison gives unit speedup") {
  const std::vector<BenchConfig> configs{{"one", 3, 3}, {"two", 3, 3}};
  GenerationConfig g;
  g.beam_size = 2;
  g.batch_size = 2;
  g.max_new_tokens = 24;
  BenchWorkload w;
  w.hidden = 32;
  w.vocab_size = 64;
  w.timed_reps = 5;
  const auto reports = throughput_bench(configs, g, w);
  CHECK(std::abs(reports[1].speedup - 1.0) < 0.05);
}

TEST_CASE("bench csv rejects malformed input") {
  CHECK_THROWS(reports_from_csv("wrong,header\n"));
  CHECK_THROWS(reports_from_csv("label,enc_layers,dec_layers,beam,batch,tokens,seconds,tok_per_s,speedup\na,1\n"));
}
