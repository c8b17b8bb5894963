#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cpt/model.hpp"

namespace cpt {

struct GenerationConfig {
  std::size_t beam_size = 4;
  std::size_t batch_size = 8;
  std::size_t max_new_tokens = 64;
  double length_penalty = 1.0;
  /// Suppress [EOS] and always emit max_new_tokens tokens (benchmark mode).
  bool force_length = false;

  void validate() const;
};

/// Process-wide counters used to check that cached decoding does the
/// expected amount of work.
struct InferenceCounters {
  std::size_t encoder_passes = 0;
  std::size_t cross_kv_builds = 0;
  std::size_t decoder_rows = 0;  // one per hypothesis per cached step
};
InferenceCounters& inference_counters();
void reset_inference_counters();

/// Encoder output for one source plus the cross-attention keys and values
/// of every G-Dec layer, projected once.
struct EncoderMemory {
  Tensor states;
  std::vector<char> pad_mask;
  std::vector<Tensor> cross_k;
  std::vector<Tensor> cross_v;
};

EncoderMemory prepare_memory(std::span<const std::int64_t> src_ids, const CPTParams& params);

/// Self-attention keys and values for one hypothesis, one row per decoded token.
struct DecodeCache {
  std::vector<std::int64_t> tokens;             // decoder inputs consumed so far
  std::vector<std::vector<double>> keys;        // per layer, row-major [length, H]
  std::vector<std::vector<double>> values;

  std::size_t length() const { return tokens.size(); }
};

DecodeCache empty_cache(const CPTParams& params);

/// Feeds `next_token` at position cache.length() and returns the G-Dec
/// logits [1, V] for the following token. Throws when the cache does not
/// belong to this model or would exceed max_positions.
Tensor cached_step(std::int64_t next_token, DecodeCache& cache, const EncoderMemory& memory, const CPTParams& params);

/// Batched form: row r feeds tokens[r] into caches[r] against memories[r].
/// All caches must have the same length. Returns logits [rows, V].
Tensor cached_step_rows(std::span<const std::int64_t> tokens, std::span<DecodeCache* const> caches,
                        std::span<const EncoderMemory* const> memories, const CPTParams& params);

/// Throws TensorError unless the cache was built from exactly `prefix`.
void check_cache_prefix(const DecodeCache& cache, std::span<const std::int64_t> prefix);

/// Logits [1, V] after `prefix` computed by a full forward without a cache.
Tensor uncached_next_logits(std::span<const std::int64_t> prefix, const EncoderMemory& memory,
                            const CPTParams& params);

struct Hypothesis {
  std::vector<std::int64_t> tokens;  // generated tokens, including a final [EOS] when one was produced
  double log_prob = 0.0;
  double score = 0.0;
  bool finished = false;  // ended with [EOS]
};

/// Length-normalised score: log_prob / length^penalty.
double hypothesis_score(double log_prob, std::size_t length, double length_penalty);

/// Argmax decoding from [BOS]; ties go to the lowest id.
Hypothesis greedy_decode(std::span<const std::int64_t> src_ids, const CPTParams& params, const GenerationConfig& cfg);

/// Source-independent step function for beam search. `advance` receives,
/// for every new row, the index of its parent row in the previous call
/// (empty on the first call) and the token it feeds, and returns one
/// log-probability row per new row.
struct BeamModel {
  std::size_t vocab = 0;
  std::function<std::vector<std::vector<double>>(std::span<const std::size_t> parents,
                                                  std::span<const std::int64_t> tokens)>
      advance;
};

/// Beam search over `groups` independent sources advanced in lockstep;
/// group g's rows are contiguous in every advance call.
std::vector<Hypothesis> beam_search_groups(std::size_t groups, BeamModel& model, const GenerationConfig& cfg);

Hypothesis beam_search(std::span<const std::int64_t> src_ids, const CPTParams& params, const GenerationConfig& cfg);
/// One beam search per source, decoded together in lockstep.
std::vector<Hypothesis> beam_search_batch(std::span<const std::vector<std::int64_t>> sources,
                                          const CPTParams& params, const GenerationConfig& cfg);

// ---------------------------------------------------------------------------
// Throughput benchmark

struct BenchConfig {
  std::string label;
  std::size_t enc_layers = 0;
  std::size_t dec_layers = 0;
};

struct BenchWorkload {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t vocab_size = 263;
  std::size_t source_length = 32;
  std::size_t warmup_reps = 1;
  std::size_t timed_reps = 3;
  std::uint64_t seed = 0;
  /// Reported speedups are relative to this label (default: the first config).
  std::string reference;
};

struct ThroughputReport {
  std::string label;
  std::size_t enc_layers = 0;
  std::size_t dec_layers = 0;
  std::size_t beam = 0;
  std::size_t batch = 0;
  std::size_t tokens = 0;
  double seconds = 0.0;  // median over timed repetitions
  double tokens_per_second = 0.0;
  double speedup = 0.0;
  std::vector<double> samples;  // every timed repetition
};

/// Thrown when the measured time is too short for the clock to resolve.
class WorkloadTooSmall : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<ThroughputReport> throughput_bench(std::span<const BenchConfig> configs, const GenerationConfig& gen,
                                               const BenchWorkload& workload);

std::string reports_to_csv(std::span<const ThroughputReport> reports);
std::vector<ThroughputReport> reports_from_csv(const std::string& text);
/// Grouped bar chart of tokens/second, as a standalone SVG document.
std::string reports_to_svg(std::span<const ThroughputReport> reports);

}  // namespace cpt
