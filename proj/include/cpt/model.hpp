#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cpt/blocks.hpp"
#include "cpt/params.hpp"
#include "cpt/tensor.hpp"

namespace cpt {

namespace special {
inline constexpr std::int64_t pad = 0;
inline constexpr std::int64_t unk = 1;
inline constexpr std::int64_t cls = 2;
inline constexpr std::int64_t sep = 3;
inline constexpr std::int64_t mask = 4;
inline constexpr std::int64_t bos = 5;
inline constexpr std::int64_t eos = 6;
inline constexpr std::int64_t count = 7;
}  // namespace special

struct ModelConfig {
  std::size_t vocab_size = 263;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t layers_enc = 4;
  std::size_t layers_udec = 1;
  std::size_t layers_gdec = 1;
  std::size_t max_positions = 128;
  std::size_t ffn_mult = 4;
  double dropout = 0.0;

  static ModelConfig base();
  static ModelConfig large();
  static ModelConfig desk();

  /// Throws ConfigError. Both task paths must activate the same depth.
  void validate() const;
  BlockShape block_shape() const { return {hidden, heads, hidden * ffn_mult}; }

  std::map<std::string, std::string> to_kv() const;
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);
  bool operator==(const ModelConfig&) const = default;
};

enum class TaskPath { understanding, generation };

std::size_t activated_depth(const ModelConfig& config, TaskPath path);

/// Closed-form parameter count; tied arrays counted once.
std::size_t count_params(const ModelConfig& config);

/// Every stored array (canonical names only) in registration order.
ArrayLayout model_layout(const ModelConfig& config);

/// Alias name -> canonical name for the tied arrays.
std::map<std::string, std::string> model_aliases();

/// All weights of the unbalanced encoder / two-decoder model.
///
/// The token embedding matrix is one storage shared by the encoder input,
/// the generation decoder input, the MLM output head and the LM output
/// head. Position embeddings are shared by the encoder and the generation
/// decoder; the understanding decoder consumes encoder states directly.
struct CPTParams {
  ModelConfig config;
  ParamStore store;

  Tensor token_embeddings;
  Tensor position_embeddings;
  NormWeights enc_embed_norm;
  NormWeights gdec_embed_norm;
  std::vector<BlockWeights> enc_layers;
  std::vector<BlockWeights> udec_layers;
  std::vector<BlockWeights> gdec_layers;
  Tensor mlm_head_bias;
  Tensor lm_head_bias;

  static CPTParams create(const ModelConfig& config, std::uint64_t seed);

  /// Named arrays whose canonical name starts with `prefix`.
  std::vector<NamedParam> with_prefix(const std::string& prefix) const;
};

Tensor encode(std::span<const std::int64_t> token_ids, const std::vector<char>& pad_mask, const CPTParams& params);
Tensor understand(const Tensor& enc_states, const std::vector<char>& pad_mask, const CPTParams& params);
Tensor generate_forward(std::span<const std::int64_t> dec_token_ids, const Tensor& enc_states,
                        const std::vector<char>& enc_pad_mask, const CPTParams& params);

Tensor mlm_logits(const Tensor& udec_states, const CPTParams& params);
Tensor lm_logits(const Tensor& gdec_states, const CPTParams& params);

/// pad_mask for ids: true where the id is not [PAD].
std::vector<char> real_token_mask(std::span<const std::int64_t> ids);

// Checkpoint container: little-endian named float64 arrays with alias
// records, and a key=value sidecar at `<path>.config`.
void save_checkpoint(const std::filesystem::path& path, const ParamStore& store,
                     const std::map<std::string, std::string>& sidecar);
/// Loads arrays into an existing store; names and shapes must match.
void load_checkpoint_into(const std::filesystem::path& path, ParamStore& store);
std::map<std::string, std::string> read_sidecar(const std::filesystem::path& path);

void save_model(const std::filesystem::path& path, const CPTParams& params);
CPTParams load_model(const std::filesystem::path& path);

struct CheckpointEntry {
  std::string name;
  Shape shape;
};

struct CheckpointListing {
  std::vector<CheckpointEntry> arrays;
  std::map<std::string, std::string> aliases;
};

CheckpointListing list_checkpoint(const std::filesystem::path& path);

}  // namespace cpt
