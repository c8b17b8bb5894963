#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cpt/params.hpp"
#include "cpt/tensor.hpp"

namespace cpt {

/// Raised for invalid architecture settings, before any compute runs.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class MaskKind { full, causal, padding_only };

/// Which keys a query may attend to. `key_real[k]` is false for [PAD] keys.
/// For causal masks, query row q sits at absolute position q + query_offset
/// and may see keys 0..q + query_offset.
struct AttentionMask {
  MaskKind kind = MaskKind::full;
  std::vector<char> key_real;
  std::size_t query_offset = 0;

  static AttentionMask full(std::size_t keys);
  static AttentionMask causal(std::size_t keys, std::size_t query_offset = 0);
  static AttentionMask padding(std::vector<char> key_real);

  bool allows(std::size_t query, std::size_t key) const;
  std::vector<char> allowed(std::size_t queries, std::size_t keys) const;
};

struct NormWeights {
  Tensor gain;
  Tensor bias;
};

struct AttentionWeights {
  std::size_t heads = 1;
  Tensor q_weight, q_bias;
  Tensor k_weight, k_bias;
  Tensor v_weight, v_bias;
  Tensor o_weight, o_bias;
};

struct FfnWeights {
  Tensor in_weight, in_bias;    // [H, 4H], [4H]
  Tensor out_weight, out_bias;  // [4H, H], [H]
};

struct BlockWeights {
  AttentionWeights self_attn;
  NormWeights self_attn_norm;
  std::optional<AttentionWeights> cross_attn;
  std::optional<NormWeights> cross_attn_norm;
  FfnWeights ffn;
  NormWeights ffn_norm;
};

struct BlockShape {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn_inner = 256;

  /// Throws ConfigError when hidden is not divisible by heads.
  void validate() const;
};

using ArrayLayout = std::vector<std::pair<std::string, Shape>>;

/// Names and shapes of every array in one block, in registration order.
ArrayLayout block_layout(const std::string& prefix, const BlockShape& shape, bool with_cross);

BlockWeights make_block(ParamStore& store, const std::string& prefix, const BlockShape& shape, bool with_cross,
                        std::mt19937_64& rng);

/// Dropout applied after each sublayer; rate 0 disables it.
struct DropoutSpec {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;
};

/// Per-head attention probabilities, one [queries, keys] matrix per head.
struct AttentionTrace {
  std::vector<Tensor> probabilities;
};

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                            const AttentionMask& mask, const AttentionWeights& weights,
                            AttentionTrace* trace = nullptr);

/// Splits projected [n, H] states into heads and attends; keys and values
/// are already projected. Used by the incremental decoder.
Tensor attend_projected(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                        std::size_t heads, AttentionTrace* trace = nullptr);

Tensor feed_forward(const Tensor& x, const FfnWeights& weights);

Tensor encoder_layer(const Tensor& x, const AttentionMask& mask, const BlockWeights& weights,
                     const DropoutSpec& dropout = {}, AttentionTrace* trace = nullptr);

Tensor decoder_layer(const Tensor& x, const Tensor& enc_out, const AttentionMask& self_mask,
                     const AttentionMask& enc_mask, const BlockWeights& weights, const DropoutSpec& dropout = {});

/// Token embedding plus learned absolute position embedding, layer-normed.
Tensor embed(std::span<const std::int64_t> token_ids, std::size_t position_offset, const Tensor& token_table,
             const Tensor& position_table, const NormWeights& norm);

}  // namespace cpt
