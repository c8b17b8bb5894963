#include "cpt/blocks.hpp"

#include <cmath>

#include "cpt/ops.hpp"

namespace cpt {

AttentionMask AttentionMask::full(std::size_t keys) { return {MaskKind::full, std::vector<char>(keys, 1), 0}; }

AttentionMask AttentionMask::causal(std::size_t keys, std::size_t query_offset) {
  return {MaskKind::causal, std::vector<char>(keys, 1), query_offset};
}

AttentionMask AttentionMask::padding(std::vector<char> key_real) {
  return {MaskKind::padding_only, std::move(key_real), 0};
}

bool AttentionMask::allows(std::size_t query, std::size_t key) const {
  if (key >= key_real.size() || !key_real[key]) return false;
  return kind != MaskKind::causal || key <= query + query_offset;
}

std::vector<char> AttentionMask::allowed(std::size_t queries, std::size_t keys) const {
  if (keys != key_real.size()) {
    throw TensorError("attention mask covers " + std::to_string(key_real.size()) + " keys, got " +
                      std::to_string(keys));
  }
  std::vector<char> out(queries * keys);
  for (std::size_t q = 0; q < queries; ++q)
    for (std::size_t k = 0; k < keys; ++k) out[q * keys + k] = allows(q, k) ? 1 : 0;
  return out;
}

void BlockShape::validate() const {
  if (hidden == 0 || heads == 0) throw ConfigError("block: hidden and heads must be positive");
  if (hidden % heads != 0) {
    throw ConfigError("block: hidden " + std::to_string(hidden) + " is not divisible by heads " +
                      std::to_string(heads));
  }
  if (ffn_inner == 0) throw ConfigError("block: ffn_inner must be positive");
}

namespace {

void append_attention(ArrayLayout& out, const std::string& prefix, std::size_t h) {
  for (const char* proj : {"q", "k", "v", "o"}) {
    out.emplace_back(prefix + "." + proj + ".weight", Shape{h, h});
    out.emplace_back(prefix + "." + proj + ".bias", Shape{h});
  }
}

void append_norm(ArrayLayout& out, const std::string& prefix, std::size_t h) {
  out.emplace_back(prefix + ".gain", Shape{h});
  out.emplace_back(prefix + ".bias", Shape{h});
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

AttentionWeights lookup_attention(const ParamStore& store, const std::string& prefix, std::size_t heads) {
  AttentionWeights w;
  w.heads = heads;
  w.q_weight = store.get(prefix + ".q.weight");
  w.q_bias = store.get(prefix + ".q.bias");
  w.k_weight = store.get(prefix + ".k.weight");
  w.k_bias = store.get(prefix + ".k.bias");
  w.v_weight = store.get(prefix + ".v.weight");
  w.v_bias = store.get(prefix + ".v.bias");
  w.o_weight = store.get(prefix + ".o.weight");
  w.o_bias = store.get(prefix + ".o.bias");
  return w;
}

NormWeights lookup_norm(const ParamStore& store, const std::string& prefix) {
  return {store.get(prefix + ".gain"), store.get(prefix + ".bias")};
}

Tensor apply_dropout(const Tensor& x, const DropoutSpec& spec) {
  if (spec.rate == 0.0) return x;
  if (!spec.rng) throw ConfigError("dropout: non-zero rate requires an rng");
  return ops::dropout(x, spec.rate, *spec.rng);
}

Tensor project(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return ops::add_row(ops::matmul(x, weight), bias);
}

}  // namespace

ArrayLayout block_layout(const std::string& prefix, const BlockShape& shape, bool with_cross) {
  shape.validate();
  const std::size_t h = shape.hidden;
  ArrayLayout out;
  append_attention(out, prefix + ".self_attn", h);
  append_norm(out, prefix + ".self_attn_norm", h);
  if (with_cross) {
    append_attention(out, prefix + ".cross_attn", h);
    append_norm(out, prefix + ".cross_attn_norm", h);
  }
  out.emplace_back(prefix + ".ffn.in.weight", Shape{h, shape.ffn_inner});
  out.emplace_back(prefix + ".ffn.in.bias", Shape{shape.ffn_inner});
  out.emplace_back(prefix + ".ffn.out.weight", Shape{shape.ffn_inner, h});
  out.emplace_back(prefix + ".ffn.out.bias", Shape{h});
  append_norm(out, prefix + ".ffn_norm", h);
  return out;
}

BlockWeights make_block(ParamStore& store, const std::string& prefix, const BlockShape& shape, bool with_cross,
                        std::mt19937_64& rng) {
  for (const auto& [name, dims] : block_layout(prefix, shape, with_cross)) {
    const Init init = ends_with(name, ".weight") ? Init::normal : ends_with(name, ".gain") ? Init::ones : Init::zeros;
    store.add(name, dims, init, rng);
  }
  BlockWeights w;
  w.self_attn = lookup_attention(store, prefix + ".self_attn", shape.heads);
  w.self_attn_norm = lookup_norm(store, prefix + ".self_attn_norm");
  if (with_cross) {
    w.cross_attn = lookup_attention(store, prefix + ".cross_attn", shape.heads);
    w.cross_attn_norm = lookup_norm(store, prefix + ".cross_attn_norm");
  }
  w.ffn = {store.get(prefix + ".ffn.in.weight"), store.get(prefix + ".ffn.in.bias"),
           store.get(prefix + ".ffn.out.weight"), store.get(prefix + ".ffn.out.bias")};
  w.ffn_norm = lookup_norm(store, prefix + ".ffn_norm");
  return w;
}

Tensor attend_projected(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                        std::size_t heads, AttentionTrace* trace) {
  const std::size_t hidden = q.cols();
  if (heads == 0 || hidden % heads != 0) throw ConfigError("attention: hidden not divisible by heads");
  if (k.cols() != hidden || v.cols() != hidden || k.rows() != v.rows()) {
    throw TensorError("attention: key/value shapes " + shape_string(k.shape()) + ", " + shape_string(v.shape()) +
                      " do not match queries " + shape_string(q.shape()));
  }
  const std::size_t head_dim = hidden / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const auto allowed = mask.allowed(q.rows(), k.rows());

  std::vector<Tensor> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = ops::slice_cols(q, h * head_dim, head_dim);
    const Tensor kh = ops::slice_cols(k, h * head_dim, head_dim);
    const Tensor vh = ops::slice_cols(v, h * head_dim, head_dim);
    const Tensor probs = ops::masked_softmax_rows(ops::scale(ops::matmul_nt(qh, kh), scale), allowed);
    if (trace) trace->probabilities.push_back(probs);
    outputs.push_back(ops::matmul(probs, vh));
  }
  return heads == 1 ? outputs.front() : ops::concat_cols(outputs);
}

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                            const AttentionMask& mask, const AttentionWeights& w, AttentionTrace* trace) {
  const Tensor q = project(queries, w.q_weight, w.q_bias);
  const Tensor k = project(keys, w.k_weight, w.k_bias);
  const Tensor v = project(values, w.v_weight, w.v_bias);
  return project(attend_projected(q, k, v, mask, w.heads, trace), w.o_weight, w.o_bias);
}

Tensor feed_forward(const Tensor& x, const FfnWeights& w) {
  return project(ops::gelu(project(x, w.in_weight, w.in_bias)), w.out_weight, w.out_bias);
}

Tensor encoder_layer(const Tensor& x, const AttentionMask& mask, const BlockWeights& w, const DropoutSpec& dropout,
                     AttentionTrace* trace) {
  const Tensor attn = apply_dropout(multi_head_attention(x, x, x, mask, w.self_attn, trace), dropout);
  const Tensor h = ops::layer_norm(ops::add(x, attn), w.self_attn_norm.gain, w.self_attn_norm.bias);
  const Tensor ffn = apply_dropout(feed_forward(h, w.ffn), dropout);
  return ops::layer_norm(ops::add(h, ffn), w.ffn_norm.gain, w.ffn_norm.bias);
}

Tensor decoder_layer(const Tensor& x, const Tensor& enc_out, const AttentionMask& self_mask,
                     const AttentionMask& enc_mask, const BlockWeights& w, const DropoutSpec& dropout) {
  if (!w.cross_attn || !w.cross_attn_norm) throw ConfigError("decoder layer: block has no cross-attention weights");
  const Tensor self_attn = apply_dropout(multi_head_attention(x, x, x, self_mask, w.self_attn), dropout);
  const Tensor h1 = ops::layer_norm(ops::add(x, self_attn), w.self_attn_norm.gain, w.self_attn_norm.bias);
  const Tensor cross = apply_dropout(multi_head_attention(h1, enc_out, enc_out, enc_mask, *w.cross_attn), dropout);
  const Tensor h2 = ops::layer_norm(ops::add(h1, cross), w.cross_attn_norm->gain, w.cross_attn_norm->bias);
  const Tensor ffn = apply_dropout(feed_forward(h2, w.ffn), dropout);
  return ops::layer_norm(ops::add(h2, ffn), w.ffn_norm.gain, w.ffn_norm.bias);
}

Tensor embed(std::span<const std::int64_t> token_ids, std::size_t position_offset, const Tensor& token_table,
             const Tensor& position_table, const NormWeights& norm) {
  const std::size_t max_positions = position_table.rows();
  if (position_offset + token_ids.size() > max_positions) {
    throw TensorError("embed: position " + std::to_string(position_offset + token_ids.size() - 1) +
                      " exceeds max_positions " + std::to_string(max_positions));
  }
  std::vector<std::int64_t> positions(token_ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int64_t>(position_offset + i);
  const Tensor summed = ops::add(ops::gather_rows(token_table, token_ids), ops::gather_rows(position_table, positions));
  return ops::layer_norm(summed, norm.gain, norm.bias);
}

}  // namespace cpt
