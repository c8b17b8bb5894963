#include "cpt/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cpt/kv_config.hpp"
#include "cpt/ops.hpp"

namespace cpt {

ModelConfig ModelConfig::base() {
  ModelConfig c;
  c.vocab_size = 21128;
  c.hidden = 768;
  c.heads = 12;
  c.layers_enc = 10;
  c.layers_udec = 2;
  c.layers_gdec = 2;
  c.max_positions = 512;
  return c;
}

ModelConfig ModelConfig::large() {
  ModelConfig c;
  c.vocab_size = 21128;
  c.hidden = 1024;
  c.heads = 16;
  c.layers_enc = 20;
  c.layers_udec = 4;
  c.layers_gdec = 4;
  c.max_positions = 512;
  return c;
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

void ModelConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(special::count)) {
    throw ConfigError("model: vocab_size " + std::to_string(vocab_size) + " leaves no room beyond the " +
                      std::to_string(special::count) + " special tokens");
  }
  block_shape().validate();
  if (layers_enc == 0) throw ConfigError("model: layers_enc must be at least 1");
  if (layers_udec == 0 || layers_gdec == 0) throw ConfigError("model: both decoders need at least one layer");
  if (layers_enc + layers_udec != layers_enc + layers_gdec) {
    throw ConfigError("model: understanding path depth " + std::to_string(layers_enc + layers_udec) +
                      " differs from generation path depth " + std::to_string(layers_enc + layers_gdec));
  }
  if (max_positions < 2) throw ConfigError("model: max_positions must be at least 2");
  if (ffn_mult == 0) throw ConfigError("model: ffn_mult must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must lie in [0, 1)");
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
  std::ostringstream d;
  d.precision(17);
  d << dropout;
  return {{"vocab_size", std::to_string(vocab_size)},   {"hidden", std::to_string(hidden)},
          {"heads", std::to_string(heads)},             {"layers_enc", std::to_string(layers_enc)},
          {"layers_udec", std::to_string(layers_udec)}, {"layers_gdec", std::to_string(layers_gdec)},
          {"max_positions", std::to_string(max_positions)}, {"ffn_mult", std::to_string(ffn_mult)},
          {"dropout", d.str()}};
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  c.vocab_size = kv_size(kv, "vocab_size", c.vocab_size);
  c.hidden = kv_size(kv, "hidden", c.hidden);
  c.heads = kv_size(kv, "heads", c.heads);
  c.layers_enc = kv_size(kv, "layers_enc", c.layers_enc);
  c.layers_udec = kv_size(kv, "layers_udec", c.layers_udec);
  c.layers_gdec = kv_size(kv, "layers_gdec", c.layers_gdec);
  c.max_positions = kv_size(kv, "max_positions", c.max_positions);
  c.ffn_mult = kv_size(kv, "ffn_mult", c.ffn_mult);
  c.dropout = kv_double(kv, "dropout", c.dropout);
  return c;
}

std::size_t activated_depth(const ModelConfig& config, TaskPath path) {
  config.validate();
  return config.layers_enc + (path == TaskPath::understanding ? config.layers_udec : config.layers_gdec);
}

std::size_t count_params(const ModelConfig& config) {
  config.validate();
  const std::size_t h = config.hidden, v = config.vocab_size, f = config.hidden * config.ffn_mult;
  const std::size_t attention = 4 * (h * h + h);
  const std::size_t norm = 2 * h;
  const std::size_t ffn = h * f + f + f * h + h;
  const std::size_t encoder_block = attention + norm + ffn + norm;
  const std::size_t decoder_block = encoder_block + attention + norm;
  const std::size_t embeddings = v * h + config.max_positions * h + 2 * norm;
  const std::size_t heads = 2 * v;
  return embeddings + (config.layers_enc + config.layers_udec) * encoder_block + config.layers_gdec * decoder_block +
         heads;
}

namespace {
std::string layer_prefix(const std::string& stack, std::size_t i) { return stack + ".layers." + std::to_string(i); }
}  // namespace

ArrayLayout model_layout(const ModelConfig& config) {
  config.validate();
  const std::size_t h = config.hidden;
  ArrayLayout out;
  out.emplace_back("embeddings.token", Shape{config.vocab_size, h});
  out.emplace_back("embeddings.position", Shape{config.max_positions, h});
  out.emplace_back("enc.embed_norm.gain", Shape{h});
  out.emplace_back("enc.embed_norm.bias", Shape{h});
  out.emplace_back("gdec.embed_norm.gain", Shape{h});
  out.emplace_back("gdec.embed_norm.bias", Shape{h});
  const BlockShape shape = config.block_shape();
  auto append = [&](const ArrayLayout& block) { out.insert(out.end(), block.begin(), block.end()); };
  for (std::size_t i = 0; i < config.layers_enc; ++i) append(block_layout(layer_prefix("enc", i), shape, false));
  for (std::size_t i = 0; i < config.layers_udec; ++i) append(block_layout(layer_prefix("udec", i), shape, false));
  for (std::size_t i = 0; i < config.layers_gdec; ++i) append(block_layout(layer_prefix("gdec", i), shape, true));
  out.emplace_back("mlm_head.bias", Shape{config.vocab_size});
  out.emplace_back("lm_head.bias", Shape{config.vocab_size});
  return out;
}

std::map<std::string, std::string> model_aliases() {
  return {{"gdec.embed_tokens", "embeddings.token"},
          {"gdec.embed_positions", "embeddings.position"},
          {"mlm_head.weight", "embeddings.token"},
          {"lm_head.weight", "embeddings.token"}};
}

CPTParams CPTParams::create(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  CPTParams p;
  p.config = config;
  std::mt19937_64 rng(seed);
  const std::size_t h = config.hidden;
  p.token_embeddings = p.store.add("embeddings.token", {config.vocab_size, h}, Init::normal, rng);
  p.position_embeddings = p.store.add("embeddings.position", {config.max_positions, h}, Init::normal, rng);
  p.enc_embed_norm = {p.store.add("enc.embed_norm.gain", {h}, Init::ones, rng),
                      p.store.add("enc.embed_norm.bias", {h}, Init::zeros, rng)};
  p.gdec_embed_norm = {p.store.add("gdec.embed_norm.gain", {h}, Init::ones, rng),
                       p.store.add("gdec.embed_norm.bias", {h}, Init::zeros, rng)};
  const BlockShape shape = config.block_shape();
  for (std::size_t i = 0; i < config.layers_enc; ++i) {
    p.enc_layers.push_back(make_block(p.store, layer_prefix("enc", i), shape, false, rng));
  }
  for (std::size_t i = 0; i < config.layers_udec; ++i) {
    p.udec_layers.push_back(make_block(p.store, layer_prefix("udec", i), shape, false, rng));
  }
  for (std::size_t i = 0; i < config.layers_gdec; ++i) {
    p.gdec_layers.push_back(make_block(p.store, layer_prefix("gdec", i), shape, true, rng));
  }
  p.mlm_head_bias = p.store.add("mlm_head.bias", {config.vocab_size}, Init::zeros, rng);
  p.lm_head_bias = p.store.add("lm_head.bias", {config.vocab_size}, Init::zeros, rng);
  for (const auto& [alias, canonical] : model_aliases()) p.store.alias(alias, canonical);
  return p;
}

std::vector<NamedParam> CPTParams::with_prefix(const std::string& prefix) const {
  std::vector<NamedParam> out;
  for (const auto& p : store.params()) {
    if (p.name.compare(0, prefix.size(), prefix) == 0) out.push_back(p);
  }
  return out;
}

std::vector<char> real_token_mask(std::span<const std::int64_t> ids) {
  std::vector<char> mask(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = ids[i] != special::pad ? 1 : 0;
  return mask;
}

namespace {
void check_length(std::size_t length, const ModelConfig& config, const char* what) {
  if (length == 0) throw TensorError(std::string(what) + ": empty input");
  if (length > config.max_positions) {
    throw TensorError(std::string(what) + ": length " + std::to_string(length) + " exceeds max_positions " +
                      std::to_string(config.max_positions));
  }
}
}  // namespace

Tensor encode(std::span<const std::int64_t> token_ids, const std::vector<char>& pad_mask, const CPTParams& params) {
  check_length(token_ids.size(), params.config, "encode");
  if (pad_mask.size() != token_ids.size()) throw TensorError("encode: pad mask length differs from input length");
  Tensor x = embed(token_ids, 0, params.token_embeddings, params.position_embeddings, params.enc_embed_norm);
  const auto mask = AttentionMask::padding(pad_mask);
  for (const auto& layer : params.enc_layers) x = encoder_layer(x, mask, layer);
  return x;
}

Tensor understand(const Tensor& enc_states, const std::vector<char>& pad_mask, const CPTParams& params) {
  if (enc_states.rows() != pad_mask.size()) throw TensorError("understand: pad mask length differs from states");
  Tensor x = enc_states;
  const auto mask = AttentionMask::padding(pad_mask);
  for (const auto& layer : params.udec_layers) x = encoder_layer(x, mask, layer);
  return x;
}

Tensor generate_forward(std::span<const std::int64_t> dec_token_ids, const Tensor& enc_states,
                        const std::vector<char>& enc_pad_mask, const CPTParams& params) {
  check_length(dec_token_ids.size(), params.config, "generate_forward");
  if (enc_states.rows() != enc_pad_mask.size()) {
    throw TensorError("generate_forward: encoder pad mask length differs from encoder states");
  }
  Tensor x = embed(dec_token_ids, 0, params.token_embeddings, params.position_embeddings, params.gdec_embed_norm);
  const auto self_mask = AttentionMask::causal(dec_token_ids.size());
  const auto enc_mask = AttentionMask::padding(enc_pad_mask);
  for (const auto& layer : params.gdec_layers) x = decoder_layer(x, enc_states, self_mask, enc_mask, layer);
  return x;
}

Tensor mlm_logits(const Tensor& udec_states, const CPTParams& params) {
  return ops::add_row(ops::matmul_nt(udec_states, params.token_embeddings), params.mlm_head_bias);
}

Tensor lm_logits(const Tensor& gdec_states, const CPTParams& params) {
  return ops::add_row(ops::matmul_nt(gdec_states, params.token_embeddings), params.lm_head_bias);
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

constexpr char kMagic[8] = {'C', 'P', 'T', 'C', 'K', 'P', 'T', '1'};

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void write_str(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint64_t read_uint(std::istream& in, int bytes, const std::string& what) {
  unsigned char b[8] = {};
  if (!in.read(reinterpret_cast<char*>(b), bytes)) throw std::runtime_error("checkpoint: truncated while reading " + what);
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::string read_str(std::istream& in, const std::string& what) {
  const auto len = read_uint(in, 4, what);
  if (len > (1u << 20)) throw std::runtime_error("checkpoint: implausible string length in " + what);
  std::string s(len, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("checkpoint: truncated " + what);
  return s;
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".config";
  return p;
}

struct RawArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct RawCheckpoint {
  std::vector<RawArray> arrays;
  std::map<std::string, std::string> aliases;
};

RawCheckpoint read_raw(const std::filesystem::path& path, bool with_values) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: " + path.string() + " is not a checkpoint file");
  }
  RawCheckpoint raw;
  const auto n_arrays = read_uint(in, 8, "array count");
  const auto n_aliases = read_uint(in, 8, "alias count");
  for (std::uint64_t a = 0; a < n_arrays; ++a) {
    RawArray arr;
    arr.name = read_str(in, "array name");
    const auto rank = read_uint(in, 4, arr.name + " rank");
    for (std::uint64_t r = 0; r < rank; ++r) arr.shape.push_back(read_uint(in, 8, arr.name + " dims"));
    const std::size_t n = shape_numel(arr.shape);
    if (with_values) {
      arr.values.resize(n);
      for (std::size_t i = 0; i < n; ++i) arr.values[i] = std::bit_cast<double>(read_uint(in, 8, arr.name));
    } else {
      in.seekg(static_cast<std::streamoff>(n * 8), std::ios::cur);
    }
    raw.arrays.push_back(std::move(arr));
  }
  for (std::uint64_t a = 0; a < n_aliases; ++a) {
    std::string alias = read_str(in, "alias name");
    raw.aliases[alias] = read_str(in, "alias target");
  }
  return raw;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store,
                     const std::map<std::string, std::string>& sidecar) {
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
    out.write(kMagic, 8);
    write_u64(out, store.params().size());
    write_u64(out, store.aliases().size());
    for (const auto& p : store.params()) {
      write_str(out, p.name);
      write_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
      for (auto d : p.tensor.shape()) write_u64(out, d);
      for (double v : p.tensor.values()) write_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    for (const auto& [alias, canonical] : store.aliases()) {
      write_str(out, alias);
      write_str(out, canonical);
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
  }
  std::ofstream side(sidecar_path(path), std::ios::trunc);
  if (!side) throw std::runtime_error("checkpoint: cannot write sidecar for " + path.string());
  side << format_kv(sidecar);
}

void load_checkpoint_into(const std::filesystem::path& path, ParamStore& store) {
  const RawCheckpoint raw = read_raw(path, true);
  if (raw.arrays.size() != store.params().size()) {
    throw std::runtime_error("checkpoint: " + path.string() + " holds " + std::to_string(raw.arrays.size()) +
                             " arrays, model expects " + std::to_string(store.params().size()));
  }
  for (const auto& arr : raw.arrays) {
    if (!store.contains(arr.name) || store.canonical(arr.name) != arr.name) {
      throw std::runtime_error("checkpoint: unexpected array " + arr.name);
    }
    Tensor t = store.get(arr.name);
    if (t.shape() != arr.shape) {
      throw std::runtime_error("checkpoint: array " + arr.name + " has shape " + shape_string(arr.shape) +
                               ", model expects " + shape_string(t.shape()));
    }
    auto dst = t.mutable_values();
    std::copy(arr.values.begin(), arr.values.end(), dst.begin());
  }
  for (const auto& [alias, canonical] : raw.aliases) {
    if (!store.contains(alias) || store.canonical(alias) != canonical) {
      throw std::runtime_error("checkpoint: alias " + alias + " -> " + canonical + " does not match the model");
    }
  }
}

std::map<std::string, std::string> read_sidecar(const std::filesystem::path& path) {
  return read_kv_file(sidecar_path(path));
}

void save_model(const std::filesystem::path& path, const CPTParams& params) {
  save_checkpoint(path, params.store, params.config.to_kv());
}

CPTParams load_model(const std::filesystem::path& path) {
  const ModelConfig config = ModelConfig::from_kv(read_sidecar(path));
  CPTParams params = CPTParams::create(config, 0);
  load_checkpoint_into(path, params.store);
  return params;
}

CheckpointListing list_checkpoint(const std::filesystem::path& path) {
  RawCheckpoint raw = read_raw(path, false);
  CheckpointListing out;
  for (auto& a : raw.arrays) out.arrays.push_back({std::move(a.name), std::move(a.shape)});
  out.aliases = std::move(raw.aliases);
  return out;
}

}  // namespace cpt
