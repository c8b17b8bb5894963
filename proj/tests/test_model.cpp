#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "cpt/model.hpp"
#include "cpt/ops.hpp"
#include "support/gradcheck.hpp"

using namespace cpt;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.vocab_size = 20;
  c.hidden = 8;
  c.heads = 2;
  c.layers_enc = 2;
  c.layers_udec = 1;
  c.layers_gdec = 1;
  c.max_positions = 16;
  return c;
}

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "cpt_test_model";
  fs::create_directories(dir);
  return dir / name;
}

void randomize(CPTParams& p, const std::string& prefix, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& np : p.with_prefix(prefix)) {
    for (auto& v : np.tensor.mutable_values()) v = standard_normal(rng);
  }
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double grad_norm(const std::vector<NamedParam>& params) {
  double s = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) s += g * g;
  }
  return std::sqrt(s);
}

const std::vector<std::int64_t> kSrc{special::cls, 9, 10, 11, 12, special::sep};
const std::vector<std::int64_t> kDec{special::bos, 9, 10, 11};

}  // namespace

TEST_CASE("parameter counts of the published presets") {
  // Closed form evaluated independently in Python: 120622864 and 391701776.
  CHECK(count_params(ModelConfig::base()) == 120622864);
  CHECK(count_params(ModelConfig::large()) == 391701776);
  CHECK(std::abs(count_params(ModelConfig::base()) / 121e6 - 1.0) < 0.03);
  CHECK(std::abs(count_params(ModelConfig::large()) / 393e6 - 1.0) < 0.03);
  CHECK(count_params(ModelConfig::desk()) == 342478);
}

TEST_CASE("closed-form count matches the enumerated layout and the built store") {
  std::mt19937_64 rng(21);
  std::vector<ModelConfig> configs{ModelConfig::desk(), tiny()};
  for (int i = 0; i < 20; ++i) {
    ModelConfig c;
    c.heads = 1 + uniform_below(rng, 4);
    c.hidden = c.heads * (1 + uniform_below(rng, 6));
    c.vocab_size = 8 + uniform_below(rng, 40);
    c.layers_enc = 1 + uniform_below(rng, 4);
    c.layers_udec = c.layers_gdec = 1 + uniform_below(rng, 3);
    c.max_positions = 2 + uniform_below(rng, 30);
    c.ffn_mult = 1 + uniform_below(rng, 4);
    configs.push_back(c);
  }
  for (const auto& c : configs) {
    std::size_t enumerated = 0;
    for (const auto& [name, shape] : model_layout(c)) enumerated += shape_numel(shape);
    CHECK(count_params(c) == enumerated);
    CHECK(CPTParams::create(c, 1).store.total_elements() == enumerated);
  }
}

TEST_CASE("activated depth and validation") {
  const auto base = ModelConfig::base();
  CHECK(activated_depth(base, TaskPath::understanding) == 12);
  CHECK(activated_depth(base, TaskPath::generation) == 12);
  auto bad = tiny();
  bad.layers_gdec = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny();
  bad.hidden = 9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny();
  bad.vocab_size = 7;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(CPTParams::create(bad, 1), ConfigError);
}

TEST_CASE("config key=value round trip") {
  auto c = tiny();
  c.dropout = 0.1;
  CHECK(ModelConfig::from_kv(c.to_kv()) == c);
}

TEST_CASE("token embeddings are tied across all four uses") {
  const auto p = CPTParams::create(tiny(), 3);
  for (const char* name : {"gdec.embed_tokens", "mlm_head.weight", "lm_head.weight"}) {
    CHECK(p.store.get(name).same_storage(p.token_embeddings));
  }
  CHECK(p.store.get("gdec.embed_positions").same_storage(p.position_embeddings));
  CHECK_FALSE(p.mlm_head_bias.same_storage(p.lm_head_bias));
}

TEST_CASE("sequence length beyond max_positions is rejected") {
  const auto p = CPTParams::create(tiny(), 3);
  const std::vector<std::int64_t> long_ids(17, 9);
  CHECK_THROWS_WITH(encode(long_ids, real_token_mask(long_ids), p), doctest::Contains("16"));
}

TEST_CASE("decoder separation") {
  auto p = CPTParams::create(tiny(), 4);
  const auto mask = real_token_mask(kSrc);
  const auto mlm_before = mlm_logits(understand(encode(kSrc, mask, p), mask, p), p);
  const auto lm_before = lm_logits(generate_forward(kDec, encode(kSrc, mask, p), mask, p), p);

  randomize(p, "gdec.layers", 40);
  const auto mlm_after = mlm_logits(understand(encode(kSrc, mask, p), mask, p), p);
  CHECK(bit_equal(mlm_before.values(), mlm_after.values()));
  const auto lm_mid = lm_logits(generate_forward(kDec, encode(kSrc, mask, p), mask, p), p);
  CHECK_FALSE(bit_equal(lm_before.values(), lm_mid.values()));

  randomize(p, "udec.", 41);
  const auto lm_after = lm_logits(generate_forward(kDec, encode(kSrc, mask, p), mask, p), p);
  CHECK(bit_equal(lm_mid.values(), lm_after.values()));
}

TEST_CASE("gradient routing per task path") {
  auto p = CPTParams::create(tiny(), 5);
  const auto mask = real_token_mask(kSrc);
  const std::vector<std::int64_t> targets{20, 9, 20, 20, 12, 20};

  p.store.zero_grad();
  backward(ops::cross_entropy(mlm_logits(understand(encode(kSrc, mask, p), mask, p), p), targets).value);
  CHECK(grad_norm(p.with_prefix("gdec.")) == 0.0);
  CHECK(grad_norm(p.with_prefix("lm_head.")) == 0.0);
  CHECK(grad_norm(p.with_prefix("udec.")) > 0.0);
  CHECK(grad_norm(p.with_prefix("enc.layers")) > 0.0);

  p.store.zero_grad();
  const std::vector<std::int64_t> dec_targets{9, 10, 11, special::eos};
  backward(ops::cross_entropy(lm_logits(generate_forward(kDec, encode(kSrc, mask, p), mask, p), p), dec_targets)
               .value);
  CHECK(grad_norm(p.with_prefix("udec.")) == 0.0);
  CHECK(grad_norm(p.with_prefix("mlm_head.")) == 0.0);
  CHECK(grad_norm(p.with_prefix("gdec.")) > 0.0);
  CHECK(grad_norm(p.with_prefix("enc.layers")) > 0.0);
}

TEST_CASE("padding keys do not change real-token states") {
  const auto p = CPTParams::create(tiny(), 6);
  auto padded = kSrc;
  padded.insert(padded.end(), 3, special::pad);
  const auto a = understand(encode(kSrc, real_token_mask(kSrc), p), real_token_mask(kSrc), p);
  const auto b = understand(encode(padded, real_token_mask(padded), p), real_token_mask(padded), p);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.values()[i] - b.values()[i]) < 1e-10);
}

TEST_CASE("full model gradient check: MLM plus DAE loss") {
  auto p = CPTParams::create(tiny(), 7);
  randomize(p, "enc.layers.0.ffn", 70);  // larger weights for a non-degenerate check
  const auto mask = real_token_mask(kSrc);
  const std::vector<std::int64_t> mlm_targets{20, 9, 20, 11, 20, 20};
  const std::vector<std::int64_t> dae_targets{9, 10, 11, special::eos};
  auto loss = [&] {
    const auto enc = encode(kSrc, mask, p);
    const auto mlm = ops::cross_entropy(mlm_logits(understand(enc, mask, p), p), mlm_targets).value;
    const auto dae = ops::cross_entropy(lm_logits(generate_forward(kDec, enc, mask, p), p), dae_targets).value;
    return ops::add(mlm, dae);
  };
  std::vector<std::pair<std::string, Tensor>> leaves;
  for (const auto& np : p.store.params()) leaves.emplace_back(np.name, np.tensor);
  const auto r = cpt::testing::grad_check(loss, leaves, 5, 71);
  INFO(r.worst_location);
  CHECK(r.checked >= 200);
  CHECK(r.worst_relative_error < 1e-4);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const auto p = CPTParams::create(tiny(), 8);
  const auto path = temp_path("roundtrip.ckpt");
  save_model(path, p);
  const auto q = load_model(path);
  CHECK(q.config == p.config);
  REQUIRE(q.store.params().size() == p.store.params().size());
  for (std::size_t i = 0; i < p.store.params().size(); ++i) {
    CHECK(q.store.params()[i].name == p.store.params()[i].name);
    CHECK(bit_equal(q.store.params()[i].tensor.values(), p.store.params()[i].tensor.values()));
  }
  CHECK(q.store.get("lm_head.weight").same_storage(q.token_embeddings));

  // Saving the loaded model reproduces the file byte for byte.
  const auto again = temp_path("roundtrip2.ckpt");
  save_model(again, q);
  std::ifstream a(path, std::ios::binary), b(again, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);

  const auto listing = list_checkpoint(path);
  CHECK(listing.arrays.size() == p.store.params().size());
  CHECK(listing.aliases.at("mlm_head.weight") == "embeddings.token");
}

TEST_CASE("checkpoint errors") {
  const auto p = CPTParams::create(tiny(), 9);
  const auto path = temp_path("shape.ckpt");
  save_model(path, p);
  auto other = tiny();
  other.hidden = 12;
  auto q = CPTParams::create(other, 9);
  CHECK_THROWS(load_checkpoint_into(path, q.store));

  const auto truncated = temp_path("truncated.ckpt");
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream out(truncated, std::ios::binary);
    out << bytes.substr(0, bytes.size() / 2);
  }
  fs::copy_file(path.string() + ".config", truncated.string() + ".config", fs::copy_options::overwrite_existing);
  CHECK_THROWS(load_model(truncated));
  CHECK_THROWS(load_model(temp_path("missing.ckpt")));
}
