#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "cpt/corruption.hpp"
#include "cpt/model.hpp"

using namespace cpt;
namespace fs = std::filesystem;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::synthetic();
  return v;
}

std::vector<EncodedDocument> encoded_corpus(std::size_t n, std::uint64_t seed) {
  std::vector<EncodedDocument> out;
  for (const auto& d : synthetic_corpus(n, seed, vocab())) out.push_back(encode_document(d, vocab()));
  return out;
}

// Three one-word sentences with distinct lengths.
EncodedDocument three_sentences() {
  return {"tri", {{{10}}, {{20, 21}}, {{30, 31, 32}}}};
}

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "cpt_test_corruption";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("vocabulary layout") {
  const auto& v = vocab();
  CHECK(v.size() == 263);
  CHECK(v.token(special::mask) == "[MASK]");
  CHECK(v.token(7) == "s000");
  CHECK(v.id_or_unk("nope") == special::unk);
  CHECK(v.ignore_id() == 263);
  CHECK(Vocabulary::is_special(6));
  CHECK_FALSE(Vocabulary::is_special(7));
  CHECK_THROWS(Vocabulary({"a", "b"}));
}

TEST_CASE("corpus lines round trip and malformed lines are reported") {
  const auto docs = synthetic_corpus(5, 3, vocab());
  const auto path = temp_path("corpus.jsonl");
  write_corpus(path, docs);
  CHECK(load_corpus(path) == docs);
  CHECK(parse_document_line(document_to_line(docs[0]), 1) == docs[0]);
  CHECK_THROWS_WITH_AS(parse_document_line("{\"doc_id\": 3}", 7), doctest::Contains("7"), DataError);
  CHECK_THROWS_AS(parse_document_line("not json", 1), DataError);
  CHECK_THROWS_AS(load_corpus(temp_path("absent.jsonl")), DataError);
}

TEST_CASE("encoding counts unknown tokens") {
  Document d{"d", {{{"s001", "zzz"}, {"s002"}}}};
  CorpusReport report;
  const auto e = encode_document(d, vocab(), &report);
  CHECK(e.flatten() == std::vector<std::int64_t>{8, special::unk, 9});
  CHECK(report.unknown_tokens == 1);
  CHECK(report.tokens == 3);
}

TEST_CASE("synthetic corpus is seeded") {
  CHECK(synthetic_corpus(4, 9, vocab()) == synthetic_corpus(4, 9, vocab()));
  CHECK_FALSE(synthetic_corpus(4, 9, vocab()) == synthetic_corpus(4, 10, vocab()));
}

TEST_CASE("corruption config validation") {
  CorruptionConfig c;
  CHECK_NOTHROW(c.validate());
  c.mask_frac = 0.5;
  CHECK_THROWS(c.validate());
  c = {};
  c.word_mask_rate = 1.5;
  CHECK_THROWS(c.validate());
}

TEST_CASE("per-document streams are order independent") {
  auto a = document_rng(1, "doc-0001", "mlm");
  auto b = document_rng(1, "doc-0001", "mlm");
  auto c = document_rng(1, "doc-0002", "mlm");
  auto d = document_rng(1, "doc-0001", "dae");
  const auto x = a();
  CHECK(x == b());
  CHECK(x != c());
  CHECK(x != d());
}

TEST_CASE("MLM instance structure") {
  const auto corpus = encoded_corpus(50, 4);
  CorruptionConfig cfg;
  for (const auto& doc : corpus) {
    auto rng = document_rng(5, doc.doc_id, "mlm");
    const auto inst = make_mlm_instance(doc, cfg, vocab(), rng);
    REQUIRE(inst);
    REQUIRE(inst->input_ids.size() == inst->target_ids.size());
    CHECK(inst->input_ids.front() == special::cls);
    CHECK(inst->input_ids.back() == special::sep);
    CHECK(inst->original_ids.size() == inst->input_ids.size());
    // Whole words: every token of a word is a target or none is.
    std::size_t pos = 1;
    for (const auto& s : doc.sentences) {
      for (const auto& w : s) {
        const bool first = inst->target_ids[pos] != vocab().ignore_id();
        for (std::size_t k = 0; k < w.size(); ++k, ++pos) {
          CHECK((inst->target_ids[pos] != vocab().ignore_id()) == first);
          if (first) CHECK(inst->target_ids[pos] == w[k]);
          if (!first) CHECK(inst->input_ids[pos] == w[k]);
          CHECK_FALSE((inst->input_ids[pos] != special::mask && Vocabulary::is_special(inst->input_ids[pos])));
        }
      }
    }
  }
}

TEST_CASE("MLM selection rate and replacement mix") {
  // 99% two-sided binomial interval for p = 0.15 over n words: 0.15 +- 2.5758 sqrt(p(1-p)/n).
  const auto corpus = encoded_corpus(800, 6);
  CorruptionConfig cfg;
  MlmStats total;
  for (const auto& doc : corpus) {
    auto rng = document_rng(7, doc.doc_id, "mlm");
    const auto s = make_mlm_instance(doc, cfg, vocab(), rng)->stats;
    total.words += s.words;
    total.selected_words += s.selected_words;
    total.masked_tokens += s.masked_tokens;
    total.random_tokens += s.random_tokens;
    total.kept_tokens += s.kept_tokens;
  }
  REQUIRE(total.words >= 10000);
  const double n = static_cast<double>(total.words);
  const double half = 2.5758293035489 * std::sqrt(0.15 * 0.85 / n);
  const double rate = total.selected_words / n;
  CHECK(rate > 0.15 - half);
  CHECK(rate < 0.15 + half);
  const double corrupted = static_cast<double>(total.masked_tokens + total.random_tokens + total.kept_tokens);
  CHECK(std::abs(total.masked_tokens / corrupted - 0.8) < 0.02);
  CHECK(std::abs(total.random_tokens / corrupted - 0.1) < 0.02);
  CHECK(std::abs(total.kept_tokens / corrupted - 0.1) < 0.02);
}

TEST_CASE("per-word replacement applies one action to the whole word") {
  const auto corpus = encoded_corpus(200, 8);
  CorruptionConfig cfg;
  cfg.granularity = ReplacementGranularity::per_word;
  for (const auto& doc : corpus) {
    auto rng = document_rng(9, doc.doc_id, "mlm");
    const auto inst = make_mlm_instance(doc, cfg, vocab(), rng);
    std::size_t pos = 1;
    for (const auto& s : doc.sentences) {
      for (const auto& w : s) {
        std::size_t masks = 0;
        for (std::size_t k = 0; k < w.size(); ++k) masks += inst->input_ids[pos + k] == special::mask;
        CHECK((masks == 0 || masks == w.size()));
        pos += w.size();
      }
    }
  }
}

TEST_CASE("MLM skips tiny documents and truncates at word boundaries") {
  CorruptionConfig cfg;
  std::size_t skipped = 0;
  auto rng = document_rng(1, "x", "mlm");
  EncodedDocument tiny{"tiny", {{{9}}}};
  CHECK_FALSE(make_mlm_instance(tiny, cfg, vocab(), rng, &skipped));
  CHECK(skipped == 1);

  cfg.max_positions = 6;  // [CLS] + 4 tokens + [SEP]
  EncodedDocument doc{"long", {{{9, 10}, {11, 12}, {13, 14}}}};
  const auto inst = make_mlm_instance(doc, cfg, vocab(), rng);
  CHECK(inst->input_ids.size() == 6);
  CHECK(inst->original_ids == std::vector<std::int64_t>{special::cls, 9, 10, 11, 12, special::sep});
}

TEST_CASE("token infilling length arithmetic") {
  const auto corpus = encoded_corpus(100, 10);
  for (const auto& doc : corpus) {
    auto rng = document_rng(11, doc.doc_id, "dae");
    const auto r = token_infill(doc, 0.3, rng);
    std::size_t removed = 0;
    for (const auto& rec : r.records) {
      CHECK(r.tokens[rec.source_position] == special::mask);
      removed += rec.original.size();
    }
    CHECK(r.tokens.size() == doc.flatten().size() - removed + r.records.size());
    CHECK(std::count(r.tokens.begin(), r.tokens.end(), special::mask) ==
          static_cast<std::ptrdiff_t>(r.records.size()));
  }
  auto rng = document_rng(1, "all", "dae");
  EncodedDocument doc{"all", {{{9, 10, 11}, {12}}}};
  CHECK(token_infill(doc, 1.0, rng).tokens == std::vector<std::int64_t>{special::mask, special::mask});
}

TEST_CASE("sentence permutation preserves the multiset and is uniform") {
  const auto doc = three_sentences();
  std::map<std::vector<std::size_t>, int> counts;
  const int trials = 6000;
  for (int t = 0; t < trials; ++t) {
    auto rng = document_rng(12, "perm-" + std::to_string(t), "dae");
    const auto p = sentence_permute(doc, rng);
    auto sorted = p.doc.sentences;
    std::sort(sorted.begin(), sorted.end());
    auto expected = doc.sentences;
    std::sort(expected.begin(), expected.end());
    CHECK(sorted == expected);
    for (std::size_t i = 0; i < 3; ++i) CHECK(p.doc.sentences[i] == doc.sentences[p.order[i]]);
    ++counts[p.order];
  }
  CHECK(counts.size() == 6);
  for (const auto& [order, c] : counts) CHECK(std::abs(c / static_cast<double>(trials) - 1.0 / 6.0) < 0.02);
}

TEST_CASE("DAE instance: targets, shift rule and reconstruction") {
  const auto corpus = encoded_corpus(100, 13);
  CorruptionConfig cfg;
  for (const auto& doc : corpus) {
    auto rng = document_rng(14, doc.doc_id, "dae");
    const auto inst = make_dae_instance(doc, cfg, rng);
    auto expected = doc.flatten();
    expected.push_back(special::eos);
    CHECK(inst.target_ids == expected);
    REQUIRE(inst.decoder_input_ids.size() == inst.target_ids.size());
    CHECK(inst.decoder_input_ids[0] == special::bos);
    for (std::size_t i = 1; i < inst.target_ids.size(); ++i) CHECK(inst.decoder_input_ids[i] == inst.target_ids[i - 1]);
    CHECK(reconstruct_source(inst) == doc.flatten());
  }
  CHECK(shift_right(std::vector<std::int64_t>{7, 8, special::eos}) == std::vector<std::int64_t>{special::bos, 7, 8});
}

TEST_CASE("DAE truncation keeps an EOS-terminated target") {
  CorruptionConfig cfg;
  cfg.max_positions = 4;
  cfg.dae_infill_rate = 0.0;
  EncodedDocument doc{"t", {{{9, 10}, {11, 12}, {13}}}};
  std::size_t truncations = 0;
  auto rng = document_rng(1, "t", "dae");
  const auto inst = make_dae_instance(doc, cfg, rng, &truncations);
  CHECK(inst.truncated);
  CHECK(truncations == 1);
  CHECK(inst.source_ids.size() == 4);
  CHECK(inst.target_ids == std::vector<std::int64_t>{9, 10, 11, special::eos});
  CHECK_THROWS_AS(reconstruct_source(inst), DataError);
}

TEST_CASE("batches pad to the requested width and reject overflow") {
  const auto corpus = encoded_corpus(3, 15);
  CorruptionConfig cfg;
  std::vector<MLMInstance> mlm;
  std::vector<DAEInstance> dae;
  std::size_t width = 0;
  for (const auto& doc : corpus) {
    auto r1 = document_rng(1, doc.doc_id, "mlm");
    auto r2 = document_rng(1, doc.doc_id, "dae");
    mlm.push_back(*make_mlm_instance(doc, cfg, vocab(), r1));
    dae.push_back(make_dae_instance(doc, cfg, r2));
    width = std::max({width, mlm.back().input_ids.size(), dae.back().source_ids.size(), dae.back().target_ids.size()});
  }
  const auto mb = build_mlm_batch(mlm, width, vocab().ignore_id());
  const auto db = build_dae_batch(dae, width, vocab().ignore_id());
  for (std::size_t i = 0; i < mlm.size(); ++i) {
    CHECK(mb.input_ids[i].size() == width);
    for (std::size_t j = mlm[i].input_ids.size(); j < width; ++j) {
      CHECK(mb.input_ids[i][j] == special::pad);
      CHECK(mb.target_ids[i][j] == vocab().ignore_id());
      CHECK_FALSE(mb.pad_mask[i][j]);
    }
    for (std::size_t j = dae[i].target_ids.size(); j < width; ++j) CHECK(db.target_ids[i][j] == vocab().ignore_id());
  }
  CHECK(db.doc_ids == std::vector<std::string>{"doc-0000", "doc-0001", "doc-0002"});
  CHECK_THROWS_WITH_AS(build_mlm_batch(mlm, 3, vocab().ignore_id()), doctest::Contains("doc-0000"), DataError);
}

TEST_CASE("dumps are deterministic and show single masks") {
  const auto corpus = encoded_corpus(2, 16);
  CorruptionConfig cfg;
  cfg.dae_infill_rate = 0.5;
  auto r1 = document_rng(7, corpus[0].doc_id, "dae");
  auto r2 = document_rng(7, corpus[0].doc_id, "dae");
  const auto a = format_dae_dump(make_dae_instance(corpus[0], cfg, r1), vocab());
  const auto b = format_dae_dump(make_dae_instance(corpus[0], cfg, r2), vocab());
  CHECK(a == b);
  CHECK(a.find("[MASK]") != std::string::npos);
  CHECK(a.find("infill@") != std::string::npos);
}
