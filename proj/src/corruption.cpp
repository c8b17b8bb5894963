#include "cpt/corruption.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cpt/model.hpp"
#include "cpt/params.hpp"

namespace cpt {

namespace {
const std::vector<std::string> kSpecialNames = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]"};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void fisher_yates(std::vector<T>& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_below(rng, i));
    std::swap(items[i - 1], items[j]);
  }
}
}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() <= kSpecialNames.size()) throw DataError("vocabulary: needs tokens beyond the specials");
  for (std::size_t i = 0; i < kSpecialNames.size(); ++i) {
    if (tokens_[i] != kSpecialNames[i]) {
      throw DataError("vocabulary: id " + std::to_string(i) + " must be " + kSpecialNames[i]);
    }
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<std::int64_t>(i)).second) {
      throw DataError("vocabulary: duplicate token " + tokens_[i]);
    }
  }
}

Vocabulary Vocabulary::synthetic(std::size_t symbols) {
  std::vector<std::string> tokens = kSpecialNames;
  for (std::size_t i = 0; i < symbols; ++i) {
    std::ostringstream name;
    name << 's' << std::setw(3) << std::setfill('0') << i;
    tokens.push_back(name.str());
  }
  return Vocabulary(std::move(tokens));
}

std::optional<std::int64_t> Vocabulary::find(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::int64_t Vocabulary::id_or_unk(const std::string& token) const { return find(token).value_or(special::unk); }

const std::string& Vocabulary::token(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::is_special(std::int64_t id) { return id >= 0 && id < special::count; }

// ---------------------------------------------------------------------------
// Documents and corpus files

void Document::validate() const {
  if (doc_id.empty()) throw DataError("document: empty doc_id");
  if (sentences.empty()) throw DataError("document " + doc_id + ": no sentences");
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    if (sentences[s].empty()) throw DataError("document " + doc_id + ": sentence " + std::to_string(s) + " is empty");
    for (std::size_t w = 0; w < sentences[s].size(); ++w) {
      if (sentences[s][w].empty()) {
        throw DataError("document " + doc_id + ": empty word " + std::to_string(w) + " in sentence " +
                        std::to_string(s));
      }
      for (const auto& tok : sentences[s][w]) {
        if (tok.empty()) throw DataError("document " + doc_id + ": empty token string");
      }
    }
  }
}

std::size_t Document::token_count() const {
  std::size_t n = 0;
  for (const auto& s : sentences)
    for (const auto& w : s) n += w.size();
  return n;
}

std::size_t Document::word_count() const {
  std::size_t n = 0;
  for (const auto& s : sentences) n += s.size();
  return n;
}

std::vector<std::int64_t> EncodedDocument::flatten() const {
  std::vector<std::int64_t> out;
  for (const auto& s : sentences)
    for (const auto& w : s) out.insert(out.end(), w.begin(), w.end());
  return out;
}

std::size_t EncodedDocument::word_count() const {
  std::size_t n = 0;
  for (const auto& s : sentences) n += s.size();
  return n;
}

Document parse_document_line(const std::string& line, std::size_t line_no) {
  const std::string where = "corpus line " + std::to_string(line_no) + ": ";
  Document doc;
  try {
    const auto j = nlohmann::json::parse(line);
    if (!j.is_object() || !j.contains("doc_id") || !j.contains("sentences")) {
      throw DataError(where + "expected an object with doc_id and sentences");
    }
    doc.doc_id = j.at("doc_id").get<std::string>();
    doc.sentences = j.at("sentences").get<std::vector<Sentence>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + e.what());
  }
  try {
    doc.validate();
  } catch (const DataError& e) {
    throw DataError(where + e.what());
  }
  return doc;
}

std::string document_to_line(const Document& doc) {
  nlohmann::json j;
  j["doc_id"] = doc.doc_id;
  j["sentences"] = doc.sentences;
  return j.dump();
}

std::vector<Document> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus " + path.string());
  std::vector<Document> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    docs.push_back(parse_document_line(line, line_no));
  }
  return docs;
}

void write_corpus(const std::filesystem::path& path, std::span<const Document> docs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write corpus " + path.string());
  for (const auto& doc : docs) out << document_to_line(doc) << '\n';
}

EncodedDocument encode_document(const Document& doc, const Vocabulary& vocab, CorpusReport* report) {
  EncodedDocument out;
  out.doc_id = doc.doc_id;
  for (const auto& s : doc.sentences) {
    IdSentence ids;
    for (const auto& w : s) {
      IdWord word;
      for (const auto& tok : w) {
        const auto id = vocab.find(tok);
        if (!id && report) ++report->unknown_tokens;
        word.push_back(id.value_or(special::unk));
      }
      ids.push_back(std::move(word));
    }
    out.sentences.push_back(std::move(ids));
  }
  if (report) {
    ++report->documents;
    report->tokens += doc.token_count();
  }
  return out;
}

std::vector<Document> synthetic_corpus(std::size_t documents, std::uint64_t seed, const Vocabulary& vocab,
                                       std::size_t lexicon_size) {
  std::mt19937_64 rng(splitmix64(seed ^ 0x5eedc0de));
  const std::uint64_t symbols = vocab.size() - special::count;
  std::vector<Word> lexicon;
  std::set<Word> seen;
  while (lexicon.size() < lexicon_size) {
    Word w(1 + uniform_below(rng, 3));
    for (auto& tok : w) tok = vocab.token(special::count + static_cast<std::int64_t>(uniform_below(rng, symbols)));
    if (seen.insert(w).second) lexicon.push_back(std::move(w));
  }
  std::vector<std::size_t> successor(lexicon_size);
  for (std::size_t i = 0; i < lexicon_size; ++i) successor[i] = i;
  fisher_yates(successor, rng);

  std::vector<Document> docs;
  for (std::size_t d = 0; d < documents; ++d) {
    Document doc;
    std::ostringstream id;
    id << "doc-" << std::setw(4) << std::setfill('0') << d;
    doc.doc_id = id.str();
    std::size_t word = uniform_below(rng, lexicon_size);
    const std::size_t n_sentences = 2 + uniform_below(rng, 3);
    for (std::size_t s = 0; s < n_sentences; ++s) {
      Sentence sentence;
      const std::size_t n_words = 3 + uniform_below(rng, 4);
      for (std::size_t w = 0; w < n_words; ++w) {
        sentence.push_back(lexicon[word]);
        word = successor[word];
      }
      doc.sentences.push_back(std::move(sentence));
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

// ---------------------------------------------------------------------------
// Corruption

void CorruptionConfig::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(word_mask_rate) || !in_unit(dae_infill_rate)) throw std::invalid_argument("corruption: rates must lie in [0, 1]");
  if (!in_unit(mask_frac) || !in_unit(random_frac) || !in_unit(keep_frac)) {
    throw std::invalid_argument("corruption: replacement fractions must lie in [0, 1]");
  }
  if (std::abs(mask_frac + random_frac + keep_frac - 1.0) > 1e-12) {
    throw std::invalid_argument("corruption: mask/random/keep fractions must sum to 1");
  }
  if (max_positions < 3) throw std::invalid_argument("corruption: max_positions must be at least 3");
}

std::mt19937_64 document_rng(std::uint64_t seed, const std::string& doc_id, const std::string& task) {
  const std::uint64_t mixed = splitmix64(splitmix64(seed) ^ fnv1a(doc_id) ^ splitmix64(fnv1a(task)));
  std::seed_seq seq{static_cast<std::uint32_t>(mixed), static_cast<std::uint32_t>(mixed >> 32)};
  return std::mt19937_64(seq);
}

std::optional<MLMInstance> make_mlm_instance(const EncodedDocument& doc, const CorruptionConfig& cfg,
                                             const Vocabulary& vocab, std::mt19937_64& rng, std::size_t* skipped) {
  cfg.validate();
  std::vector<const IdWord*> words;
  std::size_t length = 2;
  bool full = false;
  for (const auto& s : doc.sentences) {
    for (const auto& w : s) {
      if (full || length + w.size() > cfg.max_positions) {
        full = true;
        break;
      }
      words.push_back(&w);
      length += w.size();
    }
  }
  if (length - 2 < 2) {
    if (skipped) ++*skipped;
    return std::nullopt;
  }

  MLMInstance inst;
  inst.doc_id = doc.doc_id;
  inst.input_ids.push_back(special::cls);
  inst.target_ids.push_back(vocab.ignore_id());
  const auto symbols = static_cast<std::uint64_t>(vocab.size() - special::count);
  enum class Action { mask, random, keep };
  auto draw_action = [&] {
    const double u = uniform01(rng);
    if (u < cfg.mask_frac) return Action::mask;
    if (u < cfg.mask_frac + cfg.random_frac) return Action::random;
    return Action::keep;
  };
  for (const IdWord* w : words) {
    ++inst.stats.words;
    const bool selected = uniform01(rng) < cfg.word_mask_rate;
    if (!selected) {
      for (auto id : *w) {
        inst.input_ids.push_back(id);
        inst.target_ids.push_back(vocab.ignore_id());
      }
      continue;
    }
    ++inst.stats.selected_words;
    const Action word_action =
        cfg.granularity == ReplacementGranularity::per_word ? draw_action() : Action::keep;
    for (auto id : *w) {
      const Action action = cfg.granularity == ReplacementGranularity::per_token ? draw_action() : word_action;
      switch (action) {
        case Action::mask:
          inst.input_ids.push_back(special::mask);
          ++inst.stats.masked_tokens;
          break;
        case Action::random:
          inst.input_ids.push_back(special::count + static_cast<std::int64_t>(uniform_below(rng, symbols)));
          ++inst.stats.random_tokens;
          break;
        case Action::keep:
          inst.input_ids.push_back(id);
          ++inst.stats.kept_tokens;
          break;
      }
      inst.target_ids.push_back(id);
    }
  }
  inst.input_ids.push_back(special::sep);
  inst.target_ids.push_back(vocab.ignore_id());
  inst.original_ids.push_back(special::cls);
  for (const IdWord* w : words) inst.original_ids.insert(inst.original_ids.end(), w->begin(), w->end());
  inst.original_ids.push_back(special::sep);
  return inst;
}

InfillResult token_infill(const EncodedDocument& doc, double rate, std::mt19937_64& rng) {
  InfillResult out;
  for (const auto& s : doc.sentences) {
    for (const auto& w : s) {
      if (uniform01(rng) < rate) {
        out.records.push_back({out.tokens.size(), w});
        out.tokens.push_back(special::mask);
      } else {
        out.tokens.insert(out.tokens.end(), w.begin(), w.end());
      }
    }
  }
  return out;
}

PermuteResult sentence_permute(const EncodedDocument& doc, std::mt19937_64& rng) {
  PermuteResult out;
  out.order.resize(doc.sentences.size());
  for (std::size_t i = 0; i < out.order.size(); ++i) out.order[i] = i;
  fisher_yates(out.order, rng);
  out.doc.doc_id = doc.doc_id;
  for (std::size_t i : out.order) out.doc.sentences.push_back(doc.sentences[i]);
  return out;
}

std::vector<std::int64_t> shift_right(std::span<const std::int64_t> target) {
  std::vector<std::int64_t> out;
  out.reserve(target.size());
  if (target.empty()) return out;
  out.push_back(special::bos);
  out.insert(out.end(), target.begin(), target.end() - 1);
  return out;
}

DAEInstance make_dae_instance(const EncodedDocument& doc, const CorruptionConfig& cfg, std::mt19937_64& rng,
                              std::size_t* truncations) {
  cfg.validate();
  if (doc.sentences.empty()) throw DataError("dae: document " + doc.doc_id + " is empty");
  DAEInstance inst;
  inst.doc_id = doc.doc_id;
  PermuteResult permuted;
  if (cfg.permute_sentences) {
    permuted = sentence_permute(doc, rng);
  } else {
    permuted.doc = doc;
    permuted.order.resize(doc.sentences.size());
    for (std::size_t i = 0; i < permuted.order.size(); ++i) permuted.order[i] = i;
  }
  inst.order = permuted.order;
  for (const auto& s : permuted.doc.sentences) {
    std::size_t n = 0;
    for (const auto& w : s) n += w.size();
    inst.permuted_sentence_lengths.push_back(n);
  }
  InfillResult infill = token_infill(permuted.doc, cfg.dae_infill_rate, rng);
  inst.source_ids = std::move(infill.tokens);
  inst.infills = std::move(infill.records);
  inst.target_ids = doc.flatten();
  inst.target_ids.push_back(special::eos);

  if (inst.source_ids.size() > cfg.max_positions || inst.target_ids.size() > cfg.max_positions) {
    inst.truncated = true;
    if (truncations) ++*truncations;
    if (inst.source_ids.size() > cfg.max_positions) inst.source_ids.resize(cfg.max_positions);
    if (inst.target_ids.size() > cfg.max_positions) {
      inst.target_ids.resize(cfg.max_positions);
      inst.target_ids.back() = special::eos;
    }
    std::erase_if(inst.infills, [&](const InfillRecord& r) { return r.source_position >= inst.source_ids.size(); });
  }
  inst.decoder_input_ids = shift_right(inst.target_ids);
  return inst;
}

std::vector<std::int64_t> reconstruct_source(const DAEInstance& instance) {
  if (instance.truncated) throw DataError("dae: cannot reconstruct truncated instance " + instance.doc_id);
  // Expand each [MASK] back into its word.
  std::vector<std::int64_t> permuted;
  std::size_t next = 0;
  for (std::size_t i = 0; i < instance.source_ids.size(); ++i) {
    if (next < instance.infills.size() && instance.infills[next].source_position == i) {
      const auto& word = instance.infills[next++].original;
      permuted.insert(permuted.end(), word.begin(), word.end());
    } else {
      permuted.push_back(instance.source_ids[i]);
    }
  }
  // Split into permuted sentences, then restore the original order.
  std::vector<std::vector<std::int64_t>> original(instance.order.size());
  std::size_t offset = 0;
  for (std::size_t i = 0; i < instance.order.size(); ++i) {
    const std::size_t len = instance.permuted_sentence_lengths[i];
    if (offset + len > permuted.size()) throw DataError("dae: records do not match source for " + instance.doc_id);
    original[instance.order[i]].assign(permuted.begin() + static_cast<std::ptrdiff_t>(offset),
                                       permuted.begin() + static_cast<std::ptrdiff_t>(offset + len));
    offset += len;
  }
  std::vector<std::int64_t> out;
  for (const auto& s : original) out.insert(out.end(), s.begin(), s.end());
  return out;
}

// ---------------------------------------------------------------------------
// Batching

namespace {
void pad_row(std::vector<std::int64_t>& row, std::size_t width, std::int64_t value) { row.resize(width, value); }

std::vector<char> mask_row(std::size_t real, std::size_t width) {
  std::vector<char> m(width, 0);
  std::fill_n(m.begin(), real, 1);
  return m;
}

void check_fits(std::size_t length, std::size_t pad_to, std::size_t index, const std::string& doc_id) {
  if (length > pad_to) {
    throw DataError("batch: instance " + std::to_string(index) + " (" + doc_id + ") has length " +
                    std::to_string(length) + " > pad_to " + std::to_string(pad_to));
  }
}
}  // namespace

MlmBatch build_mlm_batch(std::span<const MLMInstance> instances, std::size_t pad_to, std::int64_t ignore_id) {
  MlmBatch batch;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    check_fits(inst.input_ids.size(), pad_to, i, inst.doc_id);
    auto ids = inst.input_ids;
    auto targets = inst.target_ids;
    pad_row(ids, pad_to, special::pad);
    pad_row(targets, pad_to, ignore_id);
    batch.doc_ids.push_back(inst.doc_id);
    batch.pad_mask.push_back(mask_row(inst.input_ids.size(), pad_to));
    batch.input_ids.push_back(std::move(ids));
    batch.target_ids.push_back(std::move(targets));
  }
  return batch;
}

DaeBatch build_dae_batch(std::span<const DAEInstance> instances, std::size_t pad_to, std::int64_t ignore_id) {
  DaeBatch batch;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    check_fits(std::max(inst.source_ids.size(), inst.target_ids.size()), pad_to, i, inst.doc_id);
    auto src = inst.source_ids;
    auto dec = inst.decoder_input_ids;
    auto tgt = inst.target_ids;
    pad_row(src, pad_to, special::pad);
    pad_row(dec, pad_to, special::pad);
    pad_row(tgt, pad_to, ignore_id);
    batch.doc_ids.push_back(inst.doc_id);
    batch.source_mask.push_back(mask_row(inst.source_ids.size(), pad_to));
    batch.source_ids.push_back(std::move(src));
    batch.decoder_input_ids.push_back(std::move(dec));
    batch.target_ids.push_back(std::move(tgt));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Inspection dumps

namespace {
std::string label_of(std::int64_t id, const Vocabulary& vocab) {
  return id == vocab.ignore_id() ? std::string("-") : vocab.token(id);
}

std::string aligned(const std::vector<std::pair<std::string, std::vector<std::string>>>& rows) {
  std::size_t columns = 0, label_width = 0;
  for (const auto& [label, cells] : rows) {
    columns = std::max(columns, cells.size());
    label_width = std::max(label_width, label.size());
  }
  std::vector<std::size_t> widths(columns, 0);
  for (const auto& [label, cells] : rows)
    for (std::size_t c = 0; c < cells.size(); ++c) widths[c] = std::max(widths[c], cells[c].size());
  std::ostringstream out;
  for (const auto& [label, cells] : rows) {
    out << std::left << std::setw(static_cast<int>(label_width)) << label;
    for (std::size_t c = 0; c < cells.size(); ++c) out << ' ' << std::setw(static_cast<int>(widths[c])) << cells[c];
    out << '\n';
  }
  return out.str();
}

std::vector<std::string> labels(std::span<const std::int64_t> ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (auto id : ids) out.push_back(label_of(id, vocab));
  return out;
}
}  // namespace

std::string format_mlm_dump(const MLMInstance& inst, const Vocabulary& vocab) {
  std::ostringstream out;
  out << "# " << inst.doc_id << " mlm words=" << inst.stats.words << " selected=" << inst.stats.selected_words
      << " mask=" << inst.stats.masked_tokens << " random=" << inst.stats.random_tokens
      << " keep=" << inst.stats.kept_tokens << '\n';
  out << aligned({{"original", labels(inst.original_ids, vocab)},
                  {"input", labels(inst.input_ids, vocab)},
                  {"target", labels(inst.target_ids, vocab)}});
  return out.str();
}

std::string format_dae_dump(const DAEInstance& inst, const Vocabulary& vocab) {
  std::ostringstream out;
  out << "# " << inst.doc_id << " dae order=";
  for (std::size_t i = 0; i < inst.order.size(); ++i) out << (i ? "," : "") << inst.order[i];
  out << " infilled_words=" << inst.infills.size() << (inst.truncated ? " truncated" : "") << '\n';
  out << aligned({{"source", labels(inst.source_ids, vocab)}});
  out << aligned({{"target", labels(inst.target_ids, vocab)}, {"decoder_in", labels(inst.decoder_input_ids, vocab)}});
  for (const auto& r : inst.infills) {
    out << "infill@" << r.source_position << ':';
    for (auto id : r.original) out << ' ' << vocab.token(id);
    out << '\n';
  }
  return out.str();
}

}  // namespace cpt
