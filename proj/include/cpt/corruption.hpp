#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace cpt {

/// Raised for unreadable or schema-violating corpus input.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Vocabulary {
 public:
  /// The first special::count entries must be the reserved specials in id order.
  explicit Vocabulary(std::vector<std::string> tokens);
  /// Specials followed by `symbols` synthetic tokens named s000, s001, ...
  static Vocabulary synthetic(std::size_t symbols = 256);

  std::size_t size() const { return tokens_.size(); }
  std::optional<std::int64_t> find(const std::string& token) const;
  std::int64_t id_or_unk(const std::string& token) const;
  const std::string& token(std::int64_t id) const;
  static bool is_special(std::int64_t id);
  /// Loss sentinel: one past the largest id.
  std::int64_t ignore_id() const { return static_cast<std::int64_t>(tokens_.size()); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> index_;
};

// doc -> sentences -> words -> tokens. Word boundaries come from the corpus.
using Word = std::vector<std::string>;
using Sentence = std::vector<Word>;

struct Document {
  std::string doc_id;
  std::vector<Sentence> sentences;

  void validate() const;
  std::size_t token_count() const;
  std::size_t word_count() const;
  bool operator==(const Document&) const = default;
};

using IdWord = std::vector<std::int64_t>;
using IdSentence = std::vector<IdWord>;

struct EncodedDocument {
  std::string doc_id;
  std::vector<IdSentence> sentences;

  std::vector<std::int64_t> flatten() const;
  std::size_t word_count() const;
  bool operator==(const EncodedDocument&) const = default;
};

struct CorpusReport {
  std::size_t documents = 0;
  std::size_t tokens = 0;
  std::size_t unknown_tokens = 0;
};

/// One JSON object per line: {"doc_id": str, "sentences": [[[tok, ...], ...], ...]}.
std::vector<Document> load_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, std::span<const Document> docs);
Document parse_document_line(const std::string& line, std::size_t line_no);
std::string document_to_line(const Document& doc);

EncodedDocument encode_document(const Document& doc, const Vocabulary& vocab, CorpusReport* report = nullptr);

/// Seeded generator for the bundled synthetic corpus. Words are 1-3 tokens
/// long and follow a fixed successor chain, so masked words are
/// recoverable from context.
std::vector<Document> synthetic_corpus(std::size_t documents, std::uint64_t seed, const Vocabulary& vocab,
                                       std::size_t lexicon_size = 48);

enum class ReplacementGranularity { per_token, per_word };

struct CorruptionConfig {
  double word_mask_rate = 0.15;
  double mask_frac = 0.8;
  double random_frac = 0.1;
  double keep_frac = 0.1;
  double dae_infill_rate = 0.15;
  bool permute_sentences = true;
  ReplacementGranularity granularity = ReplacementGranularity::per_token;
  std::size_t max_positions = 128;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Independent stream per (seed, doc_id, task) so corruption does not
/// depend on document order.
std::mt19937_64 document_rng(std::uint64_t seed, const std::string& doc_id, const std::string& task);

struct MlmStats {
  std::size_t words = 0;
  std::size_t selected_words = 0;
  std::size_t masked_tokens = 0;
  std::size_t random_tokens = 0;
  std::size_t kept_tokens = 0;
};

struct MLMInstance {
  std::string doc_id;
  std::vector<std::int64_t> input_ids;   // [CLS] tokens [SEP]
  std::vector<std::int64_t> target_ids;  // original id at corrupted positions, ignore id elsewhere
  std::vector<std::int64_t> original_ids;
  MlmStats stats;
};

/// Returns nullopt (and bumps *skipped) when the document has fewer than
/// two tokens. Words that do not fit in max_positions are dropped whole.
std::optional<MLMInstance> make_mlm_instance(const EncodedDocument& doc, const CorruptionConfig& cfg,
                                             const Vocabulary& vocab, std::mt19937_64& rng,
                                             std::size_t* skipped = nullptr);

struct InfillRecord {
  std::size_t source_position;  // index of the [MASK] in the corrupted sequence
  std::vector<std::int64_t> original;
};

struct InfillResult {
  std::vector<std::int64_t> tokens;
  std::vector<InfillRecord> records;
};

/// Each selected word, whatever its length, becomes a single [MASK].
InfillResult token_infill(const EncodedDocument& doc, double rate, std::mt19937_64& rng);

struct PermuteResult {
  EncodedDocument doc;
  std::vector<std::size_t> order;  // output sentence i is input sentence order[i]
};

/// Uniform random permutation of whole sentences (Fisher-Yates).
PermuteResult sentence_permute(const EncodedDocument& doc, std::mt19937_64& rng);

struct DAEInstance {
  std::string doc_id;
  std::vector<std::int64_t> source_ids;
  std::vector<std::int64_t> target_ids;         // original tokens + [EOS]
  std::vector<std::int64_t> decoder_input_ids;  // [BOS] + target shifted right
  std::vector<std::size_t> order;
  std::vector<std::size_t> permuted_sentence_lengths;
  std::vector<InfillRecord> infills;
  bool truncated = false;
};

DAEInstance make_dae_instance(const EncodedDocument& doc, const CorruptionConfig& cfg, std::mt19937_64& rng,
                              std::size_t* truncations = nullptr);

/// Undoes infilling and permutation. Only defined for untruncated instances.
std::vector<std::int64_t> reconstruct_source(const DAEInstance& instance);

/// Teacher-forcing shift: [BOS] followed by all but the last target.
std::vector<std::int64_t> shift_right(std::span<const std::int64_t> target);

struct MlmBatch {
  std::vector<std::string> doc_ids;
  std::vector<std::vector<std::int64_t>> input_ids;
  std::vector<std::vector<std::int64_t>> target_ids;
  std::vector<std::vector<char>> pad_mask;
};

struct DaeBatch {
  std::vector<std::string> doc_ids;
  std::vector<std::vector<std::int64_t>> source_ids;
  std::vector<std::vector<char>> source_mask;
  std::vector<std::vector<std::int64_t>> decoder_input_ids;
  std::vector<std::vector<std::int64_t>> target_ids;
};

/// Right-pads with [PAD]; padded targets carry `ignore_id`.
MlmBatch build_mlm_batch(std::span<const MLMInstance> instances, std::size_t pad_to, std::int64_t ignore_id);
DaeBatch build_dae_batch(std::span<const DAEInstance> instances, std::size_t pad_to, std::int64_t ignore_id);

std::string format_mlm_dump(const MLMInstance& instance, const Vocabulary& vocab);
std::string format_dae_dump(const DAEInstance& instance, const Vocabulary& vocab);

}  // namespace cpt
