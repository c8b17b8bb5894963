#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cpt/corruption.hpp"
#include "cpt/model.hpp"
#include "cpt/optim.hpp"
#include "cpt/params.hpp"

namespace cpt {

enum class FineTuneMode { u, g, ug, u_prompt, g_prompt };
enum class TaskKind { classify, seqlabel, mrc, gen };

std::string to_string(FineTuneMode mode);
std::string to_string(TaskKind kind);
FineTuneMode parse_mode(const std::string& text);
TaskKind parse_task_kind(const std::string& text);
/// Prompted modes only for classification; generation only through G-Dec.
bool mode_valid(TaskKind kind, FineTuneMode mode);

/// How the prompt-perplexity comparator ranks labels. The lowest
/// perplexity (most likely completion) wins by default.
enum class PerplexityRule { lowest_wins, highest_wins };

enum class VerbalizerMean { arithmetic, geometric };

struct PromptSpec {
  std::vector<std::int64_t> template_prefix;
  std::vector<std::int64_t> template_suffix;
  std::vector<std::vector<std::int64_t>> verbalizers;  // label -> tokens

  /// Throws ConfigError when a label lacks a verbalizer, a verbalizer is
  /// outside 1..7 tokens, or (for u_prompt) lengths differ between labels.
  void validate(std::size_t num_labels, FineTuneMode mode) const;
  std::size_t span_length() const { return verbalizers.empty() ? 0 : verbalizers.front().size(); }
  /// Decoder text for a label: prefix + verbalizer + suffix.
  std::vector<std::int64_t> completion(std::size_t label) const;
};

struct FineTuneOptions {
  PerplexityRule perplexity_rule = PerplexityRule::lowest_wins;
  VerbalizerMean verbalizer_mean = VerbalizerMean::arithmetic;
  bool g_prepend_bos = false;  // decoder input for g / ug modes
};

/// Trainable task-specific layers; width is 2H for the ug modes.
struct TaskHeads {
  TaskKind kind = TaskKind::classify;
  FineTuneMode mode = FineTuneMode::u;
  std::size_t width = 0;
  std::size_t outputs = 0;  // labels or tags
  ParamStore store;
  Tensor weight, bias;          // classifier / tagger
  Tensor span_start, span_end;  // [width, 1] for MRC

  static TaskHeads create(TaskKind kind, FineTuneMode mode, std::size_t hidden, std::size_t outputs,
                          std::uint64_t seed);
};

// ---------------------------------------------------------------------------
// Optimization

class Trainer {
 public:
  Trainer(std::vector<NamedParam> params, const LrSchedule& schedule, double weight_decay = 0.01);

  void zero_grad();
  /// One Adam update; returns the learning rate used.
  double step();
  const AdamState& state() const { return state_; }
  const std::vector<NamedParam>& params() const { return params_; }

 private:
  std::vector<NamedParam> params_;
  AdamState state_;
};

/// Arrays read by each task path.
std::vector<NamedParam> understanding_path_params(const CPTParams& params);
std::vector<NamedParam> generation_path_params(const CPTParams& params);
std::vector<NamedParam> params_for_mode(const CPTParams& params, FineTuneMode mode);

// ---------------------------------------------------------------------------
// Pre-training

struct PretrainLosses {
  double mlm = 0.0;
  double dae = 0.0;
  std::size_t mlm_targets = 0;
  std::size_t dae_targets = 0;
};

struct PretrainGraph {
  Tensor total;
  PretrainLosses losses;
};

enum class SubBatchOrder { mlm_first, dae_first };

/// MLM through S-Enc + U-Dec and DAE through S-Enc + G-Dec; each is the
/// token-level mean over its batch and the two are summed with equal weight.
PretrainGraph pretrain_loss(const MlmBatch& mlm, const DaeBatch& dae, const CPTParams& params,
                            SubBatchOrder order = SubBatchOrder::mlm_first);

/// zero_grad, forward, backward, one Adam step. Throws NumericError naming
/// the batch documents on a non-finite loss.
PretrainLosses pretrain_step(const MlmBatch& mlm, const DaeBatch& dae, CPTParams& params, Trainer& trainer);

Tensor mlm_batch_loss(const MlmBatch& batch, const CPTParams& params, std::size_t* counted = nullptr);
Tensor dae_batch_loss(const DaeBatch& batch, const CPTParams& params, std::size_t* counted = nullptr);

/// Fraction of corrupted positions whose argmax MLM prediction is the original token.
double mlm_accuracy(std::span<const MLMInstance> instances, const CPTParams& params);

enum class PretrainTasks { joint, mlm_only, dae_only };

struct PretrainOptions {
  CorruptionConfig corruption;
  LrSchedule schedule{3e-4, 100, 2000};
  double weight_decay = 0.01;
  std::size_t batch_size = 8;
  std::size_t steps = 50;
  std::uint64_t seed = 0;
  PretrainTasks tasks = PretrainTasks::joint;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::filesystem::path metrics_path;    // empty: no metrics file
};

struct PretrainRecord {
  std::size_t step;
  PretrainLosses losses;
  double lr;
  double wall_ms;
};

/// Cycles through the corpus in seeded epochs, re-corrupting every document
/// per epoch, and writes `step,task,loss,lr,wall_ms` rows.
std::vector<PretrainRecord> run_pretraining(std::span<const EncodedDocument> corpus, const Vocabulary& vocab,
                                            CPTParams& params, const PretrainOptions& options);

// ---------------------------------------------------------------------------
// Fine-tuning forwards

/// Label scores [1, L]. Logits for u/g/ug, mean verbalizer probability for
/// u_prompt, signed perplexity for g_prompt (argmax is the prediction).
Tensor classify_forward(std::span<const std::int64_t> input_ids, FineTuneMode mode, const CPTParams& params,
                        const TaskHeads& heads, const PromptSpec* prompt = nullptr, const FineTuneOptions& opts = {});

Tensor classify_loss(std::span<const std::int64_t> input_ids, std::size_t label, FineTuneMode mode,
                     const CPTParams& params, const TaskHeads& heads, const PromptSpec* prompt = nullptr,
                     const FineTuneOptions& opts = {});

/// u_prompt encoder input: input + prefix + [MASK] x span + suffix + [SEP].
/// Returns the ids and the first mask position.
std::pair<std::vector<std::int64_t>, std::size_t> build_u_prompt_input(std::span<const std::int64_t> input_ids,
                                                                       const PromptSpec& prompt);

/// Per-token perplexity of `completion` (+[EOS]) under teacher forcing.
double completion_perplexity(std::span<const std::int64_t> input_ids, std::span<const std::int64_t> completion,
                             const CPTParams& params);

/// Per-position tag logits [n, T].
Tensor seq_label_forward(std::span<const std::int64_t> input_ids, FineTuneMode mode, const CPTParams& params,
                         const TaskHeads& heads, const FineTuneOptions& opts = {});

struct MrcExample {
  std::vector<std::int64_t> question;
  std::vector<std::int64_t> passage;
  std::size_t answer_start = 0;  // inclusive, passage coordinates
  std::size_t answer_end = 0;    // inclusive
};

struct MrcInput {
  std::vector<std::int64_t> ids;  // [CLS] question [SEP] passage [SEP]
  std::size_t passage_begin = 0;
  std::size_t passage_end = 0;  // exclusive
};

MrcInput frame_mrc(const MrcExample& example);

struct MrcOutput {
  Tensor start_logits;  // [1, n]
  Tensor end_logits;    // [1, n]
  std::size_t span_start = 0;  // decoded, input coordinates
  std::size_t span_end = 0;
};

MrcOutput mrc_forward(const MrcInput& input, FineTuneMode mode, const CPTParams& params, const TaskHeads& heads,
                      std::size_t max_span, const FineTuneOptions& opts = {});
/// Throws DataError when the gold span is not inside the passage.
Tensor mrc_loss(const MrcExample& example, FineTuneMode mode, const CPTParams& params, const TaskHeads& heads,
                const FineTuneOptions& opts = {});

/// Best (s, e) with s <= e, e - s < max_span, both in [begin, end).
std::pair<std::size_t, std::size_t> decode_span(std::span<const double> start, std::span<const double> end,
                                                std::size_t begin, std::size_t stop, std::size_t max_span);

/// Teacher-forced target loss through S-Enc + G-Dec.
Tensor cond_gen_loss(std::span<const std::int64_t> src_ids, std::span<const std::int64_t> tgt_ids,
                     const CPTParams& params);
/// One optimizer step on a batch of (source, target) pairs; returns the mean loss.
double cond_gen_finetune_step(std::span<const std::vector<std::int64_t>> sources,
                              std::span<const std::vector<std::int64_t>> targets, CPTParams& params, Trainer& trainer);

// ---------------------------------------------------------------------------
// Synthetic tasks and evaluation

struct ClassifyExample {
  std::vector<std::int64_t> ids;  // [CLS] ... [SEP]
  std::size_t label = 0;
};

struct TagExample {
  std::vector<std::int64_t> ids;   // [CLS] ... [SEP]
  std::vector<std::int64_t> tags;  // O=0, B=1, I=2; framing positions tagged O
};

struct GenExample {
  std::vector<std::int64_t> source;
  std::vector<std::int64_t> target;  // without [EOS]
};

namespace synthetic {
inline constexpr std::size_t tag_o = 0, tag_b = 1, tag_i = 2;

/// Two classes marked by one planted marker token among filler tokens.
std::vector<ClassifyExample> classification(std::size_t count, std::uint64_t seed);
/// Default verbalizer prompt for the classification task.
PromptSpec classification_prompt();
/// BIO tagging of planted entity words.
std::vector<TagExample> tagging(std::size_t count, std::uint64_t seed);
/// Copy-span lookup: the question repeats the answer tokens, and the
/// passage holds the answer plus a disjoint distractor span among fillers.
std::vector<MrcExample> reading(std::size_t count, std::uint64_t seed);
/// Copy (target = source) or reversal over a small symbol alphabet.
std::vector<GenExample> copy_task(std::size_t count, std::size_t min_len, std::size_t max_len, std::size_t alphabet,
                                  std::uint64_t seed);
std::vector<GenExample> reversal_task(std::size_t count, std::size_t length, std::size_t alphabet,
                                      std::uint64_t seed);
}  // namespace synthetic

double classification_accuracy(std::span<const ClassifyExample> data, FineTuneMode mode, const CPTParams& params,
                               const TaskHeads& heads, const PromptSpec* prompt = nullptr,
                               const FineTuneOptions& opts = {});
/// Entity-level F1 over B/I spans.
double tagging_f1(std::span<const TagExample> data, FineTuneMode mode, const CPTParams& params,
                  const TaskHeads& heads);
double mrc_exact_match(std::span<const MrcExample> data, FineTuneMode mode, const CPTParams& params,
                       const TaskHeads& heads, std::size_t max_span);

struct FitOptions {
  std::size_t steps = 300;
  std::size_t batch_size = 16;
  LrSchedule schedule{1e-3, 30, 300};
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  /// Called after every step with (step, mean loss).
  std::function<void(std::size_t, double)> on_step;
};

void fit_classifier(std::span<const ClassifyExample> train, FineTuneMode mode, CPTParams& params, TaskHeads& heads,
                    const PromptSpec* prompt, const FitOptions& fit, const FineTuneOptions& opts = {});
void fit_tagger(std::span<const TagExample> train, FineTuneMode mode, CPTParams& params, TaskHeads& heads,
                const FitOptions& fit);
void fit_reader(std::span<const MrcExample> train, FineTuneMode mode, CPTParams& params, TaskHeads& heads,
                const FitOptions& fit);
void fit_generator(std::span<const GenExample> train, CPTParams& params, const FitOptions& fit);

}  // namespace cpt
