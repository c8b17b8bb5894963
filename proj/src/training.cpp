#include "cpt/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "cpt/ops.hpp"

namespace cpt {

// ---------------------------------------------------------------------------
// Modes

std::string to_string(FineTuneMode mode) {
  switch (mode) {
    case FineTuneMode::u: return "u";
    case FineTuneMode::g: return "g";
    case FineTuneMode::ug: return "ug";
    case FineTuneMode::u_prompt: return "u_prompt";
    case FineTuneMode::g_prompt: return "g_prompt";
  }
  return "?";
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::classify: return "classify";
    case TaskKind::seqlabel: return "seqlabel";
    case TaskKind::mrc: return "mrc";
    case TaskKind::gen: return "gen";
  }
  return "?";
}

FineTuneMode parse_mode(const std::string& text) {
  if (text == "u") return FineTuneMode::u;
  if (text == "g") return FineTuneMode::g;
  if (text == "ug") return FineTuneMode::ug;
  if (text == "u_prompt" || text == "u+p") return FineTuneMode::u_prompt;
  if (text == "g_prompt" || text == "g+p") return FineTuneMode::g_prompt;
  throw ConfigError("unknown fine-tune mode '" + text + "'");
}

TaskKind parse_task_kind(const std::string& text) {
  if (text == "classify") return TaskKind::classify;
  if (text == "seqlabel") return TaskKind::seqlabel;
  if (text == "mrc") return TaskKind::mrc;
  if (text == "gen") return TaskKind::gen;
  throw ConfigError("unknown task kind '" + text + "'");
}

bool mode_valid(TaskKind kind, FineTuneMode mode) {
  switch (kind) {
    case TaskKind::classify: return true;
    case TaskKind::seqlabel:
    case TaskKind::mrc: return mode == FineTuneMode::u || mode == FineTuneMode::g || mode == FineTuneMode::ug;
    case TaskKind::gen: return mode == FineTuneMode::g;
  }
  return false;
}

void PromptSpec::validate(std::size_t num_labels, FineTuneMode mode) const {
  if (verbalizers.size() != num_labels) {
    throw ConfigError("prompt: " + std::to_string(verbalizers.size()) + " verbalizers for " +
                      std::to_string(num_labels) + " labels");
  }
  for (std::size_t l = 0; l < verbalizers.size(); ++l) {
    if (verbalizers[l].empty() || verbalizers[l].size() > 7) {
      throw ConfigError("prompt: verbalizer for label " + std::to_string(l) + " must have 1-7 tokens");
    }
    if (mode == FineTuneMode::u_prompt && verbalizers[l].size() != verbalizers.front().size()) {
      throw ConfigError("prompt: u_prompt verbalizers must share the mask span length");
    }
  }
}

std::vector<std::int64_t> PromptSpec::completion(std::size_t label) const {
  std::vector<std::int64_t> out = template_prefix;
  out.insert(out.end(), verbalizers.at(label).begin(), verbalizers.at(label).end());
  out.insert(out.end(), template_suffix.begin(), template_suffix.end());
  return out;
}

TaskHeads TaskHeads::create(TaskKind kind, FineTuneMode mode, std::size_t hidden, std::size_t outputs,
                            std::uint64_t seed) {
  if (!mode_valid(kind, mode)) {
    throw ConfigError("mode " + to_string(mode) + " is not available for task " + to_string(kind));
  }
  TaskHeads h;
  h.kind = kind;
  h.mode = mode;
  h.width = mode == FineTuneMode::ug ? 2 * hidden : hidden;
  h.outputs = outputs;
  std::mt19937_64 rng(seed);
  switch (kind) {
    case TaskKind::classify:
    case TaskKind::seqlabel:
      if (outputs == 0) throw ConfigError("task heads: need at least one label");
      if (mode == FineTuneMode::u_prompt || mode == FineTuneMode::g_prompt) break;
      h.weight = h.store.add("head.weight", {h.width, outputs}, Init::normal, rng);
      h.bias = h.store.add("head.bias", {outputs}, Init::zeros, rng);
      break;
    case TaskKind::mrc:
      h.span_start = h.store.add("head.span_start", {h.width, 1}, Init::normal, rng);
      h.span_end = h.store.add("head.span_end", {h.width, 1}, Init::normal, rng);
      break;
    case TaskKind::gen: break;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Optimization

Trainer::Trainer(std::vector<NamedParam> params, const LrSchedule& schedule, double weight_decay)
    : params_(std::move(params)), state_(make_adam(schedule, weight_decay)) {}

void Trainer::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double Trainer::step() { return adam_step(params_, state_); }

namespace {
bool starts_with(const std::string& s, const std::string& prefix) { return s.compare(0, prefix.size(), prefix) == 0; }

std::vector<NamedParam> select(const CPTParams& params, const std::vector<std::string>& prefixes) {
  std::vector<NamedParam> out;
  for (const auto& p : params.store.params()) {
    for (const auto& pre : prefixes) {
      if (starts_with(p.name, pre)) {
        out.push_back(p);
        break;
      }
    }
  }
  return out;
}
}  // namespace

std::vector<NamedParam> understanding_path_params(const CPTParams& params) {
  return select(params, {"embeddings.", "enc.", "udec.", "mlm_head."});
}

std::vector<NamedParam> generation_path_params(const CPTParams& params) {
  return select(params, {"embeddings.", "enc.", "gdec.", "lm_head."});
}

std::vector<NamedParam> params_for_mode(const CPTParams& params, FineTuneMode mode) {
  switch (mode) {
    case FineTuneMode::u:
    case FineTuneMode::u_prompt: return understanding_path_params(params);
    case FineTuneMode::g:
    case FineTuneMode::g_prompt: return generation_path_params(params);
    case FineTuneMode::ug: return params.store.params();
  }
  return {};
}

// ---------------------------------------------------------------------------
// Pre-training

Tensor mlm_batch_loss(const MlmBatch& batch, const CPTParams& params, std::size_t* counted) {
  std::vector<Tensor> sums;
  std::size_t total = 0;
  for (std::size_t r = 0; r < batch.input_ids.size(); ++r) {
    const Tensor states = understand(encode(batch.input_ids[r], batch.pad_mask[r], params), batch.pad_mask[r], params);
    auto ce = ops::cross_entropy(mlm_logits(states, params), batch.target_ids[r], ops::Reduction::sum);
    if (ce.degenerate()) continue;
    total += ce.counted;
    sums.push_back(ce.value);
  }
  if (counted) *counted = total;
  if (total == 0) return Tensor::scalar(0.0);
  Tensor acc = sums.front();
  for (std::size_t i = 1; i < sums.size(); ++i) acc = ops::add(acc, sums[i]);
  return ops::scale(acc, 1.0 / static_cast<double>(total));
}

Tensor dae_batch_loss(const DaeBatch& batch, const CPTParams& params, std::size_t* counted) {
  std::vector<Tensor> sums;
  std::size_t total = 0;
  for (std::size_t r = 0; r < batch.source_ids.size(); ++r) {
    const Tensor enc = encode(batch.source_ids[r], batch.source_mask[r], params);
    const Tensor dec = generate_forward(batch.decoder_input_ids[r], enc, batch.source_mask[r], params);
    auto ce = ops::cross_entropy(lm_logits(dec, params), batch.target_ids[r], ops::Reduction::sum);
    if (ce.degenerate()) continue;
    total += ce.counted;
    sums.push_back(ce.value);
  }
  if (counted) *counted = total;
  if (total == 0) return Tensor::scalar(0.0);
  Tensor acc = sums.front();
  for (std::size_t i = 1; i < sums.size(); ++i) acc = ops::add(acc, sums[i]);
  return ops::scale(acc, 1.0 / static_cast<double>(total));
}

PretrainGraph pretrain_loss(const MlmBatch& mlm, const DaeBatch& dae, const CPTParams& params, SubBatchOrder order) {
  PretrainGraph g;
  Tensor mlm_loss, dae_loss;
  if (order == SubBatchOrder::mlm_first) {
    mlm_loss = mlm_batch_loss(mlm, params, &g.losses.mlm_targets);
    dae_loss = dae_batch_loss(dae, params, &g.losses.dae_targets);
    g.total = ops::add(mlm_loss, dae_loss);
  } else {
    dae_loss = dae_batch_loss(dae, params, &g.losses.dae_targets);
    mlm_loss = mlm_batch_loss(mlm, params, &g.losses.mlm_targets);
    g.total = ops::add(dae_loss, mlm_loss);
  }
  g.losses.mlm = mlm_loss.item();
  g.losses.dae = dae_loss.item();
  return g;
}

PretrainLosses pretrain_step(const MlmBatch& mlm, const DaeBatch& dae, CPTParams& params, Trainer& trainer) {
  trainer.zero_grad();
  PretrainGraph g = pretrain_loss(mlm, dae, params);
  if (!std::isfinite(g.total.item())) {
    std::string ids;
    for (const auto& d : mlm.doc_ids) ids += (ids.empty() ? "" : ",") + d;
    for (const auto& d : dae.doc_ids) ids += (ids.empty() ? "" : ",") + d;
    throw NumericError("pretrain: non-finite loss on batch [" + ids + "]");
  }
  backward(g.total);
  trainer.step();
  return g.losses;
}

double mlm_accuracy(std::span<const MLMInstance> instances, const CPTParams& params) {
  NoGradGuard no_grad;
  std::size_t correct = 0, total = 0;
  const auto ignore = static_cast<std::int64_t>(params.config.vocab_size);
  for (const auto& inst : instances) {
    const auto mask = real_token_mask(inst.input_ids);
    const Tensor logits = mlm_logits(understand(encode(inst.input_ids, mask, params), mask, params), params);
    const std::size_t v = logits.cols();
    for (std::size_t i = 0; i < inst.target_ids.size(); ++i) {
      if (inst.target_ids[i] == ignore) continue;
      auto row = logits.values().subspan(i * v, v);
      const auto best = static_cast<std::int64_t>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == inst.target_ids[i];
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

namespace {
std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

std::vector<PretrainRecord> run_pretraining(std::span<const EncodedDocument> corpus, const Vocabulary& vocab,
                                            CPTParams& params, const PretrainOptions& options) {
  options.corruption.validate();
  options.schedule.validate();
  if (corpus.empty()) throw DataError("pretrain: empty corpus");
  if (options.batch_size == 0) throw ConfigError("pretrain: batch_size must be positive");
  if (vocab.size() != params.config.vocab_size) {
    throw ConfigError("pretrain: vocabulary has " + std::to_string(vocab.size()) + " entries, model expects " +
                      std::to_string(params.config.vocab_size));
  }
  CorruptionConfig corruption = options.corruption;
  corruption.max_positions = std::min(corruption.max_positions, params.config.max_positions);

  std::ofstream metrics;
  if (!options.metrics_path.empty()) {
    metrics.open(options.metrics_path, std::ios::trunc);
    if (!metrics) throw std::runtime_error("pretrain: cannot write metrics " + options.metrics_path.string());
    metrics << "step,task,loss,lr,wall_ms\n";
  }
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);
  auto save = [&](std::size_t step) {
    if (options.checkpoint_dir.empty()) return;
    char name[64];
    std::snprintf(name, sizeof(name), "step_%06zu.ckpt", step);
    save_model(options.checkpoint_dir / name, params);
  };

  Trainer trainer(params.store.params(), options.schedule, options.weight_decay);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size(), epoch = 0;
  std::vector<PretrainRecord> records;
  const auto clock_start = std::chrono::steady_clock::now();

  for (std::size_t step = 1; step <= options.steps; ++step) {
    std::vector<MLMInstance> mlm;
    std::vector<DAEInstance> dae;
    std::size_t width = 1;
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      if (cursor == order.size()) {
        std::mt19937_64 shuffle_rng(options.seed * 0x9e3779b97f4a7c15ULL + epoch);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_below(shuffle_rng, i)]);
        cursor = 0;
        ++epoch;
      }
      const EncodedDocument& doc = corpus[order[cursor++]];
      const std::string tag = std::to_string(epoch);
      if (options.tasks != PretrainTasks::dae_only) {
        auto rng = document_rng(options.seed, doc.doc_id, "mlm/" + tag);
        if (auto inst = make_mlm_instance(doc, corruption, vocab, rng)) {
          width = std::max(width, inst->input_ids.size());
          mlm.push_back(std::move(*inst));
        }
      }
      if (options.tasks != PretrainTasks::mlm_only) {
        auto rng = document_rng(options.seed, doc.doc_id, "dae/" + tag);
        dae.push_back(make_dae_instance(doc, corruption, rng));
        width = std::max({width, dae.back().source_ids.size(), dae.back().target_ids.size()});
      }
    }
    const MlmBatch mlm_batch = build_mlm_batch(mlm, width, vocab.ignore_id());
    const DaeBatch dae_batch = build_dae_batch(dae, width, vocab.ignore_id());
    const PretrainLosses losses = pretrain_step(mlm_batch, dae_batch, params, trainer);
    const double lr = trainer.state().lr_at_step(trainer.state().step);
    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - clock_start).count();
    records.push_back({step, losses, lr, wall_ms});
    if (metrics) {
      char wall[32];
      std::snprintf(wall, sizeof(wall), "%.3f", wall_ms);
      metrics << step << ",mlm," << format_double(losses.mlm) << ',' << format_double(lr) << ',' << wall << '\n';
      metrics << step << ",dae," << format_double(losses.dae) << ',' << format_double(lr) << ',' << wall << '\n';
    }
    if (options.checkpoint_every && step % options.checkpoint_every == 0 && step != options.steps) save(step);
  }
  save(options.steps);
  return records;
}

// ---------------------------------------------------------------------------
// Fine-tuning forwards

namespace {

std::vector<char> all_real(std::size_t n) { return std::vector<char>(n, 1); }

std::vector<std::int64_t> decoder_ids_for(std::span<const std::int64_t> ids, const FineTuneOptions& opts) {
  std::vector<std::int64_t> out;
  if (opts.g_prepend_bos) out.push_back(special::bos);
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

// Position-aligned per-token states for the u / g / ug paths.
Tensor token_states(std::span<const std::int64_t> ids, FineTuneMode mode, const CPTParams& params,
                    const FineTuneOptions& opts) {
  const auto mask = all_real(ids.size());
  const Tensor enc = encode(ids, mask, params);
  Tensor u, g;
  if (mode == FineTuneMode::u || mode == FineTuneMode::ug) u = understand(enc, mask, params);
  if (mode == FineTuneMode::g || mode == FineTuneMode::ug) {
    g = generate_forward(decoder_ids_for(ids, opts), enc, mask, params);
    if (opts.g_prepend_bos) g = ops::slice_rows(g, 1, ids.size());
  }
  switch (mode) {
    case FineTuneMode::u: return u;
    case FineTuneMode::g: return g;
    case FineTuneMode::ug: return ops::concat_cols(std::vector<Tensor>{u, g});
    default: throw ConfigError("token states: mode " + to_string(mode) + " has no per-token representation");
  }
}

Tensor classifier_logits(std::span<const std::int64_t> ids, FineTuneMode mode, const CPTParams& params,
                         const TaskHeads& heads, const FineTuneOptions& opts) {
  const auto mask = all_real(ids.size());
  const Tensor enc = encode(ids, mask, params);
  Tensor u_feat, g_feat;
  if (mode == FineTuneMode::u || mode == FineTuneMode::ug) {
    u_feat = ops::slice_rows(understand(enc, mask, params), 0, 1);  // [CLS]
  }
  if (mode == FineTuneMode::g || mode == FineTuneMode::ug) {
    const auto dec_ids = decoder_ids_for(ids, opts);
    g_feat = ops::slice_rows(generate_forward(dec_ids, enc, mask, params), dec_ids.size() - 1, 1);  // final [SEP]
  }
  const Tensor feat = mode == FineTuneMode::u   ? u_feat
                      : mode == FineTuneMode::g ? g_feat
                                                : ops::concat_cols(std::vector<Tensor>{u_feat, g_feat});
  return ops::add_row(ops::matmul(feat, heads.weight), heads.bias);
}

Tensor prompt_span_logits(std::span<const std::int64_t> ids, const PromptSpec& prompt, const CPTParams& params) {
  const auto [prompt_ids, first] = build_u_prompt_input(ids, prompt);
  const auto mask = all_real(prompt_ids.size());
  const Tensor states = understand(encode(prompt_ids, mask, params), mask, params);
  return mlm_logits(ops::slice_rows(states, first, prompt.span_length()), params);
}

void require_prompt(const PromptSpec* prompt, const TaskHeads& heads, FineTuneMode mode) {
  if (!prompt) throw ConfigError("classify: mode " + to_string(mode) + " needs a prompt");
  prompt->validate(heads.outputs, mode);
}

}  // namespace

std::pair<std::vector<std::int64_t>, std::size_t> build_u_prompt_input(std::span<const std::int64_t> input_ids,
                                                                       const PromptSpec& prompt) {
  std::vector<std::int64_t> out(input_ids.begin(), input_ids.end());
  out.insert(out.end(), prompt.template_prefix.begin(), prompt.template_prefix.end());
  const std::size_t first = out.size();
  out.insert(out.end(), prompt.span_length(), special::mask);
  out.insert(out.end(), prompt.template_suffix.begin(), prompt.template_suffix.end());
  out.push_back(special::sep);
  return {out, first};
}

double completion_perplexity(std::span<const std::int64_t> input_ids, std::span<const std::int64_t> completion,
                             const CPTParams& params) {
  NoGradGuard no_grad;
  return std::exp(cond_gen_loss(input_ids, completion, params).item());
}

Tensor classify_forward(std::span<const std::int64_t> input_ids, FineTuneMode mode, const CPTParams& params,
                        const TaskHeads& heads, const PromptSpec* prompt, const FineTuneOptions& opts) {
  if (heads.kind != TaskKind::classify || heads.mode != mode) {
    throw ConfigError("classify: heads were built for " + to_string(heads.kind) + "/" + to_string(heads.mode));
  }
  switch (mode) {
    case FineTuneMode::u:
    case FineTuneMode::g:
    case FineTuneMode::ug: return classifier_logits(input_ids, mode, params, heads, opts);
    case FineTuneMode::u_prompt: {
      require_prompt(prompt, heads, mode);
      NoGradGuard no_grad;
      const Tensor probs = ops::softmax(prompt_span_logits(input_ids, *prompt, params), 1);
      const std::size_t v = probs.cols();
      std::vector<double> scores(heads.outputs);
      for (std::size_t l = 0; l < heads.outputs; ++l) {
        double arith = 0.0, logsum = 0.0;
        for (std::size_t j = 0; j < prompt->span_length(); ++j) {
          const double p = probs.values()[j * v + static_cast<std::size_t>(prompt->verbalizers[l][j])];
          arith += p;
          logsum += std::log(p);
        }
        const auto k = static_cast<double>(prompt->span_length());
        scores[l] = opts.verbalizer_mean == VerbalizerMean::arithmetic ? arith / k : std::exp(logsum / k);
      }
      return Tensor::from({1, heads.outputs}, std::move(scores));
    }
    case FineTuneMode::g_prompt: {
      require_prompt(prompt, heads, mode);
      std::vector<double> scores(heads.outputs);
      for (std::size_t l = 0; l < heads.outputs; ++l) {
        const double ppl = completion_perplexity(input_ids, prompt->completion(l), params);
        scores[l] = opts.perplexity_rule == PerplexityRule::lowest_wins ? -ppl : ppl;
      }
      return Tensor::from({1, heads.outputs}, std::move(scores));
    }
  }
  throw ConfigError("classify: unknown mode");
}

Tensor classify_loss(std::span<const std::int64_t> input_ids, std::size_t label, FineTuneMode mode,
                     const CPTParams& params, const TaskHeads& heads, const PromptSpec* prompt,
                     const FineTuneOptions& opts) {
  if (label >= heads.outputs) throw DataError("classify: label " + std::to_string(label) + " out of range");
  switch (mode) {
    case FineTuneMode::u:
    case FineTuneMode::g:
    case FineTuneMode::ug: {
      const std::vector<std::int64_t> target{static_cast<std::int64_t>(label)};
      return ops::cross_entropy(classify_forward(input_ids, mode, params, heads, prompt, opts), target).value;
    }
    case FineTuneMode::u_prompt: {
      require_prompt(prompt, heads, mode);
      return ops::cross_entropy(prompt_span_logits(input_ids, *prompt, params), prompt->verbalizers[label]).value;
    }
    case FineTuneMode::g_prompt: {
      require_prompt(prompt, heads, mode);
      return cond_gen_loss(input_ids, prompt->completion(label), params);
    }
  }
  throw ConfigError("classify: unknown mode");
}

Tensor seq_label_forward(std::span<const std::int64_t> input_ids, FineTuneMode mode, const CPTParams& params,
                         const TaskHeads& heads, const FineTuneOptions& opts) {
  if (heads.kind != TaskKind::seqlabel || heads.mode != mode) {
    throw ConfigError("seq_label: heads were built for " + to_string(heads.kind) + "/" + to_string(heads.mode));
  }
  return ops::add_row(ops::matmul(token_states(input_ids, mode, params, opts), heads.weight), heads.bias);
}

MrcInput frame_mrc(const MrcExample& example) {
  MrcInput in;
  in.ids.push_back(special::cls);
  in.ids.insert(in.ids.end(), example.question.begin(), example.question.end());
  in.ids.push_back(special::sep);
  in.passage_begin = in.ids.size();
  in.ids.insert(in.ids.end(), example.passage.begin(), example.passage.end());
  in.passage_end = in.ids.size();
  in.ids.push_back(special::sep);
  return in;
}

std::pair<std::size_t, std::size_t> decode_span(std::span<const double> start, std::span<const double> end,
                                                std::size_t begin, std::size_t stop, std::size_t max_span) {
  if (max_span == 0) throw ConfigError("mrc: max_span must be positive");
  if (begin >= stop || stop > start.size() || start.size() != end.size()) {
    throw DataError("mrc: empty or invalid passage segment");
  }
  std::pair<std::size_t, std::size_t> best{begin, begin};
  double best_score = -INFINITY;
  for (std::size_t s = begin; s < stop; ++s) {
    for (std::size_t e = s; e < stop && e - s < max_span; ++e) {
      const double score = start[s] + end[e];
      if (score > best_score) {
        best_score = score;
        best = {s, e};
      }
    }
  }
  return best;
}

MrcOutput mrc_forward(const MrcInput& input, FineTuneMode mode, const CPTParams& params, const TaskHeads& heads,
                      std::size_t max_span, const FineTuneOptions& opts) {
  if (heads.kind != TaskKind::mrc || heads.mode != mode) {
    throw ConfigError("mrc: heads were built for " + to_string(heads.kind) + "/" + to_string(heads.mode));
  }
  const Tensor states = token_states(input.ids, mode, params, opts);
  const std::size_t n = input.ids.size();
  MrcOutput out;
  out.start_logits = ops::reshape(ops::matmul(states, heads.span_start), {1, n});
  out.end_logits = ops::reshape(ops::matmul(states, heads.span_end), {1, n});
  std::tie(out.span_start, out.span_end) = decode_span(out.start_logits.values(), out.end_logits.values(),
                                                       input.passage_begin, input.passage_end, max_span);
  return out;
}

Tensor mrc_loss(const MrcExample& example, FineTuneMode mode, const CPTParams& params, const TaskHeads& heads,
                const FineTuneOptions& opts) {
  if (example.answer_start > example.answer_end || example.answer_end >= example.passage.size()) {
    throw DataError("mrc: gold span [" + std::to_string(example.answer_start) + "," +
                    std::to_string(example.answer_end) + "] lies outside the passage of length " +
                    std::to_string(example.passage.size()));
  }
  const MrcInput input = frame_mrc(example);
  const MrcOutput out = mrc_forward(input, mode, params, heads, example.passage.size(), opts);
  const std::vector<std::int64_t> s{static_cast<std::int64_t>(input.passage_begin + example.answer_start)};
  const std::vector<std::int64_t> e{static_cast<std::int64_t>(input.passage_begin + example.answer_end)};
  return ops::add(ops::cross_entropy(out.start_logits, s).value, ops::cross_entropy(out.end_logits, e).value);
}

Tensor cond_gen_loss(std::span<const std::int64_t> src_ids, std::span<const std::int64_t> tgt_ids,
                     const CPTParams& params) {
  if (tgt_ids.empty()) throw DataError("generation: empty target");
  std::vector<std::int64_t> targets(tgt_ids.begin(), tgt_ids.end());
  targets.push_back(special::eos);
  const auto dec_in = shift_right(targets);
  const auto mask = real_token_mask(src_ids);
  const Tensor enc = encode(src_ids, mask, params);
  return ops::cross_entropy(lm_logits(generate_forward(dec_in, enc, mask, params), params), targets).value;
}

double cond_gen_finetune_step(std::span<const std::vector<std::int64_t>> sources,
                              std::span<const std::vector<std::int64_t>> targets, CPTParams& params,
                              Trainer& trainer) {
  if (sources.size() != targets.size() || sources.empty()) {
    throw DataError("generation: need equally many non-zero sources and targets");
  }
  trainer.zero_grad();
  double total = 0.0;
  const double weight = 1.0 / static_cast<double>(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const Tensor loss = ops::scale(cond_gen_loss(sources[i], targets[i], params), weight);
    total += loss.item();
    backward(loss);
  }
  if (!std::isfinite(total)) throw NumericError("generation: non-finite loss");
  trainer.step();
  return total;
}

// ---------------------------------------------------------------------------
// Synthetic tasks

namespace synthetic {

namespace {
constexpr std::int64_t sym(std::int64_t i) { return special::count + i; }
constexpr std::int64_t kFillerBegin = sym(20), kFillerCount = 100;
constexpr std::int64_t kEntityBegin = sym(200), kEntityCount = 20;
constexpr std::int64_t kAnswerBegin = sym(240), kAnswerCount = 16;

std::int64_t filler(std::mt19937_64& rng) {
  return kFillerBegin + static_cast<std::int64_t>(uniform_below(rng, kFillerCount));
}

std::size_t between(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(uniform_below(rng, hi - lo + 1));
}

std::vector<std::int64_t> framed(std::vector<std::int64_t> body) {
  body.insert(body.begin(), special::cls);
  body.push_back(special::sep);
  return body;
}
}  // namespace

std::vector<ClassifyExample> classification(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ClassifyExample> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = uniform_below(rng, 2);
    std::vector<std::int64_t> body(between(rng, 6, 10));
    for (auto& t : body) t = filler(rng);
    body[uniform_below(rng, body.size())] = sym(static_cast<std::int64_t>(label));
    out.push_back({framed(std::move(body)), label});
  }
  return out;
}

PromptSpec classification_prompt() {
  PromptSpec p;
  p.template_prefix = {sym(2)};
  p.verbalizers = {{sym(10)}, {sym(11)}};
  return p;
}

std::vector<TagExample> tagging(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TagExample> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::int64_t> body(between(rng, 6, 10));
    for (auto& t : body) t = filler(rng);
    std::vector<std::int64_t> tags(body.size(), tag_o);
    const std::size_t entities = between(rng, 1, 2);
    for (std::size_t e = 0; e < entities; ++e) {
      const std::size_t len = between(rng, 2, 3);
      const std::size_t at = uniform_below(rng, body.size() - len + 1);
      bool clash = false;
      for (std::size_t k = (at ? at - 1 : 0); k < std::min(body.size(), at + len + 1); ++k) clash |= tags[k] != tag_o;
      if (clash) continue;
      for (std::size_t k = 0; k < len; ++k) {
        body[at + k] = kEntityBegin + static_cast<std::int64_t>(uniform_below(rng, kEntityCount));
        tags[at + k] = k == 0 ? tag_b : tag_i;
      }
    }
    tags.insert(tags.begin(), tag_o);
    tags.push_back(tag_o);
    out.push_back({framed(std::move(body)), std::move(tags)});
  }
  return out;
}

std::vector<MrcExample> reading(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<MrcExample> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::int64_t> answer(between(rng, 1, 3)), distractor(between(rng, 1, 3));
    for (auto& t : answer) t = kAnswerBegin + static_cast<std::int64_t>(uniform_below(rng, kAnswerCount));
    for (auto& t : distractor) {
      do {
        t = kAnswerBegin + static_cast<std::int64_t>(uniform_below(rng, kAnswerCount));
      } while (std::find(answer.begin(), answer.end(), t) != answer.end());
    }
    const bool answer_first = uniform_below(rng, 2) == 0;
    MrcExample ex;
    ex.question = answer;
    auto pad = [&](std::size_t n) {
      for (std::size_t k = 0; k < n; ++k) ex.passage.push_back(filler(rng));
    };
    pad(between(rng, 1, 4));
    if (!answer_first) {
      ex.passage.insert(ex.passage.end(), distractor.begin(), distractor.end());
      pad(between(rng, 1, 4));
    }
    ex.answer_start = ex.passage.size();
    ex.passage.insert(ex.passage.end(), answer.begin(), answer.end());
    ex.answer_end = ex.passage.size() - 1;
    if (answer_first) {
      pad(between(rng, 1, 4));
      ex.passage.insert(ex.passage.end(), distractor.begin(), distractor.end());
    }
    pad(between(rng, 1, 4));
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<GenExample> copy_task(std::size_t count, std::size_t min_len, std::size_t max_len, std::size_t alphabet,
                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GenExample> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::int64_t> seq(between(rng, min_len, max_len));
    for (auto& t : seq) t = sym(static_cast<std::int64_t>(uniform_below(rng, alphabet)));
    out.push_back({seq, seq});
  }
  return out;
}

std::vector<GenExample> reversal_task(std::size_t count, std::size_t length, std::size_t alphabet,
                                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GenExample> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::int64_t> seq(length);
    for (auto& t : seq) t = sym(static_cast<std::int64_t>(uniform_below(rng, alphabet)));
    out.push_back({seq, std::vector<std::int64_t>(seq.rbegin(), seq.rend())});
  }
  return out;
}

}  // namespace synthetic

// ---------------------------------------------------------------------------
// Evaluation and fitting loops

namespace {
std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::set<std::pair<std::size_t, std::size_t>> entity_spans(std::span<const std::int64_t> tags) {
  std::set<std::pair<std::size_t, std::size_t>> spans;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    if (tags[i] != static_cast<std::int64_t>(synthetic::tag_b)) continue;
    std::size_t j = i + 1;
    while (j < tags.size() && tags[j] == static_cast<std::int64_t>(synthetic::tag_i)) ++j;
    spans.emplace(i, j);
  }
  return spans;
}

std::vector<NamedParam> with_heads(std::vector<NamedParam> params, const TaskHeads& heads) {
  for (const auto& p : heads.store.params()) params.push_back(p);
  return params;
}

// Minibatch loop: per-example backward passes accumulate into the leaves.
template <typename Example, typename LossFn>
void fit_loop(std::span<const Example> train, std::vector<NamedParam> trainable, const FitOptions& fit,
              LossFn&& loss_fn) {
  if (train.empty()) throw DataError("fit: empty training set");
  Trainer trainer(std::move(trainable), fit.schedule, fit.weight_decay);
  std::mt19937_64 rng(fit.seed);
  const std::size_t batch = std::min(fit.batch_size, train.size());
  const double weight = 1.0 / static_cast<double>(batch);
  for (std::size_t step = 1; step <= fit.steps; ++step) {
    trainer.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const Example& ex = train[uniform_below(rng, train.size())];
      const Tensor loss = ops::scale(loss_fn(ex), weight);
      total += loss.item();
      backward(loss);
    }
    if (!std::isfinite(total)) throw NumericError("fit: non-finite loss at step " + std::to_string(step));
    trainer.step();
    if (fit.on_step) fit.on_step(step, total);
  }
}
}  // namespace

double classification_accuracy(std::span<const ClassifyExample> data, FineTuneMode mode, const CPTParams& params,
                               const TaskHeads& heads, const PromptSpec* prompt, const FineTuneOptions& opts) {
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (const auto& ex : data) {
    correct += argmax(classify_forward(ex.ids, mode, params, heads, prompt, opts).values()) == ex.label;
  }
  return data.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
}

double tagging_f1(std::span<const TagExample> data, FineTuneMode mode, const CPTParams& params,
                  const TaskHeads& heads) {
  NoGradGuard no_grad;
  std::size_t tp = 0, predicted = 0, gold = 0;
  for (const auto& ex : data) {
    const Tensor logits = seq_label_forward(ex.ids, mode, params, heads);
    std::vector<std::int64_t> pred(ex.ids.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
      pred[i] = static_cast<std::int64_t>(argmax(logits.values().subspan(i * logits.cols(), logits.cols())));
    }
    const auto p = entity_spans(pred);
    const auto g = entity_spans(ex.tags);
    predicted += p.size();
    gold += g.size();
    for (const auto& span : p) tp += g.contains(span);
  }
  if (tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(predicted);
  const double recall = static_cast<double>(tp) / static_cast<double>(gold);
  return 2 * precision * recall / (precision + recall);
}

double mrc_exact_match(std::span<const MrcExample> data, FineTuneMode mode, const CPTParams& params,
                       const TaskHeads& heads, std::size_t max_span) {
  NoGradGuard no_grad;
  std::size_t hits = 0;
  for (const auto& ex : data) {
    const MrcInput in = frame_mrc(ex);
    const MrcOutput out = mrc_forward(in, mode, params, heads, max_span);
    hits += out.span_start == in.passage_begin + ex.answer_start && out.span_end == in.passage_begin + ex.answer_end;
  }
  return data.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(data.size());
}

void fit_classifier(std::span<const ClassifyExample> train, FineTuneMode mode, CPTParams& params, TaskHeads& heads,
                    const PromptSpec* prompt, const FitOptions& fit, const FineTuneOptions& opts) {
  fit_loop(train, with_heads(params_for_mode(params, mode), heads), fit, [&](const ClassifyExample& ex) {
    return classify_loss(ex.ids, ex.label, mode, params, heads, prompt, opts);
  });
}

void fit_tagger(std::span<const TagExample> train, FineTuneMode mode, CPTParams& params, TaskHeads& heads,
                const FitOptions& fit) {
  fit_loop(train, with_heads(params_for_mode(params, mode), heads), fit, [&](const TagExample& ex) {
    if (ex.tags.size() != ex.ids.size()) throw DataError("seq_label: tag and token counts differ");
    return ops::cross_entropy(seq_label_forward(ex.ids, mode, params, heads), ex.tags).value;
  });
}

void fit_reader(std::span<const MrcExample> train, FineTuneMode mode, CPTParams& params, TaskHeads& heads,
                const FitOptions& fit) {
  fit_loop(train, with_heads(params_for_mode(params, mode), heads), fit,
           [&](const MrcExample& ex) { return mrc_loss(ex, mode, params, heads); });
}

void fit_generator(std::span<const GenExample> train, CPTParams& params, const FitOptions& fit) {
  fit_loop(train, generation_path_params(params), fit,
           [&](const GenExample& ex) { return cond_gen_loss(ex.source, ex.target, params); });
}

}  // namespace cpt
