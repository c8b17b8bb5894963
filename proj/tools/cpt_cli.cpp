// Command-line driver: corpus synthesis, pre-training, fine-tuning,
// generation, corruption dumps, checkpoint inspection and the decoding
// throughput benchmark.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cpt/corruption.hpp"
#include "cpt/inference.hpp"
#include "cpt/kv_config.hpp"
#include "cpt/model.hpp"
#include "cpt/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace cpt;

namespace {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDataError = 3,
  kPathError = 4,
  kNumericAbort = 5,
};

class PathError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " path is required");
  if (!fs::is_regular_file(path)) throw PathError(what + " '" + path + "' does not exist");
}

void require_parent(const std::string& path, const std::string& what) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) {
    throw PathError(what + " directory '" + parent.string() + "' does not exist");
  }
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(text);
  while (std::getline(ss, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  require_parent(path, "output");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PathError("cannot write " + path);
  out << text;
}

// ---------------------------------------------------------------------------
// Shared option groups

struct ModelOptions {
  std::string preset = "desk";
  std::optional<std::size_t> vocab_size, hidden, heads, layers_enc, layers_udec, layers_gdec, max_positions;

  void add(CLI::App& app) {
    app.add_option("--preset", preset, "desk | base | large")->check(CLI::IsMember({"desk", "base", "large"}));
    app.add_option("--vocab-size", vocab_size);
    app.add_option("--hidden", hidden);
    app.add_option("--heads", heads);
    app.add_option("--layers-enc", layers_enc);
    app.add_option("--layers-udec", layers_udec);
    app.add_option("--layers-gdec", layers_gdec);
    app.add_option("--max-positions", max_positions);
  }

  ModelConfig build() const {
    ModelConfig c = preset == "base" ? ModelConfig::base() : preset == "large" ? ModelConfig::large() : ModelConfig::desk();
    if (vocab_size) c.vocab_size = *vocab_size;
    if (hidden) c.hidden = *hidden;
    if (heads) c.heads = *heads;
    if (layers_enc) c.layers_enc = *layers_enc;
    if (layers_udec) c.layers_udec = *layers_udec;
    if (layers_gdec) c.layers_gdec = *layers_gdec;
    if (max_positions) c.max_positions = *max_positions;
    c.validate();
    return c;
  }
};

struct CorruptionOptions {
  CorruptionConfig cfg;
  std::string granularity = "token";
  bool no_permute = false;

  void add(CLI::App& app) {
    app.add_option("--mask-rate", cfg.word_mask_rate, "fraction of words selected for MLM");
    app.add_option("--mask-frac", cfg.mask_frac);
    app.add_option("--random-frac", cfg.random_frac);
    app.add_option("--keep-frac", cfg.keep_frac);
    app.add_option("--infill-rate", cfg.dae_infill_rate, "fraction of words infilled for DAE");
    app.add_option("--replace-granularity", granularity)->check(CLI::IsMember({"token", "word"}));
    app.add_flag("--no-permute", no_permute, "keep sentence order in DAE sources");
  }

  CorruptionConfig build(std::size_t max_positions, std::uint64_t seed) const {
    CorruptionConfig c = cfg;
    c.granularity = granularity == "word" ? ReplacementGranularity::per_word : ReplacementGranularity::per_token;
    c.permute_sentences = !no_permute;
    c.max_positions = max_positions;
    c.seed = seed;
    c.validate();
    return c;
  }
};

Vocabulary load_vocabulary(const std::string& path, std::size_t model_vocab) {
  if (path.empty()) {
    if (model_vocab <= static_cast<std::size_t>(special::count)) throw ConfigError("vocabulary too small");
    return Vocabulary::synthetic(model_vocab - special::count);
  }
  require_file(path, "vocabulary");
  std::vector<std::string> tokens;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) tokens.push_back(line);
  }
  Vocabulary v(std::move(tokens));
  if (v.size() != model_vocab) {
    throw ConfigError("vocabulary has " + std::to_string(v.size()) + " entries, model expects " +
                      std::to_string(model_vocab));
  }
  return v;
}

std::uint64_t require_seed(const std::optional<std::uint64_t>& seed) {
  if (!seed) throw ConfigError("--seed is required (set it on the command line or in the config file)");
  return *seed;
}

std::vector<std::int64_t> to_ids(const json& tokens, const Vocabulary& vocab, const std::string& where) {
  if (!tokens.is_array()) throw DataError(where + ": expected an array of tokens");
  std::vector<std::int64_t> ids;
  for (const auto& t : tokens) {
    if (!t.is_string()) throw DataError(where + ": tokens must be strings");
    const auto id = vocab.find(t.get<std::string>());
    if (!id) throw DataError(where + ": token '" + t.get<std::string>() + "' is not in the vocabulary");
    ids.push_back(*id);
  }
  return ids;
}

json to_tokens(std::span<const std::int64_t> ids, const Vocabulary& vocab) {
  json out = json::array();
  for (auto id : ids) out.push_back(vocab.token(id));
  return out;
}

std::vector<json> read_jsonl(const std::string& path) {
  require_file(path, "dataset");
  std::vector<json> rows;
  std::istringstream in(read_text(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  std::string kind = "corpus";
  std::size_t count = 32;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t vocab_size = 263;
};

int cmd_synth(const SynthOptions& o) {
  const std::uint64_t seed = require_seed(o.seed);
  const Vocabulary vocab = load_vocabulary("", o.vocab_size);
  if (o.vocab_size != 263 && o.kind != "corpus") throw ConfigError("synthetic task data assumes the desk vocabulary");
  std::ostringstream out;
  if (o.kind == "corpus") {
    for (const auto& d : synthetic_corpus(o.count, seed, vocab)) out << document_to_line(d) << '\n';
  } else if (o.kind == "classify") {
    for (const auto& ex : synthetic::classification(o.count, seed)) {
      out << json{{"tokens", to_tokens(ex.ids, vocab)}, {"label", ex.label}}.dump() << '\n';
    }
  } else if (o.kind == "seqlabel") {
    static const char* names[] = {"O", "B", "I"};
    for (const auto& ex : synthetic::tagging(o.count, seed)) {
      json tags = json::array();
      for (auto t : ex.tags) tags.push_back(names[t]);
      out << json{{"tokens", to_tokens(ex.ids, vocab)}, {"tags", tags}}.dump() << '\n';
    }
  } else if (o.kind == "mrc") {
    for (const auto& ex : synthetic::reading(o.count, seed)) {
      out << json{{"question", to_tokens(ex.question, vocab)},
                  {"passage", to_tokens(ex.passage, vocab)},
                  {"answer_start", ex.answer_start},
                  {"answer_end", ex.answer_end}}
                 .dump()
          << '\n';
    }
  } else if (o.kind == "copy" || o.kind == "reverse") {
    const auto data = o.kind == "copy" ? synthetic::copy_task(o.count, 4, 8, 16, seed)
                                       : synthetic::reversal_task(o.count, 8, 32, seed);
    for (const auto& ex : data) {
      out << json{{"source", to_tokens(ex.source, vocab)}, {"target", to_tokens(ex.target, vocab)}}.dump() << '\n';
    }
  } else {
    throw ConfigError("synth: unknown kind '" + o.kind + "'");
  }
  write_text(o.out, out.str());
  return kOk;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainCli {
  ModelOptions model;
  CorruptionOptions corruption;
  std::string corpus, out_dir, metrics, vocab_path, task = "joint";
  std::optional<std::uint64_t> seed;
  std::size_t steps = 50, batch = 8, checkpoint_every = 0, warmup = 100, total = 2000;
  double lr = 3e-4, weight_decay = 0.01;
};

int cmd_pretrain(const PretrainCli& o) {
  const std::uint64_t seed = require_seed(o.seed);
  const ModelConfig config = o.model.build();
  require_file(o.corpus, "corpus");
  if (o.out_dir.empty()) throw ConfigError("--out-dir is required");
  require_parent(o.out_dir, "output");
  fs::create_directories(o.out_dir);
  if (!o.metrics.empty()) require_parent(o.metrics, "metrics");

  PretrainOptions opts;
  opts.corruption = o.corruption.build(config.max_positions, seed);
  opts.schedule = {o.lr, static_cast<std::int64_t>(o.warmup), static_cast<std::int64_t>(std::max(o.total, o.steps))};
  opts.schedule.validate();
  opts.weight_decay = o.weight_decay;
  opts.batch_size = o.batch;
  opts.steps = o.steps;
  opts.seed = seed;
  opts.tasks = o.task == "mlm-only" ? PretrainTasks::mlm_only
               : o.task == "dae-only" ? PretrainTasks::dae_only
                                      : PretrainTasks::joint;
  opts.checkpoint_every = o.checkpoint_every;
  opts.checkpoint_dir = o.out_dir;
  opts.metrics_path = o.metrics.empty() ? fs::path(o.out_dir) / "metrics.csv" : fs::path(o.metrics);

  const Vocabulary vocab = load_vocabulary(o.vocab_path, config.vocab_size);
  const auto docs = load_corpus(o.corpus);
  CorpusReport report;
  std::vector<EncodedDocument> encoded;
  for (const auto& d : docs) encoded.push_back(encode_document(d, vocab, &report));
  std::cerr << "corpus: " << report.documents << " documents, " << report.tokens << " tokens, "
            << report.unknown_tokens << " unknown\n";

  CPTParams params = CPTParams::create(config, seed);
  const auto records = run_pretraining(encoded, vocab, params, opts);
  const auto& last = records.back();
  std::cerr << "step " << last.step << ": mlm " << last.losses.mlm << ", dae " << last.losses.dae << '\n';
  char name[32];
  std::snprintf(name, sizeof(name), "step_%06zu.ckpt", o.steps);
  std::cout << (fs::path(o.out_dir) / name).string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// finetune

struct FinetuneCli {
  std::string base, task, mode, train, eval, out, vocab_path, verbalizers, prompt_prefix, prompt_suffix;
  std::string perplexity_rule = "lowest", verbalizer_mean = "arithmetic", tag_set = "O,B,I";
  std::optional<std::uint64_t> seed;
  std::size_t steps = 300, batch = 16, warmup = 30, max_span = 8, labels = 0, max_new_tokens = 32;
  double lr = 1e-3, weight_decay = 0.01;
  bool g_bos = false;
};

std::vector<std::int64_t> token_list(const std::string& text, const Vocabulary& vocab, const std::string& what) {
  std::vector<std::int64_t> ids;
  for (const auto& t : split(text, ' ')) {
    const auto id = vocab.find(t);
    if (!id) throw ConfigError(what + ": token '" + t + "' is not in the vocabulary");
    ids.push_back(*id);
  }
  return ids;
}

int cmd_finetune(const FinetuneCli& o) {
  const std::uint64_t seed = require_seed(o.seed);
  const TaskKind kind = parse_task_kind(o.task);
  const FineTuneMode mode = parse_mode(o.mode);
  if (!mode_valid(kind, mode)) {
    throw ConfigError("mode " + to_string(mode) + " is not available for task " + to_string(kind));
  }
  require_file(o.base, "base checkpoint");
  require_file(o.base + ".config", "base checkpoint config");
  require_file(o.train, "training data");
  if (!o.eval.empty()) require_file(o.eval, "evaluation data");
  if (!o.out.empty()) require_parent(o.out, "output checkpoint");

  CPTParams params = load_model(o.base);
  const Vocabulary vocab = load_vocabulary(o.vocab_path, params.config.vocab_size);
  const auto train_rows = read_jsonl(o.train);
  const auto eval_rows = o.eval.empty() ? train_rows : read_jsonl(o.eval);

  FitOptions fit;
  fit.steps = o.steps;
  fit.batch_size = o.batch;
  fit.schedule = {o.lr, static_cast<std::int64_t>(std::min(o.warmup, o.steps)), static_cast<std::int64_t>(o.steps)};
  fit.weight_decay = o.weight_decay;
  fit.seed = seed;
  FineTuneOptions ft;
  ft.perplexity_rule = o.perplexity_rule == "highest" ? PerplexityRule::highest_wins : PerplexityRule::lowest_wins;
  ft.verbalizer_mean = o.verbalizer_mean == "geometric" ? VerbalizerMean::geometric : VerbalizerMean::arithmetic;
  ft.g_prepend_bos = o.g_bos;

  json report{{"task", to_string(kind)}, {"mode", to_string(mode)}, {"steps", o.steps}};
  std::optional<TaskHeads> heads;
  const std::size_t hidden = params.config.hidden;

  switch (kind) {
    case TaskKind::classify: {
      auto parse = [&](const std::vector<json>& rows, const std::string& file) {
        std::vector<ClassifyExample> out;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const std::string where = file + ":" + std::to_string(i + 1);
          if (!rows[i].contains("tokens") || !rows[i].contains("label")) throw DataError(where + ": needs tokens and label");
          out.push_back({to_ids(rows[i]["tokens"], vocab, where), rows[i]["label"].get<std::size_t>()});
        }
        return out;
      };
      const auto train = parse(train_rows, o.train);
      const auto eval = parse(eval_rows, o.eval.empty() ? o.train : o.eval);
      std::size_t labels = o.labels;
      for (const auto& ex : train) labels = std::max(labels, ex.label + 1);
      std::optional<PromptSpec> prompt;
      if (mode == FineTuneMode::u_prompt || mode == FineTuneMode::g_prompt) {
        PromptSpec p;
        p.template_prefix = token_list(o.prompt_prefix, vocab, "prompt prefix");
        p.template_suffix = token_list(o.prompt_suffix, vocab, "prompt suffix");
        for (const auto& v : split(o.verbalizers, ';')) p.verbalizers.push_back(token_list(v, vocab, "verbalizer"));
        p.validate(labels, mode);
        prompt = p;
      }
      heads = TaskHeads::create(kind, mode, hidden, labels, seed);
      fit_classifier(train, mode, params, *heads, prompt ? &*prompt : nullptr, fit, ft);
      report["accuracy"] = classification_accuracy(eval, mode, params, *heads, prompt ? &*prompt : nullptr, ft);
      report["examples"] = eval.size();
      break;
    }
    case TaskKind::seqlabel: {
      const auto names = split(o.tag_set, ',');
      auto tag_id = [&](const std::string& t, const std::string& where) {
        const auto it = std::find(names.begin(), names.end(), t);
        if (it == names.end()) throw DataError(where + ": tag '" + t + "' is not in the tag set");
        return static_cast<std::int64_t>(it - names.begin());
      };
      auto parse = [&](const std::vector<json>& rows, const std::string& file) {
        std::vector<TagExample> out;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const std::string where = file + ":" + std::to_string(i + 1);
          TagExample ex;
          ex.ids = to_ids(rows[i].at("tokens"), vocab, where);
          for (const auto& t : rows[i].at("tags")) ex.tags.push_back(tag_id(t.get<std::string>(), where));
          if (ex.tags.size() != ex.ids.size()) {
            throw DataError(where + ": " + std::to_string(ex.tags.size()) + " tags for " +
                            std::to_string(ex.ids.size()) + " tokens");
          }
          out.push_back(std::move(ex));
        }
        return out;
      };
      const auto train = parse(train_rows, o.train);
      const auto eval = parse(eval_rows, o.eval.empty() ? o.train : o.eval);
      heads = TaskHeads::create(kind, mode, hidden, names.size(), seed);
      fit_tagger(train, mode, params, *heads, fit);
      report["f1"] = tagging_f1(eval, mode, params, *heads);
      report["examples"] = eval.size();
      break;
    }
    case TaskKind::mrc: {
      auto parse = [&](const std::vector<json>& rows, const std::string& file) {
        std::vector<MrcExample> out;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const std::string where = file + ":" + std::to_string(i + 1);
          MrcExample ex;
          ex.question = to_ids(rows[i].at("question"), vocab, where);
          ex.passage = to_ids(rows[i].at("passage"), vocab, where);
          ex.answer_start = rows[i].at("answer_start").get<std::size_t>();
          ex.answer_end = rows[i].at("answer_end").get<std::size_t>();
          if (ex.answer_start > ex.answer_end || ex.answer_end >= ex.passage.size()) {
            throw DataError(where + ": answer span lies outside the passage");
          }
          out.push_back(std::move(ex));
        }
        return out;
      };
      const auto train = parse(train_rows, o.train);
      const auto eval = parse(eval_rows, o.eval.empty() ? o.train : o.eval);
      heads = TaskHeads::create(kind, mode, hidden, 1, seed);
      fit_reader(train, mode, params, *heads, fit);
      report["exact_match"] = mrc_exact_match(eval, mode, params, *heads, o.max_span);
      report["max_span"] = o.max_span;
      report["examples"] = eval.size();
      break;
    }
    case TaskKind::gen: {
      auto parse = [&](const std::vector<json>& rows, const std::string& file) {
        std::vector<GenExample> out;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const std::string where = file + ":" + std::to_string(i + 1);
          out.push_back({to_ids(rows[i].at("source"), vocab, where), to_ids(rows[i].at("target"), vocab, where)});
          if (out.back().target.empty()) throw DataError(where + ": empty target");
        }
        return out;
      };
      const auto train = parse(train_rows, o.train);
      const auto eval = parse(eval_rows, o.eval.empty() ? o.train : o.eval);
      fit_generator(train, params, fit);
      GenerationConfig g;
      g.max_new_tokens = o.max_new_tokens;
      std::size_t hits = 0;
      for (const auto& ex : eval) {
        auto expected = ex.target;
        expected.push_back(special::eos);
        hits += greedy_decode(ex.source, params, g).tokens == expected;
      }
      report["exact_match"] = eval.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(eval.size());
      report["examples"] = eval.size();
      break;
    }
  }

  if (!o.out.empty()) {
    save_model(o.out, params);
    if (heads && !heads->store.params().empty()) {
      save_checkpoint(o.out + ".heads", heads->store,
                      {{"task", to_string(kind)}, {"mode", to_string(mode)}, {"outputs", std::to_string(heads->outputs)}});
    }
    report["checkpoint"] = o.out;
  }
  std::cout << report.dump() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateCli {
  std::string checkpoint, input, output, vocab_path;
  std::size_t beam = 4, max_new_tokens = 32;
  double length_penalty = 1.0;
  bool greedy = false;
};

int cmd_generate(const GenerateCli& o) {
  require_file(o.checkpoint, "checkpoint");
  require_file(o.input, "input");
  if (o.output.empty()) throw ConfigError("--output is required");
  require_parent(o.output, "output");
  const CPTParams params = load_model(o.checkpoint);
  const Vocabulary vocab = load_vocabulary(o.vocab_path, params.config.vocab_size);
  GenerationConfig g;
  g.beam_size = o.beam;
  g.batch_size = 1;
  g.max_new_tokens = o.max_new_tokens;
  g.length_penalty = o.length_penalty;
  g.validate();

  std::istringstream in(read_text(o.input));
  std::ostringstream out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::vector<std::int64_t> src;
    std::istringstream words(line);
    std::string tok;
    while (words >> tok) {
      const auto id = vocab.find(tok);
      if (!id) {
        throw DataError("input line " + std::to_string(line_no) + ": token '" + tok +
                        "' is not in the checkpoint vocabulary");
      }
      src.push_back(*id);
    }
    if (src.empty()) {
      out << '\n';
      continue;
    }
    const Hypothesis h = o.greedy ? greedy_decode(src, params, g) : beam_search(src, params, g);
    bool first = true;
    for (auto id : h.tokens) {
      if (id == special::eos) break;
      out << (first ? "" : " ") << vocab.token(id);
      first = false;
    }
    out << '\n';
  }
  write_text(o.output, out.str());
  return kOk;
}

// ---------------------------------------------------------------------------
// bench

struct BenchCli {
  std::string configs = "unbalanced=10:2,balanced=6:6", reference, csv, svg;
  std::optional<std::uint64_t> seed;
  std::size_t hidden = 64, heads = 4, vocab_size = 263, beam = 4, batch = 8, tokens = 64, source_length = 32, reps = 3,
              warmup = 1;
};

int cmd_bench(const BenchCli& o) {
  const std::uint64_t seed = require_seed(o.seed);
  std::vector<BenchConfig> configs;
  for (const auto& item : split(o.configs, ',')) {
    const auto eq = item.find('=');
    const std::string label = eq == std::string::npos ? item : item.substr(0, eq);
    const auto depths = split(eq == std::string::npos ? item : item.substr(eq + 1), ':');
    if (depths.size() != 2) throw ConfigError("bench: config '" + item + "' must look like label=ENC:DEC");
    try {
      configs.push_back({label, std::stoul(depths[0]), std::stoul(depths[1])});
    } catch (const std::exception&) {
      throw ConfigError("bench: config '" + item + "' has non-numeric depths");
    }
  }
  if (!o.csv.empty()) require_parent(o.csv, "csv");
  if (!o.svg.empty()) require_parent(o.svg, "svg");
  GenerationConfig g;
  g.beam_size = o.beam;
  g.batch_size = o.batch;
  g.max_new_tokens = o.tokens;
  BenchWorkload w;
  w.hidden = o.hidden;
  w.heads = o.heads;
  w.vocab_size = o.vocab_size;
  w.source_length = o.source_length;
  w.timed_reps = o.reps;
  w.warmup_reps = o.warmup;
  w.seed = seed;
  w.reference = o.reference;
  if (w.reference.empty()) {
    for (const auto& c : configs) {
      if (c.label == "balanced") w.reference = c.label;
    }
  }
  const auto reports = throughput_bench(configs, g, w);
  for (const auto& r : reports) {
    std::cerr << r.label << " samples:";
    for (double s : r.samples) std::cerr << ' ' << s;
    std::cerr << '\n';
  }
  write_text(o.csv, reports_to_csv(reports));
  if (!o.svg.empty()) write_text(o.svg, reports_to_svg(reports));
  return kOk;
}

// ---------------------------------------------------------------------------
// corrupt

struct CorruptCli {
  CorruptionOptions corruption;
  std::string corpus, task = "mlm", out, vocab_path;
  std::optional<std::uint64_t> seed;
  std::size_t limit = 0, vocab_size = 263, max_positions = 128;
};

int cmd_corrupt(const CorruptCli& o) {
  const std::uint64_t seed = require_seed(o.seed);
  require_file(o.corpus, "corpus");
  const CorruptionConfig cfg = o.corruption.build(o.max_positions, seed);
  const Vocabulary vocab = load_vocabulary(o.vocab_path, o.vocab_size);
  const auto docs = load_corpus(o.corpus);
  std::ostringstream out;
  std::size_t shown = 0;
  for (const auto& d : docs) {
    if (o.limit && shown == o.limit) break;
    const auto doc = encode_document(d, vocab);
    auto rng = document_rng(seed, doc.doc_id, o.task);
    if (o.task == "mlm") {
      const auto inst = make_mlm_instance(doc, cfg, vocab, rng);
      if (!inst) continue;
      out << format_mlm_dump(*inst, vocab);
    } else {
      out << format_dae_dump(make_dae_instance(doc, cfg, rng), vocab);
    }
    ++shown;
  }
  write_text(o.out, out.str());
  return kOk;
}

// ---------------------------------------------------------------------------
// inspect-checkpoint

int cmd_inspect(const std::string& path) {
  require_file(path, "checkpoint");
  const auto listing = list_checkpoint(path);
  std::ostringstream out;
  if (fs::exists(path + ".config")) out << format_kv(read_sidecar(path));
  std::size_t total = 0;
  for (const auto& a : listing.arrays) {
    out << a.name << ' ' << shape_string(a.shape) << ' ' << shape_numel(a.shape) << '\n';
    total += shape_numel(a.shape);
  }
  for (const auto& [alias, canonical] : listing.aliases) out << "alias " << alias << " -> " << canonical << '\n';
  out << "total " << total << '\n';
  std::cout << out.str();
  return kOk;
}

// Values from a key=value file become `--key=value` arguments placed
// before the user's own, so explicit flags win.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::string config;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (config.empty()) return args;
  require_file(config, "config file");
  std::vector<std::string> out;
  if (!rest.empty()) out.push_back(rest.front());
  for (const auto& [key, value] : read_kv_file(config)) {
    if (key == "config") throw ConfigError("config files cannot include other config files");
    out.push_back("--" + key + "=" + value);
  }
  out.insert(out.end(), rest.begin() + (rest.empty() ? 0 : 1), rest.end());
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Unbalanced encoder / two-decoder transformer toolkit", "cpt"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string unused_config;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", unused_config, "key=value file; flags override its values");
  };

  SynthOptions synth;
  auto* s = app.add_subcommand("synth", "write a seeded synthetic corpus or task dataset");
  s->add_option("--kind", synth.kind, "corpus | classify | seqlabel | mrc | copy | reverse");
  s->add_option("--count", synth.count);
  s->add_option("--seed", synth.seed);
  s->add_option("--out", synth.out);
  s->add_option("--vocab-size", synth.vocab_size);
  add_config(s);

  PretrainCli pre;
  auto* p = app.add_subcommand("pretrain", "joint MLM + DAE pre-training");
  pre.model.add(*p);
  pre.corruption.add(*p);
  p->add_option("--corpus", pre.corpus);
  p->add_option("--out-dir", pre.out_dir);
  p->add_option("--metrics", pre.metrics);
  p->add_option("--vocab", pre.vocab_path);
  p->add_option("--task", pre.task)->check(CLI::IsMember({"joint", "mlm-only", "dae-only"}));
  p->add_option("--seed", pre.seed);
  p->add_option("--steps", pre.steps);
  p->add_option("--batch", pre.batch);
  p->add_option("--lr", pre.lr);
  p->add_option("--warmup", pre.warmup);
  p->add_option("--total", pre.total);
  p->add_option("--weight-decay", pre.weight_decay);
  p->add_option("--checkpoint-every", pre.checkpoint_every);
  add_config(p);

  FinetuneCli ft;
  auto* f = app.add_subcommand("finetune", "fine-tune a task head from a base checkpoint");
  f->add_option("--base", ft.base);
  f->add_option("--task", ft.task, "classify | seqlabel | mrc | gen");
  f->add_option("--mode", ft.mode, "u | g | ug | u_prompt | g_prompt");
  f->add_option("--train", ft.train);
  f->add_option("--eval", ft.eval);
  f->add_option("--out", ft.out);
  f->add_option("--vocab", ft.vocab_path);
  f->add_option("--labels", ft.labels);
  f->add_option("--verbalizers", ft.verbalizers, "per-label token lists separated by ';'");
  f->add_option("--prompt-prefix", ft.prompt_prefix);
  f->add_option("--prompt-suffix", ft.prompt_suffix);
  f->add_option("--perplexity-rule", ft.perplexity_rule)->check(CLI::IsMember({"lowest", "highest"}));
  f->add_option("--verbalizer-mean", ft.verbalizer_mean)->check(CLI::IsMember({"arithmetic", "geometric"}));
  f->add_option("--tag-set", ft.tag_set);
  f->add_flag("--g-bos", ft.g_bos, "prepend [BOS] to the G-Dec input in g / ug modes");
  f->add_option("--seed", ft.seed);
  f->add_option("--steps", ft.steps);
  f->add_option("--batch", ft.batch);
  f->add_option("--lr", ft.lr);
  f->add_option("--warmup", ft.warmup);
  f->add_option("--weight-decay", ft.weight_decay);
  f->add_option("--max-span", ft.max_span);
  f->add_option("--max-new-tokens", ft.max_new_tokens);
  add_config(f);

  GenerateCli gen;
  auto* g = app.add_subcommand("generate", "decode one output per input line");
  g->add_option("--checkpoint", gen.checkpoint);
  g->add_option("--input", gen.input);
  g->add_option("--output", gen.output);
  g->add_option("--vocab", gen.vocab_path);
  g->add_option("--beam", gen.beam);
  g->add_flag("--greedy", gen.greedy);
  g->add_option("--max-new-tokens", gen.max_new_tokens);
  g->add_option("--length-penalty", gen.length_penalty);
  add_config(g);

  BenchCli bench;
  auto* b = app.add_subcommand("bench", "decoding throughput at equal activated depth");
  b->add_option("--configs", bench.configs, "label=ENC:DEC,...");
  b->add_option("--reference", bench.reference);
  b->add_option("--csv", bench.csv);
  b->add_option("--svg", bench.svg);
  b->add_option("--seed", bench.seed);
  b->add_option("--hidden", bench.hidden);
  b->add_option("--heads", bench.heads);
  b->add_option("--vocab-size", bench.vocab_size);
  b->add_option("--beam", bench.beam);
  b->add_option("--batch", bench.batch);
  b->add_option("--tokens", bench.tokens);
  b->add_option("--source-length", bench.source_length);
  b->add_option("--reps", bench.reps);
  b->add_option("--warmup", bench.warmup);
  add_config(b);

  CorruptCli cor;
  auto* c = app.add_subcommand("corrupt", "print aligned corruption dumps");
  cor.corruption.add(*c);
  c->add_option("--corpus", cor.corpus);
  c->add_option("--task", cor.task)->check(CLI::IsMember({"mlm", "dae"}));
  c->add_option("--seed", cor.seed);
  c->add_option("--limit", cor.limit);
  c->add_option("--out", cor.out);
  c->add_option("--vocab", cor.vocab_path);
  c->add_option("--vocab-size", cor.vocab_size);
  c->add_option("--max-positions", cor.max_positions);
  add_config(c);

  std::string inspect_path;
  auto* i = app.add_subcommand("inspect-checkpoint", "list arrays, shapes and aliases");
  i->add_option("checkpoint", inspect_path)->required();

  std::vector<std::string> args(argv + 1, argv + argc);
  args = expand_config(args);
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  if (s->parsed()) return cmd_synth(synth);
  if (p->parsed()) return cmd_pretrain(pre);
  if (f->parsed()) return cmd_finetune(ft);
  if (g->parsed()) return cmd_generate(gen);
  if (b->parsed()) return cmd_bench(bench);
  if (c->parsed()) return cmd_corrupt(cor);
  if (i->parsed()) return cmd_inspect(inspect_path);
  return kConfigError;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const PathError& e) {
    std::cerr << "path error: " << e.what() << '\n';
    return kPathError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const TensorError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kNumericAbort;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
