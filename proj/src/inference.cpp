#include "cpt/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <sstream>

#include "cpt/ops.hpp"
#include "cpt/params.hpp"

namespace cpt {

void GenerationConfig::validate() const {
  if (beam_size == 0) throw ConfigError("generation: beam_size must be at least 1");
  if (batch_size == 0) throw ConfigError("generation: batch_size must be at least 1");
  if (max_new_tokens == 0) throw ConfigError("generation: max_new_tokens must be at least 1");
  if (!std::isfinite(length_penalty)) throw ConfigError("generation: length_penalty must be finite");
}

InferenceCounters& inference_counters() {
  static InferenceCounters counters;
  return counters;
}

void reset_inference_counters() { inference_counters() = {}; }

namespace {

Tensor project(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return ops::add_row(ops::matmul(x, weight), bias);
}

Tensor norm(const Tensor& x, const NormWeights& w) { return ops::layer_norm(x, w.gain, w.bias); }

std::vector<double> log_softmax_row(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double x : logits) sum += std::exp(x - m);
  const double lse = m + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::vector<std::vector<double>> log_prob_rows(const Tensor& logits) {
  std::vector<std::vector<double>> rows;
  const std::size_t v = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) rows.push_back(log_softmax_row(logits.values().subspan(r * v, v)));
  return rows;
}

}  // namespace

EncoderMemory prepare_memory(std::span<const std::int64_t> src_ids, const CPTParams& params) {
  NoGradGuard no_grad;
  EncoderMemory memory;
  memory.pad_mask = real_token_mask(src_ids);
  memory.states = encode(src_ids, memory.pad_mask, params);
  for (const auto& layer : params.gdec_layers) {
    memory.cross_k.push_back(project(memory.states, layer.cross_attn->k_weight, layer.cross_attn->k_bias));
    memory.cross_v.push_back(project(memory.states, layer.cross_attn->v_weight, layer.cross_attn->v_bias));
  }
  ++inference_counters().encoder_passes;
  ++inference_counters().cross_kv_builds;
  return memory;
}

DecodeCache empty_cache(const CPTParams& params) {
  DecodeCache cache;
  cache.keys.resize(params.gdec_layers.size());
  cache.values.resize(params.gdec_layers.size());
  return cache;
}

Tensor cached_step_rows(std::span<const std::int64_t> tokens, std::span<DecodeCache* const> caches,
                        std::span<const EncoderMemory* const> memories, const CPTParams& params) {
  const std::size_t rows = tokens.size();
  if (rows == 0 || caches.size() != rows || memories.size() != rows) {
    throw TensorError("cached_step: tokens, caches and memories must be non-empty and equally many");
  }
  const std::size_t layers = params.gdec_layers.size();
  const std::size_t hidden = params.config.hidden;
  const std::size_t position = caches[0]->length();
  for (std::size_t r = 0; r < rows; ++r) {
    const DecodeCache& c = *caches[r];
    if (c.keys.size() != layers || c.values.size() != layers) {
      throw TensorError("cached_step: cache has " + std::to_string(c.keys.size()) + " layers, decoder has " +
                        std::to_string(layers));
    }
    for (std::size_t l = 0; l < layers; ++l) {
      if (c.keys[l].size() != c.length() * hidden || c.values[l].size() != c.length() * hidden) {
        throw TensorError("cached_step: cache rows disagree with its prefix length " + std::to_string(c.length()));
      }
    }
    if (c.length() != position) throw TensorError("cached_step: caches of one step must share a length");
    if (memories[r]->cross_k.size() != layers) throw TensorError("cached_step: encoder memory built for another model");
  }
  if (position + 1 > params.config.max_positions) {
    throw TensorError("cached_step: position " + std::to_string(position) + " exceeds max_positions " +
                      std::to_string(params.config.max_positions));
  }

  NoGradGuard no_grad;
  const std::vector<std::int64_t> positions(rows, static_cast<std::int64_t>(position));
  Tensor x = norm(ops::add(ops::gather_rows(params.token_embeddings, tokens),
                           ops::gather_rows(params.position_embeddings, positions)),
                  params.gdec_embed_norm);
  const auto self_mask = AttentionMask::causal(position + 1, position);

  for (std::size_t l = 0; l < layers; ++l) {
    const BlockWeights& w = params.gdec_layers[l];
    const Tensor q = project(x, w.self_attn.q_weight, w.self_attn.q_bias);
    const Tensor k = project(x, w.self_attn.k_weight, w.self_attn.k_bias);
    const Tensor v = project(x, w.self_attn.v_weight, w.self_attn.v_bias);
    std::vector<Tensor> attended;
    for (std::size_t r = 0; r < rows; ++r) {
      auto& keys = caches[r]->keys[l];
      auto& values = caches[r]->values[l];
      const auto k_row = k.values().subspan(r * hidden, hidden);
      const auto v_row = v.values().subspan(r * hidden, hidden);
      keys.insert(keys.end(), k_row.begin(), k_row.end());
      values.insert(values.end(), v_row.begin(), v_row.end());
      attended.push_back(attend_projected(ops::slice_rows(q, r, 1), Tensor::from({position + 1, hidden}, keys),
                                          Tensor::from({position + 1, hidden}, values), self_mask, w.self_attn.heads));
    }
    const Tensor self_out = project(ops::concat_rows(attended), w.self_attn.o_weight, w.self_attn.o_bias);
    const Tensor h1 = norm(ops::add(x, self_out), w.self_attn_norm);

    const AttentionWeights& cw = *w.cross_attn;
    const Tensor q2 = project(h1, cw.q_weight, cw.q_bias);
    std::vector<Tensor> crossed;
    for (std::size_t r = 0; r < rows; ++r) {
      const EncoderMemory& m = *memories[r];
      crossed.push_back(attend_projected(ops::slice_rows(q2, r, 1), m.cross_k[l], m.cross_v[l],
                                         AttentionMask::padding(m.pad_mask), cw.heads));
    }
    const Tensor cross_out = project(ops::concat_rows(crossed), cw.o_weight, cw.o_bias);
    const Tensor h2 = norm(ops::add(h1, cross_out), *w.cross_attn_norm);
    x = norm(ops::add(h2, feed_forward(h2, w.ffn)), w.ffn_norm);
  }
  for (std::size_t r = 0; r < rows; ++r) caches[r]->tokens.push_back(tokens[r]);
  inference_counters().decoder_rows += rows;
  return lm_logits(x, params);
}

Tensor cached_step(std::int64_t next_token, DecodeCache& cache, const EncoderMemory& memory, const CPTParams& params) {
  DecodeCache* cache_ptr = &cache;
  const EncoderMemory* memory_ptr = &memory;
  const std::int64_t token[1] = {next_token};
  return cached_step_rows(token, std::span<DecodeCache* const>(&cache_ptr, 1),
                          std::span<const EncoderMemory* const>(&memory_ptr, 1), params);
}

void check_cache_prefix(const DecodeCache& cache, std::span<const std::int64_t> prefix) {
  if (!std::equal(cache.tokens.begin(), cache.tokens.end(), prefix.begin(), prefix.end())) {
    throw TensorError("cached_step: cache holds " + std::to_string(cache.length()) +
                      " tokens that do not match the prefix of length " + std::to_string(prefix.size()));
  }
}

Tensor uncached_next_logits(std::span<const std::int64_t> prefix, const EncoderMemory& memory,
                            const CPTParams& params) {
  if (prefix.empty()) throw TensorError("uncached_next_logits: empty prefix");
  NoGradGuard no_grad;
  const Tensor states = generate_forward(prefix, memory.states, memory.pad_mask, params);
  return lm_logits(ops::slice_rows(states, prefix.size() - 1, 1), params);
}

double hypothesis_score(double log_prob, std::size_t length, double length_penalty) {
  return log_prob / std::pow(static_cast<double>(std::max<std::size_t>(length, 1)), length_penalty);
}

Hypothesis greedy_decode(std::span<const std::int64_t> src_ids, const CPTParams& params, const GenerationConfig& cfg) {
  cfg.validate();
  const EncoderMemory memory = prepare_memory(src_ids, params);
  DecodeCache cache = empty_cache(params);
  Hypothesis hyp;
  std::int64_t token = special::bos;
  for (std::size_t t = 0; t < cfg.max_new_tokens; ++t) {
    const auto lp = log_softmax_row(cached_step(token, cache, memory, params).values());
    std::size_t best = lp.size();
    for (std::size_t v = 0; v < lp.size(); ++v) {
      if (cfg.force_length && static_cast<std::int64_t>(v) == special::eos) continue;
      if (best == lp.size() || lp[v] > lp[best]) best = v;
    }
    token = static_cast<std::int64_t>(best);
    hyp.log_prob = hyp.log_prob + lp[best];
    hyp.tokens.push_back(token);
    if (token == special::eos) {
      hyp.finished = true;
      break;
    }
  }
  hyp.score = hypothesis_score(hyp.log_prob, hyp.tokens.size(), cfg.length_penalty);
  return hyp;
}

namespace {

bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

struct Active {
  std::vector<std::int64_t> tokens;
  double log_prob = 0.0;
  std::size_t row = 0;  // row index in the latest advance call
};

struct Candidate {
  std::size_t parent;  // index into the group's active list
  std::int64_t token;
  double log_prob;
};

}  // namespace

std::vector<Hypothesis> beam_search_groups(std::size_t groups, BeamModel& model, const GenerationConfig& cfg) {
  cfg.validate();
  if (groups == 0) return {};
  std::vector<std::vector<Active>> active(groups);
  std::vector<std::vector<Hypothesis>> finished(groups);
  std::vector<char> done(groups, 0);

  std::vector<std::int64_t> feed(groups, special::bos);
  for (std::size_t g = 0; g < groups; ++g) active[g].push_back({{}, 0.0, g});
  auto log_probs = model.advance({}, feed);

  for (std::size_t step = 1; step <= cfg.max_new_tokens; ++step) {
    std::vector<std::size_t> parents;
    std::vector<std::int64_t> tokens;
    for (std::size_t g = 0; g < groups; ++g) {
      if (done[g]) continue;
      auto& beams = active[g];
      std::vector<Candidate> cands;
      cands.reserve(beams.size() * model.vocab);
      for (std::size_t i = 0; i < beams.size(); ++i) {
        const auto& lp = log_probs.at(beams[i].row);
        for (std::size_t v = 0; v < model.vocab; ++v) {
          if (cfg.force_length && static_cast<std::int64_t>(v) == special::eos) continue;
          cands.push_back({i, static_cast<std::int64_t>(v), beams[i].log_prob + lp[v]});
        }
      }
      std::sort(cands.begin(), cands.end(), [&](const Candidate& a, const Candidate& b) {
        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
        if (a.parent != b.parent) return beams[a.parent].tokens < beams[b.parent].tokens;
        return a.token < b.token;
      });

      std::vector<Active> next;
      for (std::size_t rank = 0; rank < cands.size() && next.size() < cfg.beam_size; ++rank) {
        const Candidate& c = cands[rank];
        std::vector<std::int64_t> seq = beams[c.parent].tokens;
        seq.push_back(c.token);
        if (c.token == special::eos) {
          if (rank < cfg.beam_size) {
            finished[g].push_back({seq, c.log_prob, hypothesis_score(c.log_prob, seq.size(), cfg.length_penalty), true});
          }
          continue;
        }
        next.push_back({std::move(seq), c.log_prob, beams[c.parent].row});
      }
      if (step == cfg.max_new_tokens) {
        for (auto& a : next) {
          const double score = hypothesis_score(a.log_prob, a.tokens.size(), cfg.length_penalty);
          finished[g].push_back({std::move(a.tokens), a.log_prob, score, false});
        }
        next.clear();
      }
      if (next.empty() || finished[g].size() >= cfg.beam_size) {
        done[g] = 1;
        active[g].clear();
        continue;
      }
      for (auto& a : next) {
        parents.push_back(a.row);
        tokens.push_back(a.tokens.back());
        a.row = parents.size() - 1;
      }
      active[g] = std::move(next);
    }
    if (tokens.empty()) break;
    log_probs = model.advance(parents, tokens);
  }

  std::vector<Hypothesis> out;
  for (std::size_t g = 0; g < groups; ++g) {
    out.push_back(*std::min_element(finished[g].begin(), finished[g].end(),
                                    [](const Hypothesis& a, const Hypothesis& b) { return better(a, b); }));
  }
  return out;
}

std::vector<Hypothesis> beam_search_batch(std::span<const std::vector<std::int64_t>> sources,
                                          const CPTParams& params, const GenerationConfig& cfg) {
  cfg.validate();
  std::vector<EncoderMemory> memories;
  memories.reserve(sources.size());
  for (const auto& src : sources) memories.push_back(prepare_memory(src, params));

  std::vector<DecodeCache> caches;
  std::vector<std::size_t> row_group;
  BeamModel model;
  model.vocab = params.config.vocab_size;
  model.advance = [&](std::span<const std::size_t> parents, std::span<const std::int64_t> tokens) {
    std::vector<DecodeCache> next;
    std::vector<std::size_t> next_group;
    if (parents.empty()) {
      for (std::size_t g = 0; g < tokens.size(); ++g) {
        next.push_back(empty_cache(params));
        next_group.push_back(g);
      }
    } else {
      std::vector<std::size_t> last_use(caches.size(), parents.size());
      for (std::size_t i = 0; i < parents.size(); ++i) last_use[parents[i]] = i;
      for (std::size_t i = 0; i < parents.size(); ++i) {
        const std::size_t p = parents[i];
        next.push_back(last_use[p] == i ? std::move(caches[p]) : caches[p]);
        next_group.push_back(row_group[p]);
      }
    }
    caches = std::move(next);
    row_group = std::move(next_group);
    std::vector<DecodeCache*> cache_ptrs;
    std::vector<const EncoderMemory*> memory_ptrs;
    for (std::size_t r = 0; r < caches.size(); ++r) {
      cache_ptrs.push_back(&caches[r]);
      memory_ptrs.push_back(&memories[row_group[r]]);
    }
    return log_prob_rows(cached_step_rows(tokens, cache_ptrs, memory_ptrs, params));
  };
  return beam_search_groups(sources.size(), model, cfg);
}

Hypothesis beam_search(std::span<const std::int64_t> src_ids, const CPTParams& params, const GenerationConfig& cfg) {
  const std::vector<std::vector<std::int64_t>> sources{{src_ids.begin(), src_ids.end()}};
  return beam_search_batch(sources, params, cfg).front();
}

// ---------------------------------------------------------------------------
// Throughput benchmark

namespace {

void refuse_parallelism() {
  for (const char* name : {"OMP_NUM_THREADS", "CPT_NUM_THREADS"}) {
    if (const char* value = std::getenv(name)) {
      if (std::atoi(value) > 1) {
        throw ConfigError(std::string("bench: ") + name + "=" + value +
                          " requests parallelism; the timed region must run on one thread");
      }
    }
  }
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

std::vector<ThroughputReport> throughput_bench(std::span<const BenchConfig> configs, const GenerationConfig& gen_in,
                                               const BenchWorkload& workload) {
  refuse_parallelism();
  if (configs.empty()) throw ConfigError("bench: no configurations");
  if (workload.timed_reps < 3) throw ConfigError("bench: at least 3 timed repetitions are required");
  GenerationConfig gen = gen_in;
  gen.force_length = true;
  gen.validate();
  const std::size_t depth = configs.front().enc_layers + configs.front().dec_layers;
  for (const auto& c : configs) {
    if (c.enc_layers + c.dec_layers != depth) {
      throw ConfigError("bench: config " + c.label + " has activated depth " +
                        std::to_string(c.enc_layers + c.dec_layers) + ", expected " + std::to_string(depth));
    }
  }

  std::mt19937_64 rng(workload.seed);
  std::vector<std::vector<std::int64_t>> sources(gen.batch_size);
  const auto symbols = static_cast<std::uint64_t>(workload.vocab_size - special::count);
  for (auto& src : sources) {
    src.resize(workload.source_length);
    for (auto& t : src) t = special::count + static_cast<std::int64_t>(uniform_below(rng, symbols));
  }

  std::vector<ThroughputReport> reports;
  std::size_t expected_tokens = 0;
  for (const auto& c : configs) {
    ModelConfig mc;
    mc.vocab_size = workload.vocab_size;
    mc.hidden = workload.hidden;
    mc.heads = workload.heads;
    mc.layers_enc = c.enc_layers;
    mc.layers_udec = c.dec_layers;
    mc.layers_gdec = c.dec_layers;
    mc.max_positions = std::max(workload.source_length, gen.max_new_tokens + 1);
    mc.validate();
    const CPTParams params = CPTParams::create(mc, workload.seed);

    ThroughputReport report;
    report.label = c.label;
    report.enc_layers = c.enc_layers;
    report.dec_layers = c.dec_layers;
    report.beam = gen.beam_size;
    report.batch = gen.batch_size;
    for (std::size_t rep = 0; rep < workload.warmup_reps + workload.timed_reps; ++rep) {
      reset_inference_counters();
      const auto t0 = std::chrono::steady_clock::now();
      const auto hyps = beam_search_batch(sources, params, gen);
      const auto t1 = std::chrono::steady_clock::now();
      std::size_t tokens = 0;
      for (const auto& h : hyps) tokens += h.tokens.size();
      if (tokens != gen.batch_size * gen.max_new_tokens || inference_counters().encoder_passes != gen.batch_size) {
        throw std::logic_error("bench: config " + c.label + " did not run the fixed workload");
      }
      report.tokens = tokens;
      if (rep >= workload.warmup_reps) report.samples.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    report.seconds = median(report.samples);
    const double tick = std::chrono::duration<double>(std::chrono::steady_clock::duration(1)).count();
    if (report.seconds < std::max(1e-3, 1000.0 * tick)) {
      throw WorkloadTooSmall("bench: config " + c.label + " finished in " + std::to_string(report.seconds) +
                             " s, too short to time reliably; enlarge the workload");
    }
    report.tokens_per_second = static_cast<double>(report.tokens) / report.seconds;
    if (expected_tokens == 0) expected_tokens = report.tokens;
    if (report.tokens != expected_tokens) throw std::logic_error("bench: token counts differ between configs");
    reports.push_back(std::move(report));
  }

  const ThroughputReport* ref = &reports.front();
  if (!workload.reference.empty()) {
    auto it = std::find_if(reports.begin(), reports.end(),
                           [&](const ThroughputReport& r) { return r.label == workload.reference; });
    if (it == reports.end()) throw ConfigError("bench: reference config '" + workload.reference + "' not found");
    ref = &*it;
  }
  const double ref_tps = ref->tokens_per_second;
  for (auto& r : reports) r.speedup = r.tokens_per_second / ref_tps;
  return reports;
}

namespace {
std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

const char* kCsvHeader = "label,enc_layers,dec_layers,beam,batch,tokens,seconds,tok_per_s,speedup";
}  // namespace

std::string reports_to_csv(std::span<const ThroughputReport> reports) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : reports) {
    if (r.label.find_first_of(",\"\n") != std::string::npos) {
      throw ConfigError("bench: label '" + r.label + "' cannot contain commas, quotes or newlines");
    }
    out += r.label + ',' + std::to_string(r.enc_layers) + ',' + std::to_string(r.dec_layers) + ',' +
           std::to_string(r.beam) + ',' + std::to_string(r.batch) + ',' + std::to_string(r.tokens) + ',' +
           num(r.seconds) + ',' + num(r.tokens_per_second) + ',' + num(r.speedup) + '\n';
  }
  return out;
}

std::vector<ThroughputReport> reports_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw std::runtime_error("bench csv: unexpected header");
  std::vector<ThroughputReport> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw std::runtime_error("bench csv: line " + std::to_string(line_no) + " has wrong arity");
    ThroughputReport r;
    try {
      r.label = f[0];
      r.enc_layers = std::stoull(f[1]);
      r.dec_layers = std::stoull(f[2]);
      r.beam = std::stoull(f[3]);
      r.batch = std::stoull(f[4]);
      r.tokens = std::stoull(f[5]);
      r.seconds = std::stod(f[6]);
      r.tokens_per_second = std::stod(f[7]);
      r.speedup = std::stod(f[8]);
    } catch (const std::exception&) {
      throw std::runtime_error("bench csv: line " + std::to_string(line_no) + " is malformed");
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string reports_to_svg(std::span<const ThroughputReport> reports) {
  const double width = 120.0 + 110.0 * static_cast<double>(reports.size());
  const double height = 320.0, base = 260.0, top = 40.0;
  double peak = 0.0;
  for (const auto& r : reports) peak = std::max(peak, r.tokens_per_second);
  if (peak <= 0.0) peak = 1.0;
  std::ostringstream svg;
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"sans-serif\" "
                "font-size=\"12\">\n",
                width, height);
  svg << buf;
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"20\" y=\"22\" font-size=\"14\">Decoding throughput (tokens/s)</text>\n";
  std::snprintf(buf, sizeof(buf), "<line x1=\"60\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", base,
                width - 20, base);
  svg << buf;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    const double h = (base - top) * r.tokens_per_second / peak;
    const double x = 80.0 + 110.0 * static_cast<double>(i);
    std::snprintf(buf, sizeof(buf),
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"70\" height=\"%.1f\" fill=\"%s\"/>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%.1f</text>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%s</text>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%zu+%zu, %.2fx</text>\n",
                  x, base - h, h, r.speedup >= 1.0 ? "#4a7ab5" : "#b0b0b0", x + 35, base - h - 6,
                  r.tokens_per_second, x + 35, base + 18, r.label.c_str(), x + 35, base + 34, r.enc_layers,
                  r.dec_layers, r.speedup);
    svg << buf;
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace cpt
