#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "cpt_test_cli";

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(CPT_CLI_PATH) + " " + args + " 2>" + (kWork / "stderr.txt").string();
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string without_wall_column(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + '\n';
  return out;
}

const std::string corpus = std::string(CPT_SOURCE_DIR) + "/data/synthetic_corpus.jsonl";

// One shared smoke run provides the base checkpoint for later cases.
const fs::path& smoke_checkpoint() {
  static const fs::path ckpt = [] {
    fs::create_directories(kWork);
    const auto r = run("pretrain --corpus " + corpus + " --out-dir " + (kWork / "smoke").string() +
                       " --steps 50 --batch 2 --seed 1 --checkpoint-every 25");
    REQUIRE(r.code == 0);
    return kWork / "smoke" / "step_000050.ckpt";
  }();
  return ckpt;
}

}  // namespace

TEST_CASE("pretrain smoke run writes checkpoints and metrics") {
  const auto& ckpt = smoke_checkpoint();
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(kWork / "smoke" / "step_000025.ckpt"));
  const auto metrics = read_file(kWork / "smoke" / "metrics.csv");
  CHECK(metrics.rfind("step,task,loss,lr,wall_ms\n", 0) == 0);
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 101);
}

TEST_CASE("same seed gives identical metrics; mlm-only zeroes the DAE column") {
  fs::create_directories(kWork);
  auto pre = [&](const std::string& dir, const std::string& extra) {
    const auto r = run("pretrain --corpus " + corpus + " --out-dir " + (kWork / dir).string() +
                       " --steps 4 --batch 2 --seed 7 " + extra);
    REQUIRE(r.code == 0);
    return read_file(kWork / dir / "metrics.csv");
  };
  const auto a = pre("det_a", ""), b = pre("det_b", "");
  CHECK(without_wall_column(a) == without_wall_column(b));
  const auto m = pre("mlm_only", "--task mlm-only");
  std::istringstream in(m);
  std::string line;
  std::size_t dae_rows = 0;
  while (std::getline(in, line)) {
    if (line.find(",dae,0,") != std::string::npos) ++dae_rows;
    if (line.find(",mlm,") != std::string::npos) CHECK(line.find(",mlm,0,") == std::string::npos);
  }
  CHECK(dae_rows == 4);
}

TEST_CASE("config files apply with flags taking precedence") {
  fs::create_directories(kWork);
  std::ofstream(kWork / "run.cfg") << "seed=3\nsteps=3\nbatch=2\n# comment\n";
  auto r = run("pretrain --config " + (kWork / "run.cfg").string() + " --corpus " + corpus + " --out-dir " +
               (kWork / "cfg").string() + " --steps 2");
  CHECK(r.code == 0);
  CHECK(fs::exists(kWork / "cfg" / "step_000002.ckpt"));
  CHECK_FALSE(fs::exists(kWork / "cfg" / "step_000003.ckpt"));
}

TEST_CASE("exit codes") {
  fs::create_directories(kWork);
  CHECK(run("pretrain --corpus " + corpus + " --out-dir " + (kWork / "x").string()).code == 2);  // no seed
  CHECK(run("pretrain --corpus /nonexistent.jsonl --out-dir " + (kWork / "x").string() + " --seed 1").code == 4);
  CHECK(run("pretrain --corpus " + corpus + " --out-dir " + (kWork / "x").string() +
            " --seed 1 --layers-gdec 3")
            .code == 2);
  CHECK(run("no-such-command").code == 2);
  std::ofstream(kWork / "broken.jsonl") << "{\"doc_id\": \"a\", \"sentences\": [[]]\n";
  CHECK(run("pretrain --corpus " + (kWork / "broken.jsonl").string() + " --out-dir " + (kWork / "x").string() +
            " --seed 1")
            .code == 3);
}

TEST_CASE("all five classification modes fine-tune from the same base") {
  const auto& base = smoke_checkpoint();
  const auto data = (kWork / "cls.jsonl").string();
  REQUIRE(run("synth --kind classify --count 24 --seed 2 --out " + data).code == 0);
  for (const char* mode : {"u", "g", "ug", "u_prompt", "g_prompt"}) {
    CAPTURE(mode);
    const auto r = run("finetune --base " + base.string() + " --task classify --mode " + mode + " --train " + data +
                       " --steps 2 --batch 2 --seed 1 --verbalizers 's010;s011' --prompt-prefix s002");
    REQUIRE(r.code == 0);
    const auto report = nlohmann::json::parse(r.out);
    CHECK(report.contains("accuracy"));
    CHECK(report["mode"] == mode);
  }
  CHECK(run("finetune --base " + base.string() + " --task gen --mode u --train " + data + " --seed 1").code == 2);
}

TEST_CASE("reading comprehension honours max_span") {
  const auto& base = smoke_checkpoint();
  const auto data = (kWork / "mrc.jsonl").string();
  REQUIRE(run("synth --kind mrc --count 8 --seed 3 --out " + data).code == 0);
  const auto r = run("finetune --base " + base.string() + " --task mrc --mode ug --train " + data +
                     " --steps 1 --batch 2 --seed 1 --max-span 1");
  REQUIRE(r.code == 0);
  const auto report = nlohmann::json::parse(r.out);
  CHECK(report["max_span"] == 1);
  CHECK(report.contains("exact_match"));
}

TEST_CASE("generate: beam 1 equals greedy, empty input, unknown tokens") {
  const auto& ckpt = smoke_checkpoint();
  std::ofstream(kWork / "in.txt") << "s001 s002 s003\ns010 s011\n\n";
  const auto in = (kWork / "in.txt").string();
  REQUIRE(run("generate --checkpoint " + ckpt.string() + " --input " + in + " --output " +
              (kWork / "beam1.txt").string() + " --beam 1 --max-new-tokens 6")
              .code == 0);
  REQUIRE(run("generate --checkpoint " + ckpt.string() + " --input " + in + " --output " +
              (kWork / "greedy.txt").string() + " --greedy --max-new-tokens 6")
              .code == 0);
  const auto beam1 = read_file(kWork / "beam1.txt");
  CHECK(beam1 == read_file(kWork / "greedy.txt"));
  CHECK(std::count(beam1.begin(), beam1.end(), '\n') == 3);

  std::ofstream(kWork / "empty.txt").close();
  REQUIRE(run("generate --checkpoint " + ckpt.string() + " --input " + (kWork / "empty.txt").string() +
              " --output " + (kWork / "empty.out").string())
              .code == 0);
  CHECK(fs::file_size(kWork / "empty.out") == 0);

  std::ofstream(kWork / "bad.txt") << "s001 nope\n";
  CHECK(run("generate --checkpoint " + ckpt.string() + " --input " + (kWork / "bad.txt").string() + " --output " +
            (kWork / "bad.out").string())
            .code == 3);
}

TEST_CASE("bench emits one row per configuration plus speedup") {
  fs::create_directories(kWork);
  const auto csv = kWork / "bench.csv";
  REQUIRE(run("bench --seed 1 --configs 'unbalanced=10:2,balanced=6:6' --hidden 32 --heads 2 --vocab-size 64 "
              "--beam 2 --batch 4 --tokens 24 --source-length 16 --reps 3 --csv " +
              csv.string())
              .code == 0);
  const auto text = read_file(csv);
  CHECK(text.rfind("label,enc_layers,dec_layers,beam,batch,tokens,seconds,tok_per_s,speedup\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  CHECK(text.find("\nbalanced,6,6,2,4,96,") != std::string::npos);
  CHECK(run("bench --seed 1 --configs 'a=3:1,b=2:1'").code == 2);
}

TEST_CASE("corrupt dumps are deterministic and infill single masks") {
  const auto a = run("corrupt --corpus " + corpus + " --task dae --seed 7 --limit 4");
  const auto b = run("corrupt --corpus " + corpus + " --task dae --seed 7 --limit 4");
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);
  std::istringstream in(a.out);
  std::string line;
  std::size_t masks = 0, infilled = 0;
  while (std::getline(in, line)) {
    if (line.rfind("source", 0) == 0) {
      for (auto pos = line.find("[MASK]"); pos != std::string::npos; pos = line.find("[MASK]", pos + 1)) ++masks;
    }
    const auto at = line.find("infilled_words=");
    if (at != std::string::npos) infilled += std::stoul(line.substr(at + 15));
  }
  CHECK(infilled > 0);
  CHECK(masks == infilled);
  const auto m = run("corrupt --corpus " + corpus + " --task mlm --seed 7 --limit 2");
  CHECK(m.out.find("original") != std::string::npos);
}

TEST_CASE("inspect-checkpoint lists arrays and aliases") {
  const auto r = run("inspect-checkpoint " + smoke_checkpoint().string());
  REQUIRE(r.code == 0);
  CHECK(r.out.find("embeddings.token [263,64] 16832") != std::string::npos);
  CHECK(r.out.find("alias mlm_head.weight -> embeddings.token") != std::string::npos);
  CHECK(r.out.find("total 342478") != std::string::npos);
}
