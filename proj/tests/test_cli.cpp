#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rad/cli.hpp"
#include "test_util.hpp"

using namespace rad;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string golden(const char* name) { return (fs::path(RAD_GOLDEN_DIR) / name).string(); }

const std::vector<std::string> kTiny{"--n-layer", "1", "--d-model", "16", "--n-head", "2", "--d-ff", "32",
                                     "--max-ctx", "64", "--max-len", "40", "--epochs", "1"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<std::string> generate_args(const fs::path& out) {
  return {"generate", "--lm", golden("lm.ckpt"), "--rm", golden("rm.ckpt"), "--prompts", golden("prompts.jsonl"),
          "--n-continuations", "3", "--k", "8", "--max-new", "12", "--seed", "6", "--out-dir", out.string()};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

struct EnvGuard {
  explicit EnvGuard(const char* value) { setenv("RAD_THREADS", value, 1); }
  ~EnvGuard() { unsetenv("RAD_THREADS"); }
};

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"bogus"}).code == kExitUsage);
  CHECK(cli({"cost", "--no-such-flag"}).code == kExitUsage);
  CHECK(cli({"cost", "--format", "xml"}).code == kExitUsage);
  CHECK(cli({"train-lm", "--out-dir", test::fresh_dir("nocorpus").string()}).code == kExitUsage);
  CHECK(cli({"train-lm", "--corpus", "/nonexistent/corpus.jsonl"}).code == kExitUsage);
  CHECK(cli({"generate", "--beta", "-1", "--lm", golden("lm.ckpt"), "--rm", golden("rm.ckpt"), "--prompts",
             golden("prompts.jsonl"), "--out-dir", test::fresh_dir("negbeta").string()})
            .code == kExitUsage);
  const auto help = cli({"--help"});
  CHECK(help.code == kExitOk);
  CHECK(help.out.find("generate") != std::string::npos);
}

TEST_CASE("data errors exit with 3") {
  const auto dir = test::fresh_dir("dataerr");
  const auto r = cli({"generate", "--lm", (dir / "missing.ckpt").string(), "--rm", golden("rm.ckpt"), "--prompts",
                      golden("prompts.jsonl"), "--out-dir", dir.string()});
  CHECK(r.code == kExitData);
  CHECK_FALSE(r.err.empty());
  // A reward checkpoint where a language model is expected.
  CHECK(cli({"generate", "--lm", golden("rm.ckpt"), "--rm", golden("rm.ckpt"), "--prompts", golden("prompts.jsonl"),
             "--out-dir", dir.string()})
            .code == kExitData);
}

TEST_CASE("evaluation with nothing to score exits with 4") {
  const auto dir = test::fresh_dir("evalerr");
  std::ofstream(dir / "g.jsonl") << R"({"prompt_idx":0,"cont_idx":0,"text":"","token_ids":[],"terminated":"error","error":"x"})"
                                 << '\n';
  CHECK(cli({"evaluate", "--generations", (dir / "g.jsonl").string(), "--prompts", golden("prompts.jsonl"),
             "--oracle", golden("oracle.ckpt"), "--out-dir", dir.string()})
            .code == kExitNumeric);
}

TEST_CASE("cost tables") {
  const auto r = cli({"cost", "--preset", "table2", "--format", "csv"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("RAD,GPT-2 Large,1415577600,3397386240,4812963840,4.81G,3.4,3.40") != std::string::npos);
  CHECK(r.out.find("PPLM,LLaMA 65B,128849018880,386547056640,515396075520,515.40G,4.0,4.00") != std::string::npos);
  const auto m = cli({"cost", "--preset", "models", "--format", "csv"});
  for (const char* cell : {"3.40G", "1.42G", "12.89G", "25.17G", "63.80G", "128.85G"}) {
    CHECK(m.out.find(cell) != std::string::npos);
  }
  const auto one = cli({"cost", "--method", "rad", "--lm-spec", "llama-65b", "--format", "csv"});
  CHECK(one.out.find(",1.03\n") != std::string::npos);
  const auto dir = test::fresh_dir("cost");
  CHECK(cli({"cost", "--out-dir", dir.string()}).code == kExitOk);
  CHECK(fs::exists(dir / "cost_table2.csv"));
  CHECK(cli({"cost", "--method", "gedi", "--lm-spec", "12,x"}).code == kExitUsage);
}

TEST_CASE("train-lm is reproducible under a fixed seed") {
  const auto a = test::fresh_dir("train_a"), b = test::fresh_dir("train_b");
  const auto base = with({"train-lm", "--synthetic", "60", "--seed", "9"}, kTiny);
  REQUIRE(cli(with(base, {"--out-dir", a.string()})).code == kExitOk);
  REQUIRE(cli(with(base, {"--out-dir", b.string()})).code == kExitOk);
  CHECK(test::slurp(a / "lm.ckpt") == test::slurp(b / "lm.ckpt"));
  CHECK(test::slurp(a / "train_log.jsonl") == test::slurp(b / "train_log.jsonl"));

  std::istringstream log(test::slurp(a / "train_log.jsonl"));
  std::string line;
  std::getline(log, line);
  const auto first = nlohmann::json::parse(line);
  CHECK(first["epoch"] == 0);
  CHECK(first["step"] == 0);
  std::size_t rows = 1;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["epoch"] == 1);
    CHECK(j["step"] == rows);
    ++rows;
  }
  CHECK(rows == 1 + 60 / 16 + 1);  // initial row + ceil(60 / 16) batches
  const auto c = test::fresh_dir("train_c");
  REQUIRE(cli(with(with({"train-lm", "--synthetic", "60", "--seed", "10"}, kTiny), {"--out-dir", c.string()})).code == 0);
  CHECK(test::slurp(a / "lm.ckpt") != test::slurp(c / "lm.ckpt"));
}

TEST_CASE("train-rm writes the calibration outputs") {
  const auto dir = test::fresh_dir("train_rm");
  REQUIRE(cli(with({"train-rm", "--synthetic", "60", "--synthetic-test", "20", "--seed", "3", "--out-dir",
                    dir.string()},
                   kTiny))
              .code == kExitOk);
  const auto summary = nlohmann::json::parse(test::slurp(dir / "train_summary.json"));
  CHECK(summary.contains("test_full_seq_mse"));
  CHECK(test::slurp(dir / "prefix_mse.csv").find('\n') != std::string::npos);
}

TEST_CASE("beta zero and the top-k baseline write identical generations") {
  const auto a = test::fresh_dir("gen_beta0"), b = test::fresh_dir("gen_topk");
  REQUIRE(cli(with(generate_args(a), {"--beta", "0"})).code == kExitOk);
  REQUIRE(cli(with(generate_args(b), {"--baseline", "topk"})).code == kExitOk);
  const auto g = test::slurp(a / "generations.jsonl");
  CHECK(count_lines(g) == 12);
  CHECK(g == test::slurp(b / "generations.jsonl"));
}

TEST_CASE("traces hold k rows per step") {
  const auto dir = test::fresh_dir("gen_traces");
  REQUIRE(cli(with(generate_args(dir), {"--beta", "10", "--traces"})).code == kExitOk);
  std::istringstream in(test::slurp(dir / "generations.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto trace = test::slurp(dir / j["trace_path"].get<std::string>());
    CHECK(count_lines(trace) == 1 + 8 * j["token_ids"].size());
    ++n;
  }
  CHECK(n == 12);
}

TEST_CASE("evaluate reproduces the golden metrics") {
  const auto dir = test::fresh_dir("eval_golden");
  REQUIRE(cli({"evaluate", "--generations", golden("generations.jsonl"), "--prompts", golden("prompts.jsonl"),
               "--oracle", golden("oracle.ckpt"), "--eval-lm", golden("eval_lm.ckpt"), "--rm", golden("rm.ckpt"),
               "--out-dir", dir.string()})
              .code == kExitOk);
  CHECK(test::slurp(dir / "metrics.json") == test::slurp(golden("metrics.json")));
  CHECK(test::slurp(dir / "per_prompt.csv") == test::slurp(golden("per_prompt.csv")));
}

TEST_CASE("evaluate refuses to grade with the steering model") {
  const auto dir = test::fresh_dir("eval_self");
  CHECK(cli({"evaluate", "--generations", golden("generations.jsonl"), "--prompts", golden("prompts.jsonl"),
             "--oracle", golden("rm.ckpt"), "--rm", golden("rm.ckpt"), "--out-dir", dir.string()})
            .code == kExitUsage);
}

TEST_CASE("worker count does not change generations") {
  const auto a = test::fresh_dir("threads_1"), b = test::fresh_dir("threads_3");
  REQUIRE(cli(with(generate_args(a), {"--beta", "20"})).code == kExitOk);
  {
    EnvGuard env("3");
    REQUIRE(cli(with(generate_args(b), {"--beta", "20"})).code == kExitOk);
  }
  CHECK(test::slurp(a / "generations.jsonl") == test::slurp(b / "generations.jsonl"));
  EnvGuard bad("zero");
  CHECK(cli(with(generate_args(b), {"--beta", "20"})).code == kExitUsage);
}

TEST_CASE("config file values yield to command-line flags") {
  const auto dir = test::fresh_dir("config");
  std::ofstream(dir / "run.cfg") << "# sweep point\nbeta = 10\nk=4\nmax-new=6\n";
  const auto out = dir / "out";
  REQUIRE(cli({"generate", "--config", (dir / "run.cfg").string(), "--k", "6", "--lm", golden("lm.ckpt"), "--rm",
               golden("rm.ckpt"), "--prompts", golden("prompts.jsonl"), "--n-continuations", "2", "--out-dir",
               out.string()})
              .code == kExitOk);
  const auto resolved = test::slurp(out / "generate.config");
  CHECK(resolved.find("\nbeta=10\n") != std::string::npos);
  CHECK(resolved.find("\nk=6\n") != std::string::npos);
  CHECK(resolved.find("\nmax-new=6\n") != std::string::npos);

  // The resolved file alone reproduces the run.
  const auto again = dir / "again";
  REQUIRE(cli({"generate", "--config", (out / "generate.config").string(), "--out-dir", again.string()}).code ==
          kExitOk);
  CHECK(test::slurp(out / "generations.jsonl") == test::slurp(again / "generations.jsonl"));

  std::ofstream(dir / "bad.cfg") << "beta\n";
  CHECK(cli({"generate", "--config", (dir / "bad.cfg").string()}).code == kExitUsage);
}

TEST_CASE("sweep covers the grid and pairs the beta-zero cell with top-k") {
  const auto dir = test::fresh_dir("sweep");
  REQUIRE(cli({"sweep", "--lm", golden("lm.ckpt"), "--rm", golden("rm.ckpt"), "--prompts", golden("prompts.jsonl"),
               "--oracle", golden("oracle.ckpt"), "--betas", "0,10,20,50,100", "--ks", "20,50",
               "--n-continuations", "2", "--max-new", "6", "--seed", "11", "--save-generations", "--out-dir",
               dir.string()})
              .code == kExitOk);
  const auto csv = test::slurp(dir / "sweep.csv");
  CHECK(count_lines(csv) == 11);
  CHECK(count_lines(test::slurp(dir / "sweep_scores.csv")) == 1 + 10 * 8);

  const auto topk = test::fresh_dir("sweep_topk");
  REQUIRE(cli({"generate", "--lm", golden("lm.ckpt"), "--prompts", golden("prompts.jsonl"), "--baseline", "topk",
               "--k", "20", "--n-continuations", "2", "--max-new", "6", "--seed", "11", "--out-dir", topk.string()})
              .code == kExitOk);
  CHECK(test::slurp(dir / "generations_k20_beta0.jsonl") == test::slurp(topk / "generations.jsonl"));
}

TEST_CASE("trace command") {
  const auto dir = test::fresh_dir("trace");
  const auto r = cli({"trace", "--lm", golden("lm.ckpt"), "--rm", golden("rm.ckpt"), "--prompt", "good ", "--k", "5",
                      "--beta", "30", "--max-new", "4", "--out-dir", dir.string()});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.rfind("good ", 0) == 0);
  const auto rows = count_lines(test::slurp(dir / "trace.csv")) - 1;
  CHECK(rows % 5 == 0);
  CHECK(rows >= 5);
  CHECK(rows <= 20);
}

TEST_CASE("synth writes prompts and corpora") {
  const auto dir = test::fresh_dir("synth");
  REQUIRE(cli({"synth", "--what", "corpus", "--n", "25", "--seed", "2", "--out-dir", dir.string()}).code == kExitOk);
  CHECK(count_lines(test::slurp(dir / "corpus.jsonl")) == 25);
  REQUIRE(cli({"synth", "--what", "prompts", "--n", "7", "--out-dir", dir.string()}).code == kExitOk);
  CHECK(count_lines(test::slurp(dir / "prompts.jsonl")) == 7);
}
