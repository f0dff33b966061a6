#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "chunkflow_cli_test.log";
  const int status = std::system((std::string(CHUNKFLOW_CLI) + " " + args + " > " + log.string() + " 2>&1").c_str());
  std::ifstream f(log);
  std::ostringstream s;
  s << f.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, s.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// A whole pipeline at toy sizes.
void tiny_pipeline(const fs::path& out, bool with_set) {
  const std::string base = "--out " + out.string() + " --seed 7 ";
  REQUIRE(run(base + "gen-data --train-chunks 256 --eval-chunks 64 --shard-size 64").code == 0);
  REQUIRE(run(base + "train-tokenizer --steps 20 --latent-dim 8 --codebook 16 --hidden 8 --restart-period 5").code == 0);
  REQUIRE(run(base + "tokenize --pareto true --bpe-merges 32").code == 0);
  const std::string policy = with_set ? "--set steps=20 --set hidden=32 --set layers=1 --set q_heads=4 --set kv_heads=2 --set warmup=5"
                                      : "--steps 20 --hidden 32 --layers 1 --q-heads 4 --kv-heads 2 --warmup 5";
  REQUIRE(run(base + "train-policy " + policy).code == 0);
  REQUIRE(run(base + "train-policy --mode ablation --pretrain-steps 10 " + policy).code == 0);
  REQUIRE(run(base + "distill --steps 5 --batch 8 --warmup 2").code == 0);
  REQUIRE(run(base + "eval").code == 0);
  REQUIRE(run(base + "sweep-scaling --hidden-sizes 16,24 --layers 1 --batch 16 --checkpoint-every 2").code == 0);
  REQUIRE(run(base + "fit-scaling-law").code == 0);
  REQUIRE(run(base + "bench-latency --chunks 3 --warmup 1").code == 0);
  REQUIRE(run(base + "emit-figures").code == 0);
}

}  // namespace

TEST_CASE("exit codes") {
  const Result help = run("--help");
  CHECK(help.code == 0);
  CHECK(help.output.find("train-tokenizer") != std::string::npos);
  CHECK(run("train-tokenizer --help").code == 0);

  const Result missing = run("train-tokenizer --config /nonexistent/missing.toml");
  CHECK(missing.code == 1);
  CHECK(missing.output.find("/nonexistent/missing.toml") != std::string::npos);

  CHECK(run("--no-such-flag gen-data").code == 1);
  CHECK(run("gen-data --no-such-flag 3").code == 1);
  CHECK(run("no-such-command").code == 1);
  CHECK(run("").code == 1);
  CHECK(run("--set broken gen-data").code == 1);

  const fs::path empty = fs::temp_directory_path() / "chunkflow_cli_empty";
  fs::remove_all(empty);
  const Result fail = run("--out " + empty.string() + " eval");
  CHECK(fail.code == 2);
  CHECK(fail.output.find("policy.ckpt") != std::string::npos);
  const Result figs = run("--out " + empty.string() + " emit-figures");
  CHECK(figs.code == 2);
  CHECK(figs.output.find("trials.csv") != std::string::npos);
  fs::remove_all(empty);
}

TEST_CASE("identical configs give identical CSV outputs") {
  const fs::path a = fs::temp_directory_path() / "chunkflow_cli_a", b = fs::temp_directory_path() / "chunkflow_cli_b";
  fs::remove_all(a);
  fs::remove_all(b);
  tiny_pipeline(a, false);
  tiny_pipeline(b, true);

  int compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (entry.path().extension() != ".csv") continue;
    const fs::path rel = fs::relative(entry.path(), a);
    // Wall-clock timings are the one non-reproducible output.
    if (rel.filename() == "latency.csv" || rel.filename() == "speed_ablation.csv") continue;
    INFO(rel.string());
    CHECK(slurp(entry.path()) == slurp(b / rel));
    ++compared;
  }
  CHECK(compared >= 15);
  CHECK(slurp(a / "data" / "norm_stats.json") == slurp(b / "data" / "norm_stats.json"));

  // The resolved snapshot replays the run.
  std::string snapshot = slurp(a / "distill.toml");
  const auto pos = snapshot.find("out=");
  snapshot.replace(pos, snapshot.find('\n', pos) - pos, "out=\"" + b.string() + "\"");
  std::ofstream(b / "replay.toml") << snapshot;
  fs::remove(b / "distill_loss.csv");
  CHECK(run("--config " + (b / "replay.toml").string() + " distill").code == 0);
  CHECK(slurp(b / "distill_loss.csv") == slurp(a / "distill_loss.csv"));

  fs::remove_all(a);
  fs::remove_all(b);
}
