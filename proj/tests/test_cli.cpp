#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "tact/io.hpp"
#include "test_util.hpp"

using namespace tact;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path out_file = scratch / "stdout.txt";
  const std::string cmd =
      std::string(TACT_CLI_PATH) + " " + args + " > " + out_file.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = fs::exists(out_file) ? read_binary_file(out_file) : "";
  return r;
}

std::string tiny_gen_args(const fs::path& out, unsigned seed = 5) {
  return "generate --out-dir " + out.string() + " --seed " + std::to_string(seed) +
         " --n-samples 32 --n-frames 3 --d-rgb 4 --d-flow 4 --d-obj 4"
         " --verbs 3 --nouns 4 --actions 6 --participants 4 --unseen-fraction 0.25"
         " --val-fraction 0.25 --test-fraction 0";
}

std::string tiny_train_args(const fs::path& data, const fs::path& out) {
  return "train --features " + (data / "features.tact").string() + " --annotations " +
         (data / "annotations.csv").string() + " --out-dir " + out.string() +
         " --heads 2 --n-blocks 2 --epochs 2 --batch-size 8 --seed 11";
}

}  // namespace

TEST_CASE("generate is deterministic and writes a config echo") {
  test::TempDir scratch("cli_gen");
  const fs::path a = scratch / "a", b = scratch / "b";
  CHECK(run_cli(tiny_gen_args(a), scratch.path()).exit_code == 0);
  CHECK(run_cli(tiny_gen_args(b), scratch.path()).exit_code == 0);
  CHECK(read_binary_file(a / "features.tact") == read_binary_file(b / "features.tact"));
  CHECK(read_binary_file(a / "annotations.csv") == read_binary_file(b / "annotations.csv"));
  CHECK(fs::exists(a / "config.txt"));
}

TEST_CASE("train/evaluate round trip with deterministic outputs") {
  test::TempDir scratch("cli_train");
  const fs::path data = scratch / "data";
  REQUIRE(run_cli(tiny_gen_args(data), scratch.path()).exit_code == 0);
  const std::string features_before = read_binary_file(data / "features.tact");

  const fs::path run1 = scratch / "run1", run2 = scratch / "run2";
  auto r1 = run_cli(tiny_train_args(data, run1), scratch.path());
  INFO(r1.output);
  REQUIRE(r1.exit_code == 0);
  REQUIRE(run_cli(tiny_train_args(data, run2), scratch.path()).exit_code == 0);

  CHECK(fs::exists(run1 / "checkpoints" / "final.tacp"));
  CHECK(fs::exists(run1 / "logs" / "metrics.jsonl"));
  CHECK(fs::exists(run1 / "logs" / "verb_freq.tsv"));
  CHECK(read_binary_file(run1 / "logs" / "metrics.jsonl") ==
        read_binary_file(run2 / "logs" / "metrics.jsonl"));
  CHECK(read_binary_file(run1 / "checkpoints" / "final.tacp") ==
        read_binary_file(run2 / "checkpoints" / "final.tacp"));

  // Inputs are never mutated.
  CHECK(read_binary_file(data / "features.tact") == features_before);

  const fs::path eval_dir = scratch / "eval";
  auto ev = run_cli("evaluate --features " + (data / "features.tact").string() +
                        " --annotations " + (data / "annotations.csv").string() +
                        " --checkpoints " + (run1 / "checkpoints" / "final.tacp").string() +
                        " --out-dir " + eval_dir.string() + " --split val --k 3",
                    scratch.path());
  INFO(ev.output);
  CHECK(ev.exit_code == 0);
  CHECK(ev.output.find("Overall") != std::string::npos);
  CHECK(fs::exists(eval_dir / "reports" / "report.json"));
  CHECK(fs::exists(eval_dir / "reports" / "report.txt"));
}

TEST_CASE("re-running from the effective-config echo reproduces outputs bitwise") {
  test::TempDir scratch("cli_echo");
  const fs::path data = scratch / "data";
  REQUIRE(run_cli(tiny_gen_args(data), scratch.path()).exit_code == 0);

  const fs::path run1 = scratch / "run1", run2 = scratch / "run2";
  REQUIRE(run_cli(tiny_train_args(data, run1), scratch.path()).exit_code == 0);
  auto rerun = run_cli("--config " + (run1 / "config.txt").string() + " train --out-dir " +
                           run2.string(),
                       scratch.path());
  INFO(rerun.output);
  REQUIRE(rerun.exit_code == 0);
  CHECK(read_binary_file(run1 / "checkpoints" / "final.tacp") ==
        read_binary_file(run2 / "checkpoints" / "final.tacp"));
  CHECK(read_binary_file(run1 / "logs" / "metrics.jsonl") ==
        read_binary_file(run2 / "logs" / "metrics.jsonl"));
}

TEST_CASE("gradcheck subcommand prints per-op errors and exits zero") {
  test::TempDir scratch("cli_gc");
  auto r = run_cli("gradcheck --shapes-per-op 2 --model-probes 20", scratch.path());
  INFO(r.output);
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("matmul") != std::string::npos);
  CHECK(r.output.find("model_end_to_end") != std::string::npos);
  CHECK(r.output.find("within 1e-4") != std::string::npos);
}

TEST_CASE("ablate trains the variant grid and renders a combined table") {
  test::TempDir scratch("cli_ablate");
  const fs::path data = scratch / "data";
  REQUIRE(run_cli(tiny_gen_args(data), scratch.path()).exit_code == 0);
  const fs::path out = scratch / "ablate";
  auto r = run_cli("ablate --features " + (data / "features.tact").string() + " --annotations " +
                       (data / "annotations.csv").string() + " --out-dir " + out.string() +
                       " --heads 2 --epochs 1 --batch-size 8 --seed 3 --k 3",
                   scratch.path());
  INFO(r.output);
  CHECK(r.exit_code == 0);
  for (const char* label : {"full", "tsa_only_rgb", "tsa_only_flow", "tsa_only_obj", "no_cma",
                            "no_sa", "no_equal"}) {
    CHECK(r.output.find(label) != std::string::npos);
  }
  CHECK(fs::exists(out / "reports" / "ablation.txt"));
  CHECK(fs::exists(out / "reports" / "ablation.json"));
  CHECK(fs::exists(out / "no_sa" / "checkpoints" / "final.tacp"));
}

TEST_CASE("exit codes: usage=1, data=2") {
  test::TempDir scratch("cli_err");
  CHECK(run_cli("train --no-such-flag", scratch.path()).exit_code != 0);

  auto usage = run_cli("frobnicate", scratch.path());
  CHECK(usage.exit_code != 0);

  auto missing = run_cli("train --features /nonexistent.tact --annotations /nonexistent.csv"
                         " --out-dir " +
                             (scratch / "x").string(),
                         scratch.path());
  CHECK(missing.exit_code == 2);

  // Corrupt checkpoint is a data error too.
  const fs::path data = scratch / "data";
  REQUIRE(run_cli(tiny_gen_args(data), scratch.path()).exit_code == 0);
  write_binary_file(scratch / "junk.tacp", "junk");
  auto bad = run_cli("evaluate --features " + (data / "features.tact").string() +
                         " --annotations " + (data / "annotations.csv").string() +
                         " --checkpoints " + (scratch / "junk.tacp").string() + " --out-dir " +
                         (scratch / "out").string(),
                     scratch.path());
  CHECK(bad.exit_code == 2);
}
