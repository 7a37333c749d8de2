#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>

#include "unit/helpers.hpp"

namespace {

struct Run {
  int code = -1;
  std::string out;
};

// Runs the capdpo binary with `args`, capturing combined output.
Run run_cli(const std::string& args, const testutil::TempDir& dir) {
  const auto log = dir / "cli.log";
  const std::string cmd = std::string("\"") + CAPDPO_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = testutil::slurp(log);
  return r;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("help lists every subcommand and exits 0") {
    testutil::TempDir dir;
    const auto r = run_cli("--help", dir);
    CHECK(r.code == 0);
    for (const char* sub : {"gen-qa", "sample", "score", "build-pairs", "train-dpo", "eval", "cross-judge",
                            "agreement", "best-of-n", "demo"}) {
      CHECK(r.out.find(sub) != std::string::npos);
    }
    const auto sub = run_cli("sample --help", dir);
    CHECK(sub.code == 0);
    CHECK(sub.out.find("[default: 6]") != std::string::npos);
  }

  TEST_CASE("usage errors exit 64") {
    testutil::TempDir dir;
    CHECK(run_cli("--bogus", dir).code == 64);
    CHECK(run_cli("eval --judgments", dir).code == 64);
    CHECK(run_cli("nosuchcommand", dir).code == 64);
  }

  TEST_CASE("missing input and bad config exit 1") {
    testutil::TempDir dir;
    const auto r = run_cli("eval --judgments \"" + (dir / "nope.jsonl").string() + "\" --out \"" +
                               (dir / "e.json").string() + "\"",
                           dir);
    CHECK(r.code == 1);
    std::ofstream(dir / "bad.json") << "{\"unknown_key\": 1}";
    std::ofstream(dir / "j.jsonl").close();
    const auto c = run_cli("eval --judgments \"" + (dir / "j.jsonl").string() + "\" --out \"" +
                               (dir / "e.json").string() + "\" --config \"" + (dir / "bad.json").string() + "\"",
                           dir);
    CHECK(c.code == 1);
    CHECK(c.out.find("unknown_key") != std::string::npos);
  }

  TEST_CASE("demo runs offline and writes the summary") {
    testutil::TempDir dir;
    const auto r = run_cli("demo --seed 5 --out \"" + (dir / "demo").string() + "\"", dir);
    CHECK(r.code == 0);
    CHECK(std::filesystem::exists(dir / "demo/summary.txt"));
    CHECK(std::filesystem::exists(dir / "demo/manifest.json"));
    CHECK(r.out.find("Best-of-N") != std::string::npos);
  }
}
