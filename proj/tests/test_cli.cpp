// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "qacirc/cli.hpp"
#include "qacirc/rng.hpp"
#include "qacirc/util.hpp"
#include "test_support.hpp"

using namespace qacirc;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("qacirc_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

nlohmann::json manifest(const fs::path& dir, const std::string& sub) {
  return nlohmann::json::parse(read_file(dir / (sub + ".manifest.json")));
}

}  // namespace

TEST_CASE("gen-probe writes the seeded dataset and a manifest") {
  const fs::path dir = scratch("gen");
  const Outcome r = invoke({"--seed", "3", "--out-dir", dir.string(), "gen-probe", "--n", "5"});
  REQUIRE(r.code == 0);
  const std::string text = read_file(dir / "probe.jsonl");
  ProbeConfig pc;
  pc.n = 5;
  const auto& fx = testing::fixture();
  CHECK(text == to_jsonl(gen_probe(pc, derive_seed(3, cli::kStageProbe), fx.info, &fx.weights).examples));
  const auto m = manifest(dir, "gen-probe");
  CHECK(m["tool"] == "qacirc");
  CHECK(m["version"] == cli::kToolVersion);
  CHECK(m["subcommand"] == "gen-probe");
  CHECK(m["config"]["seed"] == 3);
  CHECK(m["config"]["n"] == 5);
  CHECK(m["outputs"]["probe.jsonl"] == sha256_hex(text));
  CHECK(m["inputs"]["model"]["source"] == "builtin-fixture");
}

TEST_CASE("repeated runs are byte identical across thread counts") {
  const fs::path a = scratch("det_a");
  const fs::path b = scratch("det_b");
  for (const auto& [dir, jobs] : {std::pair{a, "1"}, std::pair{b, "4"}}) {
    REQUIRE(invoke({"--seed", "5", "--jobs", jobs, "--out-dir", dir.string(), "extract", "--n", "20",
                    "--hierarchy", "1"})
                .code == 0);
    REQUIRE(invoke({"--seed", "5", "--jobs", jobs, "--out-dir", dir.string(), "attribute", "--n", "10"}).code == 0);
  }
  for (const char* f : {"circuit.json", "circuit_h1.json", "extract.manifest.json", "attribution.jsonl",
                        "attribute.manifest.json"}) {
    CHECK(read_file(a / f) == read_file(b / f));
  }
}

TEST_CASE("artifacts written by one command feed the next") {
  const fs::path dir = scratch("chain");
  const std::string d = dir.string();
  REQUIRE(invoke({"--out-dir", d, "build-fixture"}).code == 0);
  REQUIRE(invoke({"--out-dir", d, "gen-probe", "--model", d + "/fixture.qacm", "--n", "12"}).code == 0);
  REQUIRE(invoke({"--out-dir", d, "extract", "--model", d + "/fixture.qacm", "--probe", d + "/probe.jsonl"}).code ==
          0);
  const auto m = manifest(dir, "extract");
  CHECK(m["inputs"]["model"]["source"] == "fixture.qacm");
  CHECK(m["inputs"]["model"]["sha256"] == sha256_hex(read_file(dir / "fixture.qacm")));
  CHECK(m["inputs"]["probe"]["sha256"] == sha256_hex(read_file(dir / "probe.jsonl")));
  const auto report = nlohmann::json::parse(read_file(dir / "circuit.json"));
  CHECK(report.contains("selected"));
  REQUIRE(invoke({"--out-dir", d, "steer", "--probe", d + "/probe.jsonl", "--circuit", d + "/circuit.json",
                  "--mode", "mlp_zero", "--mlps", "1"})
              .code == 0);
  const auto steer = nlohmann::json::parse(read_file(dir / "steer.json"));
  CHECK(steer["mode"] == "mlp_zero");
  CHECK(steer["n"] == 12);
}

TEST_CASE("validation failures exit with 1 and a structured diagnostic") {
  const fs::path dir = scratch("errors");
  const std::string d = dir.string();
  Outcome r = invoke({"--out-dir", d, "extract", "--mode", "bogus", "--n", "5"});
  CHECK(r.code == 1);
  auto diag = nlohmann::json::parse(r.err.substr(0, r.err.find('\n')));
  CHECK(diag["level"] == "error");
  CHECK(diag["code"] == "InvalidArgument");

  r = invoke({"--out-dir", d, "extract", "--probe", d + "/missing.jsonl"});
  CHECK(r.code == 1);
  CHECK(nlohmann::json::parse(r.err.substr(0, r.err.find('\n')))["code"] == "IoError");

  r = invoke({"--out-dir", d, "steer", "--mode", "attn", "--beta", "0", "--n", "5"});
  CHECK(r.code == 1);
  CHECK(nlohmann::json::parse(r.err.substr(0, r.err.find('\n')))["code"] == "InvalidSpec");

  CHECK(invoke({"--out-dir", d, "extract", "--no-such-flag"}).code == 1);
  CHECK(invoke({}).code == 1);
  CHECK(invoke({"--jobs", "0", "gen-probe"}).code == 1);
}

TEST_CASE("help and version exit with 0") {
  CHECK(invoke({"--help"}).code == 0);
  const Outcome v = invoke({"--version"});
  CHECK(v.code == 0);
  CHECK(v.out.find(cli::kToolVersion) != std::string::npos);
}

TEST_CASE("explicit flags override the config file") {
  const fs::path dir = scratch("config");
  const std::string d = dir.string();
  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << "# pipeline defaults\nseed = 21\nn=4\n";
  }
  REQUIRE(invoke({"--config", d + "/run.cfg", "--out-dir", d, "gen-probe"}).code == 0);
  auto m = manifest(dir, "gen-probe");
  CHECK(m["config"]["seed"] == 21);
  CHECK(m["config"]["n"] == 4);
  REQUIRE(invoke({"--config", d + "/run.cfg", "--seed", "8", "--out-dir", d, "gen-probe", "--n", "6"}).code == 0);
  m = manifest(dir, "gen-probe");
  CHECK(m["config"]["seed"] == 8);
  CHECK(m["config"]["n"] == 6);
  {
    std::ofstream cfg(dir / "bad.cfg");
    cfg << "frobnicate=1\n";
  }
  CHECK(invoke({"--config", d + "/bad.cfg", "--out-dir", d, "gen-probe"}).code == 1);
}

TEST_CASE("the seed falls back to the environment") {
  const fs::path dir = scratch("env");
  const std::string d = dir.string();
  ::setenv("QACIRC_SEED", "11", 1);
  REQUIRE(invoke({"--out-dir", d, "gen-probe", "--n", "3"}).code == 0);
  CHECK(manifest(dir, "gen-probe")["config"]["seed"] == 11);
  REQUIRE(invoke({"--seed", "2", "--out-dir", d, "gen-probe", "--n", "3"}).code == 0);
  CHECK(manifest(dir, "gen-probe")["config"]["seed"] == 2);
  ::setenv("QACIRC_SEED", "eleven", 1);
  CHECK(invoke({"--out-dir", d, "gen-probe", "--n", "3"}).code == 1);
  ::unsetenv("QACIRC_SEED");
  REQUIRE(invoke({"--out-dir", d, "gen-probe", "--n", "3"}).code == 0);
  CHECK(manifest(dir, "gen-probe")["config"]["seed"] == 0);
}
