// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Drives the installed-style `polyglot` binary as a subprocess.

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "polyglot/run_config.hpp"

using namespace polyglot;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Runs `polyglot <args>` inside `cwd`, capturing both streams.
Outcome run(const fs::path& cwd, const std::string& args) {
  const auto out = cwd / ".stdout", err = cwd / ".stderr";
  const std::string cmd = "cd '" + cwd.string() + "' && '" POLYGLOT_CLI "' " + args + " >'" + out.string() +
                          "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.out = slurp(out);
  o.err = slurp(err);
  return o;
}

const std::string kSmallModel =
    "--set model.l_total=2 --set model.l_moe=1 --set model.hidden=32 --set model.heads=2 --set model.max_seq=32 "
    "--set model.experts=8 --set corpus.max_seq=32 --set train.steps=6 --set train.warmup_steps=2 "
    "--set train.eval_interval=3 --set train.checkpoint_interval=3 --set train.micro_batch_size=2 "
    "--set train.micro_batches=1";

// gen-synthetic -> build-corpus -> train-tokenizer -> encode -> allocate -> pretrain -> evaluate -> route-stats.
void pipeline(const fs::path& dir) {
  REQUIRE(run(dir, "gen-synthetic --pls 3 --docs-per-pl 40 --low-resource go=0.5 --out raw.jsonl").code == 0);
  REQUIRE(run(dir, "build-corpus --input raw.jsonl --out corpus").code == 0);
  REQUIRE(run(dir, "train-tokenizer --corpus corpus --out vocab.json --set corpus.vocab_size=160").code == 0);
  REQUIRE(run(dir, "encode --corpus corpus --vocab vocab.json --out enc.jsonl " + kSmallModel).code == 0);
  REQUIRE(run(dir, "allocate --corpus enc.jsonl --out alloc.json --set model.experts=8").code == 0);
  const auto pre = run(dir, "pretrain --corpus enc.jsonl --vocab vocab.json --alloc alloc.json --out ckpt " + kSmallModel);
  INFO(pre.err);
  REQUIRE(pre.code == 0);
  REQUIRE(run(dir, "evaluate --checkpoint ckpt/final --corpus enc.jsonl --vocab vocab.json --out results.json").code ==
          0);
  REQUIRE(run(dir, "route-stats --checkpoint ckpt/final --corpus enc.jsonl --split train --occupancy occ.json --out routing.csv")
              .code == 0);
}

const char* const kPipelineFiles[] = {
    "raw.jsonl",   "corpus/literals.json",   "corpus/normalized.jsonl",  "corpus/splits.json",
    "vocab.json",  "enc.jsonl",              "alloc.json",               "ckpt/metrics.csv",
    "ckpt/final/params.bin", "ckpt/final/manifest.json", "ckpt/step-3/params.bin", "results.json",
    "routing.csv", "occ.json"};

}  // namespace

TEST_CASE("help lists every config key the subcommand reads") {
  testing::TempDir dir("clihelp");
  const RunConfig defaults;
  const std::map<std::string, std::vector<std::string>> sections{
      {"gen-synthetic", {"synthetic"}},     {"build-corpus", {"corpus"}},
      {"pretrain", {"model", "allocation", "train"}}, {"finetune", {"finetune"}},
      {"evaluate", {"corpus", "evaluation"}}, {"ablate", {"model", "allocation", "train"}}};
  for (const auto& [sub, secs] : sections) {
    INFO(sub);
    const auto o = run(dir.path(), sub + " --help");
    CHECK(o.code == 0);
    for (const auto& k : defaults.keys()) {
      const auto section = k.name.substr(0, k.name.find('.'));
      if (std::find(secs.begin(), secs.end(), section) == secs.end()) continue;
      CHECK_MESSAGE(o.out.find(k.name) != std::string::npos, k.name);
    }
  }
}

TEST_CASE("validation failures exit 1 and name the offending input") {
  testing::TempDir dir("clierr");
  CHECK(run(dir.path(), "").code == 1);
  CHECK(run(dir.path(), "frobnicate").code == 1);
  CHECK(run(dir.path(), "gen-synthetic").code == 1);  // --out is required

  auto o = run(dir.path(), "build-corpus --input nowhere.jsonl --out c");
  CHECK(o.code == 1);
  CHECK(o.err.find("nowhere.jsonl") != std::string::npos);
  CHECK_FALSE(fs::exists(dir.path() / "c"));

  o = run(dir.path(), "evaluate --checkpoint ck --corpus x.jsonl --vocab v.json --out r.json");
  CHECK(o.code == 1);
  CHECK(o.err.find("ck") != std::string::npos);

  o = run(dir.path(), "gen-synthetic --set model.bogus=3 --out r.jsonl");
  CHECK(o.code == 1);
  CHECK(o.err.find("model.bogus") != std::string::npos);
  CHECK(run(dir.path(), "gen-synthetic --set synthetic.num_languages=seven --out r.jsonl").code == 1);
  CHECK(run(dir.path(), "gen-synthetic --threads 0 --out r.jsonl").code == 1);

  std::ofstream(dir.path() / "bad.json") << "{\"train\": {\"stepz\": 3}}";
  o = run(dir.path(), "gen-synthetic --config bad.json --out r.jsonl");
  CHECK(o.code == 1);
  CHECK(o.err.find("stepz") != std::string::npos);
}

TEST_CASE("config round-trips through --dump-config and --config") {
  testing::TempDir dir("clidump");
  REQUIRE(run(dir.path(), "gen-synthetic --pls 2 --docs-per-pl 6 --low-resource go=0.5 --seed 4 "
                          "--set synthetic.max_statements=4 --dump-config a.json --out a.jsonl")
              .code == 0);
  REQUIRE(run(dir.path(), "gen-synthetic --config a.json --dump-config b.json --out b.jsonl").code == 0);
  CHECK(slurp(dir.path() / "a.json") == slurp(dir.path() / "b.json"));
  CHECK(slurp(dir.path() / "a.jsonl") == slurp(dir.path() / "b.jsonl"));

  RunConfig reloaded;
  reloaded.load_file(dir.path() / "a.json");
  CHECK(reloaded.get("synthetic.num_languages") == 2);
  CHECK(reloaded.get("synthetic.max_statements") == 4);
  CHECK(reloaded.get("seed") == 4);
  CHECK(reloaded.get("synthetic.sample_seed") == 4);
}

TEST_CASE("gen-synthetic records its parameters and seed in the header") {
  testing::TempDir dir("cligen");
  REQUIRE(run(dir.path(), "gen-synthetic --pls 6 --docs-per-pl 50 --low-resource ruby=0.1 --out a.jsonl").code == 0);
  std::ifstream in(dir.path() / "a.jsonl");
  std::string first;
  std::getline(in, first);
  const auto header = nlohmann::json::parse(first).at("synthetic_header");
  CHECK(header["options"]["sample_seed"] == 1);
  CHECK(header["options"]["num_languages"] == 6);
  CHECK(header["options"]["low_resource"]["ruby"] == 0.1);
  CHECK(header["documents"].size() == 6);
  CHECK(header["documents"]["ruby"] == 5);
  CHECK(header["documents"]["go"] == 50);
  const auto docs = read_raw_jsonl(dir.path() / "a.jsonl");
  CHECK(docs.size() == 5 * 50 + 5);

  REQUIRE(run(dir.path(), "gen-synthetic --pls 6 --docs-per-pl 50 --low-resource ruby=0.1 --seed 2 --out b.jsonl")
              .code == 0);
  CHECK(slurp(dir.path() / "a.jsonl") != slurp(dir.path() / "b.jsonl"));
}

TEST_CASE("the pipeline is byte-identical across repeated runs") {
  testing::TempDir a("clipipe_a"), b("clipipe_b");
  pipeline(a.path());
  pipeline(b.path());
  for (const char* f : kPipelineFiles) {
    INFO(f);
    REQUIRE(fs::exists(a.path() / f));
    CHECK(slurp(a.path() / f) == slurp(b.path() / f));
  }

  // Routing rows of the exported CSV sum to one.
  std::ifstream csv(a.path() / "routing.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "layer,pl,expert,count,row_fraction");
  std::map<std::string, double> sums;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string layer, pl, expert, count, frac;
    std::getline(ss, layer, ',');
    std::getline(ss, pl, ',');
    std::getline(ss, expert, ',');
    std::getline(ss, count, ',');
    std::getline(ss, frac, ',');
    sums[layer + "/" + pl] += std::stod(frac);
  }
  CHECK(sums.size() == 3);
  for (const auto& [key, s] : sums) CHECK_MESSAGE(std::abs(s - 1.0) < 1e-6, key);

  // Resuming from the step-3 checkpoint reproduces the uninterrupted run.
  const auto resumed = run(a.path(), "pretrain --corpus enc.jsonl --vocab vocab.json --resume ckpt/step-3 --out again " +
                                         kSmallModel);
  INFO(resumed.err);
  REQUIRE(resumed.code == 0);
  CHECK(slurp(a.path() / "again/final/params.bin") == slurp(a.path() / "ckpt/final/params.bin"));

  // A model whose window is shorter than the encoded corpus is rejected up front.
  const auto narrow = run(a.path(), "pretrain --corpus enc.jsonl --vocab vocab.json --out n --set model.max_seq=8");
  CHECK(narrow.code == 1);
  CHECK(narrow.err.find("enc.jsonl") != std::string::npos);

  // A damaged checkpoint is a runtime failure.
  fs::resize_file(a.path() / "ckpt/final/params.bin", 12);
  const auto broken = run(a.path(), "evaluate --checkpoint ckpt/final --corpus enc.jsonl --vocab vocab.json --out r.json");
  CHECK(broken.code == 2);
  CHECK_FALSE(fs::exists(a.path() / "r.json"));
}

TEST_CASE("finetune with zero steps keeps the parameters") {
  testing::TempDir dir("clift");
  pipeline(dir.path());
  const auto o = run(dir.path(), "finetune --checkpoint ckpt/final --corpus enc.jsonl --out ft --set finetune.steps=0");
  INFO(o.err);
  REQUIRE(o.code == 0);
  CHECK(slurp(dir.path() / "ft/final/params.bin") == slurp(dir.path() / "ckpt/final/params.bin"));
}
