// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0
//
// File formats consumed by the reporting tools, read back with independent
// parsers rather than the library's own readers.

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "polyglot/evaluation.hpp"

using namespace polyglot;
namespace fs = std::filesystem;

namespace {

using Table = std::vector<std::vector<std::string>>;

// Header row first.
Table read_csv(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in);
  Table t;
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    t.push_back(cells);
  }
  return t;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_CASE("metrics CSV: header, typed columns and nondecreasing steps per series") {
  testing::PipelineOptions po;
  po.synthetic.num_languages = 3;
  po.synthetic.docs_per_language = 40;
  po.vocab_size = 160;
  po.max_seq = 32;
  const auto corpus = testing::build_synthetic_corpus(po);
  auto mc = testing::toy_model_config(Variant::pl_moe, corpus.vocab.size(), 32);
  std::map<std::string, std::uint64_t> sizes;
  for (const auto& d : corpus.train) ++sizes[d.pl];
  TrainConfig tc;
  tc.steps = 8;
  tc.warmup_steps = 2;
  tc.micro_batch_size = 2;
  tc.micro_batches = 1;
  tc.eval_interval = 4;
  testing::TempDir dir("ifmetrics");
  (void)pretrain(Model(mc, allocate_experts(sizes, mc.experts, 1), 1), tc, corpus.train, corpus.dev, dir.path(),
                 {corpus.vocab.size(), corpus.vocab.fingerprint(), {}});

  const auto t = read_csv(dir.path() / "metrics.csv");
  REQUIRE(t.size() > 1);
  CHECK(t[0] == std::vector<std::string>{"step", "split", "pl", "loss", "lr"});
  std::map<std::pair<std::string, std::string>, long> last_step;
  std::set<std::string> dev_pls;
  std::size_t train_rows = 0;
  for (std::size_t i = 1; i < t.size(); ++i) {
    INFO("row " << i);
    REQUIRE(t[i].size() == 5);
    const long step = std::stol(t[i][0]);
    const auto& split = t[i][1];
    CHECK((split == "train" || split == "dev"));
    if (split == "train") {
      CHECK(t[i][2] == "all");
      ++train_rows;
    } else {
      dev_pls.insert(t[i][2]);
    }
    const double loss = std::stod(t[i][3]), lr = std::stod(t[i][4]);
    CHECK(std::isfinite(loss));
    CHECK(loss > 0.0);
    CHECK(lr >= 0.0);
    CHECK(lr <= tc.peak_lr);
    const auto key = std::make_pair(split, t[i][2]);
    if (last_step.contains(key)) CHECK(step >= last_step[key]);
    last_step[key] = step;
  }
  CHECK(dev_pls == std::set<std::string>(corpus.languages.begin(), corpus.languages.end()));
  // Train rows are keyed by the 0-based update index; dev rows by updates completed.
  CHECK(train_rows == tc.steps);
  CHECK(last_step[{"train", "all"}] == static_cast<long>(tc.steps) - 1);
  CHECK(last_step[{"dev", corpus.languages.front()}] == static_cast<long>(tc.steps));
}

TEST_CASE("routing CSV: one row per expert with exact row fractions") {
  RoutingTrace trace;
  trace.add(0, "go", 1, 3);
  trace.add(0, "go", 4, 1);
  trace.add(0, "ruby", 2, 7);
  trace.add(1, "go", 0, 1);
  trace.add(1, "go", 5, 2);
  testing::TempDir dir("ifrouting");
  write_routing_csv(dir.path() / "r.csv", trace, 6);
  const auto t = read_csv(dir.path() / "r.csv");
  CHECK(t[0] == std::vector<std::string>{"layer", "pl", "expert", "count", "row_fraction"});
  REQUIRE(t.size() == 1 + 3 * 6);
  std::map<std::string, double> sums;
  std::map<std::string, std::set<int>> experts;
  for (std::size_t i = 1; i < t.size(); ++i) {
    REQUIRE(t[i].size() == 5);
    const auto key = t[i][0] + "/" + t[i][1];
    sums[key] += std::stod(t[i][4]);
    experts[key].insert(std::stoi(t[i][2]));
  }
  for (const auto& [key, s] : sums) CHECK_MESSAGE(std::abs(s - 1.0) < 1e-6, key);
  for (const auto& [key, e] : experts) CHECK(e == std::set<int>{0, 1, 2, 3, 4, 5});
  // layer 0, go: counts 3 and 1 of 4.
  CHECK(t[2] == std::vector<std::string>{"0", "go", "1", "3", "0.75"});
  CHECK(t[5] == std::vector<std::string>{"0", "go", "4", "1", "0.25"});
  // layer 1, go: 2 of 3 routed to expert 5.
  CHECK(std::stod(t[18][4]) == 2.0 / 3.0);
}

TEST_CASE("allocation JSON: total_experts, shared and per-language expert lists") {
  const auto alloc = testing::reference_allocation_32();
  testing::TempDir dir("ifalloc");
  write_json_file(dir.path() / "a.json", alloc.to_json());
  const auto j = read_json(dir.path() / "a.json");
  CHECK(j["total_experts"] == 32);
  CHECK(j["shared"] == nlohmann::json::array({31}));
  REQUIRE(j["per_pl"].is_object());
  std::map<std::string, std::size_t> routable;
  std::set<int> seen;
  for (const auto& [pl, list] : j["per_pl"].items()) {
    REQUIRE(list.is_array());
    routable[pl] = list.size() + 1;
    for (const auto& e : list) {
      CHECK(e.get<int>() < 31);
      CHECK(seen.insert(e.get<int>()).second);
    }
  }
  const std::map<std::string, std::size_t> expected{{"go", 5},   {"java", 7},   {"javascript", 6},
                                                    {"php", 7},  {"python", 9}, {"ruby", 3}};
  CHECK(routable == expected);
  CHECK(seen.size() == 31);
  CHECK(ExpertAllocation::from_json(j).to_json() == j);

  auto unshared = j;
  unshared.erase("shared");
  CHECK(ExpertAllocation::from_json(unshared).shared.empty());
  auto missing = j;
  missing.erase("per_pl");
  CHECK_THROWS((void)ExpertAllocation::from_json(missing));
}

TEST_CASE("results JSON: rows carry variant, language and both metrics exactly") {
  const double third = 100.0 / 3.0;
  const std::vector<EvalResult> rs{{"go", third, 61.25, 12, {}, {}},
                                   {"ruby", 0.1 + 0.2, 99.999999999, 7, {}, {}},
                                   {"Overall", (third + 0.1 + 0.2) / 2, (61.25 + 99.999999999) / 2, 19, {}, {}}};
  testing::TempDir dir("ifresults");
  write_results_json(dir.path() / "r.json", results_to_json("pl_moe", rs));
  const auto j = read_json(dir.path() / "r.json");
  REQUIRE(j.is_array());
  REQUIRE(j.size() == 3);
  for (std::size_t i = 0; i < rs.size(); ++i) {
    const auto& row = j[i];
    CHECK(row.size() == 5);
    CHECK(row["variant"] == "pl_moe");
    CHECK(row["pl"] == rs[i].pl);
    // Consumers embed these numbers verbatim; the file must round-trip them bit for bit.
    CHECK(row["accuracy"].get<double>() == rs[i].accuracy);
    CHECK(row["edit_similarity"].get<double>() == rs[i].edit_similarity);
    CHECK(row["n_positions"] == rs[i].n_positions);
  }
}
