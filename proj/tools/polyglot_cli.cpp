// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0
//
// polyglot: corpus construction, tokenizer training, expert allocation,
// pretraining, fine-tuning, evaluation, ablation and routing statistics.
// Exit codes: 0 success, 1 invalid configuration or inputs, 2 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "polyglot/corpus.hpp"
#include "polyglot/evaluation.hpp"
#include "polyglot/model.hpp"
#include "polyglot/moe.hpp"
#include "polyglot/run_config.hpp"
#include "polyglot/synthetic.hpp"
#include "polyglot/training.hpp"

namespace fs = std::filesystem;
using namespace polyglot;

namespace {

// Raised for bad inputs the user can fix; mapped to exit code 1.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string dump_config;
};

void log(const std::string& msg) { std::cerr << "[polyglot] " << msg << '\n'; }

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw InputError(std::string(what) + " not found: " + p.string());
}

void add_common(CLI::App* sub, Common& c, const RunConfig& defaults, const std::vector<std::string>& sections) {
  sub->add_option("--config", c.config, "JSON config with dotted keys");
  sub->add_option("--set", c.sets, "override a config key (key=value), repeatable");
  sub->add_option("--seed", c.seed, "seed for every random consumer");
  sub->add_option("--threads", c.threads, "worker bound (training steps are single-threaded)")->check(CLI::PositiveNumber);
  sub->add_option("--dump-config", c.dump_config, "write the effective config to this file");
  sub->footer(defaults.describe(sections));
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg.load_file(c.config);
  for (const auto& s : c.sets) cfg.set(s);
  if (c.seed) {
    cfg.set("seed=" + std::to_string(*c.seed));
    cfg.set("synthetic.sample_seed=" + std::to_string(*c.seed));
  }
  if (!c.dump_config.empty()) write_json_file(c.dump_config, cfg.dump());
  return cfg;
}

std::vector<std::string> languages_of(std::span<const CorpusDoc> docs) {
  std::vector<std::string> out;
  for (const auto& [pl, _] : count_by_language(docs)) out.push_back(pl);
  return out;
}

std::vector<CorpusDoc> select_split(const std::vector<CorpusDoc>& docs, Split s) {
  std::vector<CorpusDoc> out;
  for (const auto& d : docs)
    if (d.split == s) out.push_back(d);
  return out;
}

BpeVocab load_vocab(const fs::path& p) {
  require_file(p, "vocabulary");
  return BpeVocab::from_json(read_json_file(p));
}

ModelConfig checked_model_config(const RunConfig& cfg, std::size_t vocab_size) {
  auto mc = cfg.model_config();
  mc.vocab_size = vocab_size;
  try {
    mc.validate();
  } catch (const ModelError& e) {
    throw ConfigError(e.what());
  }
  return mc;
}

ExpertAllocation resolve_allocation(const RunConfig& cfg, const ModelConfig& mc, std::span<const CorpusDoc> train,
                                    const std::string& alloc_path) {
  if (mc.variant != Variant::pl_moe && mc.variant != Variant::pl_moe_no_shared) return {};
  std::string path = alloc_path.empty() ? cfg.get("allocation.file").get<std::string>() : alloc_path;
  ExpertAllocation alloc;
  if (!path.empty()) {
    require_file(path, "allocation file");
    alloc = ExpertAllocation::from_json(read_json_file(path));
  } else {
    std::map<std::string, std::uint64_t> sizes;
    for (const auto& d : train) ++sizes[d.pl];
    const std::size_t shared = mc.variant == Variant::pl_moe ? mc.shared_experts : 0;
    alloc = allocate_experts(sizes, mc.experts, shared, cfg.get("allocation.min_per_pl").get<std::size_t>());
  }
  try {
    alloc.validate(mc.variant == Variant::pl_moe);
  } catch (const RoutingError& e) {
    throw ConfigError(std::string("invalid allocation: ") + e.what());
  }
  return alloc;
}

// ---- subcommands -------------------------------------------------------------------

int cmd_gen_synthetic(const Common& c, std::optional<std::size_t> pls, std::optional<std::size_t> docs,
                      const std::vector<std::string>& low, const std::string& out) {
  // Flag shortcuts become overrides so --dump-config reproduces the run.
  Common with_flags = c;
  if (pls) with_flags.sets.push_back("synthetic.num_languages=" + std::to_string(*pls));
  if (docs) with_flags.sets.push_back("synthetic.docs_per_language=" + std::to_string(*docs));
  if (!low.empty()) {
    std::string joined;
    for (const auto& l : low) joined += (joined.empty() ? "" : ",") + l;
    with_flags.sets.push_back("synthetic.low_resource=" + joined);
  }
  const RunConfig cfg = resolve(with_flags);
  const auto corpus = generate_synthetic(cfg.synthetic_options());
  write_raw_jsonl(out, corpus.docs, &corpus.header);
  log("wrote " + std::to_string(corpus.docs.size()) + " documents to " + out);
  return 0;
}

int cmd_build_corpus(const Common& c, const std::string& input, const std::string& out) {
  const RunConfig cfg = resolve(c);
  require_file(input, "raw corpus");
  const auto options = cfg.corpus_options();
  const auto mode = parse_split_mode(cfg.get("corpus.split_mode").get<std::string>());
  const auto raw = read_raw_jsonl(input);
  for (const auto& d : raw) options.require_language(d.pl);
  const auto splits = derive_splits(raw, mode);
  const auto table = build_literal_table(splits.train, options.string_cap, options.number_cap);
  const Normalizer norm(options, table);
  std::vector<NormalizedDoc> docs;
  auto add = [&](const std::vector<RawDoc>& list, Split s) {
    for (const auto& d : list)
      for (auto& sample : norm.samples(d)) docs.push_back({d.pl, s, std::move(sample)});
  };
  add(splits.train, Split::train);
  add(splits.dev, Split::dev);
  add(splits.test, Split::test);
  fs::create_directories(out);
  write_json_file(fs::path(out) / "literals.json", table.to_json());
  write_normalized_jsonl(fs::path(out) / "normalized.jsonl", docs);
  nlohmann::json summary = {{"train", count_by_language(splits.train)},
                            {"dev", count_by_language(splits.dev)},
                            {"test", count_by_language(splits.test)},
                            {"split_mode", cfg.get("corpus.split_mode")}};
  write_json_file(fs::path(out) / "splits.json", summary);
  log("normalized " + std::to_string(docs.size()) + " samples into " + out);
  return 0;
}

int cmd_train_tokenizer(const Common& c, const std::string& corpus_dir, const std::string& out) {
  const RunConfig cfg = resolve(c);
  const fs::path dir(corpus_dir);
  require_file(dir / "normalized.jsonl", "normalized corpus");
  require_file(dir / "literals.json", "literal table");
  const Normalizer norm(cfg.corpus_options(), LiteralTable::from_json(read_json_file(dir / "literals.json")));
  std::vector<std::vector<std::string>> train;
  for (auto& d : read_normalized_jsonl(dir / "normalized.jsonl"))
    if (d.split == Split::train) train.push_back(std::move(d.tokens));
  if (train.empty()) throw InputError("normalized corpus has no training samples: " + (dir / "normalized.jsonl").string());
  auto result = train_bpe(train, cfg.get("corpus.vocab_size").get<std::size_t>(), norm.special_tokens());
  if (!result.reached_target) log("warning: " + result.warning);
  write_json_file(out, result.vocab.to_json());
  log("vocabulary of " + std::to_string(result.vocab.size()) + " entries written to " + out);
  return 0;
}

int cmd_encode(const Common& c, const std::string& corpus, const std::string& vocab_path, const std::string& out) {
  const RunConfig cfg = resolve(c);
  fs::path input(corpus);
  if (fs::is_directory(input)) input /= "normalized.jsonl";
  require_file(input, "normalized corpus");
  const auto vocab = load_vocab(vocab_path);
  EncodeStats stats;
  const auto normalized = read_normalized_jsonl(input);
  const auto docs = encode_corpus(normalized, vocab, cfg.get("corpus.max_seq").get<std::size_t>(), &stats);
  write_corpus_jsonl(out, docs);
  log("encoded " + std::to_string(stats.documents) + " samples into " + std::to_string(stats.windows) +
      " windows; unknown symbols: " + std::to_string(stats.unknown_symbols));
  return 0;
}

int cmd_allocate(const Common& c, const std::string& corpus, const std::string& out) {
  const RunConfig cfg = resolve(c);
  require_file(corpus, "encoded corpus");
  const auto train = select_split(read_corpus_jsonl(corpus), Split::train);
  auto mc = cfg.model_config();
  if (mc.variant != Variant::pl_moe && mc.variant != Variant::pl_moe_no_shared) mc.variant = Variant::pl_moe;
  mc.vocab_size = 2;
  const auto alloc = resolve_allocation(cfg, mc, train, "");
  write_json_file(out, alloc.to_json());
  for (const auto& [pl, set] : alloc.per_pl) log(pl + ": " + std::to_string(set.size()) + " experts");
  return 0;
}

void require_fits(std::span<const CorpusDoc> docs, const ModelConfig& mc, const std::string& corpus) {
  for (const auto& d : docs)
    if (d.tokens.size() > mc.max_seq)
      throw InputError("window of " + std::to_string(d.tokens.size()) + " tokens exceeds model.max_seq " +
                       std::to_string(mc.max_seq) + " in " + corpus + " (re-encode with a matching corpus.max_seq)");
}

struct TrainInputs {
  std::vector<CorpusDoc> train, dev;
  BpeVocab vocab;
};

TrainInputs load_train_inputs(const std::string& corpus, const std::string& vocab_path) {
  require_file(corpus, "encoded corpus");
  TrainInputs in;
  in.vocab = load_vocab(vocab_path);
  const auto all = read_corpus_jsonl(corpus);
  in.train = select_split(all, Split::train);
  in.dev = select_split(all, Split::dev);
  if (in.train.empty()) throw InputError("encoded corpus has no training documents: " + corpus);
  return in;
}

int cmd_pretrain(const Common& c, const std::string& corpus, const std::string& vocab_path, const std::string& alloc_path,
                 const std::string& resume, const std::string& out) {
  const RunConfig cfg = resolve(c);
  auto in = load_train_inputs(corpus, vocab_path);
  const auto mc = checked_model_config(cfg, in.vocab.size());
  require_fits(in.train, mc, corpus);
  require_fits(in.dev, mc, corpus);
  const auto tc = cfg.train_config("train");
  CheckpointMeta meta{in.vocab.size(), in.vocab.fingerprint(), nlohmann::json::object()};
  if (!resume.empty()) {
    require_file(fs::path(resume) / "trainstate.json", "resume state");
    auto trainer = Trainer::resume(resume, tc, std::move(in.train), std::move(in.dev));
    log("resuming at step " + std::to_string(trainer.step_count()));
    trainer.run(tc.steps, out);
    return 0;
  }
  const auto alloc = resolve_allocation(cfg, mc, in.train, alloc_path);
  Model model(mc, alloc, tc.seed);
  log(std::string(variant_name(mc.variant)) + " model with " + std::to_string(model.parameter_count()) + " parameters");
  const auto summary = pretrain(model, tc, std::move(in.train), std::move(in.dev), out, meta);
  for (const auto& [pl, loss] : summary.final_dev) log("dev loss " + pl + ": " + std::to_string(loss));
  return 0;
}

int cmd_finetune(const Common& c, const std::string& checkpoint, const std::string& corpus, const std::string& out) {
  const RunConfig cfg = resolve(c);
  require_file(fs::path(checkpoint) / "manifest.json", "checkpoint");
  require_file(corpus, "encoded corpus");
  const auto all = read_corpus_jsonl(corpus);
  auto train = select_split(all, Split::train);
  auto dev = select_split(all, Split::dev);
  const auto tc = cfg.train_config("finetune");
  if (tc.steps > 0 && train.empty()) throw InputError("encoded corpus has no training documents: " + corpus);
  const auto summary = finetune(checkpoint, tc, std::move(train), std::move(dev), out);
  for (const auto& [pl, loss] : summary.final_dev) log("dev loss " + pl + ": " + std::to_string(loss));
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& checkpoint, const std::string& corpus, const std::string& vocab_path,
                 const std::string& split, const std::string& variant_label, const std::string& out) {
  const RunConfig cfg = resolve(c);
  require_file(fs::path(checkpoint) / "manifest.json", "checkpoint");
  require_file(corpus, "encoded corpus");
  const auto vocab = load_vocab(vocab_path);
  const auto docs = select_split(read_corpus_jsonl(corpus), parse_split(split));
  std::vector<std::string> warnings;
  const auto langs = cfg.corpus_options().languages;
  const auto results = evaluate_checkpoint(checkpoint, docs, vocab, langs, &warnings);
  for (const auto& w : warnings) log("warning: " + w);
  std::string label = variant_label;
  if (label.empty()) label = read_json_file(fs::path(checkpoint) / "manifest.json")["model_config"]["variant"];
  write_results_json(out, results_to_json(label, results));
  for (const auto& r : results) {
    log(r.pl + ": acc " + std::to_string(r.accuracy) + " es " + std::to_string(r.edit_similarity) + " (" +
        std::to_string(r.n_positions) + " positions)");
  }
  return 0;
}

int cmd_ablate(const Common& c, const std::string& corpus, const std::string& vocab_path, const std::string& out) {
  const RunConfig cfg = resolve(c);
  auto in = load_train_inputs(corpus, vocab_path);
  const auto test = select_split(read_corpus_jsonl(corpus), Split::test);
  if (test.empty()) throw InputError("encoded corpus has no test documents: " + corpus);
  AblationSetup setup;
  setup.model = checked_model_config(cfg, in.vocab.size());
  require_fits(in.train, setup.model, corpus);
  require_fits(in.dev, setup.model, corpus);
  require_fits(test, setup.model, corpus);
  setup.train = cfg.train_config("train");
  setup.min_per_pl = cfg.get("allocation.min_per_pl").get<std::size_t>();
  const auto entries = ablation_run(setup, in.train, in.dev, test, &in.vocab, out);
  std::ofstream csv(fs::path(out) / "comparison.csv", std::ios::binary | std::ios::trunc);
  csv << comparison_csv(entries);
  nlohmann::json all = nlohmann::json::array();
  for (const auto& e : entries)
    for (auto& row : results_to_json(variant_name(e.variant), e.results)) all.push_back(row);
  write_results_json(fs::path(out) / "results.json", all);
  log("comparison written to " + (fs::path(out) / "comparison.csv").string());
  return 0;
}

int cmd_route_stats(const Common& c, const std::string& checkpoint, const std::string& corpus, const std::string& split,
                    const std::string& occupancy_out, const std::string& out) {
  const RunConfig cfg = resolve(c);
  require_file(fs::path(checkpoint) / "manifest.json", "checkpoint");
  require_file(corpus, "encoded corpus");
  const Model model = load_checkpoint(checkpoint);
  if (model.config().variant == Variant::dense) throw InputError("route-stats needs an expert variant checkpoint");
  auto docs = read_corpus_jsonl(corpus);
  if (!split.empty()) docs = select_split(docs, parse_split(split));
  if (docs.empty()) throw InputError("no documents to route in " + corpus);
  NoGradGuard no_grad;
  RoutingTrace trace;
  const std::size_t bs = cfg.get("evaluation.batch_size").get<std::size_t>();
  for (std::size_t start = 0; start < docs.size(); start += bs) {
    std::vector<const CorpusDoc*> ptrs;
    for (std::size_t i = start; i < std::min(docs.size(), start + bs); ++i) ptrs.push_back(&docs[i]);
    trace.merge(model.forward(make_batch(ptrs)).trace);
  }
  write_routing_csv(out, trace, model.config().experts);
  if (!occupancy_out.empty()) {
    ExpertAllocation alloc = model.allocation();
    RoutingStrategy strategy = RoutingStrategy::switch_top1;
    if (model.config().variant == Variant::pl_moe) strategy = RoutingStrategy::pl_moe;
    if (model.config().variant == Variant::pl_moe_no_shared) strategy = RoutingStrategy::pl_moe_no_shared;
    if (alloc.per_pl.empty()) {
      alloc.total_experts = model.config().experts;
      for (const auto& pl : languages_of(docs)) alloc.per_pl[pl] = {};
    }
    const auto report = occupancy_report(trace, alloc, strategy);
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows) {
      rows.push_back({{"pl", r.pl}, {"routable", r.routable}, {"fraction", r.fraction}, {"empty", r.empty}});
    }
    write_json_file(occupancy_out, {{"total_experts", report.total_experts},
                                    {"mean_fraction", report.mean_fraction},
                                    {"rows", rows}});
  }
  log("routing statistics written to " + out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"polyglot: multi-language sparse-expert language modeling lab"};
  app.require_subcommand(1);
  const RunConfig defaults;
  Common common;

  std::string input, out, corpus, vocab, checkpoint, alloc_path, resume, split = "test", variant_label, occupancy;
  std::optional<std::size_t> pls, docs_per_pl;
  std::vector<std::string> low;

  auto* gen = app.add_subcommand("gen-synthetic", "generate a synthetic multi-language corpus (JSON lines)");
  add_common(gen, common, defaults, {"synthetic"});
  gen->add_option("--pls", pls, "number of languages");
  gen->add_option("--docs-per-pl", docs_per_pl, "documents per language");
  gen->add_option("--low-resource", low, "pl=fraction, repeatable");
  gen->add_option("--out", out, "output JSON-lines file")->required();

  auto* build = app.add_subcommand("build-corpus", "split, normalize and count literals of a raw corpus");
  add_common(build, common, defaults, {"corpus"});
  build->add_option("--input", input, "raw JSON-lines corpus")->required();
  build->add_option("--out", out, "output directory")->required();

  auto* tok = app.add_subcommand("train-tokenizer", "train the BPE vocabulary on the training split");
  add_common(tok, common, defaults, {"corpus"});
  tok->add_option("--corpus", corpus, "directory written by build-corpus")->required();
  tok->add_option("--out", out, "vocabulary JSON")->required();

  auto* enc = app.add_subcommand("encode", "encode normalized samples to windowed token ids");
  add_common(enc, common, defaults, {"corpus"});
  enc->add_option("--corpus", corpus, "normalized.jsonl or its directory")->required();
  enc->add_option("--vocab", vocab, "vocabulary JSON")->required();
  enc->add_option("--out", out, "encoded JSON-lines corpus")->required();

  auto* alloc = app.add_subcommand("allocate", "assign expert groups in proportion to data size");
  add_common(alloc, common, defaults, {"model", "allocation"});
  alloc->add_option("--corpus", corpus, "encoded corpus")->required();
  alloc->add_option("--out", out, "allocation JSON")->required();

  auto* pre = app.add_subcommand("pretrain", "pretrain a model on an encoded corpus");
  add_common(pre, common, defaults, {"model", "allocation", "train"});
  pre->add_option("--corpus", corpus, "encoded corpus")->required();
  pre->add_option("--vocab", vocab, "vocabulary JSON")->required();
  pre->add_option("--alloc", alloc_path, "explicit allocation JSON");
  pre->add_option("--resume", resume, "resume from a step-N checkpoint directory");
  pre->add_option("--out", out, "output directory")->required();

  auto* fine = app.add_subcommand("finetune", "continue training a checkpoint on a task corpus");
  add_common(fine, common, defaults, {"finetune"});
  fine->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  fine->add_option("--corpus", corpus, "encoded task corpus")->required();
  fine->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("evaluate", "token-level completion accuracy and edit similarity");
  add_common(eval, common, defaults, {"corpus", "evaluation"});
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval->add_option("--corpus", corpus, "encoded corpus")->required();
  eval->add_option("--vocab", vocab, "vocabulary JSON")->required();
  eval->add_option("--split", split, "split to score");
  eval->add_option("--variant", variant_label, "label for the results file");
  eval->add_option("--out", out, "results JSON")->required();

  auto* abl = app.add_subcommand("ablate", "train and compare pl_moe, pl_moe_no_shared, switch_moe and dense");
  add_common(abl, common, defaults, {"model", "allocation", "train"});
  abl->add_option("--corpus", corpus, "encoded corpus")->required();
  abl->add_option("--vocab", vocab, "vocabulary JSON")->required();
  abl->add_option("--out", out, "output directory")->required();

  auto* route = app.add_subcommand("route-stats", "export per-layer, per-language expert routing counts");
  add_common(route, common, defaults, {"evaluation"});
  route->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  route->add_option("--corpus", corpus, "encoded corpus")->required();
  route->add_option("--split", split, "split to route (empty: all)");
  route->add_option("--occupancy", occupancy, "also write the occupancy table as JSON");
  route->add_option("--out", out, "routing CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_synthetic(common, pls, docs_per_pl, low, out);
    if (*build) return cmd_build_corpus(common, input, out);
    if (*tok) return cmd_train_tokenizer(common, corpus, out);
    if (*enc) return cmd_encode(common, corpus, vocab, out);
    if (*alloc) return cmd_allocate(common, corpus, out);
    if (*pre) return cmd_pretrain(common, corpus, vocab, alloc_path, resume, out);
    if (*fine) return cmd_finetune(common, checkpoint, corpus, out);
    if (*eval) return cmd_evaluate(common, checkpoint, corpus, vocab, split, variant_label, out);
    if (*abl) return cmd_ablate(common, corpus, vocab, out);
    if (*route) return cmd_route_stats(common, checkpoint, corpus, split, occupancy, out);
  } catch (const ConfigError& e) {
    log("config error: " + std::string(e.what()));
    return 1;
  } catch (const InputError& e) {
    log("input error: " + std::string(e.what()));
    return 1;
  } catch (const std::exception& e) {
    log("error: " + std::string(e.what()));
    return 2;
  }
  return 2;
}
