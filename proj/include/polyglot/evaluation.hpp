// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Next-token completion metrics (accuracy, Levenshtein edit similarity),
// the four-variant ablation harness and paired significance tests.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "polyglot/corpus.hpp"
#include "polyglot/model.hpp"
#include "polyglot/training.hpp"

namespace polyglot {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unit-cost insert/delete/substitute distance over bytes.
std::size_t levenshtein(std::string_view a, std::string_view b);
/// 100 * (1 - d / max(|a|, |b|)); 100 when both are empty.
double edit_similarity(std::string_view a, std::string_view b);
/// Token sequences joined with single spaces, then compared.
double edit_similarity(std::span<const std::string> pred, std::span<const std::string> gold);

struct EvalResult {
  std::string pl;
  double accuracy = 0.0;         // percent
  double edit_similarity = 0.0;  // percent
  std::size_t n_positions = 0;
  std::vector<double> example_accuracy;  // per document, percent
  std::vector<double> example_es;
};

/// Argmax next-token prediction for every position of a batch, row-major [b*t].
using NextTokenPredictor = std::function<std::vector<std::int32_t>(const TokenBatch&)>;
NextTokenPredictor model_predictor(const Model& model);

struct EvalOptions {
  std::size_t batch_size = 16;
  /// Ids that can open a document (<s> and language tags); the leading run
  /// of them is not scored.
  std::set<std::int32_t> frame_ids;
  /// Renders ids for edit similarity; ids print as decimal when unset.
  const BpeVocab* vocab = nullptr;
};

/// Scores one set of documents as a single group labelled `pl`.
EvalResult token_accuracy(const NextTokenPredictor& predict, std::span<const CorpusDoc> docs, std::string pl,
                          const EvalOptions& options);

/// One result per language present (sorted), then an "Overall" row holding the
/// mean of the per-language percentages. Languages in `expected` with no
/// documents are skipped with a note in `warnings`.
std::vector<EvalResult> evaluate_completion(const Model& model, std::span<const CorpusDoc> docs,
                                            const EvalOptions& options,
                                            std::span<const std::string> expected = {},
                                            std::vector<std::string>* warnings = nullptr);

/// Frame ids of a vocabulary: <s> plus every "<lang>" tag it knows.
std::set<std::int32_t> frame_ids(const BpeVocab& vocab, std::span<const std::string> languages);

/// Loads a checkpoint and refuses to score it against a different vocabulary.
std::vector<EvalResult> evaluate_checkpoint(const std::filesystem::path& checkpoint, std::span<const CorpusDoc> docs,
                                            const BpeVocab& vocab, std::span<const std::string> languages,
                                            std::vector<std::string>* warnings = nullptr);

nlohmann::json results_to_json(std::string_view variant, std::span<const EvalResult> results);
void write_results_json(const std::filesystem::path& path, const nlohmann::json& rows);

// ---- significance ---------------------------------------------------------------

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t df = 0;
  double mean_diff = 0.0;
  bool degenerate = false;  // zero-variance differences: t undefined
};

/// Two-sided paired t-test on a - b.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

// ---- ablation ---------------------------------------------------------------------

struct AblationEntry {
  Variant variant = Variant::pl_moe;
  std::uint64_t seed = 0;
  std::vector<EvalResult> results;  // per language + Overall
  std::map<std::string, double> dev_loss;
};

struct AblationSetup {
  ModelConfig model;  // variant is overridden per run
  TrainConfig train;
  std::size_t min_per_pl = 2;
  std::vector<Variant> variants{Variant::pl_moe, Variant::pl_moe_no_shared, Variant::switch_moe, Variant::dense};
};

/// Expert allocation a variant trains with: data-proportional groups plus the
/// configured shared experts for pl_moe, all experts split among languages for
/// the no-shared ablation, empty otherwise.
ExpertAllocation ablation_allocation(Variant v, const ModelConfig& config, std::span<const CorpusDoc> train,
                                     std::size_t min_per_pl);

/// Trains every variant with the same seed and data order and evaluates on `test`.
/// Checkpoints and metrics go to out_dir/<variant>/ when out_dir is non-empty.
std::vector<AblationEntry> ablation_run(const AblationSetup& setup, std::span<const CorpusDoc> train,
                                        std::span<const CorpusDoc> dev, std::span<const CorpusDoc> test,
                                        const BpeVocab* vocab, const std::filesystem::path& out_dir);

/// CSV with one row per variant: per-language acc/es columns, overall acc/es,
/// and the paired t-test of per-document accuracy against the first entry.
/// Throws when the entries were trained with different seeds.
std::string comparison_csv(std::span<const AblationEntry> entries);

}  // namespace polyglot
