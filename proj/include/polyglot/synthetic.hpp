// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale multi-language corpora. Each synthetic language is a small
// probabilistic grammar: a Markov chain over statement templates built from
// that language's own keyword and identifier pools, plus expressions and
// library calls drawn from pools every language shares.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyglot/corpus.hpp"

namespace polyglot {

struct SyntheticOptions {
  std::size_t num_languages = 6;
  std::size_t docs_per_language = 500;
  /// Language -> fraction of docs_per_language to generate.
  std::map<std::string, double> low_resource;
  /// Seeds the grammars.
  std::uint64_t grammar_seed = 1;
  /// Seeds document sampling; equal grammar seeds with different sample
  /// seeds give fresh documents from the same languages.
  std::uint64_t sample_seed = 1;

  std::size_t keywords_per_language = 16;
  std::size_t identifiers_per_language = 12;
  std::size_t templates_per_language = 12;
  std::size_t shared_functions = 24;
  std::size_t min_statements = 3;
  std::size_t max_statements = 6;

  [[nodiscard]] nlohmann::json to_json() const;
};

struct SyntheticCorpus {
  std::vector<RawDoc> docs;
  nlohmann::json header;
};

/// Names for the first n languages: the six defaults, then lang7, lang8, ...
std::vector<std::string> synthetic_language_names(std::size_t n);

SyntheticCorpus generate_synthetic(const SyntheticOptions& options);

}  // namespace polyglot
