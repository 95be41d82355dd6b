// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for unit tests and the acceptance runner.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "polyglot/corpus.hpp"
#include "polyglot/model.hpp"
#include "polyglot/moe.hpp"
#include "polyglot/synthetic.hpp"
#include "polyglot/training.hpp"

namespace polyglot::testing {

/// l_total=2, l_moe=1, h=64, 4 heads, E=8, SE=1, k=2.
ModelConfig toy_model_config(Variant variant, std::size_t vocab_size, std::size_t max_seq = 64);

/// Reference 32-expert map: routable ruby 3, go 5, javascript 6, php 7,
/// java 7, python 9 (one shared expert included in each).
ExpertAllocation reference_allocation_32();

/// Synthetic corpus run through the in-process pipeline: split, literal
/// table, normalization, BPE and windowing.
struct EncodedCorpus {
  BpeVocab vocab;
  std::vector<CorpusDoc> train, dev, test;
  std::vector<std::string> languages;
  std::vector<RawDoc> train_raw;
};

struct PipelineOptions {
  SyntheticOptions synthetic;
  std::size_t vocab_size = 320;
  std::size_t max_seq = 64;
};

EncodedCorpus build_synthetic_corpus(const PipelineOptions& options);

/// Encodes extra raw documents with an existing vocabulary and literal table
/// derived from `train_raw` (used for held-out sets drawn from the same grammars).
std::vector<CorpusDoc> encode_with(const std::vector<RawDoc>& docs, const std::vector<RawDoc>& train_raw,
                                   const BpeVocab& vocab, std::size_t max_seq, Split split);

std::vector<CorpusDoc> only_language(const std::vector<CorpusDoc>& docs, const std::string& pl);

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Random token batch with ids in [1, vocab) and one language per row.
TokenBatch random_batch(CounterRng& rng, std::size_t b, std::size_t t, std::size_t vocab,
                        const std::vector<std::string>& languages);

}  // namespace polyglot::testing
