// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "fixtures.hpp"

#include <algorithm>
#include <atomic>
#include <unistd.h>

namespace polyglot::testing {

ModelConfig toy_model_config(Variant variant, std::size_t vocab_size, std::size_t max_seq) {
  ModelConfig c;
  c.l_total = 2;
  c.l_moe = 1;
  c.hidden = 64;
  c.heads = 4;
  c.max_seq = max_seq;
  c.experts = 8;
  c.shared_experts = variant == Variant::pl_moe ? 1 : 0;
  c.top_k = 2;
  c.vocab_size = vocab_size;
  c.variant = variant;
  return c;
}

ExpertAllocation reference_allocation_32() {
  return ExpertAllocation::from_group_sizes(
      {{"go", 4}, {"java", 6}, {"javascript", 5}, {"php", 6}, {"python", 8}, {"ruby", 2}}, 32, 1);
}

namespace {

Normalizer make_normalizer(const std::vector<RawDoc>& train_raw, const std::vector<std::string>& languages) {
  CorpusOptions opt;
  opt.languages = languages;
  return Normalizer(opt, build_literal_table(train_raw, opt.string_cap, opt.number_cap));
}

std::vector<NormalizedDoc> normalize_all(const Normalizer& norm, const std::vector<RawDoc>& docs, Split split) {
  std::vector<NormalizedDoc> out;
  for (const auto& d : docs)
    for (auto& s : norm.samples(d)) out.push_back({d.pl, split, std::move(s)});
  return out;
}

}  // namespace

EncodedCorpus build_synthetic_corpus(const PipelineOptions& options) {
  const auto raw = generate_synthetic(options.synthetic);
  const auto splits = derive_splits(raw.docs, FullSplit{});
  EncodedCorpus out;
  out.languages = synthetic_language_names(options.synthetic.num_languages);
  const auto norm = make_normalizer(splits.train, out.languages);
  const auto train = normalize_all(norm, splits.train, Split::train);
  std::vector<std::vector<std::string>> token_docs;
  for (const auto& d : train) token_docs.push_back(d.tokens);
  out.vocab = train_bpe(token_docs, options.vocab_size, norm.special_tokens()).vocab;
  out.train = encode_corpus(train, out.vocab, options.max_seq);
  out.dev = encode_corpus(normalize_all(norm, splits.dev, Split::dev), out.vocab, options.max_seq);
  out.test = encode_corpus(normalize_all(norm, splits.test, Split::test), out.vocab, options.max_seq);
  out.train_raw = splits.train;
  return out;
}

std::vector<CorpusDoc> encode_with(const std::vector<RawDoc>& docs, const std::vector<RawDoc>& train_raw,
                                   const BpeVocab& vocab, std::size_t max_seq, Split split) {
  std::vector<std::string> languages;
  for (const auto& [pl, _] : count_by_language(train_raw)) languages.push_back(pl);
  for (const auto& [pl, _] : count_by_language(docs)) {
    if (std::find(languages.begin(), languages.end(), pl) == languages.end()) languages.push_back(pl);
  }
  const auto norm = make_normalizer(train_raw, languages);
  return encode_corpus(normalize_all(norm, docs, split), vocab, max_seq);
}

std::vector<CorpusDoc> only_language(const std::vector<CorpusDoc>& docs, const std::string& pl) {
  std::vector<CorpusDoc> out;
  for (const auto& d : docs)
    if (d.pl == pl) out.push_back(d);
  return out;
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("polyglot-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

TokenBatch random_batch(CounterRng& rng, std::size_t b, std::size_t t, std::size_t vocab,
                        const std::vector<std::string>& languages) {
  TokenBatch batch;
  batch.b = b;
  batch.t = t;
  batch.ids.resize(b * t);
  for (auto& id : batch.ids) id = static_cast<std::int32_t>(1 + rng.below(vocab - 1));
  for (std::size_t i = 0; i < b; ++i) batch.pls.push_back(languages[rng.below(languages.size())]);
  return batch;
}

}  // namespace polyglot::testing
