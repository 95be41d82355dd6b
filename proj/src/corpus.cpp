// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "polyglot/corpus.hpp"
#include "polyglot/rng.hpp"

namespace polyglot {

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::dev:
      return "dev";
    case Split::test:
      return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "dev" || s == "valid" || s == "validation") return Split::dev;
  if (s == "test") return Split::test;
  throw CorpusError("unknown split '" + std::string(s) + "'");
}

std::vector<CorpusDoc> encode_document(const NormalizedDoc& doc, const BpeVocab& vocab, std::size_t max_seq,
                                       EncodeStats* stats) {
  if (max_seq == 0) throw CorpusError("max sequence length must be positive");
  std::size_t unknown = 0;
  const auto ids = vocab.encode(doc.tokens, &unknown);
  std::vector<CorpusDoc> out;
  for (std::size_t start = 0; start < ids.size(); start += max_seq) {
    const auto end = std::min(ids.size(), start + max_seq);
    out.push_back({doc.pl, doc.split, std::vector<std::int32_t>(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                                                ids.begin() + static_cast<std::ptrdiff_t>(end))});
  }
  if (stats) {
    ++stats->documents;
    stats->windows += out.size();
    stats->unknown_symbols += unknown;
  }
  return out;
}

std::vector<CorpusDoc> encode_corpus(std::span<const NormalizedDoc> docs, const BpeVocab& vocab, std::size_t max_seq,
                                     EncodeStats* stats) {
  std::vector<CorpusDoc> out;
  for (const auto& d : docs) {
    auto windows = encode_document(d, vocab, max_seq, stats);
    for (auto& w : windows) out.push_back(std::move(w));
  }
  return out;
}

std::uint64_t content_hash(const RawDoc& doc) {
  return stable_hash(doc.pl + '\x1f' + doc.code + '\x1f' + doc.docstring);
}

SplitCorpus derive_splits(std::span<const RawDoc> docs, const SplitMode& mode) {
  std::map<std::string, std::vector<std::pair<std::uint64_t, const RawDoc*>>> by_pl;
  std::set<std::uint64_t> seen;
  for (const auto& d : docs) {
    const auto h = content_hash(d);
    if (!seen.insert(h).second) continue;
    by_pl[d.pl].emplace_back(h, &d);
  }
  SplitCorpus out;
  std::map<std::string, std::vector<RawDoc>> train_by_pl;
  for (auto& [pl, list] : by_pl) {
    std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
      return a.first < b.first || (a.first == b.first && a.second->code < b.second->code);
    });
    const std::size_t n = list.size();
    const auto held = static_cast<std::size_t>(std::llround(0.02 * static_cast<double>(n)));
    const std::size_t n_train = n - std::min(n, 2 * held);
    for (std::size_t i = 0; i < n; ++i) {
      const RawDoc& d = *list[i].second;
      if (i < n_train) {
        train_by_pl[pl].push_back(d);
      } else if (i < n_train + held) {
        out.dev.push_back(d);
      } else {
        out.test.push_back(d);
      }
    }
  }

  if (const auto* low = std::get_if<LowResourceSplit>(&mode)) {
    const auto target = train_by_pl.find(low->target_pl);
    const auto reference = train_by_pl.find(low->reference_pl);
    if (target == train_by_pl.end()) throw CorpusError("low-resource target '" + low->target_pl + "' has no documents");
    if (reference == train_by_pl.end()) {
      throw CorpusError("low-resource reference '" + low->reference_pl + "' has no documents");
    }
    if (reference->second.size() > target->second.size()) {
      throw CorpusError("low-resource reference '" + low->reference_pl + "' (" + std::to_string(reference->second.size()) +
                        " train docs) is larger than target '" + low->target_pl + "' (" +
                        std::to_string(target->second.size()) + ")");
    }
    // Already in content-hash order, so the prefix is a deterministic sample.
    target->second.resize(reference->second.size());
  } else if (const auto* cross = std::get_if<CrossDomainSplit>(&mode)) {
    train_by_pl.erase(cross->excluded_pl);
  }
  for (auto& [pl, list] : train_by_pl)
    for (auto& d : list) out.train.push_back(std::move(d));
  return out;
}

SplitMode parse_split_mode(std::string_view text) {
  // full | low_resource:<target>:<reference> | cross_domain:<excluded>
  if (text == "full") return FullSplit{};
  auto rest = [&](std::string_view prefix) { return std::string(text.substr(prefix.size())); };
  if (text.starts_with("low_resource:")) {
    const auto args = rest("low_resource:");
    const auto colon = args.find(':');
    if (colon == std::string::npos) throw CorpusError("low_resource mode needs <target>:<reference>");
    return LowResourceSplit{args.substr(0, colon), args.substr(colon + 1)};
  }
  if (text.starts_with("cross_domain:")) return CrossDomainSplit{rest("cross_domain:")};
  throw CorpusError("unknown split mode '" + std::string(text) + "'");
}

std::map<std::string, std::size_t> count_by_language(std::span<const RawDoc> docs) {
  std::map<std::string, std::size_t> out;
  for (const auto& d : docs) ++out[d.pl];
  return out;
}

std::map<std::string, std::size_t> count_by_language(std::span<const CorpusDoc> docs) {
  std::map<std::string, std::size_t> out;
  for (const auto& d : docs) ++out[d.pl];
  return out;
}

// ---- files ---------------------------------------------------------------------

namespace {

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open input file: " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CorpusError("cannot open output file: " + path.string());
  return out;
}

template <typename F>
void for_each_json_line(const std::filesystem::path& path, F&& fn) {
  auto in = open_in(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw CorpusError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    fn(j, lineno);
  }
}

}  // namespace

std::vector<RawDoc> read_raw_jsonl(const std::filesystem::path& path) {
  std::vector<RawDoc> out;
  for_each_json_line(path, [&](const nlohmann::json& j, std::size_t lineno) {
    if (j.contains("synthetic_header")) return;
    if (!j.contains("pl") || !j.contains("code")) {
      throw CorpusError(path.string() + ":" + std::to_string(lineno) + ": expected \"pl\" and \"code\"");
    }
    out.push_back({j.at("pl"), j.at("code"), j.value("docstring", std::string{})});
  });
  return out;
}

void write_raw_jsonl(const std::filesystem::path& path, std::span<const RawDoc> docs, const nlohmann::json* header) {
  auto out = open_out(path);
  if (header) out << nlohmann::json{{"synthetic_header", *header}}.dump() << '\n';
  for (const auto& d : docs) {
    nlohmann::json j{{"pl", d.pl}, {"code", d.code}};
    if (!d.docstring.empty()) j["docstring"] = d.docstring;
    out << j.dump() << '\n';
  }
}

std::vector<NormalizedDoc> read_normalized_jsonl(const std::filesystem::path& path) {
  std::vector<NormalizedDoc> out;
  for_each_json_line(path, [&](const nlohmann::json& j, std::size_t) {
    out.push_back({j.at("pl"), parse_split(j.at("split").get<std::string>()),
                   j.at("tokens").get<std::vector<std::string>>()});
  });
  return out;
}

void write_normalized_jsonl(const std::filesystem::path& path, std::span<const NormalizedDoc> docs) {
  auto out = open_out(path);
  for (const auto& d : docs) {
    out << nlohmann::json{{"pl", d.pl}, {"split", split_name(d.split)}, {"tokens", d.tokens}}.dump() << '\n';
  }
}

std::vector<CorpusDoc> read_corpus_jsonl(const std::filesystem::path& path) {
  std::vector<CorpusDoc> out;
  for_each_json_line(path, [&](const nlohmann::json& j, std::size_t lineno) {
    CorpusDoc d{j.at("pl"), parse_split(j.at("split").get<std::string>()),
                j.at("tokens").get<std::vector<std::int32_t>>()};
    for (auto id : d.tokens) {
      if (id < 0) throw CorpusError(path.string() + ":" + std::to_string(lineno) + ": negative token id");
    }
    out.push_back(std::move(d));
  });
  return out;
}

void write_corpus_jsonl(const std::filesystem::path& path, std::span<const CorpusDoc> docs) {
  auto out = open_out(path);
  for (const auto& d : docs) {
    out << nlohmann::json{{"pl", d.pl}, {"split", split_name(d.split)}, {"tokens", d.tokens}}.dump() << '\n';
  }
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  auto in = open_in(path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorpusError(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

}  // namespace polyglot
