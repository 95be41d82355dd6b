// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>

#include "polyglot/corpus.hpp"

namespace polyglot {

namespace tokens {
std::string language_tag(std::string_view pl) { return "<" + std::string(pl) + ">"; }
std::string string_literal(std::string_view value) { return "<STR_LIT:" + std::string(value) + ">"; }
std::string number_literal(std::string_view value) { return "<NUM_LIT:" + std::string(value) + ">"; }
}  // namespace tokens

void CorpusOptions::require_language(std::string_view pl) const {
  if (std::find(languages.begin(), languages.end(), pl) == languages.end() && pl != natural_language) {
    throw CorpusError("unknown language '" + std::string(pl) + "' (not in the configured language list)");
  }
}

void LiteralCounts::merge(const LiteralCounts& other) {
  for (const auto& [k, v] : other.strings) strings[k] += v;
  for (const auto& [k, v] : other.numbers) numbers[k] += v;
}

namespace {

std::vector<LiteralEntry> top_entries(const std::map<std::string, std::uint64_t>& counts, std::size_t cap) {
  std::vector<LiteralEntry> all;
  all.reserve(counts.size());
  for (const auto& [value, count] : counts) all.push_back({value, count});
  std::stable_sort(all.begin(), all.end(), [](const LiteralEntry& a, const LiteralEntry& b) {
    return a.count > b.count || (a.count == b.count && a.value < b.value);
  });
  if (all.size() > cap) all.resize(cap);
  return all;
}

}  // namespace

LiteralTable LiteralTable::from_counts(const LiteralCounts& counts, std::size_t string_cap, std::size_t number_cap) {
  LiteralTable t;
  t.strings_ = top_entries(counts.strings, string_cap);
  t.numbers_ = top_entries(counts.numbers, number_cap);
  t.reindex();
  return t;
}

void LiteralTable::reindex() {
  string_index_.clear();
  number_index_.clear();
  for (std::size_t i = 0; i < strings_.size(); ++i) string_index_.emplace(strings_[i].value, i);
  for (std::size_t i = 0; i < numbers_.size(); ++i) number_index_.emplace(numbers_[i].value, i);
}

bool LiteralTable::has_string(std::string_view v) const { return string_index_.contains(std::string(v)); }
bool LiteralTable::has_number(std::string_view v) const { return number_index_.contains(std::string(v)); }

std::vector<std::string> LiteralTable::special_tokens() const {
  std::vector<std::string> out;
  for (const auto& e : strings_) out.push_back(tokens::string_literal(e.value));
  for (const auto& e : numbers_) out.push_back(tokens::number_literal(e.value));
  return out;
}

nlohmann::json LiteralTable::to_json() const {
  auto entries = [](const std::vector<LiteralEntry>& list) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : list) arr.push_back({{"value", e.value}, {"count", e.count}});
    return arr;
  };
  return {{"strings", entries(strings_)}, {"numbers", entries(numbers_)}};
}

LiteralTable LiteralTable::from_json(const nlohmann::json& j) {
  LiteralTable t;
  for (const auto& e : j.at("strings")) t.strings_.push_back({e.at("value"), e.at("count")});
  for (const auto& e : j.at("numbers")) t.numbers_.push_back({e.at("value"), e.at("count")});
  t.reindex();
  return t;
}

LiteralCounts count_literals(const RawDoc& doc) {
  LiteralCounts counts;
  for (const auto& lx : lex(doc.code, doc.pl)) {
    if (lx.kind == LexKind::string) ++counts.strings[lx.text];
    if (lx.kind == LexKind::number) ++counts.numbers[lx.text];
  }
  return counts;
}

LiteralTable build_literal_table(std::span<const RawDoc> train_docs, std::size_t string_cap, std::size_t number_cap) {
  if (train_docs.empty()) throw CorpusError("literal table needs at least one training document");
  LiteralCounts total;
  for (const auto& d : train_docs) total.merge(count_literals(d));
  return LiteralTable::from_counts(total, string_cap, number_cap);
}

Normalizer::Normalizer(CorpusOptions options, LiteralTable table)
    : options_(std::move(options)), table_(std::move(table)) {
  for (const auto& p : options_.entity_patterns) entities_.emplace_back(p);
}

std::vector<std::string> Normalizer::normalize_body(std::string_view code, std::string_view pl) const {
  options_.require_language(pl);
  const bool eol = pl == "python";
  std::vector<std::string> out;
  for (auto& lx : lex(code, pl)) {
    switch (lx.kind) {
      case LexKind::newline:
        // Blank lines collapse; nothing precedes the first statement.
        if (eol && !out.empty() && out.back() != tokens::kEol) out.emplace_back(tokens::kEol);
        break;
      case LexKind::string: {
        const bool entity = std::any_of(entities_.begin(), entities_.end(),
                                        [&](const std::regex& r) { return std::regex_search(lx.text, r); });
        out.push_back(!entity && table_.has_string(lx.text) ? tokens::string_literal(lx.text)
                                                             : std::string(tokens::kStrLit));
        break;
      }
      case LexKind::number:
        out.push_back(table_.has_number(lx.text) ? tokens::number_literal(lx.text) : std::string(tokens::kNumLit));
        break;
      default:
        out.push_back(std::move(lx.text));
    }
  }
  return out;
}

std::vector<std::string> Normalizer::frame(std::string_view tag_language, std::vector<std::string> body) const {
  std::vector<std::string> out;
  out.reserve(body.size() + 3);
  if (options_.prepend_language_id) out.push_back(tokens::language_tag(tag_language));
  out.emplace_back(tokens::kBos);
  for (auto& t : body) out.push_back(std::move(t));
  out.emplace_back(tokens::kEos);
  return out;
}

std::vector<std::string> Normalizer::normalize(std::string_view code, std::string_view pl) const {
  auto body = normalize_body(code, pl);
  if (body.empty()) throw CorpusError("empty document: no tokens after lexing");
  return frame(pl, std::move(body));
}

std::vector<std::vector<std::string>> Normalizer::samples(const RawDoc& doc) const {
  auto code = normalize(doc.code, doc.pl);
  if (!options_.bidirectional_pairs || doc.docstring.empty()) return {std::move(code)};
  auto nl_body = normalize_body(doc.docstring, options_.natural_language);
  if (nl_body.empty()) return {std::move(code)};
  auto nl = frame(options_.natural_language, nl_body);
  std::vector<std::string> nl_to_code = nl;
  nl_to_code.insert(nl_to_code.end(), code.begin(), code.end());
  std::vector<std::string> code_to_nl = code;
  code_to_nl.insert(code_to_nl.end(), nl.begin(), nl.end());
  return {std::move(nl_to_code), std::move(code_to_nl)};
}

std::vector<std::string> Normalizer::special_tokens() const {
  std::vector<std::string> out{std::string(tokens::kPad),    std::string(tokens::kUnk),
                               std::string(tokens::kBos),    std::string(tokens::kEos),
                               std::string(tokens::kEol),    std::string(tokens::kStrLit),
                               std::string(tokens::kNumLit)};
  for (const auto& pl : options_.languages) out.push_back(tokens::language_tag(pl));
  out.push_back(tokens::language_tag(options_.natural_language));
  for (auto& t : table_.special_tokens()) out.push_back(std::move(t));
  return out;
}

}  // namespace polyglot
