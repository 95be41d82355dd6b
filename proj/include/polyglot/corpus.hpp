// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Corpus construction: lexing raw code, literal normalization, framing,
// byte-pair vocabulary training, id encoding with windowing, and the
// full / low-resource / cross-domain split derivations.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

namespace polyglot {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace tokens {
inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kUnk = "<unk>";
inline constexpr std::string_view kBos = "<s>";
inline constexpr std::string_view kEos = "</s>";
inline constexpr std::string_view kEol = "<EOL>";
inline constexpr std::string_view kStrLit = "<STR_LIT>";
inline constexpr std::string_view kNumLit = "<NUM_LIT>";

std::string language_tag(std::string_view pl);  // "python" -> "<python>"
std::string string_literal(std::string_view value);  // "<STR_LIT:value>"
std::string number_literal(std::string_view value);  // "<NUM_LIT:value>"
}  // namespace tokens

struct CorpusOptions {
  std::vector<std::string> languages{"go", "java", "javascript", "php", "python", "ruby"};
  std::string natural_language = "en";
  bool prepend_language_id = true;
  /// Emit docstring->code and code->docstring samples for documents with a docstring.
  bool bidirectional_pairs = false;
  std::size_t string_cap = 200;
  std::size_t number_cap = 30;
  std::size_t max_seq = 1024;
  /// String literals matching any of these are always replaced by <STR_LIT>.
  std::vector<std::string> entity_patterns;

  void require_language(std::string_view pl) const;
};

struct RawDoc {
  std::string pl;
  std::string code;
  std::string docstring;
};

// ---- lexing ------------------------------------------------------------------

enum class LexKind { identifier, number, string, op, newline };

struct Lexeme {
  LexKind kind;
  std::string text;  // string literals: contents without the quotes
  bool operator==(const Lexeme&) const = default;
};

/// Language-agnostic lexer with per-language comment syntax.
std::vector<Lexeme> lex(std::string_view code, std::string_view pl);

// ---- literal table -----------------------------------------------------------

struct LiteralEntry {
  std::string value;
  std::uint64_t count = 0;
  bool operator==(const LiteralEntry&) const = default;
};

struct LiteralCounts {
  std::map<std::string, std::uint64_t> strings;
  std::map<std::string, std::uint64_t> numbers;
  /// Associative and commutative, so per-document counts can be merged in any order.
  void merge(const LiteralCounts& other);
};

class LiteralTable {
 public:
  LiteralTable() = default;
  static LiteralTable from_counts(const LiteralCounts& counts, std::size_t string_cap, std::size_t number_cap);

  [[nodiscard]] const std::vector<LiteralEntry>& strings() const { return strings_; }
  [[nodiscard]] const std::vector<LiteralEntry>& numbers() const { return numbers_; }
  [[nodiscard]] bool has_string(std::string_view v) const;
  [[nodiscard]] bool has_number(std::string_view v) const;
  /// Special tokens for every preserved literal, strings first.
  [[nodiscard]] std::vector<std::string> special_tokens() const;

  [[nodiscard]] nlohmann::json to_json() const;
  static LiteralTable from_json(const nlohmann::json& j);

 private:
  std::vector<LiteralEntry> strings_;
  std::vector<LiteralEntry> numbers_;
  std::unordered_map<std::string, std::size_t> string_index_;
  std::unordered_map<std::string, std::size_t> number_index_;
  void reindex();
};

LiteralCounts count_literals(const RawDoc& doc);
/// Most frequent literals over the given (training) documents; frequency
/// ties resolve to the lexicographically smaller value.
LiteralTable build_literal_table(std::span<const RawDoc> train_docs, std::size_t string_cap = 200,
                                 std::size_t number_cap = 30);

// ---- normalization -----------------------------------------------------------

class Normalizer {
 public:
  Normalizer(CorpusOptions options, LiteralTable table);

  /// Framed normalized token strings: [<pl>] <s> body... </s>.
  [[nodiscard]] std::vector<std::string> normalize(std::string_view code, std::string_view pl) const;
  /// Body tokens only (rules 1, 3 and 4).
  [[nodiscard]] std::vector<std::string> normalize_body(std::string_view code, std::string_view pl) const;
  [[nodiscard]] std::vector<std::string> frame(std::string_view tag_language, std::vector<std::string> body) const;
  /// One sample per document, or two (both directions) for documents with a
  /// docstring when bidirectional pairs are enabled.
  [[nodiscard]] std::vector<std::vector<std::string>> samples(const RawDoc& doc) const;

  [[nodiscard]] const CorpusOptions& options() const { return options_; }
  [[nodiscard]] const LiteralTable& table() const { return table_; }
  /// Every special token this normalizer can emit.
  [[nodiscard]] std::vector<std::string> special_tokens() const;

 private:
  CorpusOptions options_;
  LiteralTable table_;
  std::vector<std::regex> entities_;
};

// ---- byte-pair vocabulary ----------------------------------------------------------

class BpeVocab {
 public:
  static constexpr std::int32_t kPadId = 0;
  /// Marks the first piece of every token string.
  static constexpr std::string_view kWordStart = " ";

  BpeVocab() = default;
  /// specials[0] must be "<pad>"; "<unk>" must be present.
  BpeVocab(std::vector<std::string> specials, std::vector<std::string> base_symbols,
           std::vector<std::pair<std::string, std::string>> merges);

  [[nodiscard]] std::size_t size() const { return pieces_.size(); }
  [[nodiscard]] std::optional<std::int32_t> special_id(std::string_view token) const;
  [[nodiscard]] std::int32_t require_special(std::string_view token) const;
  [[nodiscard]] bool is_special(std::int32_t id) const;
  [[nodiscard]] std::int32_t unk_id() const { return unk_id_; }
  [[nodiscard]] const std::string& piece(std::int32_t id) const;
  /// The piece as it would print inside a token (word-start marker dropped).
  [[nodiscard]] std::string render(std::int32_t id) const;

  /// Ids for one token string; unknown base symbols map to <unk> and are counted.
  std::vector<std::int32_t> encode_token(std::string_view token, std::size_t* unknown = nullptr) const;
  std::vector<std::int32_t> encode(std::span<const std::string> tokens, std::size_t* unknown = nullptr) const;
  [[nodiscard]] std::vector<std::string> decode(std::span<const std::int32_t> ids) const;

  [[nodiscard]] const std::vector<std::string>& specials() const { return specials_; }
  [[nodiscard]] const std::vector<std::string>& base_symbols() const { return base_; }
  [[nodiscard]] const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  /// Stable fingerprint used to match checkpoints to corpora.
  [[nodiscard]] std::uint64_t fingerprint() const;

  [[nodiscard]] nlohmann::json to_json() const;
  static BpeVocab from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> specials_;
  std::vector<std::string> base_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, std::int32_t> piece_ids_;
  std::unordered_map<std::string, std::int32_t> special_ids_;
  std::map<std::pair<std::int32_t, std::int32_t>, std::pair<std::size_t, std::int32_t>> merge_rank_;
  std::int32_t unk_id_ = 1;
  std::size_t n_specials_ = 0;
};

struct BpeTrainResult {
  BpeVocab vocab;
  bool reached_target = true;
  std::string warning;
};

/// UTF-8 code points of a token string.
std::vector<std::string> utf8_symbols(std::string_view text);

/// Greedy most-frequent-pair merges (ties: lexicographically smallest pair)
/// over the non-special token strings of `docs` until the vocabulary has
/// `target_vocab_size` entries or no pair remains.
BpeTrainResult train_bpe(std::span<const std::vector<std::string>> docs, std::size_t target_vocab_size,
                         std::vector<std::string> specials);

// ---- encoded corpus ------------------------------------------------------------------

enum class Split { train, dev, test };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

struct NormalizedDoc {
  std::string pl;
  Split split = Split::train;
  std::vector<std::string> tokens;
};

struct CorpusDoc {
  std::string pl;
  Split split = Split::train;
  std::vector<std::int32_t> tokens;
  bool operator==(const CorpusDoc&) const = default;
};

struct EncodeStats {
  std::size_t documents = 0;
  std::size_t windows = 0;
  std::size_t unknown_symbols = 0;
};

/// Maps to ids and cuts sequences longer than max_seq into ceil(len/max_seq)
/// non-overlapping windows.
std::vector<CorpusDoc> encode_document(const NormalizedDoc& doc, const BpeVocab& vocab, std::size_t max_seq,
                                       EncodeStats* stats = nullptr);
std::vector<CorpusDoc> encode_corpus(std::span<const NormalizedDoc> docs, const BpeVocab& vocab,
                                     std::size_t max_seq, EncodeStats* stats = nullptr);

// ---- split derivation -------------------------------------------------------------------

struct FullSplit {};
struct LowResourceSplit {
  std::string target_pl;
  std::string reference_pl;
};
struct CrossDomainSplit {
  std::string excluded_pl;
};
using SplitMode = std::variant<FullSplit, LowResourceSplit, CrossDomainSplit>;

struct SplitCorpus {
  std::vector<RawDoc> train;
  std::vector<RawDoc> dev;
  std::vector<RawDoc> test;
};

std::uint64_t content_hash(const RawDoc& doc);

/// Per language: deduplicate by content, order by content hash, hold out
/// round(2%) for dev and round(2%) for test, train on the rest. The mode then
/// adjusts the training split only.
SplitCorpus derive_splits(std::span<const RawDoc> docs, const SplitMode& mode);
SplitMode parse_split_mode(std::string_view text);

std::map<std::string, std::size_t> count_by_language(std::span<const RawDoc> docs);
std::map<std::string, std::size_t> count_by_language(std::span<const CorpusDoc> docs);

// ---- files ---------------------------------------------------------------------------------

std::vector<RawDoc> read_raw_jsonl(const std::filesystem::path& path);
void write_raw_jsonl(const std::filesystem::path& path, std::span<const RawDoc> docs,
                     const nlohmann::json* header = nullptr);
std::vector<NormalizedDoc> read_normalized_jsonl(const std::filesystem::path& path);
void write_normalized_jsonl(const std::filesystem::path& path, std::span<const NormalizedDoc> docs);
std::vector<CorpusDoc> read_corpus_jsonl(const std::filesystem::path& path);
void write_corpus_jsonl(const std::filesystem::path& path, std::span<const CorpusDoc> docs);
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace polyglot
