// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <set>

#include "polyglot/corpus.hpp"
#include "polyglot/rng.hpp"

namespace polyglot {

std::vector<std::string> utf8_symbols(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (c >= 0xf0) {
      len = 4;
    } else if (c >= 0xe0) {
      len = 3;
    } else if (c >= 0xc0) {
      len = 2;
    }
    len = std::min(len, text.size() - i);
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

BpeVocab::BpeVocab(std::vector<std::string> specials, std::vector<std::string> base_symbols,
                   std::vector<std::pair<std::string, std::string>> merges) {
  if (specials.empty() || specials.front() != tokens::kPad) {
    throw CorpusError("vocabulary specials must start with <pad> (id 0)");
  }
  for (auto& s : specials) {
    if (special_ids_.contains(s)) continue;
    special_ids_.emplace(s, static_cast<std::int32_t>(pieces_.size()));
    specials_.push_back(s);
    pieces_.push_back(s);
  }
  n_specials_ = specials_.size();
  const auto unk = special_ids_.find(std::string(tokens::kUnk));
  if (unk == special_ids_.end()) throw CorpusError("vocabulary specials must include <unk>");
  unk_id_ = unk->second;
  for (auto& b : base_symbols) {
    if (piece_ids_.contains(b)) throw CorpusError("duplicate base symbol '" + b + "'");
    piece_ids_.emplace(b, static_cast<std::int32_t>(pieces_.size()));
    base_.push_back(b);
    pieces_.push_back(b);
  }
  for (std::size_t rank = 0; rank < merges.size(); ++rank) {
    const auto& [left, right] = merges[rank];
    const auto l = piece_ids_.find(left);
    const auto r = piece_ids_.find(right);
    if (l == piece_ids_.end() || r == piece_ids_.end()) {
      throw CorpusError("merge (" + left + ", " + right + ") references an unknown piece");
    }
    const std::string merged = left + right;
    auto [it, inserted] = piece_ids_.emplace(merged, static_cast<std::int32_t>(pieces_.size()));
    if (inserted) pieces_.push_back(merged);
    merge_rank_.emplace(std::make_pair(l->second, r->second), std::make_pair(rank, it->second));
    merges_.push_back(merges[rank]);
  }
}

std::optional<std::int32_t> BpeVocab::special_id(std::string_view token) const {
  const auto it = special_ids_.find(std::string(token));
  if (it == special_ids_.end()) return std::nullopt;
  return it->second;
}

std::int32_t BpeVocab::require_special(std::string_view token) const {
  auto id = special_id(token);
  if (!id) throw CorpusError("vocabulary lacks special token " + std::string(token));
  return *id;
}

bool BpeVocab::is_special(std::int32_t id) const { return id >= 0 && static_cast<std::size_t>(id) < n_specials_; }

const std::string& BpeVocab::piece(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
    throw CorpusError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(pieces_.size()));
  }
  return pieces_[static_cast<std::size_t>(id)];
}

std::string BpeVocab::render(std::int32_t id) const {
  const auto& p = piece(id);
  if (!is_special(id) && p.starts_with(kWordStart)) return p.substr(kWordStart.size());
  return p;
}

std::vector<std::int32_t> BpeVocab::encode_token(std::string_view token, std::size_t* unknown) const {
  if (auto sid = special_id(token)) return {*sid};
  std::vector<std::int32_t> ids;
  ids.push_back(piece_ids_.at(std::string(kWordStart)));
  for (const auto& sym : utf8_symbols(token)) {
    const auto it = piece_ids_.find(sym);
    if (it == piece_ids_.end()) {
      ids.push_back(unk_id_);
      if (unknown) ++*unknown;
    } else {
      ids.push_back(it->second);
    }
  }
  // Repeatedly apply the lowest-ranked merge present.
  while (ids.size() > 1) {
    std::size_t best_rank = merge_rank_.size();
    std::int32_t best_left = -1, best_right = -1, best_out = -1;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      const auto it = merge_rank_.find({ids[i], ids[i + 1]});
      if (it != merge_rank_.end() && it->second.first < best_rank) {
        best_rank = it->second.first;
        best_left = ids[i];
        best_right = ids[i + 1];
        best_out = it->second.second;
      }
    }
    if (best_out < 0) break;
    std::vector<std::int32_t> next;
    next.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i + 1 < ids.size() && ids[i] == best_left && ids[i + 1] == best_right) {
        next.push_back(best_out);
        ++i;
      } else {
        next.push_back(ids[i]);
      }
    }
    ids = std::move(next);
  }
  return ids;
}

std::vector<std::int32_t> BpeVocab::encode(std::span<const std::string> tokens, std::size_t* unknown) const {
  std::vector<std::int32_t> out;
  for (const auto& t : tokens) {
    auto ids = encode_token(t, unknown);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::vector<std::string> BpeVocab::decode(std::span<const std::int32_t> ids) const {
  std::vector<std::string> out;
  bool open = false;  // whether out.back() is an ordinary token still being assembled
  for (auto id : ids) {
    const auto& p = piece(id);
    if (is_special(id)) {
      out.push_back(p);
      open = false;
    } else if (p.starts_with(kWordStart)) {
      out.push_back(p.substr(kWordStart.size()));
      open = true;
    } else if (open) {
      out.back() += p;
    } else {
      out.push_back(p);
      open = true;
    }
  }
  return out;
}

std::uint64_t BpeVocab::fingerprint() const { return stable_hash(to_json().dump()); }

nlohmann::json BpeVocab::to_json() const {
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [a, b] : merges_) merges.push_back({a, b});
  return {{"specials", specials_}, {"base_symbols", base_}, {"merges", merges}};
}

BpeVocab BpeVocab::from_json(const nlohmann::json& j) {
  std::vector<std::pair<std::string, std::string>> merges;
  for (const auto& m : j.at("merges")) merges.emplace_back(m.at(0), m.at(1));
  return BpeVocab(j.at("specials").get<std::vector<std::string>>(),
                  j.at("base_symbols").get<std::vector<std::string>>(), std::move(merges));
}

BpeTrainResult train_bpe(std::span<const std::vector<std::string>> docs, std::size_t target_vocab_size,
                         std::vector<std::string> specials) {
  std::set<std::string> special_set(specials.begin(), specials.end());
  std::map<std::string, std::uint64_t> word_freq;
  std::set<std::string> base_set{std::string(BpeVocab::kWordStart)};
  for (const auto& doc : docs) {
    for (const auto& t : doc) {
      if (special_set.contains(t)) continue;
      ++word_freq[t];
    }
  }
  for (const auto& [w, _] : word_freq)
    for (auto& s : utf8_symbols(w)) base_set.insert(std::move(s));

  std::vector<std::string> base(base_set.begin(), base_set.end());
  BpeVocab initial(specials, base, {});
  BpeTrainResult result;
  if (target_vocab_size < initial.size()) {
    throw CorpusError("target vocabulary size " + std::to_string(target_vocab_size) +
                      " is below the base size " + std::to_string(initial.size()));
  }

  // Words as piece strings; merges operate on adjacent equal pairs.
  struct Word {
    std::vector<std::string> symbols;
    std::uint64_t freq;
  };
  std::vector<Word> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) {
    Word word{{std::string(BpeVocab::kWordStart)}, f};
    for (auto& s : utf8_symbols(w)) word.symbols.push_back(std::move(s));
    words.push_back(std::move(word));
  }

  std::set<std::string> pieces(base.begin(), base.end());
  std::vector<std::pair<std::string, std::string>> merges;
  std::size_t vocab_size = initial.size();
  while (vocab_size < target_vocab_size) {
    std::map<std::pair<std::string, std::string>, std::uint64_t> pair_counts;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) pair_counts[{w.symbols[i], w.symbols[i + 1]}] += w.freq;
    if (pair_counts.empty()) {
      result.reached_target = false;
      result.warning = "no mergeable pairs left: vocabulary stops at " + std::to_string(vocab_size) +
                       " of the requested " + std::to_string(target_vocab_size);
      break;
    }
    // std::map iterates in lexicographic order, so the first maximum wins ties.
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [left, right] = best->first;
    const std::string merged = left + right;
    merges.emplace_back(left, right);
    if (pieces.insert(merged).second) ++vocab_size;
    for (auto& w : words) {
      std::vector<std::string> next;
      next.reserve(w.symbols.size());
      for (std::size_t i = 0; i < w.symbols.size(); ++i) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(std::move(w.symbols[i]));
        }
      }
      w.symbols = std::move(next);
    }
  }
  result.vocab = BpeVocab(std::move(specials), std::move(base), std::move(merges));
  return result;
}

}  // namespace polyglot
