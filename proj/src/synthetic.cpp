// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "polyglot/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <sstream>

#include "polyglot/rng.hpp"

namespace polyglot {
namespace {

constexpr std::array<std::string_view, 6> kDefaultNames{"go", "java", "javascript", "php", "python", "ruby"};
constexpr std::array<std::string_view, 14> kOperators{"=", "+", "-", "*", "/", "<", ">", "==", "!=", "+=", ".", ":", "&&", "||"};
constexpr std::array<std::string_view, 12> kSharedStrings{"utf-8", "id", "name", "value", "data", "key",
                                                          "error", "type", "path", "url", "ok", "text"};
constexpr std::size_t kNumberRange = 32;

enum class SlotKind { keyword, identifier, expression, call, op, string, number };

struct Slot {
  SlotKind kind;
  std::size_t index = 0;  // keyword index or operator index
};

struct Template {
  std::vector<Slot> slots;
  std::array<std::size_t, 3> successors{};
};

struct SharedFunction {
  std::string name;
  // Each argument is either a fixed literal (rendered verbatim) or empty for "any identifier".
  std::vector<std::string> args;
};

struct Language {
  std::string name;
  std::string terminator;
  std::vector<std::string> keywords;
  std::vector<std::string> identifiers;
  std::vector<Template> templates;
};

class WordMaker {
 public:
  explicit WordMaker(CounterRng rng) : rng_(rng) {}
  std::string make(std::size_t syllables, std::string_view prefix = "") {
    static constexpr std::string_view consonants = "bcdfghjklmnprstvwz";
    static constexpr std::string_view vowels = "aeiou";
    for (;;) {
      std::string w(prefix);
      for (std::size_t s = 0; s < syllables; ++s) {
        w += consonants[rng_.below(consonants.size())];
        w += vowels[rng_.below(vowels.size())];
      }
      if (used_.insert(w).second) return w;
    }
  }

 private:
  CounterRng rng_;
  std::set<std::string> used_;
};

std::size_t zipf(CounterRng& rng, std::size_t n) {
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) total += 1.0 / static_cast<double>(k + 1);
  double u = rng.uniform() * total;
  for (std::size_t k = 0; k < n; ++k) {
    u -= 1.0 / static_cast<double>(k + 1);
    if (u <= 0.0) return k;
  }
  return n - 1;
}

std::string quote(std::string_view s) { return "\"" + std::string(s) + "\""; }

struct Grammar {
  std::vector<Language> languages;
  std::vector<SharedFunction> functions;
};

Grammar build_grammar(const SyntheticOptions& o) {
  Grammar g;
  CounterRng root = CounterRng(o.grammar_seed).named("synthetic-grammar");
  WordMaker words(root.named("words"));
  CounterRng frng = root.named("functions");
  for (std::size_t f = 0; f < o.shared_functions; ++f) {
    SharedFunction fn{words.make(2), {}};
    const std::size_t arity = 1 + frng.below(3);
    for (std::size_t a = 0; a < arity; ++a) {
      const auto pick = frng.below(3);
      if (pick == 0) {
        fn.args.push_back(std::to_string(frng.below(kNumberRange)));
      } else if (pick == 1) {
        fn.args.push_back(quote(kSharedStrings[frng.below(kSharedStrings.size())]));
      } else {
        fn.args.emplace_back();
      }
    }
    g.functions.push_back(std::move(fn));
  }

  const auto names = synthetic_language_names(o.num_languages);
  for (std::size_t li = 0; li < names.size(); ++li) {
    CounterRng rng = root.substream(li);
    Language lang;
    lang.name = names[li];
    lang.terminator = (lang.name == "python" || lang.name == "ruby" || lang.name == "go") ? "" : ";";
    const std::string ident_prefix = lang.name == "php" ? "$" : "";
    for (std::size_t k = 0; k < o.keywords_per_language; ++k) lang.keywords.push_back(words.make(2 + rng.below(2)));
    for (std::size_t k = 0; k < o.identifiers_per_language; ++k)
      lang.identifiers.push_back(words.make(2, ident_prefix));
    for (std::size_t t = 0; t < o.templates_per_language; ++t) {
      Template tpl;
      tpl.slots.push_back({SlotKind::keyword, rng.below(lang.keywords.size())});
      const std::size_t len = 2 + rng.below(5);
      for (std::size_t s = 0; s < len; ++s) {
        const double u = rng.uniform();
        if (u < 0.30) {
          tpl.slots.push_back({SlotKind::keyword, rng.below(lang.keywords.size())});
        } else if (u < 0.48) {
          tpl.slots.push_back({SlotKind::identifier});
        } else if (u < 0.63) {
          tpl.slots.push_back({SlotKind::expression});
        } else if (u < 0.78) {
          tpl.slots.push_back({SlotKind::call});
        } else if (u < 0.93) {
          tpl.slots.push_back({SlotKind::op, rng.below(kOperators.size())});
        } else if (u < 0.97) {
          tpl.slots.push_back({SlotKind::string});
        } else {
          tpl.slots.push_back({SlotKind::number});
        }
      }
      for (auto& s : tpl.successors) s = rng.below(o.templates_per_language);
      lang.templates.push_back(std::move(tpl));
    }
    g.languages.push_back(std::move(lang));
  }
  return g;
}

void render_call(const Grammar& g, const Language& lang, CounterRng& rng, std::vector<std::string>& out) {
  const auto& fn = g.functions[zipf(rng, g.functions.size())];
  out.push_back(fn.name);
  out.emplace_back("(");
  for (std::size_t a = 0; a < fn.args.size(); ++a) {
    if (a) out.emplace_back(",");
    out.push_back(fn.args[a].empty() ? lang.identifiers[rng.below(lang.identifiers.size())] : fn.args[a]);
  }
  out.emplace_back(")");
}

void render_term(const Grammar& g, const Language& lang, CounterRng& rng, std::vector<std::string>& out) {
  const double u = rng.uniform();
  if (u < 0.45) {
    out.push_back(lang.identifiers[rng.below(lang.identifiers.size())]);
  } else if (u < 0.75) {
    out.push_back(std::to_string(zipf(rng, kNumberRange)));
  } else {
    render_call(g, lang, rng, out);
  }
}

std::string render_document(const Grammar& g, const Language& lang, const SyntheticOptions& o, CounterRng& rng) {
  const std::size_t n_statements = o.min_statements + rng.below(o.max_statements - o.min_statements + 1);
  std::size_t current = rng.below(lang.templates.size());
  std::ostringstream code;
  for (std::size_t s = 0; s < n_statements; ++s) {
    const auto& tpl = lang.templates[current];
    std::vector<std::string> toks;
    for (const auto& slot : tpl.slots) {
      switch (slot.kind) {
        case SlotKind::keyword:
          toks.push_back(lang.keywords[slot.index]);
          break;
        case SlotKind::identifier:
          toks.push_back(lang.identifiers[rng.below(lang.identifiers.size())]);
          break;
        case SlotKind::expression:
          render_term(g, lang, rng, toks);
          if (rng.uniform() < 0.5) {
            toks.emplace_back(kOperators[1 + rng.below(4)]);
            render_term(g, lang, rng, toks);
          }
          break;
        case SlotKind::call:
          render_call(g, lang, rng, toks);
          break;
        case SlotKind::op:
          toks.emplace_back(kOperators[slot.index]);
          break;
        case SlotKind::string:
          toks.push_back(quote(kSharedStrings[zipf(rng, kSharedStrings.size())]));
          break;
        case SlotKind::number:
          toks.push_back(std::to_string(zipf(rng, kNumberRange)));
          break;
      }
    }
    for (std::size_t i = 0; i < toks.size(); ++i) code << (i ? " " : "") << toks[i];
    code << lang.terminator << '\n';
    const double u = rng.uniform();
    current = tpl.successors[u < 0.6 ? 0 : (u < 0.85 ? 1 : 2)];
  }
  return code.str();
}

}  // namespace

nlohmann::json SyntheticOptions::to_json() const {
  return {{"num_languages", num_languages},
          {"docs_per_language", docs_per_language},
          {"low_resource", low_resource},
          {"grammar_seed", grammar_seed},
          {"sample_seed", sample_seed},
          {"keywords_per_language", keywords_per_language},
          {"identifiers_per_language", identifiers_per_language},
          {"templates_per_language", templates_per_language},
          {"shared_functions", shared_functions},
          {"min_statements", min_statements},
          {"max_statements", max_statements}};
}

std::vector<std::string> synthetic_language_names(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(i < kDefaultNames.size() ? std::string(kDefaultNames[i]) : "lang" + std::to_string(i + 1));
  }
  return out;
}

SyntheticCorpus generate_synthetic(const SyntheticOptions& o) {
  if (o.num_languages == 0 || o.docs_per_language == 0) throw CorpusError("synthetic corpus needs languages and documents");
  if (o.min_statements == 0 || o.max_statements < o.min_statements) throw CorpusError("invalid statement range");
  const auto names = synthetic_language_names(o.num_languages);
  for (const auto& [pl, frac] : o.low_resource) {
    if (std::find(names.begin(), names.end(), pl) == names.end()) {
      throw CorpusError("low-resource language '" + pl + "' is not among the generated languages");
    }
    if (!(frac > 0.0 && frac <= 1.0)) throw CorpusError("low-resource fraction for '" + pl + "' must be in (0, 1]");
  }
  const Grammar g = build_grammar(o);
  SyntheticCorpus out;
  const CounterRng sampler = CounterRng(o.sample_seed).named("synthetic-sample");
  nlohmann::json counts = nlohmann::json::object();
  for (std::size_t li = 0; li < g.languages.size(); ++li) {
    const auto& lang = g.languages[li];
    std::size_t n = o.docs_per_language;
    if (auto it = o.low_resource.find(lang.name); it != o.low_resource.end()) {
      n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(it->second * static_cast<double>(n))));
    }
    CounterRng rng = sampler.substream(li);
    for (std::size_t d = 0; d < n; ++d) out.docs.push_back({lang.name, render_document(g, lang, o, rng), ""});
    counts[lang.name] = n;
  }
  out.header = {{"generator", "polyglot-synthetic-v1"}, {"options", o.to_json()}, {"documents", counts}};
  return out;
}

}  // namespace polyglot
