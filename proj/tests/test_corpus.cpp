// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "polyglot/corpus.hpp"
#include "polyglot/synthetic.hpp"

using namespace polyglot;

namespace {

using Tokens = std::vector<std::string>;

Normalizer plain_normalizer(LiteralTable table = {}) { return Normalizer(CorpusOptions{}, std::move(table)); }

LiteralTable table_with_strings(std::map<std::string, std::uint64_t> strings, std::size_t cap = 200) {
  LiteralCounts c;
  c.strings = std::move(strings);
  return LiteralTable::from_counts(c, cap, 30);
}

std::vector<RawDoc> numbered_docs(const std::string& pl, std::size_t n) {
  std::vector<RawDoc> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({pl, "x = " + std::to_string(i) + "\n", ""});
  return out;
}

}  // namespace

TEST_CASE("python newlines become <EOL>, collapsed and never leading") {
  const auto norm = plain_normalizer();
  const auto out = norm.normalize("\n\nx = 1\n\n\ny = 2\n", "python");
  CHECK(out == Tokens{"<python>", "<s>", "x", "=", "<NUM_LIT>", "<EOL>", "y", "=", "<NUM_LIT>", "<EOL>", "</s>"});
}

TEST_CASE("newlines vanish outside python") {
  const auto norm = plain_normalizer();
  CHECK(norm.normalize("a\nb\n", "go") == Tokens{"<go>", "<s>", "a", "b", "</s>"});
}

TEST_CASE("frequent string literals keep their value, rare ones collapse") {
  const auto norm = plain_normalizer(table_with_strings({{"utf-8", 50}}));
  const auto out = norm.normalize("s.decode('utf-8')\nt = \"rare\"\n", "python");
  CHECK(std::count(out.begin(), out.end(), "<STR_LIT:utf-8>") == 1);
  CHECK(std::count(out.begin(), out.end(), "<STR_LIT>") == 1);
  CHECK(std::find(out.begin(), out.end(), "rare") == out.end());
}

TEST_CASE("entity patterns force the generic string token") {
  CorpusOptions opt;
  opt.entity_patterns = {"@"};
  const Normalizer norm(opt, table_with_strings({{"a@b.c", 9}}));
  const auto out = norm.normalize("x = 'a@b.c'", "go");
  CHECK(out == Tokens{"<go>", "<s>", "x", "=", "<STR_LIT>", "</s>"});
}

TEST_CASE("comments are dropped per language") {
  const auto norm = plain_normalizer();
  CHECK(norm.normalize("a # note\n", "python") == Tokens{"<python>", "<s>", "a", "<EOL>", "</s>"});
  CHECK(norm.normalize("a // note\nb /* x\ny */ c", "java") == Tokens{"<java>", "<s>", "a", "b", "c", "</s>"});
  // '#' is not a comment in javascript.
  CHECK(norm.normalize("a # b", "javascript") == Tokens{"<javascript>", "<s>", "a", "#", "b", "</s>"});
}

TEST_CASE("empty or comment-only documents are rejected") {
  const auto norm = plain_normalizer();
  CHECK_THROWS_AS((void)norm.normalize("", "go"), CorpusError);
  CHECK_THROWS_AS((void)norm.normalize("# only\n", "python"), CorpusError);
  CHECK_THROWS_AS((void)norm.normalize("x", "cobol"), CorpusError);
}

TEST_CASE("literal table honours caps and breaks ties lexicographically") {
  LiteralCounts c;
  c.strings = {{"b", 5}, {"a", 5}, {"c", 9}, {"d", 1}};
  c.numbers = {{"0", 3}, {"1", 3}};
  const auto t = LiteralTable::from_counts(c, 2, 1);
  REQUIRE(t.strings().size() == 2);
  CHECK(t.strings()[0].value == "c");
  CHECK(t.strings()[1].value == "a");
  REQUIRE(t.numbers().size() == 1);
  CHECK(t.numbers()[0].value == "0");
  CHECK(LiteralTable::from_json(t.to_json()).strings() == t.strings());
}

TEST_CASE("literal counts merge in any order") {
  const RawDoc a{"go", "f(\"x\", 1, 1)", ""}, b{"go", "g(\"y\", \"x\", 2)", ""};
  auto ab = count_literals(a);
  ab.merge(count_literals(b));
  auto ba = count_literals(b);
  ba.merge(count_literals(a));
  CHECK(ab.strings == ba.strings);
  CHECK(ab.numbers == ba.numbers);
  CHECK(ab.strings.at("x") == 2);
  CHECK(ab.numbers.at("1") == 2);
}

TEST_CASE("BPE merges the most frequent pair first") {
  const std::vector<Tokens> docs{{"aaab", "aaab"}};
  const Tokens specials{"<pad>", "<unk>"};
  // Base: specials + word-start marker, a, b.
  const auto zero = train_bpe(docs, 5, specials);
  CHECK(zero.vocab.size() == 5);
  CHECK(zero.vocab.merges().empty());
  const auto one = train_bpe(docs, 6, specials);
  REQUIRE(one.vocab.merges().size() == 1);
  CHECK(one.vocab.merges()[0] == std::pair<std::string, std::string>{"a", "a"});
  CHECK_THROWS_AS((void)train_bpe(docs, 4, specials), CorpusError);
}

TEST_CASE("BPE stops with a warning when no pairs remain") {
  const std::vector<Tokens> docs{{"ab"}};
  const auto r = train_bpe(docs, 100, {"<pad>", "<unk>"});
  CHECK_FALSE(r.reached_target);
  CHECK_FALSE(r.warning.empty());
  CHECK(r.vocab.size() < 100);
}

TEST_CASE("special tokens are atomic and round-trip through encode/decode") {
  const auto norm = plain_normalizer();
  const std::vector<Tokens> docs{norm.normalize("def f(x):\n  return x + 1\n", "python"),
                                 norm.normalize("func main() { fmt.Println(\"hi\") }", "go")};
  const auto vocab = train_bpe(docs, 60, norm.special_tokens()).vocab;
  CHECK(vocab.special_id("<pad>") == BpeVocab::kPadId);
  const auto eol = vocab.encode_token("<EOL>");
  REQUIRE(eol.size() == 1);
  CHECK(vocab.is_special(eol[0]));
  for (const auto& d : docs) CHECK(vocab.decode(vocab.encode(d)) == d);

  std::size_t unknown = 0;
  const auto ids = vocab.encode_token("zzq", &unknown);
  CHECK(unknown == 3);
  CHECK(std::count(ids.begin(), ids.end(), vocab.unk_id()) == 3);
  CHECK(BpeVocab::from_json(vocab.to_json()).fingerprint() == vocab.fingerprint());
}

TEST_CASE("encoding frames empty bodies and windows long documents") {
  const auto norm = plain_normalizer();
  const auto vocab = train_bpe(std::vector<Tokens>{{"a", "b"}}, 40, norm.special_tokens()).vocab;
  const auto bare = norm.frame("go", {});
  CHECK(vocab.decode(vocab.encode(bare)) == Tokens{"<go>", "<s>", "</s>"});

  NormalizedDoc long_doc{"go", Split::train, norm.frame("go", Tokens(20, "a"))};
  const auto n_ids = vocab.encode(long_doc.tokens).size();
  for (std::size_t s : {1u, 4u, 7u, 64u}) {
    EncodeStats stats;
    const auto windows = encode_document(long_doc, vocab, s, &stats);
    CHECK(windows.size() == (n_ids + s - 1) / s);
    CHECK(stats.windows == windows.size());
    std::vector<std::int32_t> joined;
    for (const auto& w : windows) {
      CHECK(w.tokens.size() <= s);
      joined.insert(joined.end(), w.tokens.begin(), w.tokens.end());
    }
    CHECK(joined == vocab.encode(long_doc.tokens));
  }
  CHECK_THROWS_AS((void)encode_document(long_doc, vocab, 0), CorpusError);
}

TEST_CASE("full split holds out 2% per language for dev and test") {
  const auto docs = numbered_docs("go", 1000);
  const auto s = derive_splits(docs, FullSplit{});
  CHECK(s.train.size() == 960);
  CHECK(s.dev.size() == 20);
  CHECK(s.test.size() == 20);
  std::set<std::string> train, dev, test;
  for (const auto& d : s.train) train.insert(d.code);
  for (const auto& d : s.dev) dev.insert(d.code);
  for (const auto& d : s.test) test.insert(d.code);
  for (const auto& c : dev) CHECK_FALSE(train.contains(c));
  for (const auto& c : test) {
    CHECK_FALSE(train.contains(c));
    CHECK_FALSE(dev.contains(c));
  }
}

TEST_CASE("split derivation ignores input order and duplicates") {
  auto docs = numbered_docs("go", 300);
  const auto more = numbered_docs("ruby", 200);
  docs.insert(docs.end(), more.begin(), more.end());
  auto shuffled = docs;
  std::reverse(shuffled.begin(), shuffled.end());
  shuffled.push_back(docs[3]);
  const auto a = derive_splits(docs, FullSplit{});
  const auto b = derive_splits(shuffled, FullSplit{});
  auto codes = [](const std::vector<RawDoc>& v) {
    std::vector<std::string> out;
    for (const auto& d : v) out.push_back(d.pl + d.code);
    return out;
  };
  CHECK(codes(a.train) == codes(b.train));
  CHECK(codes(a.dev) == codes(b.dev));
  CHECK(codes(a.test) == codes(b.test));
}

TEST_CASE("low-resource and cross-domain modes only change training data") {
  auto docs = numbered_docs("python", 500);
  const auto ruby = numbered_docs("ruby", 100);
  const auto go = numbered_docs("go", 200);
  docs.insert(docs.end(), ruby.begin(), ruby.end());
  docs.insert(docs.end(), go.begin(), go.end());
  const auto full = derive_splits(docs, FullSplit{});

  const auto low = derive_splits(docs, LowResourceSplit{"python", "ruby"});
  const auto counts = count_by_language(low.train);
  CHECK(counts.at("python") == counts.at("ruby"));
  CHECK(counts.at("ruby") == 96);
  CHECK(counts.at("go") == 192);
  CHECK(low.dev.size() == full.dev.size());
  CHECK(low.test.size() == full.test.size());
  CHECK_THROWS_AS((void)derive_splits(docs, LowResourceSplit{"ruby", "python"}), CorpusError);
  CHECK_THROWS_AS((void)derive_splits(docs, LowResourceSplit{"php", "ruby"}), CorpusError);

  const auto cross = derive_splits(docs, CrossDomainSplit{"go"});
  CHECK_FALSE(count_by_language(cross.train).contains("go"));
  CHECK(count_by_language(cross.test).at("go") == 4);

  CHECK(std::holds_alternative<FullSplit>(parse_split_mode("full")));
  const auto parsed = std::get<LowResourceSplit>(parse_split_mode("low_resource:python:ruby"));
  CHECK(parsed.target_pl == "python");
  CHECK(parsed.reference_pl == "ruby");
  CHECK(std::get<CrossDomainSplit>(parse_split_mode("cross_domain:go")).excluded_pl == "go");
  CHECK_THROWS_AS((void)parse_split_mode("random"), CorpusError);
}

TEST_CASE("bidirectional pairs emit both directions") {
  CorpusOptions opt;
  opt.bidirectional_pairs = true;
  const Normalizer norm(opt, {});
  const auto s = norm.samples({"go", "f()", "calls f"});
  REQUIRE(s.size() == 2);
  CHECK(s[0] == Tokens{"<en>", "<s>", "calls", "f", "</s>", "<go>", "<s>", "f", "(", ")", "</s>"});
  CHECK(s[1] == Tokens{"<go>", "<s>", "f", "(", ")", "</s>", "<en>", "<s>", "calls", "f", "</s>"});
  CHECK(norm.samples({"go", "f()", ""}).size() == 1);
}

TEST_CASE("synthetic corpus: <EOL> appears only in python") {
  testing::PipelineOptions opt;
  opt.synthetic.docs_per_language = 40;
  const auto raw = generate_synthetic(opt.synthetic);
  const auto norm = plain_normalizer(build_literal_table(raw.docs));
  std::size_t python_eol = 0;
  for (const auto& d : raw.docs) {
    const auto toks = norm.normalize(d.code, d.pl);
    const auto n = static_cast<std::size_t>(std::count(toks.begin(), toks.end(), "<EOL>"));
    if (d.pl == "python") {
      python_eol += n;
    } else {
      CHECK(n == 0);
    }
  }
  CHECK(python_eol > 0);
}

TEST_CASE("synthetic generation is deterministic in its seeds") {
  SyntheticOptions opt;
  opt.docs_per_language = 20;
  const auto a = generate_synthetic(opt);
  const auto b = generate_synthetic(opt);
  REQUIRE(a.docs.size() == b.docs.size());
  for (std::size_t i = 0; i < a.docs.size(); ++i) CHECK(a.docs[i].code == b.docs[i].code);
  opt.sample_seed += 1;
  const auto c = generate_synthetic(opt);
  std::size_t same = 0;
  for (std::size_t i = 0; i < std::min(a.docs.size(), c.docs.size()); ++i) same += a.docs[i].code == c.docs[i].code;
  CHECK(same < a.docs.size());
}

TEST_CASE("jsonl files round-trip and report line numbers") {
  testing::TempDir dir("corpus");
  const std::vector<CorpusDoc> docs{{"go", Split::train, {1, 2, 3}}, {"ruby", Split::dev, {4}}};
  write_corpus_jsonl(dir.path() / "c.jsonl", docs);
  CHECK(read_corpus_jsonl(dir.path() / "c.jsonl") == docs);
  {
    std::ofstream bad(dir.path() / "bad.jsonl");
    bad << "{\"pl\":\"go\",\"code\":\"x\"}\n{\"pl\":\"go\"}\n";
  }
  try {
    (void)read_raw_jsonl(dir.path() / "bad.jsonl");
    FAIL("expected an error");
  } catch (const CorpusError& e) {
    CHECK(std::string(e.what()).find("bad.jsonl:2") != std::string::npos);
  }
  CHECK_THROWS_AS((void)read_raw_jsonl(dir.path() / "missing.jsonl"), CorpusError);
}
