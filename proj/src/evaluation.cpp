// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "polyglot/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <boost/math/special_functions/beta.hpp>

namespace polyglot {

std::size_t levenshtein(std::string_view a, std::string_view b) {
  // Two-row dynamic program; row[j] = distance(a[0..i), b[0..j)).
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double edit_similarity(std::string_view a, std::string_view b) {
  const std::size_t longest = std::max(a.size(), b.size());
  if (longest == 0) return 100.0;
  return 100.0 * (1.0 - static_cast<double>(levenshtein(a, b)) / static_cast<double>(longest));
}

namespace {

std::string join(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double edit_similarity(std::span<const std::string> pred, std::span<const std::string> gold) {
  return edit_similarity(join(pred), join(gold));
}

NextTokenPredictor model_predictor(const Model& model) {
  return [&model](const TokenBatch& batch) {
    NoGradGuard no_grad;
    const auto fr = model.forward(batch);
    const auto best = argmax(reshape(fr.logits, {batch.b * batch.t, model.config().vocab_size}));
    return std::vector<std::int32_t>(best.begin(), best.end());
  };
}

EvalResult token_accuracy(const NextTokenPredictor& predict, std::span<const CorpusDoc> docs, std::string pl,
                          const EvalOptions& options) {
  if (options.batch_size == 0) throw EvaluationError("batch_size must be positive");
  auto render = [&](std::int32_t id) {
    return options.vocab ? options.vocab->render(id) : std::to_string(id);
  };
  EvalResult r;
  r.pl = std::move(pl);
  std::size_t correct = 0;
  double es_sum = 0.0;
  for (std::size_t start = 0; start < docs.size(); start += options.batch_size) {
    const std::size_t end = std::min(docs.size(), start + options.batch_size);
    std::vector<const CorpusDoc*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&docs[i]);
    const auto batch = make_batch(ptrs);
    const auto pred = predict(batch);
    if (pred.size() != batch.b * batch.t) throw EvaluationError("predictor returned the wrong number of positions");
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
      const auto& toks = ptrs[i]->tokens;
      std::size_t frame = 0;
      while (frame < toks.size() && options.frame_ids.contains(toks[frame])) ++frame;
      std::size_t doc_n = 0, doc_correct = 0;
      double doc_es = 0.0;
      for (std::size_t p = std::max<std::size_t>(1, frame); p < toks.size(); ++p) {
        const auto gold = toks[p];
        if (gold == BpeVocab::kPadId) continue;
        const auto guess = pred[i * batch.t + p - 1];
        ++doc_n;
        if (guess == gold) ++doc_correct;
        doc_es += guess == gold ? 100.0 : edit_similarity(render(guess), render(gold));
      }
      if (doc_n == 0) continue;
      r.n_positions += doc_n;
      correct += doc_correct;
      es_sum += doc_es;
      r.example_accuracy.push_back(100.0 * static_cast<double>(doc_correct) / static_cast<double>(doc_n));
      r.example_es.push_back(doc_es / static_cast<double>(doc_n));
    }
  }
  if (r.n_positions == 0) throw EvaluationError("no evaluable positions for '" + r.pl + "'");
  r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(r.n_positions);
  r.edit_similarity = es_sum / static_cast<double>(r.n_positions);
  return r;
}

std::vector<EvalResult> evaluate_completion(const Model& model, std::span<const CorpusDoc> docs,
                                            const EvalOptions& options, std::span<const std::string> expected,
                                            std::vector<std::string>* warnings) {
  std::map<std::string, std::vector<CorpusDoc>> by_pl;
  for (const auto& d : docs) by_pl[d.pl].push_back(d);
  for (const auto& pl : expected) {
    if (!by_pl.contains(pl) && warnings) warnings->push_back("no test documents for '" + pl + "'; omitted");
  }
  const auto predictor = model_predictor(model);
  std::vector<EvalResult> out;
  EvalResult all;
  all.pl = "Overall";
  for (const auto& [pl, list] : by_pl) {
    auto r = token_accuracy(predictor, list, pl, options);
    all.accuracy += r.accuracy;
    all.edit_similarity += r.edit_similarity;
    all.n_positions += r.n_positions;
    all.example_accuracy.insert(all.example_accuracy.end(), r.example_accuracy.begin(), r.example_accuracy.end());
    all.example_es.insert(all.example_es.end(), r.example_es.begin(), r.example_es.end());
    out.push_back(std::move(r));
  }
  if (out.empty()) throw EvaluationError("no documents to evaluate");
  all.accuracy /= static_cast<double>(out.size());
  all.edit_similarity /= static_cast<double>(out.size());
  out.push_back(std::move(all));
  return out;
}

std::set<std::int32_t> frame_ids(const BpeVocab& vocab, std::span<const std::string> languages) {
  std::set<std::int32_t> ids;
  if (auto s = vocab.special_id(tokens::kBos)) ids.insert(*s);
  for (const auto& pl : languages) {
    if (auto s = vocab.special_id(tokens::language_tag(pl))) ids.insert(*s);
  }
  return ids;
}

std::vector<EvalResult> evaluate_checkpoint(const std::filesystem::path& checkpoint, std::span<const CorpusDoc> docs,
                                            const BpeVocab& vocab, std::span<const std::string> languages,
                                            std::vector<std::string>* warnings) {
  CheckpointMeta meta;
  const Model model = load_checkpoint(checkpoint, &meta);
  if (meta.vocab_size != vocab.size() || meta.vocab_fingerprint != vocab.fingerprint() ||
      model.config().vocab_size != vocab.size()) {
    throw EvaluationError("vocabulary mismatch: checkpoint " + checkpoint.string() + " was trained with a different vocabulary");
  }
  EvalOptions opt;
  opt.vocab = &vocab;
  opt.frame_ids = frame_ids(vocab, languages);
  return evaluate_completion(model, docs, opt, languages, warnings);
}

nlohmann::json results_to_json(std::string_view variant, std::span<const EvalResult> results) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : results) {
    rows.push_back({{"variant", variant},
                    {"pl", r.pl},
                    {"accuracy", r.accuracy},
                    {"edit_similarity", r.edit_similarity},
                    {"n_positions", r.n_positions}});
  }
  return rows;
}

void write_results_json(const std::filesystem::path& path, const nlohmann::json& rows) { write_json_file(path, rows); }

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw EvaluationError("paired t-test needs samples of equal length");
  if (a.size() < 2) throw EvaluationError("paired t-test needs at least two pairs");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  TTestResult r;
  r.df = n - 1;
  r.mean_diff = mean(d);
  double ss = 0.0;
  for (double x : d) ss += (x - r.mean_diff) * (x - r.mean_diff);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) {
    r.degenerate = true;
    r.t = std::numeric_limits<double>::quiet_NaN();
    r.p = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  r.t = r.mean_diff / (sd / std::sqrt(static_cast<double>(n)));
  const double nu = static_cast<double>(r.df);
  r.p = boost::math::ibeta(nu / 2.0, 0.5, nu / (nu + r.t * r.t));
  return r;
}

// ---- ablation ---------------------------------------------------------------------

ExpertAllocation ablation_allocation(Variant v, const ModelConfig& config, std::span<const CorpusDoc> train,
                                     std::size_t min_per_pl) {
  if (v != Variant::pl_moe && v != Variant::pl_moe_no_shared) return {};
  std::map<std::string, std::uint64_t> sizes;
  for (const auto& d : train) ++sizes[d.pl];
  const std::size_t shared = v == Variant::pl_moe ? config.shared_experts : 0;
  return allocate_experts(sizes, config.experts, shared, min_per_pl);
}

std::vector<AblationEntry> ablation_run(const AblationSetup& setup, std::span<const CorpusDoc> train,
                                        std::span<const CorpusDoc> dev, std::span<const CorpusDoc> test,
                                        const BpeVocab* vocab, const std::filesystem::path& out_dir) {
  std::vector<std::string> languages;
  for (const auto& [pl, _] : count_by_language(train)) languages.push_back(pl);
  EvalOptions opt;
  opt.batch_size = setup.train.eval_batch_size;
  opt.vocab = vocab;
  if (vocab) opt.frame_ids = frame_ids(*vocab, languages);
  CheckpointMeta meta;
  if (vocab) {
    meta.vocab_size = vocab->size();
    meta.vocab_fingerprint = vocab->fingerprint();
  }
  std::vector<AblationEntry> entries;
  for (const auto v : setup.variants) {
    ModelConfig mc = setup.model;
    mc.variant = v;
    if (v == Variant::pl_moe_no_shared) mc.shared_experts = 0;
    const auto alloc = ablation_allocation(v, setup.model, train, setup.min_per_pl);
    Model model(mc, alloc, setup.train.seed);
    const auto dir = out_dir.empty() ? out_dir : out_dir / std::string(variant_name(v));
    const auto summary = pretrain(model, setup.train, {train.begin(), train.end()}, {dev.begin(), dev.end()}, dir, meta);
    AblationEntry e;
    e.variant = v;
    e.seed = setup.train.seed;
    e.dev_loss = summary.final_dev;
    e.results = evaluate_completion(model, test, opt, languages);
    if (!dir.empty()) write_results_json(dir / "results.json", results_to_json(variant_name(v), e.results));
    entries.push_back(std::move(e));
  }
  return entries;
}

std::string comparison_csv(std::span<const AblationEntry> entries) {
  if (entries.empty()) throw EvaluationError("nothing to compare");
  for (const auto& e : entries) {
    if (e.seed != entries.front().seed) {
      throw EvaluationError("variants were trained with different seeds; paired comparison is invalid");
    }
  }
  std::vector<std::string> pls;
  for (const auto& r : entries.front().results) pls.push_back(r.pl);
  std::ostringstream out;
  out.precision(6);
  out << std::fixed;
  out << "variant";
  for (const auto& pl : pls) out << ',' << pl << "_acc," << pl << "_es";
  out << ",t_vs_" << variant_name(entries.front().variant) << ",p_vs_" << variant_name(entries.front().variant)
      << ",degenerate\n";
  const auto& base = entries.front().results.back().example_accuracy;
  for (const auto& e : entries) {
    out << variant_name(e.variant);
    for (const auto& pl : pls) {
      const auto it = std::find_if(e.results.begin(), e.results.end(), [&](const EvalResult& r) { return r.pl == pl; });
      if (it == e.results.end()) {
        out << ",,";
      } else {
        out << ',' << it->accuracy << ',' << it->edit_similarity;
      }
    }
    const auto& mine = e.results.back().example_accuracy;
    if (&e == &entries.front() || mine.size() != base.size() || mine.size() < 2) {
      out << ",,,\n";
      continue;
    }
    const auto t = paired_t_test(base, mine);
    if (t.degenerate) {
      out << ",,,true\n";
    } else {
      out << ',' << t.t << ',' << t.p << ",false\n";
    }
  }
  return out.str();
}

}  // namespace polyglot
