// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "polyglot/run_config.hpp"

#include <algorithm>
#include <sstream>

namespace polyglot {

using nlohmann::json;

RunConfig::RunConfig() {
  const CorpusOptions co;
  declare("corpus.languages", co.languages, "programming languages accepted by the pipeline");
  declare("corpus.natural_language", co.natural_language, "natural-language tag for docstrings");
  declare("corpus.prepend_language_id", co.prepend_language_id, "prefix every sample with its <pl> tag");
  declare("corpus.bidirectional_pairs", co.bidirectional_pairs, "emit docstring->code and code->docstring samples");
  declare("corpus.string_cap", co.string_cap, "preserved string literals");
  declare("corpus.number_cap", co.number_cap, "preserved numeric literals");
  declare("corpus.max_seq", co.max_seq, "window length for encoded documents");
  declare("corpus.entity_patterns", co.entity_patterns, "regexes; matching strings always become <STR_LIT>");
  declare("corpus.split_mode", "full", "full | low_resource:TARGET:REFERENCE | cross_domain:EXCLUDED");
  declare("corpus.vocab_size", 8000, "target BPE vocabulary size");

  const ModelConfig mc;
  declare("model.l_total", mc.l_total, "transformer layers");
  declare("model.l_moe", mc.l_moe, "top layers with an expert feed-forward slot");
  declare("model.hidden", mc.hidden, "hidden size");
  declare("model.max_seq", mc.max_seq, "maximum sequence length");
  declare("model.heads", mc.heads, "attention heads");
  declare("model.experts", mc.experts, "experts per expert layer");
  declare("model.shared_experts", mc.shared_experts, "experts routable by every language");
  declare("model.top_k", mc.top_k, "experts per token (PL-MoE)");
  declare("model.ffn_mult", mc.ffn_mult, "feed-forward inner size multiplier");
  declare("model.variant", std::string(variant_name(mc.variant)), "dense | switch_moe | pl_moe | pl_moe_no_shared");
  declare("model.dropout", mc.dropout, "dropout probability");
  declare("model.ln_eps", mc.ln_eps, "layer-norm epsilon");

  declare("allocation.min_per_pl", 2, "minimum experts per language group");
  declare("allocation.file", "", "explicit allocation JSON; overrides the size-proportional heuristic");

  for (const auto* section : {"train", "finetune"}) {
    const TrainConfig tc = std::string_view(section) == "train" ? TrainConfig{} : TrainConfig::finetune_defaults();
    const std::string p = std::string(section) + ".";
    declare(p + "steps", tc.steps, "optimizer steps");
    declare(p + "warmup_steps", tc.warmup_steps, "linear warmup steps");
    declare(p + "peak_lr", tc.peak_lr, "peak learning rate");
    declare(p + "schedule", std::string(schedule_name(tc.schedule)), "cosine | linear");
    declare(p + "micro_batch_size", tc.micro_batch_size, "sequences per single-language micro-batch");
    declare(p + "micro_batches", tc.micro_batches, "micro-batches per step");
    declare(p + "beta1", tc.beta1, "Adam beta1");
    declare(p + "beta2", tc.beta2, "Adam beta2");
    declare(p + "eps", tc.eps, "Adam epsilon");
    declare(p + "weight_decay", tc.weight_decay, "decoupled weight decay");
    declare(p + "aux_alpha", tc.aux_alpha, "load-balance loss weight (0 disables)");
    declare(p + "grad_clip", tc.grad_clip, "global gradient-norm clip (0 disables)");
    declare(p + "eval_interval", tc.eval_interval, "steps between validation passes (0: end only)");
    declare(p + "checkpoint_interval", tc.checkpoint_interval, "steps between resumable checkpoints (0: none)");
    declare(p + "eval_batch_size", tc.eval_batch_size, "sequences per validation batch");
  }

  declare("evaluation.batch_size", 16, "sequences per evaluation batch");

  const SyntheticOptions so;
  declare("synthetic.num_languages", so.num_languages, "languages to generate");
  declare("synthetic.docs_per_language", so.docs_per_language, "documents per language");
  declare("synthetic.low_resource", "", "downscaled languages, e.g. ruby=0.1");
  declare("synthetic.grammar_seed", so.grammar_seed, "grammar seed");
  declare("synthetic.sample_seed", so.sample_seed, "document sampling seed");
  declare("synthetic.keywords_per_language", so.keywords_per_language, "language-specific keyword pool");
  declare("synthetic.identifiers_per_language", so.identifiers_per_language, "language-specific identifier pool");
  declare("synthetic.templates_per_language", so.templates_per_language, "statement templates per language");
  declare("synthetic.shared_functions", so.shared_functions, "functions shared by all languages");
  declare("synthetic.min_statements", so.min_statements, "minimum statements per document");
  declare("synthetic.max_statements", so.max_statements, "maximum statements per document");

  declare("seed", 0, "seed for every random consumer");
}

void RunConfig::declare(std::string name, json value, std::string help) {
  auto key = name;
  keys_[key] = {std::move(name), std::move(value), std::move(help)};
}

bool RunConfig::declared(std::string_view key) const { return keys_.find(key) != keys_.end(); }

const json& RunConfig::get(std::string_view key) const {
  const auto it = keys_.find(key);
  if (it == keys_.end()) throw ConfigError("undeclared config key '" + std::string(key) + "'");
  return it->second.value;
}

std::vector<RunConfig::Key> RunConfig::keys() const {
  std::vector<Key> out;
  for (const auto& [_, k] : keys_) out.push_back(k);
  return out;
}

namespace {

bool same_kind(const json& declared, const json& value) {
  if (declared.is_boolean()) return value.is_boolean();
  if (declared.is_number_integer()) return value.is_number_integer() && (value.is_number_unsigned() || value.get<std::int64_t>() >= 0);
  if (declared.is_number()) return value.is_number();
  if (declared.is_string()) return value.is_string();
  if (declared.is_array()) {
    if (!value.is_array()) return false;
    for (const auto& v : value)
      if (!v.is_string()) return false;
    return true;
  }
  return false;
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string name = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      flatten(v, name, out);
    } else {
      out.emplace_back(name, v);
    }
  }
}

}  // namespace

void RunConfig::assign(const std::string& key, const json& value) {
  const auto it = keys_.find(key);
  if (it == keys_.end()) throw ConfigError("unknown config key '" + key + "'");
  if (!same_kind(it->second.value, value)) {
    throw ConfigError("config key '" + key + "' expects a value like " + it->second.value.dump() + ", got " +
                      value.dump());
  }
  it->second.value = it->second.value.is_number_float() ? json(value.get<double>()) : value;
}

void RunConfig::merge_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::pair<std::string, json>> flat;
  flatten(j, "", flat);
  for (const auto& [k, v] : flat) assign(k, v);
}

void RunConfig::load_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = read_json_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  }
  merge_json(j);
}

void RunConfig::set(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + std::string(assignment) + "'");
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  const auto it = keys_.find(key);
  if (it == keys_.end()) throw ConfigError("unknown config key '" + key + "'");
  const json& kind = it->second.value;
  json value;
  try {
    if (kind.is_string()) {
      value = text;
    } else if (kind.is_array()) {
      value = json::array();
      std::stringstream ss(text);
      for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) value.push_back(item);
    } else if (kind.is_boolean()) {
      if (text != "true" && text != "false") throw ConfigError("");
      value = text == "true";
    } else {
      value = json::parse(text);
    }
  } catch (const std::exception&) {
    throw ConfigError("cannot parse value '" + text + "' for config key '" + key + "'");
  }
  assign(key, value);
}

json RunConfig::dump() const {
  json out = json::object();
  for (const auto& [name, k] : keys_) out[name] = k.value;
  return out;
}

std::string RunConfig::describe(const std::vector<std::string>& sections) const {
  std::ostringstream out;
  out << "Config keys (JSON file with dotted keys, or --set key=value):\n";
  for (const auto& [name, k] : keys_) {
    const auto dot = name.find('.');
    const std::string section = dot == std::string::npos ? "" : name.substr(0, dot);
    if (!section.empty() && std::find(sections.begin(), sections.end(), section) == sections.end()) continue;
    out << "  " << name << " = " << k.value.dump() << "\n      " << k.help << '\n';
  }
  return out.str();
}

CorpusOptions RunConfig::corpus_options() const {
  CorpusOptions o;
  o.languages = get("corpus.languages").get<std::vector<std::string>>();
  o.natural_language = get("corpus.natural_language").get<std::string>();
  o.prepend_language_id = get("corpus.prepend_language_id").get<bool>();
  o.bidirectional_pairs = get("corpus.bidirectional_pairs").get<bool>();
  o.string_cap = get("corpus.string_cap").get<std::size_t>();
  o.number_cap = get("corpus.number_cap").get<std::size_t>();
  o.max_seq = get("corpus.max_seq").get<std::size_t>();
  o.entity_patterns = get("corpus.entity_patterns").get<std::vector<std::string>>();
  if (o.languages.empty()) throw ConfigError("corpus.languages must not be empty");
  if (o.max_seq < 2) throw ConfigError("corpus.max_seq must be at least 2");
  return o;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig c;
  c.l_total = get("model.l_total").get<std::size_t>();
  c.l_moe = get("model.l_moe").get<std::size_t>();
  c.hidden = get("model.hidden").get<std::size_t>();
  c.max_seq = get("model.max_seq").get<std::size_t>();
  c.heads = get("model.heads").get<std::size_t>();
  c.experts = get("model.experts").get<std::size_t>();
  c.shared_experts = get("model.shared_experts").get<std::size_t>();
  c.top_k = get("model.top_k").get<std::size_t>();
  c.ffn_mult = get("model.ffn_mult").get<std::size_t>();
  try {
    c.variant = parse_variant(get("model.variant").get<std::string>());
  } catch (const ModelError& e) {
    throw ConfigError(e.what());
  }
  c.dropout = get("model.dropout").get<float>();
  c.ln_eps = get("model.ln_eps").get<float>();
  return c;
}

TrainConfig RunConfig::train_config(std::string_view section) const {
  if (section != "train" && section != "finetune") throw ConfigError("unknown training section");
  const std::string p = std::string(section) + ".";
  TrainConfig c;
  c.steps = get(p + "steps").get<std::size_t>();
  c.warmup_steps = get(p + "warmup_steps").get<std::size_t>();
  c.peak_lr = get(p + "peak_lr").get<double>();
  try {
    c.schedule = parse_schedule(get(p + "schedule").get<std::string>());
  } catch (const TrainingError& e) {
    throw ConfigError(e.what());
  }
  c.micro_batch_size = get(p + "micro_batch_size").get<std::size_t>();
  c.micro_batches = get(p + "micro_batches").get<std::size_t>();
  c.beta1 = get(p + "beta1").get<double>();
  c.beta2 = get(p + "beta2").get<double>();
  c.eps = get(p + "eps").get<double>();
  c.weight_decay = get(p + "weight_decay").get<double>();
  c.aux_alpha = get(p + "aux_alpha").get<double>();
  c.grad_clip = get(p + "grad_clip").get<double>();
  c.eval_interval = get(p + "eval_interval").get<std::size_t>();
  c.checkpoint_interval = get(p + "checkpoint_interval").get<std::size_t>();
  c.eval_batch_size = get(p + "eval_batch_size").get<std::size_t>();
  c.seed = get("seed").get<std::uint64_t>();
  try {
    c.validate();
  } catch (const TrainingError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

SyntheticOptions RunConfig::synthetic_options() const {
  SyntheticOptions o;
  o.num_languages = get("synthetic.num_languages").get<std::size_t>();
  o.docs_per_language = get("synthetic.docs_per_language").get<std::size_t>();
  o.low_resource = parse_fractions(get("synthetic.low_resource").get<std::string>());
  o.grammar_seed = get("synthetic.grammar_seed").get<std::uint64_t>();
  o.sample_seed = get("synthetic.sample_seed").get<std::uint64_t>();
  o.keywords_per_language = get("synthetic.keywords_per_language").get<std::size_t>();
  o.identifiers_per_language = get("synthetic.identifiers_per_language").get<std::size_t>();
  o.templates_per_language = get("synthetic.templates_per_language").get<std::size_t>();
  o.shared_functions = get("synthetic.shared_functions").get<std::size_t>();
  o.min_statements = get("synthetic.min_statements").get<std::size_t>();
  o.max_statements = get("synthetic.max_statements").get<std::size_t>();
  return o;
}

std::map<std::string, double> parse_fractions(std::string_view text) {
  std::map<std::string, double> out;
  std::stringstream ss{std::string(text)};
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("expected pl=fraction, got '" + item + "'");
    try {
      std::size_t used = 0;
      const double v = std::stod(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1) throw std::invalid_argument("");
      out[item.substr(0, eq)] = v;
    } catch (const std::exception&) {
      throw ConfigError("bad fraction in '" + item + "'");
    }
  }
  return out;
}

}  // namespace polyglot
