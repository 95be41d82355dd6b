// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat dotted-key run configuration ("model.hidden", "train.steps", ...).
// Every key is declared with a typed default; files and `--set key=value`
// overrides may only touch declared keys.

#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "polyglot/corpus.hpp"
#include "polyglot/model.hpp"
#include "polyglot/synthetic.hpp"
#include "polyglot/training.hpp"

namespace polyglot {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RunConfig {
 public:
  struct Key {
    std::string name;
    nlohmann::json value;
    std::string help;
  };

  /// Every declared key at its default.
  RunConfig();

  /// Accepts a flat object of dotted keys or nested section objects.
  void merge_json(const nlohmann::json& j);
  void load_file(const std::filesystem::path& path);
  /// "key=value"; the value is parsed against the key's declared type
  /// (lists are comma separated).
  void set(std::string_view assignment);

  [[nodiscard]] const nlohmann::json& get(std::string_view key) const;
  [[nodiscard]] bool declared(std::string_view key) const;
  [[nodiscard]] std::vector<Key> keys() const;
  /// Flat object, reloadable with merge_json.
  [[nodiscard]] nlohmann::json dump() const;
  /// Help text listing the keys of the given sections.
  [[nodiscard]] std::string describe(const std::vector<std::string>& sections) const;

  [[nodiscard]] CorpusOptions corpus_options() const;
  [[nodiscard]] ModelConfig model_config() const;
  /// section is "train" or "finetune".
  [[nodiscard]] TrainConfig train_config(std::string_view section = "train") const;
  [[nodiscard]] SyntheticOptions synthetic_options() const;

 private:
  std::map<std::string, Key, std::less<>> keys_;
  void declare(std::string name, nlohmann::json value, std::string help);
  void assign(const std::string& key, const nlohmann::json& value);
};

/// "ruby=0.1,go=0.5" -> {ruby: 0.1, go: 0.5}.
std::map<std::string, double> parse_fractions(std::string_view text);

}  // namespace polyglot
