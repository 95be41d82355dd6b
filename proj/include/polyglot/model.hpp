// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer in the GPT-2 mould: learned positions, pre-norm
// blocks, tied input/output embedding. The feed-forward slot of the top
// l_moe blocks is an expert layer for the sparse variants.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "polyglot/moe.hpp"
#include "polyglot/tensor.hpp"

namespace polyglot {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Variant { dense, switch_moe, pl_moe, pl_moe_no_shared };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view s);

struct ModelConfig {
  std::size_t l_total = 12;
  std::size_t l_moe = 4;
  std::size_t hidden = 768;
  std::size_t max_seq = 1024;
  std::size_t heads = 12;
  std::size_t experts = 32;
  std::size_t shared_experts = 1;
  std::size_t top_k = 2;
  std::size_t vocab_size = 0;
  std::size_t ffn_mult = 4;
  Variant variant = Variant::pl_moe;
  float dropout = 0.1f;
  float ln_eps = 1e-5f;

  void validate() const;
  [[nodiscard]] bool is_expert_layer(std::size_t layer) const;
  [[nodiscard]] std::size_t ffn_inner() const { return ffn_mult * hidden; }

  [[nodiscard]] nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct Attention {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct Block {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Attention attn;
  FeedForward ffn;                  // dense slot
  std::vector<FeedForward> experts;  // expert slot
  Tensor router;                     // [h, E]
};

/// Row-major [b, t] ids; `pls[i]` is the language of sequence i.
struct TokenBatch {
  std::vector<std::int32_t> ids;
  std::size_t b = 0;
  std::size_t t = 0;
  std::vector<std::string> pls;
};

struct ForwardOptions {
  bool train = false;
  CounterRng* rng = nullptr;  // required when train && dropout > 0
  double aux_alpha = 0.0;
  bool collect_attention = false;
};

struct ForwardResult {
  Tensor logits;    // [b, t, V]
  Tensor aux_loss;  // summed over expert layers; undefined when none
  RoutingTrace trace;
  std::vector<FfnCounter> ffn_counters;  // one per layer
  std::vector<Tensor> attention;         // [b, heads, t, t] per layer when collected
  /// Per expert layer: executed experts per row of the flattened batch.
  std::vector<std::vector<std::vector<std::size_t>>> selected;
};

class Model {
 public:
  Model() = default;
  /// Fresh parameters. `alloc` is required for the PL-MoE variants.
  Model(ModelConfig config, ExpertAllocation alloc, std::uint64_t seed);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const ExpertAllocation& allocation() const { return alloc_; }

  [[nodiscard]] ForwardResult forward(const TokenBatch& batch, const ForwardOptions& options = {}) const;

  /// Stable order; the tensors share storage with the model.
  [[nodiscard]] std::vector<std::pair<std::string, Tensor>> parameters() const;
  [[nodiscard]] std::size_t parameter_count() const;

  Tensor wte, wpe, lnf_g, lnf_b;
  std::vector<Block> blocks;

 private:
  ModelConfig config_;
  ExpertAllocation alloc_;
};

/// GPT-2 parameter count of the dense variant: embeddings, per-layer
/// attention, FFN and layer norms, final norm; tied output head.
std::size_t dense_parameter_formula(const ModelConfig& config);

// ---- checkpoints ---------------------------------------------------------------

struct CheckpointMeta {
  std::size_t vocab_size = 0;
  std::uint64_t vocab_fingerprint = 0;
  nlohmann::json extra = nlohmann::json::object();
};

/// Directory with manifest.json and params.bin (little-endian float32 in
/// manifest order).
void save_checkpoint(const std::filesystem::path& dir, const Model& model, const CheckpointMeta& meta);
Model load_checkpoint(const std::filesystem::path& dir, CheckpointMeta* meta = nullptr);

}  // namespace polyglot
