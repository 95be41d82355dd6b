// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Causal LM training: warmup + cosine/linear schedules, Adam with decoupled
// weight decay, single-language micro-batches mixed by smooth weighted
// round-robin, per-language validation, checkpoints and exact resume.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "polyglot/corpus.hpp"
#include "polyglot/model.hpp"

namespace polyglot {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Schedule { cosine, linear };
std::string_view schedule_name(Schedule s);
Schedule parse_schedule(std::string_view s);

struct TrainConfig {
  std::size_t steps = 100000;
  std::size_t warmup_steps = 1000;
  double peak_lr = 1.5e-4;
  Schedule schedule = Schedule::cosine;
  std::size_t micro_batch_size = 8;  // sequences per single-language micro-batch
  std::size_t micro_batches = 8;     // micro-batches per optimizer step
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double aux_alpha = 0.01;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::uint64_t seed = 0;
  std::size_t eval_interval = 1000;       // 0: evaluate only at the end
  std::size_t checkpoint_interval = 0;    // 0: only final/best
  std::size_t eval_batch_size = 16;

  /// Fine-tuning defaults: linear decay, peak 5e-5.
  static TrainConfig finetune_defaults();
  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Linear warmup 0 -> peak, then cosine or linear decay to 0 at `steps`.
double lr_at(std::size_t step, const TrainConfig& config);

// ---- optimizer -------------------------------------------------------------------

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Moments and per-parameter step counts, aligned with a parameter list.
struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::vector<std::uint64_t> steps;
};

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

AdamState adam_init(const NamedParams& params);
/// Bias-corrected Adam with decoupled weight decay. Parameters that received
/// no gradient this step are left untouched (no decay, no moment update).
/// Throws TrainingError naming the first parameter with a non-finite gradient.
void adam_step(const NamedParams& params, AdamState& state, double lr, const AdamHyper& hyper);
/// Scales all populated gradients so their global L2 norm is at most max_norm;
/// returns the norm before clipping.
double clip_grad_norm(const NamedParams& params, double max_norm);
void zero_grads(const NamedParams& params);

// ---- batching --------------------------------------------------------------------

/// Pads sequences with id 0 to the longest in the list.
TokenBatch make_batch(std::span<const CorpusDoc* const> docs);
/// Next-token loss: targets are inputs shifted left, the final position and
/// padding are ignored. Returns the mean NLL and, optionally, the target count.
Tensor lm_loss(const Tensor& logits, const TokenBatch& batch, std::size_t* n_targets = nullptr);

/// Chooses a language per micro-batch by smooth weighted round-robin over
/// document counts and walks a per-language shuffled epoch order.
class BatchSampler {
 public:
  BatchSampler() = default;
  BatchSampler(std::span<const CorpusDoc> docs, std::uint64_t seed);

  /// Indices into the original document list, all of one language.
  std::vector<std::size_t> next(std::size_t batch_size);
  [[nodiscard]] const std::vector<std::string>& languages() const { return languages_; }

  [[nodiscard]] nlohmann::json state() const;
  void restore(const nlohmann::json& state);

 private:
  struct Lane {
    std::vector<std::size_t> docs;  // indices of this language's documents
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::uint64_t epoch = 0;
    std::int64_t weight = 0;
    std::int64_t current = 0;
  };
  std::vector<std::string> languages_;
  std::vector<Lane> lanes_;
  std::int64_t total_weight_ = 0;
  std::uint64_t seed_ = 0;
  void reshuffle(std::size_t lane);
};

// ---- loop ------------------------------------------------------------------------------

struct MetricRow {
  std::size_t step = 0;
  std::string split;  // "train" or "dev"
  std::string pl;     // "all" for train rows
  double loss = 0.0;
  double lr = 0.0;
};

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricRow> rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

/// Token-weighted mean validation loss per language.
std::map<std::string, double> dev_losses(const Model& model, std::span<const CorpusDoc> docs,
                                         std::size_t batch_size);

class Trainer {
 public:
  Trainer(Model model, TrainConfig config, std::vector<CorpusDoc> train, std::vector<CorpusDoc> dev,
          CheckpointMeta meta = {});

  /// Rebuilds a trainer from a step checkpoint written by save_state().
  static Trainer resume(const std::filesystem::path& dir, TrainConfig config, std::vector<CorpusDoc> train,
                        std::vector<CorpusDoc> dev);

  /// One optimizer step over config.micro_batches micro-batches; returns the
  /// mean LM loss (without the auxiliary term) before the update.
  double step();
  /// Steps until `step_count() == until`, logging and checkpointing into
  /// out_dir when non-empty.
  void run(std::size_t until, const std::filesystem::path& out_dir = {});

  void save_state(const std::filesystem::path& dir) const;

  [[nodiscard]] const Model& model() const { return model_; }
  [[nodiscard]] std::size_t step_count() const { return step_; }
  [[nodiscard]] const std::vector<MetricRow>& metrics() const { return metrics_; }
  [[nodiscard]] const std::map<std::string, double>& last_dev() const { return last_dev_; }
  [[nodiscard]] double best_dev() const { return best_dev_; }
  [[nodiscard]] const TrainConfig& config() const { return config_; }

 private:
  Model model_;
  TrainConfig config_;
  std::vector<CorpusDoc> train_;
  std::vector<CorpusDoc> dev_;
  CheckpointMeta meta_;
  NamedParams params_;
  AdamState adam_;
  BatchSampler sampler_;
  CounterRng dropout_rng_;
  std::size_t step_ = 0;
  std::vector<MetricRow> metrics_;
  std::map<std::string, double> last_dev_;
  double best_dev_ = 0.0;
  bool has_best_ = false;
  std::filesystem::path last_checkpoint_;

  void evaluate(const std::filesystem::path& out_dir);
};

struct TrainSummary {
  std::map<std::string, double> final_dev;
  double best_dev = 0.0;
  std::vector<MetricRow> metrics;
};

/// Full pretraining run; writes final/, best/, step-N/ and metrics.csv under out_dir.
TrainSummary pretrain(Model model, const TrainConfig& config, std::vector<CorpusDoc> train,
                      std::vector<CorpusDoc> dev, const std::filesystem::path& out_dir, const CheckpointMeta& meta);

/// Continues training a checkpoint on a task corpus. Zero steps copies the
/// checkpoint unchanged into out_dir/final.
TrainSummary finetune(const std::filesystem::path& checkpoint, const TrainConfig& config,
                      std::vector<CorpusDoc> train, std::vector<CorpusDoc> dev, const std::filesystem::path& out_dir);

}  // namespace polyglot
