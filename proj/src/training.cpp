// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "polyglot/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace polyglot {

std::string_view schedule_name(Schedule s) { return s == Schedule::cosine ? "cosine" : "linear"; }

Schedule parse_schedule(std::string_view s) {
  if (s == "cosine" || s == "cosine_decay") return Schedule::cosine;
  if (s == "linear" || s == "linear_decay") return Schedule::linear;
  throw TrainingError("unknown schedule '" + std::string(s) + "' (expected cosine or linear)");
}

TrainConfig TrainConfig::finetune_defaults() {
  TrainConfig c;
  c.schedule = Schedule::linear;
  c.peak_lr = 5e-5;
  c.warmup_steps = 0;
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw TrainingError("invalid training config: " + m); };
  if (steps > 0 && warmup_steps >= steps) {
    fail("warmup_steps (" + std::to_string(warmup_steps) + ") must be below steps (" + std::to_string(steps) + ")");
  }
  if (!(peak_lr > 0.0)) fail("peak_lr must be positive");
  if (micro_batch_size == 0 || micro_batches == 0) fail("micro_batch_size and micro_batches must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("adam betas must be in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (weight_decay < 0.0) fail("weight_decay must be nonnegative");
  if (aux_alpha < 0.0) fail("aux_alpha must be nonnegative");
  if (grad_clip < 0.0) fail("grad_clip must be nonnegative");
  if (eval_batch_size == 0) fail("eval_batch_size must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"steps", steps},
          {"warmup_steps", warmup_steps},
          {"peak_lr", peak_lr},
          {"schedule", std::string(schedule_name(schedule))},
          {"micro_batch_size", micro_batch_size},
          {"micro_batches", micro_batches},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"weight_decay", weight_decay},
          {"aux_alpha", aux_alpha},
          {"grad_clip", grad_clip},
          {"seed", seed},
          {"eval_interval", eval_interval},
          {"checkpoint_interval", checkpoint_interval},
          {"eval_batch_size", eval_batch_size}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.schedule = parse_schedule(j.value("schedule", std::string(schedule_name(c.schedule))));
  c.micro_batch_size = j.value("micro_batch_size", c.micro_batch_size);
  c.micro_batches = j.value("micro_batches", c.micro_batches);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.aux_alpha = j.value("aux_alpha", c.aux_alpha);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
  return c;
}

double lr_at(std::size_t step, const TrainConfig& c) {
  if (step < c.warmup_steps) return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  if (c.steps <= c.warmup_steps) return c.peak_lr;
  const double progress = std::clamp(static_cast<double>(step - c.warmup_steps) /
                                         static_cast<double>(c.steps - c.warmup_steps),
                                     0.0, 1.0);
  if (c.schedule == Schedule::cosine) return c.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return c.peak_lr * (1.0 - progress);
}

// ---- optimizer -------------------------------------------------------------------

AdamState adam_init(const NamedParams& params) {
  AdamState s;
  for (const auto& [_, t] : params) {
    s.m.emplace_back(t.size(), 0.0f);
    s.v.emplace_back(t.size(), 0.0f);
    s.steps.push_back(0);
  }
  return s;
}

namespace {

void require_finite_grads(const NamedParams& params) {
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (float g : t.grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + name + "'");
    }
  }
}

}  // namespace

void adam_step(const NamedParams& params, AdamState& state, double lr, const AdamHyper& hp) {
  if (state.m.size() != params.size()) throw TrainingError("optimizer state does not match the parameter list");
  require_finite_grads(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].second;
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    auto p = t.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto step = ++state.steps[i];
    const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
    const double decay = 1.0 - lr * hp.weight_decay;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
      const double vj = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = (mj / c1) / (std::sqrt(vj / c2) + hp.eps);
      p[j] = static_cast<float>(static_cast<double>(p[j]) * decay - lr * update);
    }
  }
}

double clip_grad_norm(const NamedParams& params, double max_norm) {
  require_finite_grads(params);
  double sq = 0.0;
  for (const auto& [_, t] : params) {
    if (!t.has_grad()) continue;
    for (float g : t.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto factor = static_cast<float>(max_norm / norm);
    for (const auto& [_, t] : params) {
      if (!t.has_grad()) continue;
      Tensor copy = t;
      for (auto& g : copy.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

void zero_grads(const NamedParams& params) {
  for (const auto& [_, t] : params) {
    Tensor copy = t;
    copy.clear_grad();
  }
}

// ---- batching --------------------------------------------------------------------

TokenBatch make_batch(std::span<const CorpusDoc* const> docs) {
  if (docs.empty()) throw TrainingError("cannot build an empty batch");
  TokenBatch b;
  b.b = docs.size();
  for (const auto* d : docs) b.t = std::max(b.t, d->tokens.size());
  if (b.t == 0) throw TrainingError("batch contains only empty documents");
  b.ids.assign(b.b * b.t, BpeVocab::kPadId);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    std::copy(docs[i]->tokens.begin(), docs[i]->tokens.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.t));
    b.pls.push_back(docs[i]->pl);
  }
  return b;
}

namespace {

std::vector<std::int32_t> shifted_targets(const TokenBatch& batch, std::size_t* count) {
  std::vector<std::int32_t> targets(batch.b * batch.t, BpeVocab::kPadId);
  std::size_t n = 0;
  for (std::size_t i = 0; i < batch.b; ++i) {
    for (std::size_t p = 0; p + 1 < batch.t; ++p) {
      const auto id = batch.ids[i * batch.t + p + 1];
      targets[i * batch.t + p] = id;
      if (id != BpeVocab::kPadId) ++n;
    }
  }
  if (count) *count = n;
  return targets;
}

}  // namespace

Tensor lm_loss(const Tensor& logits, const TokenBatch& batch, std::size_t* n_targets) {
  const auto targets = shifted_targets(batch, n_targets);
  const std::size_t v = logits.dim(-1);
  return cross_entropy(reshape(logits, {batch.b * batch.t, v}), targets, BpeVocab::kPadId);
}

BatchSampler::BatchSampler(std::span<const CorpusDoc> docs, std::uint64_t seed) : seed_(seed) {
  std::map<std::string, std::vector<std::size_t>> by_pl;
  for (std::size_t i = 0; i < docs.size(); ++i) by_pl[docs[i].pl].push_back(i);
  if (by_pl.empty()) throw TrainingError("training split is empty");
  for (auto& [pl, idx] : by_pl) {
    languages_.push_back(pl);
    Lane lane;
    lane.weight = static_cast<std::int64_t>(idx.size());
    lane.docs = std::move(idx);
    total_weight_ += lane.weight;
    lanes_.push_back(std::move(lane));
  }
  for (std::size_t l = 0; l < lanes_.size(); ++l) reshuffle(l);
}

void BatchSampler::reshuffle(std::size_t l) {
  Lane& lane = lanes_[l];
  CounterRng rng = CounterRng(seed_).named("sampler").substream(l).substream(lane.epoch);
  lane.order.resize(lane.docs.size());
  for (std::size_t i = 0; i < lane.order.size(); ++i) lane.order[i] = i;
  for (std::size_t i = lane.order.size(); i > 1; --i) std::swap(lane.order[i - 1], lane.order[rng.below(i)]);
  lane.cursor = 0;
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch_size) {
  std::size_t pick = 0;
  for (std::size_t l = 0; l < lanes_.size(); ++l) {
    lanes_[l].current += lanes_[l].weight;
    if (lanes_[l].current > lanes_[pick].current) pick = l;
  }
  Lane& lane = lanes_[pick];
  lane.current -= total_weight_;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < batch_size; ++i) {
    if (lane.cursor == lane.order.size()) {
      ++lane.epoch;
      reshuffle(pick);
    }
    out.push_back(lane.docs[lane.order[lane.cursor++]]);
  }
  return out;
}

nlohmann::json BatchSampler::state() const {
  nlohmann::json lanes = nlohmann::json::array();
  for (std::size_t l = 0; l < lanes_.size(); ++l) {
    lanes.push_back({{"pl", languages_[l]},
                     {"cursor", lanes_[l].cursor},
                     {"epoch", lanes_[l].epoch},
                     {"current", lanes_[l].current}});
  }
  return {{"seed", seed_}, {"lanes", lanes}};
}

void BatchSampler::restore(const nlohmann::json& s) {
  if (s.at("seed").get<std::uint64_t>() != seed_) throw TrainingError("sampler state was saved with a different seed");
  const auto& lanes = s.at("lanes");
  if (lanes.size() != lanes_.size()) throw TrainingError("sampler state does not match the training languages");
  for (std::size_t l = 0; l < lanes_.size(); ++l) {
    if (lanes[l].at("pl").get<std::string>() != languages_[l]) {
      throw TrainingError("sampler state does not match the training languages");
    }
    lanes_[l].epoch = lanes[l].at("epoch").get<std::uint64_t>();
    reshuffle(l);
    lanes_[l].cursor = lanes[l].at("cursor").get<std::size_t>();
    lanes_[l].current = lanes[l].at("current").get<std::int64_t>();
    if (lanes_[l].cursor > lanes_[l].order.size()) throw TrainingError("sampler cursor out of range");
  }
}

// ---- metrics ---------------------------------------------------------------------

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricRow> rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TrainingError("cannot open output file: " + path.string());
  out.precision(17);
  out << "step,split,pl,loss,lr\n";
  for (const auto& r : rows) out << r.step << ',' << r.split << ',' << r.pl << ',' << r.loss << ',' << r.lr << '\n';
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TrainingError("cannot open metrics file: " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "step,split,pl,loss,lr") throw TrainingError(path.string() + ":1: unexpected header '" + line + "'");
  std::vector<MetricRow> rows;
  for (std::size_t no = 2; std::getline(in, line); ++no) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw TrainingError(path.string() + ":" + std::to_string(no) + ": expected 5 fields");
    try {
      rows.push_back({std::stoull(f[0]), f[1], f[2], std::stod(f[3]), std::stod(f[4])});
    } catch (const std::exception&) {
      throw TrainingError(path.string() + ":" + std::to_string(no) + ": malformed number");
    }
  }
  return rows;
}

std::map<std::string, double> dev_losses(const Model& model, std::span<const CorpusDoc> docs, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::map<std::string, std::vector<const CorpusDoc*>> by_pl;
  for (const auto& d : docs) by_pl[d.pl].push_back(&d);
  std::map<std::string, double> out;
  for (const auto& [pl, list] : by_pl) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < list.size(); start += batch_size) {
      const std::size_t end = std::min(list.size(), start + batch_size);
      const auto batch = make_batch(std::span<const CorpusDoc* const>(list.data() + start, end - start));
      std::size_t n = 0;
      shifted_targets(batch, &n);
      if (n == 0) continue;
      const auto fr = model.forward(batch);
      total += static_cast<double>(lm_loss(fr.logits, batch).item()) * static_cast<double>(n);
      count += n;
    }
    if (count > 0) out[pl] = total / static_cast<double>(count);
  }
  return out;
}

// ---- trainer ---------------------------------------------------------------------

namespace {

void check_languages(const Model& model, std::span<const CorpusDoc> docs, const char* what) {
  const auto v = model.config().variant;
  if (v != Variant::pl_moe && v != Variant::pl_moe_no_shared) return;
  for (const auto& d : docs) {
    if (!model.allocation().per_pl.contains(d.pl)) {
      throw TrainingError(std::string(what) + " split contains language '" + d.pl +
                          "' which has no expert group in the allocation");
    }
  }
}

double overall(const std::map<std::string, double>& per_pl) {
  double s = 0.0;
  for (const auto& [_, v] : per_pl) s += v;
  return per_pl.empty() ? 0.0 : s / static_cast<double>(per_pl.size());
}

}  // namespace

Trainer::Trainer(Model model, TrainConfig config, std::vector<CorpusDoc> train, std::vector<CorpusDoc> dev,
                 CheckpointMeta meta)
    : model_(std::move(model)),
      config_(std::move(config)),
      train_(std::move(train)),
      dev_(std::move(dev)),
      meta_(std::move(meta)) {
  config_.validate();
  if (train_.empty()) throw TrainingError("training split is empty");
  check_languages(model_, train_, "train");
  check_languages(model_, dev_, "dev");
  params_ = model_.parameters();
  adam_ = adam_init(params_);
  sampler_ = BatchSampler(train_, config_.seed);
  dropout_rng_ = CounterRng(config_.seed).named("dropout");
}

double Trainer::step() {
  const double lr = lr_at(step_, config_);
  const double inv_mb = 1.0 / static_cast<double>(config_.micro_batches);
  double loss_sum = 0.0;
  std::size_t used = 0;
  for (std::size_t mb = 0; mb < config_.micro_batches; ++mb) {
    const auto idx = sampler_.next(config_.micro_batch_size);
    std::vector<const CorpusDoc*> docs;
    for (auto i : idx) docs.push_back(&train_[i]);
    const auto batch = make_batch(docs);
    std::size_t n = 0;
    shifted_targets(batch, &n);
    if (n == 0) continue;
    ForwardOptions fo;
    fo.train = true;
    fo.rng = &dropout_rng_;
    fo.aux_alpha = config_.aux_alpha;
    const auto fr = model_.forward(batch, fo);
    const Tensor loss = lm_loss(fr.logits, batch);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw TrainingError("loss diverged (non-finite) at step " + std::to_string(step_) + "; last good checkpoint: " +
                          (last_checkpoint_.empty() ? std::string("none") : last_checkpoint_.string()));
    }
    loss_sum += value;
    ++used;
    Tensor objective = scale(loss, static_cast<float>(inv_mb));
    if (fr.aux_loss.defined()) objective = add(objective, scale(fr.aux_loss, static_cast<float>(inv_mb)));
    objective.backward();
  }
  if (used == 0) throw TrainingError("step " + std::to_string(step_) + " saw no predictable tokens");
  const double mean = loss_sum / static_cast<double>(used);
  clip_grad_norm(params_, config_.grad_clip);
  adam_step(params_, adam_, lr, {config_.beta1, config_.beta2, config_.eps, config_.weight_decay});
  zero_grads(params_);
  metrics_.push_back({step_, "train", "all", mean, lr});
  ++step_;
  return mean;
}

void Trainer::evaluate(const std::filesystem::path& out_dir) {
  if (dev_.empty()) return;
  last_dev_ = dev_losses(model_, dev_, config_.eval_batch_size);
  for (const auto& [pl, loss] : last_dev_) metrics_.push_back({step_, "dev", pl, loss, lr_at(step_, config_)});
  const double o = overall(last_dev_);
  if (!has_best_ || o < best_dev_) {
    best_dev_ = o;
    has_best_ = true;
    if (!out_dir.empty()) {
      CheckpointMeta m = meta_;
      m.extra["step"] = step_;
      m.extra["dev_loss"] = o;
      save_checkpoint(out_dir / "best", model_, m);
    }
  }
}

void Trainer::run(std::size_t until, const std::filesystem::path& out_dir) {
  until = std::min(until, config_.steps);
  std::size_t last_eval = static_cast<std::size_t>(-1);
  while (step_ < until) {
    if (config_.eval_interval > 0 && step_ % config_.eval_interval == 0) {
      evaluate(out_dir);
      last_eval = step_;
    }
    step();
    if (!out_dir.empty() && config_.checkpoint_interval > 0 && step_ % config_.checkpoint_interval == 0) {
      last_checkpoint_ = out_dir / ("step-" + std::to_string(step_));
      save_state(last_checkpoint_);
    }
  }
  if (step_ == config_.steps && last_eval != step_) evaluate(out_dir);
  if (!out_dir.empty() && step_ == config_.steps) {
    save_state(out_dir / "final");
    write_metrics_csv(out_dir / "metrics.csv", metrics_);
  }
}

void Trainer::save_state(const std::filesystem::path& dir) const {
  CheckpointMeta m = meta_;
  m.extra["step"] = step_;
  save_checkpoint(dir, model_, m);
  std::ofstream bin(dir / "trainstate.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw TrainingError("cannot write " + (dir / "trainstate.bin").string());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    bin.write(reinterpret_cast<const char*>(adam_.m[i].data()), static_cast<std::streamsize>(adam_.m[i].size() * 4));
    bin.write(reinterpret_cast<const char*>(adam_.v[i].data()), static_cast<std::streamsize>(adam_.v[i].size() * 4));
  }
  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& r : metrics_) metrics.push_back({r.step, r.split, r.pl, r.loss, r.lr});
  nlohmann::json state = {{"step", step_},
                          {"param_steps", adam_.steps},
                          {"rng", {{"seed", dropout_rng_.seed()},
                                   {"stream", dropout_rng_.stream()},
                                   {"counter", dropout_rng_.counter()}}},
                          {"sampler", sampler_.state()},
                          {"has_best", has_best_},
                          {"best_dev", best_dev_},
                          {"last_dev", last_dev_},
                          {"train_config", config_.to_json()},
                          {"metrics", metrics}};
  write_json_file(dir / "trainstate.json", state);
}

Trainer Trainer::resume(const std::filesystem::path& dir, TrainConfig config, std::vector<CorpusDoc> train,
                        std::vector<CorpusDoc> dev) {
  CheckpointMeta meta;
  Model model = load_checkpoint(dir, &meta);
  meta.extra.erase("step");
  Trainer t(std::move(model), std::move(config), std::move(train), std::move(dev), meta);
  const auto state = read_json_file(dir / "trainstate.json");
  t.step_ = state.at("step").get<std::size_t>();
  t.adam_.steps = state.at("param_steps").get<std::vector<std::uint64_t>>();
  if (t.adam_.steps.size() != t.params_.size()) throw TrainingError("optimizer state does not match the model");
  const auto& r = state.at("rng");
  t.dropout_rng_ = CounterRng(r.at("seed").get<std::uint64_t>(), r.at("stream").get<std::uint64_t>(),
                              r.at("counter").get<std::uint64_t>());
  t.sampler_.restore(state.at("sampler"));
  t.has_best_ = state.at("has_best").get<bool>();
  t.best_dev_ = state.at("best_dev").get<double>();
  t.last_dev_ = state.at("last_dev").get<std::map<std::string, double>>();
  for (const auto& row : state.at("metrics")) {
    t.metrics_.push_back({row[0].get<std::size_t>(), row[1].get<std::string>(), row[2].get<std::string>(),
                          row[3].get<double>(), row[4].get<double>()});
  }
  std::ifstream bin(dir / "trainstate.bin", std::ios::binary);
  if (!bin) throw TrainingError("missing optimizer moments: " + (dir / "trainstate.bin").string());
  std::uint64_t expected = 0;
  for (const auto& m : t.adam_.m) expected += 2 * m.size() * 4;
  if (std::filesystem::file_size(dir / "trainstate.bin") != expected) {
    throw TrainingError("trainstate.bin size does not match the model");
  }
  for (std::size_t i = 0; i < t.params_.size(); ++i) {
    bin.read(reinterpret_cast<char*>(t.adam_.m[i].data()), static_cast<std::streamsize>(t.adam_.m[i].size() * 4));
    bin.read(reinterpret_cast<char*>(t.adam_.v[i].data()), static_cast<std::streamsize>(t.adam_.v[i].size() * 4));
  }
  t.last_checkpoint_ = dir;
  return t;
}

TrainSummary pretrain(Model model, const TrainConfig& config, std::vector<CorpusDoc> train, std::vector<CorpusDoc> dev,
                      const std::filesystem::path& out_dir, const CheckpointMeta& meta) {
  Trainer t(std::move(model), config, std::move(train), std::move(dev), meta);
  t.run(config.steps, out_dir);
  return {t.last_dev(), t.best_dev(), t.metrics()};
}

TrainSummary finetune(const std::filesystem::path& checkpoint, const TrainConfig& config, std::vector<CorpusDoc> train,
                      std::vector<CorpusDoc> dev, const std::filesystem::path& out_dir) {
  CheckpointMeta meta;
  Model model = load_checkpoint(checkpoint, &meta);
  if (config.steps == 0) {
    TrainSummary s;
    if (!dev.empty()) {
      s.final_dev = dev_losses(model, dev, config.eval_batch_size);
      s.best_dev = overall(s.final_dev);
    }
    if (!out_dir.empty()) {
      const auto dst = out_dir / "final";
      std::filesystem::create_directories(dst);
      for (const char* f : {"manifest.json", "params.bin"}) {
        std::filesystem::copy_file(checkpoint / f, dst / f, std::filesystem::copy_options::overwrite_existing);
      }
    }
    return s;
  }
  meta.extra = nlohmann::json::object();
  meta.extra["finetuned_from"] = checkpoint.string();
  Trainer t(std::move(model), config, std::move(train), std::move(dev), meta);
  t.run(config.steps, out_dir);
  return {t.last_dev(), t.best_dev(), t.metrics()};
}

}  // namespace polyglot
