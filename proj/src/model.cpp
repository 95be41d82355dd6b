// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "polyglot/model.hpp"

#include <cmath>
#include <limits>

namespace polyglot {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::dense:
      return "dense";
    case Variant::switch_moe:
      return "switch_moe";
    case Variant::pl_moe:
      return "pl_moe";
    case Variant::pl_moe_no_shared:
      return "pl_moe_no_shared";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  for (auto v : {Variant::dense, Variant::switch_moe, Variant::pl_moe, Variant::pl_moe_no_shared}) {
    if (variant_name(v) == s) return v;
  }
  throw ModelError("unknown model variant '" + std::string(s) +
                   "' (expected dense, switch_moe, pl_moe or pl_moe_no_shared)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ModelError("invalid model config: " + m); };
  if (l_total == 0) fail("l_total must be positive");
  if (l_moe > l_total) fail("l_moe (" + std::to_string(l_moe) + ") exceeds l_total (" + std::to_string(l_total) + ")");
  if (hidden == 0 || heads == 0 || hidden % heads != 0) {
    fail("hidden (" + std::to_string(hidden) + ") must be divisible by heads (" + std::to_string(heads) + ")");
  }
  if (max_seq == 0) fail("max_seq must be positive");
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (ffn_mult == 0) fail("ffn_mult must be positive");
  if (top_k == 0) fail("top_k must be at least 1");
  if (!(dropout >= 0.0f && dropout < 1.0f)) fail("dropout must be in [0, 1)");
  if (!(ln_eps > 0.0f)) fail("ln_eps must be positive");
  if (variant != Variant::dense) {
    if (l_moe == 0) fail("expert variants need l_moe >= 1");
    if (experts == 0) fail("experts must be positive");
    if (shared_experts > experts) fail("shared_experts exceeds experts");
    if (variant == Variant::pl_moe && shared_experts == 0) fail("pl_moe needs at least one shared expert");
  }
}

bool ModelConfig::is_expert_layer(std::size_t layer) const {
  return variant != Variant::dense && layer >= l_total - l_moe;
}

nlohmann::json ModelConfig::to_json() const {
  return {{"l_total", l_total},   {"l_moe", l_moe},
          {"hidden", hidden},     {"max_seq", max_seq},
          {"heads", heads},       {"experts", experts},
          {"shared_experts", shared_experts},
          {"top_k", top_k},       {"vocab_size", vocab_size},
          {"ffn_mult", ffn_mult}, {"variant", std::string(variant_name(variant))},
          {"dropout", dropout},   {"ln_eps", ln_eps}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.l_total = j.at("l_total").get<std::size_t>();
  c.l_moe = j.at("l_moe").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.experts = j.at("experts").get<std::size_t>();
  c.shared_experts = j.at("shared_experts").get<std::size_t>();
  c.top_k = j.at("top_k").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.dropout = j.at("dropout").get<float>();
  c.ln_eps = j.at("ln_eps").get<float>();
  return c;
}

std::size_t dense_parameter_formula(const ModelConfig& c) {
  const std::size_t h = c.hidden, inner = c.ffn_inner();
  const std::size_t attn = 4 * (h * h + h);
  const std::size_t ffn = h * inner + inner + inner * h + h;
  const std::size_t norms = 4 * h;
  return c.vocab_size * h + c.max_seq * h + c.l_total * (attn + ffn + norms) + 2 * h;
}

namespace {

Tensor normal_tensor(Shape shape, CounterRng& rng, double stddev) {
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal() * stddev);
  return Tensor::from(std::move(shape), std::move(v), true);
}

constexpr std::int32_t kPadId = 0;  // matches the vocabulary's reserved padding id

Tensor causal_mask(std::size_t t) {
  std::vector<float> m(t * t, 0.0f);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = -std::numeric_limits<float>::infinity();
  return Tensor::from({t, t}, std::move(m));
}

}  // namespace

Model::Model(ModelConfig config, ExpertAllocation alloc, std::uint64_t seed)
    : config_(std::move(config)), alloc_(std::move(alloc)) {
  config_.validate();
  const auto& c = config_;
  if (c.variant == Variant::pl_moe || c.variant == Variant::pl_moe_no_shared) {
    if (alloc_.total_experts != c.experts) {
      throw ModelError("allocation covers " + std::to_string(alloc_.total_experts) + " experts but the model has " +
                       std::to_string(c.experts));
    }
    alloc_.validate(c.variant == Variant::pl_moe);
  }
  const std::size_t h = c.hidden, inner = c.ffn_inner();
  CounterRng rng = CounterRng(seed).named("init");
  wte = normal_tensor({c.vocab_size, h}, rng, 0.02);
  wpe = normal_tensor({c.max_seq, h}, rng, 0.02);
  for (std::size_t l = 0; l < c.l_total; ++l) {
    Block b;
    b.ln1_g = Tensor::full({h}, 1.0f, true);
    b.ln1_b = Tensor::zeros({h}, true);
    b.ln2_g = Tensor::full({h}, 1.0f, true);
    b.ln2_b = Tensor::zeros({h}, true);
    for (Tensor* w : {&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo}) *w = normal_tensor({h, h}, rng, 0.02);
    for (Tensor* bias : {&b.attn.bq, &b.attn.bk, &b.attn.bv, &b.attn.bo}) *bias = Tensor::zeros({h}, true);
    if (c.is_expert_layer(l)) {
      for (std::size_t e = 0; e < c.experts; ++e) b.experts.push_back(FeedForward::init(h, inner, rng));
      b.router = normal_tensor({h, c.experts}, rng, 0.02 / std::sqrt(static_cast<double>(h)));
    } else {
      b.ffn = FeedForward::init(h, inner, rng);
    }
    blocks.push_back(std::move(b));
  }
  lnf_g = Tensor::full({h}, 1.0f, true);
  lnf_b = Tensor::zeros({h}, true);
}

std::vector<std::pair<std::string, Tensor>> Model::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out{{"wte", wte}, {"wpe", wpe}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "h." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.g", b.ln1_g);
    out.emplace_back(p + "ln1.b", b.ln1_b);
    out.emplace_back(p + "attn.wq", b.attn.wq);
    out.emplace_back(p + "attn.bq", b.attn.bq);
    out.emplace_back(p + "attn.wk", b.attn.wk);
    out.emplace_back(p + "attn.bk", b.attn.bk);
    out.emplace_back(p + "attn.wv", b.attn.wv);
    out.emplace_back(p + "attn.bv", b.attn.bv);
    out.emplace_back(p + "attn.wo", b.attn.wo);
    out.emplace_back(p + "attn.bo", b.attn.bo);
    out.emplace_back(p + "ln2.g", b.ln2_g);
    out.emplace_back(p + "ln2.b", b.ln2_b);
    if (b.experts.empty()) {
      out.emplace_back(p + "ffn.w1", b.ffn.w1);
      out.emplace_back(p + "ffn.b1", b.ffn.b1);
      out.emplace_back(p + "ffn.w2", b.ffn.w2);
      out.emplace_back(p + "ffn.b2", b.ffn.b2);
    } else {
      out.emplace_back(p + "moe.router", b.router);
      for (std::size_t e = 0; e < b.experts.size(); ++e) {
        const std::string q = p + "moe.expert." + std::to_string(e) + ".";
        out.emplace_back(q + "w1", b.experts[e].w1);
        out.emplace_back(q + "b1", b.experts[e].b1);
        out.emplace_back(q + "w2", b.experts[e].w2);
        out.emplace_back(q + "b2", b.experts[e].b2);
      }
    }
  }
  out.emplace_back("ln_f.g", lnf_g);
  out.emplace_back("ln_f.b", lnf_b);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : parameters()) n += t.size();
  return n;
}

ForwardResult Model::forward(const TokenBatch& batch, const ForwardOptions& options) const {
  const auto& c = config_;
  const std::size_t B = batch.b, T = batch.t, h = c.hidden, H = c.heads, d = h / H, n = B * T;
  if (B == 0 || T == 0) throw ModelError("empty batch");
  if (batch.ids.size() != n) {
    throw ModelError("batch has " + std::to_string(batch.ids.size()) + " ids, expected " + std::to_string(n));
  }
  if (T > c.max_seq) {
    throw ModelError("sequence length " + std::to_string(T) + " exceeds max_seq " + std::to_string(c.max_seq));
  }
  for (auto id : batch.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw ModelError("token id " + std::to_string(id) + " out of range for vocab " + std::to_string(c.vocab_size));
    }
  }
  const bool drop = options.train && c.dropout > 0.0f;
  if (drop && options.rng == nullptr) throw ModelError("training forward with dropout needs an rng");
  const bool needs_pl = c.variant != Variant::dense;
  if (needs_pl && batch.pls.size() != B) {
    throw ModelError("expert variants need one language per sequence (" + std::to_string(batch.pls.size()) + " for " +
                     std::to_string(B) + " sequences)");
  }
  auto maybe_drop = [&](const Tensor& x) { return drop ? dropout(x, c.dropout, true, *options.rng) : x; };

  ForwardResult result;
  result.ffn_counters.resize(c.l_total);

  std::vector<std::int32_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<std::int32_t>(i % T);
  Tensor x = maybe_drop(add(embedding_lookup(wte, batch.ids), embedding_lookup(wpe, positions)));

  TokenGroups groups;
  groups.n_rows = n;
  if (needs_pl) {
    for (std::size_t i = 0; i < n; ++i) {
      if (batch.ids[i] != kPadId) groups.rows[batch.pls[i / T]].push_back(i);
    }
  }

  const Tensor mask = causal_mask(T);
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
  auto heads_first = [&](const Tensor& y) {  // [n,h] -> [B*H, T, d]
    return reshape(transpose(reshape(y, {B, T, H, d}), 1, 2), {B * H, T, d});
  };

  for (std::size_t l = 0; l < c.l_total; ++l) {
    const Block& blk = blocks[l];
    // attention
    const Tensor a = layer_norm(x, blk.ln1_g, blk.ln1_b, c.ln_eps);
    const Tensor q = heads_first(add(matmul(a, blk.attn.wq), blk.attn.bq));
    const Tensor k = heads_first(add(matmul(a, blk.attn.wk), blk.attn.bk));
    const Tensor v = heads_first(add(matmul(a, blk.attn.wv), blk.attn.bv));
    const Tensor weights = softmax(add(scale(matmul(q, transpose(k, 1, 2)), inv_sqrt_d), mask), -1);
    if (options.collect_attention) result.attention.push_back(reshape(weights.detach(), {B, H, T, T}));
    const Tensor ctx = matmul(maybe_drop(weights), v);
    const Tensor merged = reshape(transpose(reshape(ctx, {B, H, T, d}), 1, 2), {n, h});
    x = add(x, maybe_drop(add(matmul(merged, blk.attn.wo), blk.attn.bo)));

    // feed-forward slot
    const Tensor m = layer_norm(x, blk.ln2_g, blk.ln2_b, c.ln_eps);
    FfnCounter& counter = result.ffn_counters[l];
    Tensor f;
    if (!c.is_expert_layer(l)) {
      counter.tokens += n;
      f = blk.ffn.forward(m, &counter);
    } else {
      RouteOptions ro;
      ro.top_k = c.top_k;
      ro.aux_alpha = options.aux_alpha;
      ro.counter = &counter;
      ro.trace = &result.trace;
      ro.layer = l;
      RoutingResult r;
      switch (c.variant) {
        case Variant::switch_moe:
          r = switch_route(m, groups, blk.experts, blk.router, ro);
          break;
        case Variant::pl_moe:
          r = pl_moe_route(m, groups, alloc_, blk.experts, blk.router, ro);
          break;
        case Variant::pl_moe_no_shared:
          r = pl_moe_route_no_shared(m, groups, alloc_, blk.experts, blk.router, ro);
          break;
        case Variant::dense:
          break;
      }
      f = r.output;
      if (r.aux_loss.defined()) result.aux_loss = result.aux_loss.defined() ? add(result.aux_loss, r.aux_loss) : r.aux_loss;
      result.selected.push_back(std::move(r.selected));
    }
    x = add(x, maybe_drop(f));
  }
  x = layer_norm(x, lnf_g, lnf_b, c.ln_eps);
  result.logits = reshape(matmul(x, transpose(wte, 0, 1)), {B, T, c.vocab_size});
  return result;
}

}  // namespace polyglot
