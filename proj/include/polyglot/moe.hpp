// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Expert feed-forward banks and the routing strategies that fill a
// transformer's feed-forward slot:
//   - switch: softmax over all experts, top-1, output scaled by its gate;
//   - PL-MoE: softmax restricted to the token's language group plus the
//     shared experts, top-k (k = 2 by default), gate-weighted sum without
//     renormalizing the selected gates;
//   - PL-MoE without shared experts: the same over the language group only.
// Experts outside the selection never execute, so they receive neither
// compute nor gradient.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "polyglot/tensor.hpp"

namespace polyglot {

class RoutingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Multiply-add and call counts for one feed-forward slot.
struct FfnCounter {
  std::uint64_t tokens = 0;        // tokens that entered the slot
  std::uint64_t expert_calls = 0;  // (token, expert) executions
  std::uint64_t macs = 0;          // multiply-adds inside expert/dense FFN matmuls
};

/// linear(h -> inner) -> gelu -> linear(inner -> h).
struct FeedForward {
  Tensor w1, b1, w2, b2;

  static FeedForward init(std::size_t hidden, std::size_t inner, CounterRng& rng, float stddev = 0.02f);
  /// x: [n, hidden].
  [[nodiscard]] Tensor forward(const Tensor& x, FfnCounter* counter = nullptr) const;
  [[nodiscard]] std::size_t parameter_count() const;
};

struct ExpertAllocation {
  std::size_t total_experts = 0;
  std::map<std::string, std::vector<std::size_t>> per_pl;  // E^p, sorted
  std::vector<std::size_t> shared;                         // E^S, sorted

  /// Throws RoutingError unless sets are disjoint, in range and non-empty.
  void validate(bool require_shared) const;
  /// E^p, plus E^S when include_shared.
  [[nodiscard]] std::vector<std::size_t> candidates(const std::string& pl, bool include_shared) const;
  [[nodiscard]] std::vector<std::string> languages() const;

  [[nodiscard]] nlohmann::json to_json() const;
  static ExpertAllocation from_json(const nlohmann::json& j);
  /// Contiguous groups in the given order, shared experts on the final indices.
  static ExpertAllocation from_group_sizes(const std::vector<std::pair<std::string, std::size_t>>& sizes,
                                           std::size_t total_experts, std::size_t shared);
};

/// Splits the language-specific budget (total - shared) in proportion to
/// data size by largest remainders, then lifts groups below `min_per_pl`
/// by taking from the group furthest above its quota.
ExpertAllocation allocate_experts(const std::map<std::string, std::uint64_t>& data_sizes, std::size_t total_experts,
                                  std::size_t shared, std::size_t min_per_pl = 2);

/// Token counts per (layer, language, expert), plus summed gate values.
class RoutingTrace {
 public:
  struct Cell {
    std::uint64_t count = 0;
    double gate_mass = 0.0;
  };
  using Key = std::tuple<std::size_t, std::string, std::size_t>;

  void add(std::size_t layer, const std::string& pl, std::size_t expert, std::uint64_t count = 1, double gate = 0.0);
  void merge(const RoutingTrace& other);
  [[nodiscard]] std::uint64_t count(std::size_t layer, const std::string& pl, std::size_t expert) const;
  [[nodiscard]] std::uint64_t total(std::size_t layer, const std::string& pl) const;
  [[nodiscard]] bool empty() const { return cells_.empty(); }
  [[nodiscard]] const std::map<Key, Cell>& cells() const { return cells_; }
  [[nodiscard]] std::vector<std::size_t> layers() const;

 private:
  std::map<Key, Cell> cells_;
};

enum class RoutingStrategy { switch_top1, pl_moe, pl_moe_no_shared };

/// Rows of a flattened [n_rows, h] activation grouped by language; rows
/// absent from every group (padding) bypass the expert layer.
struct TokenGroups {
  std::size_t n_rows = 0;
  std::map<std::string, std::vector<std::size_t>> rows;
};

struct RoutingResult {
  Tensor output;    // [n_rows, h]; zero on bypassed rows
  Tensor aux_loss;  // scalar; undefined when alpha == 0
  /// Per row: executed experts in selection order, their gates, and the full
  /// candidate gate distribution (empty for bypassed rows).
  std::vector<std::vector<std::size_t>> selected;
  std::vector<std::vector<float>> selected_gates;
  std::vector<std::vector<float>> candidate_gates;
};

struct RouteOptions {
  std::size_t top_k = 2;
  double aux_alpha = 0.0;
  FfnCounter* counter = nullptr;
  RoutingTrace* trace = nullptr;
  std::size_t layer = 0;
};

RoutingResult switch_route(const Tensor& x, const TokenGroups& groups, std::span<const FeedForward> experts,
                           const Tensor& w_r, const RouteOptions& options);

RoutingResult pl_moe_route(const Tensor& x, const TokenGroups& groups, const ExpertAllocation& alloc,
                           std::span<const FeedForward> experts, const Tensor& w_r, const RouteOptions& options);

RoutingResult pl_moe_route_no_shared(const Tensor& x, const TokenGroups& groups, const ExpertAllocation& alloc,
                                     std::span<const FeedForward> experts, const Tensor& w_r,
                                     const RouteOptions& options);

/// alpha * |C| * sum_i f_i * P_i over one candidate set. `gates` is [n, |C|];
/// f_i is the share of rows whose top-1 candidate is i (constant), P_i the
/// mean gate (differentiable). `weight` rescales the term, e.g. to a
/// token-weighted mean over candidate sets.
Tensor load_balance_aux_loss(const Tensor& gates, double alpha, double weight = 1.0);

struct OccupancyRow {
  std::string pl;
  std::size_t routable = 0;
  double fraction = 0.0;
  /// layer -> per-expert share of this language's routed tokens (sums to 1,
  /// or all zero when the language never appears in the trace).
  std::map<std::size_t, std::vector<double>> distribution;
  bool empty = true;
};

struct OccupancyReport {
  std::size_t total_experts = 0;
  std::vector<OccupancyRow> rows;
  double mean_fraction = 0.0;
};

OccupancyReport occupancy_report(const RoutingTrace& trace, const ExpertAllocation& alloc, RoutingStrategy strategy);

/// CSV: layer,pl,expert,count,row_fraction with one line per expert for every
/// (layer, language) that routed at least one token.
void write_routing_csv(const std::filesystem::path& path, const RoutingTrace& trace, std::size_t total_experts);

}  // namespace polyglot
