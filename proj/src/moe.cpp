// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "polyglot/moe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace polyglot {

// ---- FeedForward ---------------------------------------------------------------

FeedForward FeedForward::init(std::size_t hidden, std::size_t inner, CounterRng& rng, float stddev) {
  auto normal = [&](Shape shape) {
    std::vector<float> v(numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.normal() * stddev);
    return Tensor::from(std::move(shape), std::move(v), true);
  };
  FeedForward f;
  f.w1 = normal({hidden, inner});
  f.b1 = Tensor::zeros({inner}, true);
  f.w2 = normal({inner, hidden});
  f.b2 = Tensor::zeros({hidden}, true);
  return f;
}

Tensor FeedForward::forward(const Tensor& x, FfnCounter* counter) const {
  if (counter) {
    const std::uint64_t n = x.dim(0), h = w1.dim(0), inner = w1.dim(1);
    counter->macs += n * h * inner + n * inner * h;
    counter->expert_calls += n;
  }
  return add(matmul(gelu(add(matmul(x, w1), b1)), w2), b2);
}

std::size_t FeedForward::parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }

// ---- ExpertAllocation ----------------------------------------------------------

void ExpertAllocation::validate(bool require_shared) const {
  if (total_experts == 0) throw RoutingError("allocation has zero experts");
  if (per_pl.empty()) throw RoutingError("allocation has no languages");
  std::set<std::size_t> used;
  auto claim = [&](const std::vector<std::size_t>& set, const std::string& owner) {
    for (auto e : set) {
      if (e >= total_experts) {
        throw RoutingError("expert " + std::to_string(e) + " of " + owner + " is outside 0.." +
                           std::to_string(total_experts - 1));
      }
      if (!used.insert(e).second) throw RoutingError("expert " + std::to_string(e) + " is assigned twice (" + owner + ")");
    }
  };
  for (const auto& [pl, set] : per_pl) {
    if (set.empty()) throw RoutingError("language '" + pl + "' has no experts");
    claim(set, pl);
  }
  if (require_shared && shared.empty()) throw RoutingError("allocation needs at least one shared expert");
  claim(shared, "shared");
}

std::vector<std::size_t> ExpertAllocation::candidates(const std::string& pl, bool include_shared) const {
  const auto it = per_pl.find(pl);
  if (it == per_pl.end()) throw RoutingError("language '" + pl + "' is missing from the expert allocation");
  std::vector<std::size_t> out = it->second;
  if (include_shared) out.insert(out.end(), shared.begin(), shared.end());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> ExpertAllocation::languages() const {
  std::vector<std::string> out;
  for (const auto& [pl, _] : per_pl) out.push_back(pl);
  return out;
}

nlohmann::json ExpertAllocation::to_json() const {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [pl, set] : per_pl) groups[pl] = set;
  return {{"total_experts", total_experts}, {"shared", shared}, {"per_pl", groups}};
}

ExpertAllocation ExpertAllocation::from_json(const nlohmann::json& j) {
  ExpertAllocation a;
  a.total_experts = j.at("total_experts").get<std::size_t>();
  a.shared = j.value("shared", std::vector<std::size_t>{});
  std::sort(a.shared.begin(), a.shared.end());
  for (const auto& [pl, set] : j.at("per_pl").items()) {
    auto v = set.get<std::vector<std::size_t>>();
    std::sort(v.begin(), v.end());
    a.per_pl[pl] = std::move(v);
  }
  return a;
}

ExpertAllocation ExpertAllocation::from_group_sizes(const std::vector<std::pair<std::string, std::size_t>>& sizes,
                                                    std::size_t total_experts, std::size_t shared) {
  ExpertAllocation a;
  a.total_experts = total_experts;
  std::size_t next = 0;
  for (const auto& [pl, n] : sizes) {
    auto& set = a.per_pl[pl];
    for (std::size_t i = 0; i < n; ++i) set.push_back(next++);
  }
  if (next + shared > total_experts) {
    throw RoutingError("group sizes (" + std::to_string(next) + ") plus shared (" + std::to_string(shared) +
                       ") exceed " + std::to_string(total_experts) + " experts");
  }
  for (std::size_t i = 0; i < shared; ++i) a.shared.push_back(total_experts - shared + i);
  return a;
}

ExpertAllocation allocate_experts(const std::map<std::string, std::uint64_t>& data_sizes, std::size_t total_experts,
                                  std::size_t shared, std::size_t min_per_pl) {
  const std::size_t n = data_sizes.size();
  // Every language needs at least one expert to route to.
  min_per_pl = std::max<std::size_t>(min_per_pl, 1);
  if (n == 0) throw RoutingError("allocation needs at least one language");
  if (shared > total_experts || total_experts - shared < n * min_per_pl) {
    throw RoutingError("infeasible allocation: " + std::to_string(total_experts) + " experts minus " +
                       std::to_string(shared) + " shared cannot give " + std::to_string(n) + " languages at least " +
                       std::to_string(min_per_pl) + " each");
  }
  const std::size_t budget = total_experts - shared;
  const double total_size = std::accumulate(data_sizes.begin(), data_sizes.end(), 0.0,
                                            [](double acc, const auto& kv) { return acc + static_cast<double>(kv.second); });
  std::vector<std::string> names;
  std::vector<double> quota;
  std::vector<std::size_t> seats;
  for (const auto& [pl, size] : data_sizes) {
    names.push_back(pl);
    const double q = total_size > 0.0 ? static_cast<double>(budget) * static_cast<double>(size) / total_size
                                      : static_cast<double>(budget) / static_cast<double>(n);
    quota.push_back(q);
    seats.push_back(static_cast<std::size_t>(std::floor(q)));
  }
  std::size_t assigned = std::accumulate(seats.begin(), seats.end(), std::size_t{0});
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return quota[a] - std::floor(quota[a]) > quota[b] - std::floor(quota[b]);
  });
  for (std::size_t i = 0; assigned < budget; i = (i + 1) % n, ++assigned) ++seats[order[i]];

  for (std::size_t p = 0; p < n; ++p) {
    while (seats[p] < min_per_pl) {
      std::size_t donor = n;
      for (std::size_t q = 0; q < n; ++q) {
        if (q == p || seats[q] <= min_per_pl) continue;
        if (donor == n) {
          donor = q;
          continue;
        }
        const double surplus_q = static_cast<double>(seats[q]) - quota[q];
        const double surplus_d = static_cast<double>(seats[donor]) - quota[donor];
        if (surplus_q > surplus_d || (surplus_q == surplus_d && seats[q] > seats[donor])) donor = q;
      }
      if (donor == n) throw RoutingError("infeasible allocation floor");
      --seats[donor];
      ++seats[p];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> sizes;
  for (std::size_t p = 0; p < n; ++p) sizes.emplace_back(names[p], seats[p]);
  return ExpertAllocation::from_group_sizes(sizes, total_experts, shared);
}

// ---- RoutingTrace ---------------------------------------------------------------

void RoutingTrace::add(std::size_t layer, const std::string& pl, std::size_t expert, std::uint64_t count, double gate) {
  auto& cell = cells_[{layer, pl, expert}];
  cell.count += count;
  cell.gate_mass += gate;
}

void RoutingTrace::merge(const RoutingTrace& other) {
  for (const auto& [key, cell] : other.cells_) {
    auto& mine = cells_[key];
    mine.count += cell.count;
    mine.gate_mass += cell.gate_mass;
  }
}

std::uint64_t RoutingTrace::count(std::size_t layer, const std::string& pl, std::size_t expert) const {
  const auto it = cells_.find({layer, pl, expert});
  return it == cells_.end() ? 0 : it->second.count;
}

std::uint64_t RoutingTrace::total(std::size_t layer, const std::string& pl) const {
  std::uint64_t t = 0;
  for (const auto& [key, cell] : cells_)
    if (std::get<0>(key) == layer && std::get<1>(key) == pl) t += cell.count;
  return t;
}

std::vector<std::size_t> RoutingTrace::layers() const {
  std::set<std::size_t> s;
  for (const auto& [key, _] : cells_) s.insert(std::get<0>(key));
  return {s.begin(), s.end()};
}

// ---- routing --------------------------------------------------------------------

Tensor load_balance_aux_loss(const Tensor& gates, double alpha, double weight) {
  const std::size_t n = gates.dim(0), c = gates.dim(1);
  const auto top1 = argmax(gates);
  std::vector<double> share(c, 0.0);
  for (auto e : top1) share[e] += 1.0 / static_cast<double>(n);
  // sum_i f_i * mean_r G[r,i] == sum_{r,i} f_i * G[r,i] / n
  std::vector<float> f(n * c);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < c; ++i) f[r * c + i] = static_cast<float>(share[i]);
  const double factor = alpha * static_cast<double>(c) * weight / static_cast<double>(n);
  return scale(sum(multiply(gates, Tensor::from({n, c}, std::move(f)))), static_cast<float>(factor));
}

namespace {

struct Dispatch {
  // expert -> rows (global), and matching (local row, local column) into the gate tensor
  std::map<std::size_t, std::vector<std::size_t>> global_rows;
  std::map<std::size_t, std::vector<std::size_t>> gate_rows;
  std::map<std::size_t, std::vector<std::size_t>> gate_cols;
};

// Routes one candidate group: softmax over the candidate logits, top-k per
// row, then only the selected experts run.
void route_group(const Tensor& x, const std::string& pl, const std::vector<std::size_t>& rows,
                 const std::vector<std::size_t>& candidates, std::span<const FeedForward> experts, const Tensor& w_r,
                 std::size_t k, const RouteOptions& options, std::size_t total_rows, RoutingResult& result,
                 std::vector<Tensor>& parts, std::vector<std::vector<std::size_t>>& part_rows,
                 std::vector<Tensor>& aux_terms) {
  if (rows.empty()) return;
  for (auto e : candidates) {
    if (e >= experts.size()) throw RoutingError("candidate expert " + std::to_string(e) + " outside the expert bank");
  }
  const Tensor xg = gather_rows(x, rows);
  const bool all_columns = candidates.size() == w_r.dim(1);
  const Tensor w = all_columns ? w_r : select_columns(w_r, candidates);
  const Tensor gates = softmax(matmul(xg, w), -1);
  const std::size_t c = candidates.size();
  const std::size_t k_eff = std::min(k, c);
  const auto gd = gates.data();

  Dispatch d;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::span<const float> row_gates = gd.subspan(r * c, c);
    const auto chosen = top_k(row_gates, k_eff);
    auto& sel = result.selected[rows[r]];
    auto& sel_g = result.selected_gates[rows[r]];
    result.candidate_gates[rows[r]].assign(row_gates.begin(), row_gates.end());
    for (auto local : chosen) {
      const std::size_t e = candidates[local];
      sel.push_back(e);
      sel_g.push_back(row_gates[local]);
      d.global_rows[e].push_back(rows[r]);
      d.gate_rows[e].push_back(r);
      d.gate_cols[e].push_back(local);
      if (options.trace) options.trace->add(options.layer, pl, e, 1, row_gates[local]);
    }
  }
  for (const auto& [e, grows] : d.global_rows) {
    const Tensor ye = experts[e].forward(gather_rows(x, grows), options.counter);
    const Tensor ge = pick(gates, d.gate_rows[e], d.gate_cols[e]);
    parts.push_back(scale_rows(ye, ge));
    part_rows.push_back(grows);
  }
  if (options.aux_alpha != 0.0) {
    aux_terms.push_back(load_balance_aux_loss(gates, options.aux_alpha,
                                              static_cast<double>(rows.size()) / static_cast<double>(total_rows)));
  }
}

RoutingResult finish(const Tensor& x, const TokenGroups& groups, std::vector<Tensor>& parts,
                     std::vector<std::vector<std::size_t>>& part_rows, std::vector<Tensor>& aux_terms,
                     RoutingResult result) {
  const std::size_t h = x.dim(1);
  result.output = parts.empty() ? Tensor::zeros({groups.n_rows, h}) : combine_rows(parts, part_rows, groups.n_rows, h);
  for (const auto& term : aux_terms) result.aux_loss = result.aux_loss.defined() ? add(result.aux_loss, term) : term;
  return result;
}

RoutingResult init_result(const Tensor& x, const TokenGroups& groups, const RouteOptions& options) {
  if (x.rank() != 2 || x.dim(0) != groups.n_rows) {
    throw RoutingError("routing input " + shape_str(x.shape()) + " does not match " + std::to_string(groups.n_rows) +
                       " rows");
  }
  if (options.top_k == 0) throw RoutingError("top_k must be at least 1");
  RoutingResult r;
  r.selected.resize(groups.n_rows);
  r.selected_gates.resize(groups.n_rows);
  r.candidate_gates.resize(groups.n_rows);
  if (options.counter) {
    for (const auto& [_, rows] : groups.rows) options.counter->tokens += rows.size();
  }
  return r;
}

std::size_t active_rows(const TokenGroups& groups) {
  std::size_t n = 0;
  for (const auto& [_, rows] : groups.rows) n += rows.size();
  return n;
}

RoutingResult pl_route(const Tensor& x, const TokenGroups& groups, const ExpertAllocation& alloc,
                       std::span<const FeedForward> experts, const Tensor& w_r, const RouteOptions& options,
                       bool use_shared) {
  RoutingResult result = init_result(x, groups, options);
  if (alloc.total_experts != experts.size() || w_r.dim(1) != experts.size()) {
    throw RoutingError("allocation/expert bank/router size mismatch");
  }
  std::vector<Tensor> parts, aux_terms;
  std::vector<std::vector<std::size_t>> part_rows;
  const std::size_t total = std::max<std::size_t>(1, active_rows(groups));
  for (const auto& [pl, rows] : groups.rows) {
    if (rows.empty()) continue;
    const auto cands = alloc.candidates(pl, use_shared);
    if (cands.empty()) throw RoutingError("language '" + pl + "' has no routable experts");
    route_group(x, pl, rows, cands, experts, w_r, options.top_k, options, total, result, parts, part_rows, aux_terms);
  }
  return finish(x, groups, parts, part_rows, aux_terms, std::move(result));
}

}  // namespace

RoutingResult switch_route(const Tensor& x, const TokenGroups& groups, std::span<const FeedForward> experts,
                           const Tensor& w_r, const RouteOptions& options) {
  RoutingResult result = init_result(x, groups, options);
  if (w_r.dim(1) != experts.size()) throw RoutingError("router columns do not match the expert count");
  std::vector<std::size_t> all(experts.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<Tensor> parts, aux_terms;
  std::vector<std::vector<std::size_t>> part_rows;
  // Every language shares one candidate set, so route all active rows together
  // and attribute trace counts per language afterwards.
  std::vector<std::size_t> rows;
  std::vector<const std::string*> row_pl(groups.n_rows, nullptr);
  for (const auto& [pl, list] : groups.rows) {
    for (auto r : list) {
      rows.push_back(r);
      row_pl[r] = &pl;
    }
  }
  std::sort(rows.begin(), rows.end());
  RouteOptions untraced = options;
  untraced.trace = nullptr;
  RouteOptions top1 = untraced;
  top1.top_k = 1;
  route_group(x, "", rows, all, experts, w_r, 1, top1, std::max<std::size_t>(1, rows.size()), result, parts, part_rows,
              aux_terms);
  if (options.trace) {
    for (auto r : rows) options.trace->add(options.layer, *row_pl[r], result.selected[r][0], 1, result.selected_gates[r][0]);
  }
  return finish(x, groups, parts, part_rows, aux_terms, std::move(result));
}

RoutingResult pl_moe_route(const Tensor& x, const TokenGroups& groups, const ExpertAllocation& alloc,
                           std::span<const FeedForward> experts, const Tensor& w_r, const RouteOptions& options) {
  return pl_route(x, groups, alloc, experts, w_r, options, true);
}

RoutingResult pl_moe_route_no_shared(const Tensor& x, const TokenGroups& groups, const ExpertAllocation& alloc,
                                     std::span<const FeedForward> experts, const Tensor& w_r,
                                     const RouteOptions& options) {
  return pl_route(x, groups, alloc, experts, w_r, options, false);
}

// ---- occupancy -------------------------------------------------------------------

OccupancyReport occupancy_report(const RoutingTrace& trace, const ExpertAllocation& alloc, RoutingStrategy strategy) {
  if (trace.empty()) throw RoutingError("occupancy report needs a non-empty routing trace");
  OccupancyReport report;
  report.total_experts = alloc.total_experts;
  const auto layers = trace.layers();
  for (const auto& [pl, set] : alloc.per_pl) {
    OccupancyRow row;
    row.pl = pl;
    switch (strategy) {
      case RoutingStrategy::switch_top1:
        row.routable = alloc.total_experts;
        break;
      case RoutingStrategy::pl_moe:
        row.routable = set.size() + alloc.shared.size();
        break;
      case RoutingStrategy::pl_moe_no_shared:
        row.routable = set.size();
        break;
    }
    row.fraction = static_cast<double>(row.routable) / static_cast<double>(alloc.total_experts);
    for (auto layer : layers) {
      std::vector<double> dist(alloc.total_experts, 0.0);
      const auto total = trace.total(layer, pl);
      if (total > 0) {
        row.empty = false;
        for (std::size_t e = 0; e < alloc.total_experts; ++e)
          dist[e] = static_cast<double>(trace.count(layer, pl, e)) / static_cast<double>(total);
      }
      row.distribution[layer] = std::move(dist);
    }
    report.mean_fraction += row.fraction;
    report.rows.push_back(std::move(row));
  }
  report.mean_fraction /= static_cast<double>(report.rows.size());
  return report;
}

void write_routing_csv(const std::filesystem::path& path, const RoutingTrace& trace, std::size_t total_experts) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RoutingError("cannot open output file: " + path.string());
  out << "layer,pl,expert,count,row_fraction\n";
  std::set<std::pair<std::size_t, std::string>> rows;
  for (const auto& [key, _] : trace.cells()) rows.emplace(std::get<0>(key), std::get<1>(key));
  out.precision(17);
  for (const auto& [layer, pl] : rows) {
    const auto total = trace.total(layer, pl);
    if (total == 0) continue;
    for (std::size_t e = 0; e < total_experts; ++e) {
      const auto c = trace.count(layer, pl, e);
      out << layer << ',' << pl << ',' << e << ',' << c << ','
          << static_cast<double>(c) / static_cast<double>(total) << '\n';
    }
  }
}

}  // namespace polyglot
