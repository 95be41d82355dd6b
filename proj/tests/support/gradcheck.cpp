// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>

#include "polyglot/tensor.hpp"

namespace polyglot::testing {
namespace {

using Vec = std::vector<double>;

struct Input {
  Shape shape;
  Vec values;
  bool differentiable = true;
};

struct Case {
  std::string op;
  std::vector<Input> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> lib;
  std::function<Vec(const std::vector<Vec>&)> ref;
};

std::size_t count(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Entries in [-2, 2], rounded to float so both sides see identical inputs.
Input random_input(CounterRng& rng, Shape shape, bool differentiable = true) {
  Input in{std::move(shape), {}, differentiable};
  in.values.resize(count(in.shape));
  for (auto& v : in.values) v = static_cast<float>(-2.0 + 4.0 * rng.uniform());
  return in;
}

std::size_t dim(CounterRng& rng, std::size_t lo = 1, std::size_t hi = 8) { return lo + rng.below(hi - lo + 1); }

// ---- reference kernels (plain loops, double precision) -------------------------

Vec ref_matmul(const Vec& a, const Vec& b, std::size_t batch, std::size_t m, std::size_t k, std::size_t n) {
  Vec out(batch * m * n, 0.0);
  for (std::size_t z = 0; z < batch; ++z)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a[z * m * k + i * k + p] * b[z * k * n + p * n + j];
        out[z * m * n + i * n + j] = s;
      }
  return out;
}

std::vector<std::size_t> strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

std::vector<std::size_t> unravel(std::size_t flat, const Shape& s) {
  std::vector<std::size_t> idx(s.size());
  for (std::size_t i = s.size(); i-- > 0;) {
    idx[i] = flat % s[i];
    flat /= s[i];
  }
  return idx;
}

Vec ref_transpose(const Vec& x, const Shape& s, std::size_t a0, std::size_t a1) {
  Shape os = s;
  std::swap(os[a0], os[a1]);
  const auto ost = strides(os);
  Vec out(x.size());
  for (std::size_t f = 0; f < x.size(); ++f) {
    auto idx = unravel(f, s);
    std::swap(idx[a0], idx[a1]);
    std::size_t o = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) o += idx[i] * ost[i];
    out[o] = x[f];
  }
  return out;
}

Vec ref_softmax(const Vec& x, const Shape& s, std::size_t axis) {
  const auto st = strides(s);
  Vec out(x.size());
  for (std::size_t f = 0; f < x.size(); ++f) {
    const auto idx = unravel(f, s);
    if (idx[axis] != 0) continue;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < s[axis]; ++j) mx = std::max(mx, x[f + j * st[axis]]);
    double z = 0.0;
    for (std::size_t j = 0; j < s[axis]; ++j) z += std::exp(x[f + j * st[axis]] - mx);
    for (std::size_t j = 0; j < s[axis]; ++j) out[f + j * st[axis]] = std::exp(x[f + j * st[axis]] - mx) / z;
  }
  return out;
}

double ref_gelu(double v) {
  const double c = std::sqrt(2.0 / M_PI);
  return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
}

// ---- case builders -------------------------------------------------------------

Case case_matmul(CounterRng& rng) {
  const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
  Case c{"matmul", {random_input(rng, {m, k}), random_input(rng, {k, n})}, nullptr, nullptr};
  c.lib = [](const std::vector<Tensor>& t) { return matmul(t[0], t[1]); };
  c.ref = [=](const std::vector<Vec>& v) { return ref_matmul(v[0], v[1], 1, m, k, n); };
  return c;
}

Case case_batched_matmul(CounterRng& rng) {
  const std::size_t z = dim(rng, 1, 4), m = dim(rng), k = dim(rng), n = dim(rng);
  Case c{"batched_matmul", {random_input(rng, {z, m, k}), random_input(rng, {z, k, n})}, nullptr, nullptr};
  c.lib = [](const std::vector<Tensor>& t) { return matmul(t[0], t[1]); };
  c.ref = [=](const std::vector<Vec>& v) { return ref_matmul(v[0], v[1], z, m, k, n); };
  return c;
}

Case case_add(CounterRng& rng) {
  // Either equal shapes or a trailing-dimension (bias-style) right operand.
  const Shape s{dim(rng), dim(rng), dim(rng, 1, 4)};
  const bool trailing = rng.below(2) == 1;
  const Shape sb = trailing ? Shape{s[1], s[2]} : s;
  Case c{trailing ? "add_trailing" : "add", {random_input(rng, s), random_input(rng, sb)}, nullptr, nullptr};
  c.lib = [](const std::vector<Tensor>& t) { return add(t[0], t[1]); };
  c.ref = [](const std::vector<Vec>& v) {
    Vec out(v[0].size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[0][i] + v[1][i % v[1].size()];
    return out;
  };
  return c;
}

Case case_multiply(CounterRng& rng) {
  const Shape s{dim(rng), dim(rng)};
  Case c{"multiply", {random_input(rng, s), random_input(rng, s)}, nullptr, nullptr};
  c.lib = [](const std::vector<Tensor>& t) { return multiply(t[0], t[1]); };
  c.ref = [](const std::vector<Vec>& v) {
    Vec out(v[0].size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[0][i] * v[1][i];
    return out;
  };
  return c;
}

Case case_scale(CounterRng& rng) {
  const float f = static_cast<float>(-3.0 + 6.0 * rng.uniform());
  Case c{"scale", {random_input(rng, {dim(rng), dim(rng)})}, nullptr, nullptr};
  c.lib = [f](const std::vector<Tensor>& t) { return scale(t[0], f); };
  c.ref = [f](const std::vector<Vec>& v) {
    Vec out(v[0]);
    for (auto& x : out) x *= static_cast<double>(f);
    return out;
  };
  return c;
}

Case case_transpose(CounterRng& rng) {
  const Shape s{dim(rng), dim(rng), dim(rng)};
  std::size_t a0 = rng.below(3), a1 = rng.below(3);
  if (a0 == a1) a1 = (a0 + 1) % 3;
  Case c{"transpose", {random_input(rng, s)}, nullptr, nullptr};
  c.lib = [=](const std::vector<Tensor>& t) {
    return transpose(t[0], static_cast<std::ptrdiff_t>(a0), static_cast<std::ptrdiff_t>(a1));
  };
  c.ref = [=](const std::vector<Vec>& v) { return ref_transpose(v[0], s, std::min(a0, a1), std::max(a0, a1)); };
  return c;
}

Case case_reshape(CounterRng& rng) {
  const std::size_t a = dim(rng), b = dim(rng), cc = dim(rng, 1, 4);
  Case c{"reshape", {random_input(rng, {a, b, cc})}, nullptr, nullptr};
  c.lib = [=](const std::vector<Tensor>& t) { return reshape(t[0], {a * b, cc}); };
  c.ref = [](const std::vector<Vec>& v) { return v[0]; };
  return c;
}

Case case_concat(CounterRng& rng) {
  const std::size_t parts = 2 + rng.below(2);
  const std::size_t axis = rng.below(2);
  const std::size_t fixed = dim(rng);
  std::vector<std::size_t> sizes;
  Case c{"concat", {}, nullptr, nullptr};
  for (std::size_t p = 0; p < parts; ++p) {
    sizes.push_back(dim(rng, 1, 4));
    c.inputs.push_back(random_input(rng, axis == 0 ? Shape{sizes.back(), fixed} : Shape{fixed, sizes.back()}));
  }
  c.lib = [axis](const std::vector<Tensor>& t) { return concat(t, static_cast<std::ptrdiff_t>(axis)); };
  c.ref = [=](const std::vector<Vec>& v) {
    const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    Vec out(total * fixed);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < v.size(); ++p) {
      for (std::size_t i = 0; i < sizes[p]; ++i)
        for (std::size_t j = 0; j < fixed; ++j) {
          if (axis == 0) {
            out[(offset + i) * fixed + j] = v[p][i * fixed + j];
          } else {
            out[j * total + offset + i] = v[p][j * sizes[p] + i];
          }
        }
      offset += sizes[p];
    }
    return out;
  };
  return c;
}

Case case_softmax(CounterRng& rng) {
  const Shape s{dim(rng), dim(rng), dim(rng, 1, 4)};
  const std::size_t axis = rng.below(3);
  Case c{"softmax", {random_input(rng, s)}, nullptr, nullptr};
  c.lib = [axis](const std::vector<Tensor>& t) { return softmax(t[0], static_cast<std::ptrdiff_t>(axis)); };
  c.ref = [=](const std::vector<Vec>& v) { return ref_softmax(v[0], s, axis); };
  return c;
}

Case case_layer_norm(CounterRng& rng) {
  const std::size_t rows = dim(rng), h = dim(rng, 2, 8);
  Case c{"layer_norm", {random_input(rng, {rows, h}), random_input(rng, {h}), random_input(rng, {h})}, nullptr, nullptr};
  constexpr float eps = 1e-5f;
  c.lib = [](const std::vector<Tensor>& t) { return layer_norm(t[0], t[1], t[2], eps); };
  c.ref = [=](const std::vector<Vec>& v) {
    Vec out(rows * h);
    for (std::size_t r = 0; r < rows; ++r) {
      double mean = 0.0, var = 0.0;
      for (std::size_t j = 0; j < h; ++j) mean += v[0][r * h + j];
      mean /= static_cast<double>(h);
      for (std::size_t j = 0; j < h; ++j) var += (v[0][r * h + j] - mean) * (v[0][r * h + j] - mean);
      var /= static_cast<double>(h);
      const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
      for (std::size_t j = 0; j < h; ++j) out[r * h + j] = (v[0][r * h + j] - mean) * inv * v[1][j] + v[2][j];
    }
    return out;
  };
  return c;
}

Case case_gelu(CounterRng& rng) {
  Case c{"gelu", {random_input(rng, {dim(rng), dim(rng)})}, nullptr, nullptr};
  c.lib = [](const std::vector<Tensor>& t) { return gelu(t[0]); };
  c.ref = [](const std::vector<Vec>& v) {
    Vec out(v[0].size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ref_gelu(v[0][i]);
    return out;
  };
  return c;
}

Case case_dropout(CounterRng& rng) {
  const float p = static_cast<float>(0.1 + 0.4 * rng.uniform());
  const std::uint64_t seed = rng.next_u64();
  Case c{"dropout", {random_input(rng, {dim(rng), dim(rng)})}, nullptr, nullptr};
  // The mask is drawn inside the op; recover it from the forward output.
  auto mask = std::make_shared<Vec>();
  c.lib = [=](const std::vector<Tensor>& t) {
    CounterRng r(seed);
    Tensor out = dropout(t[0], p, true, r);
    const double keep = 1.0 / (1.0 - static_cast<double>(p));
    mask->assign(out.size(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) (*mask)[i] = out.data()[i] != 0.0f ? keep : 0.0;
    return out;
  };
  c.ref = [mask](const std::vector<Vec>& v) {
    Vec out(v[0].size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[0][i] * (*mask)[i];
    return out;
  };
  return c;
}

Case case_embedding(CounterRng& rng) {
  const std::size_t vocab = dim(rng, 2, 8), h = dim(rng), n = dim(rng);
  std::vector<std::int32_t> ids(n);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(vocab));
  Case c{"embedding_lookup", {random_input(rng, {vocab, h})}, nullptr, nullptr};
  c.lib = [ids](const std::vector<Tensor>& t) { return embedding_lookup(t[0], ids); };
  c.ref = [=](const std::vector<Vec>& v) {
    Vec out(n * h);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < h; ++j) out[i * h + j] = v[0][static_cast<std::size_t>(ids[i]) * h + j];
    return out;
  };
  return c;
}

Case case_cross_entropy(CounterRng& rng) {
  const std::size_t t = dim(rng), vocab = dim(rng, 2, 8);
  constexpr std::int32_t ignore = -1;
  std::vector<std::int32_t> targets(t);
  for (auto& tg : targets) tg = rng.below(5) == 0 ? ignore : static_cast<std::int32_t>(rng.below(vocab));
  targets[rng.below(t)] = static_cast<std::int32_t>(rng.below(vocab));  // at least one scored row
  Case c{"cross_entropy", {random_input(rng, {t, vocab})}, nullptr, nullptr};
  c.lib = [targets](const std::vector<Tensor>& x) { return cross_entropy(x[0], targets, ignore); };
  c.ref = [=](const std::vector<Vec>& v) {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < t; ++r) {
      if (targets[r] == ignore) continue;
      double z = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) z += std::exp(v[0][r * vocab + j]);
      total += std::log(z) - v[0][r * vocab + static_cast<std::size_t>(targets[r])];
      ++n;
    }
    return Vec{total / static_cast<double>(n)};
  };
  return c;
}

Case case_sum(CounterRng& rng) {
  Case c{"sum", {random_input(rng, {dim(rng), dim(rng), dim(rng, 1, 4)})}, nullptr, nullptr};
  c.lib = [](const std::vector<Tensor>& t) { return sum(t[0]); };
  c.ref = [](const std::vector<Vec>& v) { return Vec{std::accumulate(v[0].begin(), v[0].end(), 0.0)}; };
  return c;
}

Case case_gather_rows(CounterRng& rng) {
  const std::size_t rows = dim(rng), h = dim(rng), n = dim(rng);
  std::vector<std::size_t> idx(n);
  for (auto& r : idx) r = rng.below(rows);
  Case c{"gather_rows", {random_input(rng, {rows, h})}, nullptr, nullptr};
  c.lib = [idx](const std::vector<Tensor>& t) { return gather_rows(t[0], idx); };
  c.ref = [=](const std::vector<Vec>& v) {
    Vec out(n * h);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < h; ++j) out[i * h + j] = v[0][idx[i] * h + j];
    return out;
  };
  return c;
}

Case case_select_columns(CounterRng& rng) {
  const std::size_t rows = dim(rng), width = dim(rng, 2, 8), n = dim(rng, 1, width);
  std::vector<std::size_t> cols(width);
  std::iota(cols.begin(), cols.end(), std::size_t{0});
  for (std::size_t i = width; i-- > 1;) std::swap(cols[i], cols[rng.below(i + 1)]);
  cols.resize(n);
  Case c{"select_columns", {random_input(rng, {rows, width})}, nullptr, nullptr};
  c.lib = [cols](const std::vector<Tensor>& t) { return select_columns(t[0], cols); };
  c.ref = [=](const std::vector<Vec>& v) {
    Vec out(rows * n);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) out[r * n + j] = v[0][r * width + cols[j]];
    return out;
  };
  return c;
}

Case case_pick(CounterRng& rng) {
  const std::size_t rows = dim(rng), width = dim(rng), n = dim(rng);
  std::vector<std::size_t> ri(n), ci(n);
  for (std::size_t i = 0; i < n; ++i) {
    ri[i] = rng.below(rows);
    ci[i] = rng.below(width);
  }
  Case c{"pick", {random_input(rng, {rows, width})}, nullptr, nullptr};
  c.lib = [ri, ci](const std::vector<Tensor>& t) { return pick(t[0], ri, ci); };
  c.ref = [=](const std::vector<Vec>& v) {
    Vec out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = v[0][ri[i] * width + ci[i]];
    return out;
  };
  return c;
}

Case case_scale_rows(CounterRng& rng) {
  const std::size_t rows = dim(rng), h = dim(rng);
  Case c{"scale_rows", {random_input(rng, {rows, h}), random_input(rng, {rows})}, nullptr, nullptr};
  c.lib = [](const std::vector<Tensor>& t) { return scale_rows(t[0], t[1]); };
  c.ref = [=](const std::vector<Vec>& v) {
    Vec out(rows * h);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < h; ++j) out[r * h + j] = v[0][r * h + j] * v[1][r];
    return out;
  };
  return c;
}

Case case_combine_rows(CounterRng& rng) {
  const std::size_t n_rows = dim(rng, 2, 8), width = dim(rng), parts = 1 + rng.below(3);
  std::vector<std::vector<std::size_t>> rows(parts);
  Case c{"combine_rows", {}, nullptr, nullptr};
  for (auto& r : rows) {
    const std::size_t k = dim(rng, 1, n_rows);
    for (std::size_t i = 0; i < k; ++i) r.push_back(rng.below(n_rows));
    c.inputs.push_back(random_input(rng, {k, width}));
  }
  c.lib = [=](const std::vector<Tensor>& t) { return combine_rows(t, rows, n_rows, width); };
  c.ref = [=](const std::vector<Vec>& v) {
    Vec out(n_rows * width, 0.0);
    for (std::size_t p = 0; p < parts; ++p)
      for (std::size_t i = 0; i < rows[p].size(); ++i)
        for (std::size_t j = 0; j < width; ++j) out[rows[p][i] * width + j] += v[p][i * width + j];
    return out;
  };
  return c;
}

using Builder = Case (*)(CounterRng&);

const std::vector<std::pair<std::string, Builder>>& builders() {
  static const std::vector<std::pair<std::string, Builder>> all = {
      {"matmul", case_matmul},
      {"batched_matmul", case_batched_matmul},
      {"add", case_add},
      {"multiply", case_multiply},
      {"scale", case_scale},
      {"transpose", case_transpose},
      {"reshape", case_reshape},
      {"concat", case_concat},
      {"softmax", case_softmax},
      {"layer_norm", case_layer_norm},
      {"gelu", case_gelu},
      {"dropout", case_dropout},
      {"embedding_lookup", case_embedding},
      {"cross_entropy", case_cross_entropy},
      {"sum", case_sum},
      {"gather_rows", case_gather_rows},
      {"select_columns", case_select_columns},
      {"pick", case_pick},
      {"scale_rows", case_scale_rows},
      {"combine_rows", case_combine_rows},
  };
  return all;
}

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

std::vector<std::string> gradcheck_ops() {
  std::vector<std::string> names;
  for (const auto& [name, _] : builders()) names.push_back(name);
  return names;
}

GradCheckReport run_gradcheck(const GradCheckOptions& options) {
  GradCheckReport report;
  CounterRng master = CounterRng(options.seed).named("gradcheck");
  const auto& all = builders();
  for (std::size_t ci = 0; ci < options.cases; ++ci) {
    CounterRng rng = master.substream(ci);
    Case c = all[ci % all.size()].second(rng);
    ++report.cases;
    ++report.cases_per_op[all[ci % all.size()].first];

    std::vector<Tensor> leaves;
    std::vector<Vec> values;
    for (const auto& in : c.inputs) {
      std::vector<float> f(in.values.begin(), in.values.end());
      leaves.push_back(Tensor::from(in.shape, std::move(f), in.differentiable));
      values.push_back(in.values);
    }
    const Tensor out = c.lib(leaves);

    // Random projection turns any output into a scalar objective.
    Vec weights(out.size());
    for (auto& w : weights) w = static_cast<float>(-1.0 + 2.0 * rng.uniform());
    const Vec reference_out = c.ref(values);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double err = std::abs(reference_out[i] - out.data()[i]) / std::max(1.0, std::abs(reference_out[i]));
      report.max_forward_error = std::max(report.max_forward_error, err);
    }
    std::vector<float> wf(weights.begin(), weights.end());
    Tensor objective = sum(multiply(out, Tensor::from(out.shape(), std::move(wf))));
    objective.backward();

    for (std::size_t i = 0; i < leaves.size(); ++i) {
      if (!c.inputs[i].differentiable) continue;
      const auto grad = leaves[i].has_grad() ? leaves[i].grad() : std::span<const float>{};
      for (std::size_t e = 0; e < values[i].size(); ++e) {
        auto plus = values, minus = values;
        plus[i][e] += options.step;
        minus[i][e] -= options.step;
        const double numeric = (dot(c.ref(plus), weights) - dot(c.ref(minus), weights)) / (2.0 * options.step);
        const double analytic = grad.empty() ? 0.0 : grad[e];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), options.denominator_floor});
        const double rel = std::abs(numeric - analytic) / denom;
        ++report.checked_elements;
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (rel >= options.tolerance) {
          std::ostringstream msg;
          msg << "case " << ci << " (" << c.op << ") input " << i << " element " << e << ": analytic " << analytic
              << " numeric " << numeric << " rel " << rel;
          report.failures.push_back(msg.str());
        }
      }
    }
  }
  if (report.max_forward_error > 1e-5) {
    report.failures.push_back("reference forward disagrees with library forward: " +
                              std::to_string(report.max_forward_error));
  }
  return report;
}

}  // namespace polyglot::testing
