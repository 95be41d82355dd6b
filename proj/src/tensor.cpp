// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "polyglot/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace polyglot {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::vector<float>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

namespace {

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw TensorError("axis out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis);
}

NodePtr new_node(Shape shape, std::vector<float> data) {
  if (numel(shape) != data.size()) {
    throw TensorError("tensor data size " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(shape));
  }
  for (auto d : shape) {
    if (d == 0) throw TensorError("tensor dimensions must be positive: " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return node;
}

// Wraps a freshly computed output. The closure is recorded only when some
// input participates in differentiation.
Tensor record(Shape shape, std::vector<float> data, std::vector<NodePtr> inputs, const char* op,
              std::function<void(Node&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(data));
  node->op = op;
  node->leaf = false;
  const bool any = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                               [](const NodePtr& n) { return n->requires_grad; });
  if (any) {
    for (const auto& in : inputs) {
      if (in->consumed) throw TensorError(std::string(op) + ": input belongs to a released graph");
    }
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// C (+)= A[m,k] * B[k,n], accumulating each row in double.
// Accumulates an R x C block of a*b in registers, in double. `a` points at
// the block's first row, `b` and `c` at its first column.
template <std::size_t R, std::size_t C>
[[gnu::always_inline]] inline void gemm_tile(const float* a, const float* b, float* c, std::size_t k, std::size_t n, bool accumulate) {
  double t[R][C] = {};
  for (std::size_t p = 0; p < k; ++p) {
    double bv[C];
    for (std::size_t jj = 0; jj < C; ++jj) bv[jj] = b[p * n + jj];
    for (std::size_t r = 0; r < R; ++r) {
      const double av = a[r * k + p];
      for (std::size_t jj = 0; jj < C; ++jj) t[r][jj] += av * bv[jj];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    float* dst = c + r * n;
    if (accumulate) {
      for (std::size_t jj = 0; jj < C; ++jj) dst[jj] = static_cast<float>(dst[jj] + t[r][jj]);
    } else {
      for (std::size_t jj = 0; jj < C; ++jj) dst[jj] = static_cast<float>(t[r][jj]);
    }
  }
}

template <std::size_t R>
void gemm_rows(const float* a, const float* b, float* c, std::size_t k, std::size_t n, bool accumulate) {
  std::size_t j = 0;
  for (; j + 32 <= n; j += 32) gemm_tile<R, 32>(a, b + j, c + j, k, n, accumulate);
  for (; j + 8 <= n; j += 8) gemm_tile<R, 8>(a, b + j, c + j, k, n, accumulate);
  for (; j < n; ++j) gemm_tile<R, 1>(a, b + j, c + j, k, n, accumulate);
}

// c[m,n] (+)= a[m,k] * b[k,n], each dot product accumulated in double.
void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<4>(a + i * k, b, c + i * n, k, n, accumulate);
  for (; i < m; ++i) gemm_rows<1>(a + i * k, b, c + i * n, k, n, accumulate);
}

std::vector<float> transposed(const float* x, std::size_t rows, std::size_t cols) {
  std::vector<float> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
  return out;
}

// Swaps axes a0 < a1 viewing the shape as [pre, d0, mid, d1, post].
void swap_axes(const float* in, float* out, const Shape& shape, std::size_t a0, std::size_t a1,
               bool accumulate) {
  std::size_t pre = 1, mid = 1, post = 1;
  for (std::size_t i = 0; i < a0; ++i) pre *= shape[i];
  for (std::size_t i = a0 + 1; i < a1; ++i) mid *= shape[i];
  for (std::size_t i = a1 + 1; i < shape.size(); ++i) post *= shape[i];
  const std::size_t d0 = shape[a0], d1 = shape[a1];
  for (std::size_t p = 0; p < pre; ++p)
    for (std::size_t i = 0; i < d0; ++i)
      for (std::size_t m = 0; m < mid; ++m)
        for (std::size_t j = 0; j < d1; ++j) {
          const float* src = in + (((p * d0 + i) * mid + m) * d1 + j) * post;
          float* dst = out + (((p * d1 + j) * mid + m) * d0 + i) * post;
          if (accumulate) {
            for (std::size_t q = 0; q < post; ++q) dst[q] += src[q];
          } else {
            std::copy(src, src + post, dst);
          }
        }
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = numel(shape);
  return from(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const auto n = numel(shape);
  return from(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  auto node = new_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value) { return from({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!node_) throw TensorError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::ptrdiff_t axis) const { return shape()[normalize_axis(axis, rank())]; }

std::size_t Tensor::size() const { return numel(shape()); }

std::span<const float> Tensor::data() const {
  if (!node_) throw TensorError("use of undefined tensor");
  return node_->data;
}

std::span<float> Tensor::mutable_data() {
  if (!node_) throw TensorError("use of undefined tensor");
  return node_->data;
}

float Tensor::item() const {
  if (size() != 1) throw TensorError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->data[0];
}

float Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw TensorError("index rank mismatch");
  std::size_t flat = 0, i = 0;
  for (auto v : index) {
    if (v >= s[i]) throw TensorError("index out of range");
    flat = flat * s[i++] + v;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!node_) throw TensorError("use of undefined tensor");
  return node_->grad;
}

std::span<float> Tensor::mutable_grad() {
  if (!node_) throw TensorError("use of undefined tensor");
  return node_->ensure_grad();
}

void Tensor::clear_grad() {
  if (node_) {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

void Tensor::backward() {
  if (!node_) throw TensorError("backward on undefined tensor");
  if (node_->data.size() != 1) {
    throw TensorError("backward requires a scalar loss, got shape " + shape_str(node_->shape));
  }
  if (node_->consumed) throw TensorError("backward called twice on a released graph");
  if (!node_->requires_grad) throw TensorError("backward on a detached graph (nothing requires grad)");

  // Iterative post-order DFS gives a topological order of the recorded graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->consumed) throw TensorError("graph contains a node from a released graph");
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->leaf && n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node* n : order) {
    if (n->leaf) continue;
    n->backward_fn = nullptr;
    n->inputs.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->consumed = true;
  }
}

// ---- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool batched = sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0];
  if (!((sa.size() == 2 && sb.size() == 2) || batched) || sa.back() != sb[sb.size() - 2]) {
    throw TensorError("matmul dimension mismatch: " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t batch = batched ? sa[0] : 1;
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  std::vector<float> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n, m, k, n,
         false);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return record(std::move(shape), std::move(out), {a.node(), b.node()}, "matmul",
                [batch, m, k, n](Node& self) {
                  Node& na = *self.inputs[0];
                  Node& nb = *self.inputs[1];
                  for (std::size_t i = 0; i < batch; ++i) {
                    const float* g = self.grad.data() + i * m * n;
                    if (na.requires_grad) {
                      auto bt = transposed(nb.data.data() + i * k * n, k, n);
                      gemm(g, bt.data(), na.ensure_grad().data() + i * m * k, m, n, k, true);
                    }
                    if (nb.requires_grad) {
                      auto at = transposed(na.data.data() + i * m * k, m, k);
                      gemm(at.data(), g, nb.ensure_grad().data() + i * k * n, k, m, n, true);
                    }
                  }
                });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool same = sa == sb;
  const bool trailing = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!same && !trailing) throw TensorError("add shape mismatch: " + shape_str(sa) + " + " + shape_str(sb));
  const std::size_t inner = b.size();
  std::vector<float> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t o = 0; o < out.size(); o += inner)
    for (std::size_t i = 0; i < inner; ++i) out[o + i] += bd[i];
  return record(sa, std::move(out), {a.node(), b.node()}, "add", [inner](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (nb.requires_grad) {
      std::vector<double> acc(inner, 0.0);
      for (std::size_t o = 0; o < self.grad.size(); o += inner)
        for (std::size_t i = 0; i < inner; ++i) acc[i] += self.grad[o + i];
      auto& gb = nb.ensure_grad();
      for (std::size_t i = 0; i < inner; ++i) gb[i] = static_cast<float>(gb[i] + acc[i]);
    }
  });
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError("multiply shape mismatch: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  std::vector<float> out(a.size());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return record(a.shape(), std::move(out), {a.node(), b.node()}, "multiply", [](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * nb.data[i];
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * na.data[i];
    }
  });
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return record(x.shape(), std::move(out), {x.node()}, "scale", [factor](Node& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * factor;
  });
}

Tensor transpose(const Tensor& x, std::ptrdiff_t axis0, std::ptrdiff_t axis1) {
  auto a0 = normalize_axis(axis0, x.rank());
  auto a1 = normalize_axis(axis1, x.rank());
  if (a0 == a1) return x;
  if (a0 > a1) std::swap(a0, a1);
  Shape out_shape = x.shape();
  std::swap(out_shape[a0], out_shape[a1]);
  std::vector<float> out(x.size());
  swap_axes(x.data().data(), out.data(), x.shape(), a0, a1, false);
  return record(out_shape, std::move(out), {x.node()}, "transpose", [a0, a1](Node& self) {
    Node& nx = *self.inputs[0];
    swap_axes(self.grad.data(), nx.ensure_grad().data(), self.shape, a0, a1, true);
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw TensorError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes size");
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  return record(std::move(shape), std::move(out), {x.node()}, "reshape", [](Node& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor concat(std::span<const Tensor> parts, std::ptrdiff_t axis) {
  if (parts.empty()) throw TensorError("concat of zero tensors");
  const auto& first = parts[0].shape();
  const auto ax = normalize_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == ax) || s[i] == first[i];
    if (!ok) throw TensorError("concat shape mismatch: " + shape_str(first) + " vs " + shape_str(s));
    out_shape[ax] += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= first[i];
  for (std::size_t i = ax + 1; i < first.size(); ++i) inner *= first[i];
  for (const auto& p : parts) widths.push_back(p.shape()[ax] * inner);
  const std::size_t row = out_shape[ax] * inner;
  std::vector<float> out(numel(out_shape));
  std::vector<NodePtr> inputs;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.data() + o * widths[p], widths[p], out.data() + o * row + offset);
    offset += widths[p];
    inputs.push_back(parts[p].node());
  }
  return record(out_shape, std::move(out), std::move(inputs), "concat",
                [widths, outer, row](Node& self) {
                  std::size_t off = 0;
                  for (std::size_t p = 0; p < self.inputs.size(); ++p) {
                    Node& in = *self.inputs[p];
                    if (in.requires_grad) {
                      auto& g = in.ensure_grad();
                      for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t j = 0; j < widths[p]; ++j)
                          g[o * widths[p] + j] += self.grad[o * row + off + j];
                    }
                    off += widths[p];
                  }
                });
}

Tensor softmax(const Tensor& x, std::ptrdiff_t axis) {
  const auto ax = normalize_axis(axis, x.rank());
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  const auto xd = x.data();
  std::vector<float> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += std::exp(static_cast<double>(xd[base + j * inner]) - mx);
      for (std::size_t j = 0; j < n; ++j)
        out[base + j * inner] =
            static_cast<float>(std::exp(static_cast<double>(xd[base + j * inner]) - mx) / total);
    }
  return record(s, std::move(out), {x.node()}, "softmax", [outer, inner, n](Node& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(g[base + j * inner]) * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] = static_cast<float>(gx[idx] + static_cast<double>(y[idx]) * (g[idx] - dot));
        }
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const std::size_t h = x.dim(-1);
  if (gain.shape() != Shape{h} || bias.shape() != Shape{h}) {
    throw TensorError("layer_norm affine shape mismatch for " + shape_str(x.shape()));
  }
  if (!(eps > 0.0f)) throw TensorError("layer_norm eps must be positive");
  const std::size_t rows = x.size() / h;
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<float> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = xd.data() + r * h;
    double mean = 0.0;
    for (std::size_t j = 0; j < h; ++j) mean += row[j];
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(h);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h; ++j) {
      const double xh = (row[j] - mean) * rstd[r];
      xhat[r * h + j] = xh;
      out[r * h + j] = static_cast<float>(xh * gd[j] + bd[j]);
    }
  }
  return record(x.shape(), std::move(out), {x.node(), gain.node(), bias.node()}, "layer_norm",
                [h, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                  Node& nx = *self.inputs[0];
                  Node& ng = *self.inputs[1];
                  Node& nb = *self.inputs[2];
                  const auto& g = self.grad;
                  std::vector<double> dgain(h, 0.0), dbias(h, 0.0);
                  std::vector<double> dxhat(h);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t j = 0; j < h; ++j) {
                      const std::size_t i = r * h + j;
                      dgain[j] += g[i] * xhat[i];
                      dbias[j] += g[i];
                      dxhat[j] = static_cast<double>(g[i]) * ng.data[j];
                      mean_d += dxhat[j];
                      mean_dx += dxhat[j] * xhat[i];
                    }
                    if (!nx.requires_grad) continue;
                    mean_d /= static_cast<double>(h);
                    mean_dx /= static_cast<double>(h);
                    auto& gx = nx.ensure_grad();
                    for (std::size_t j = 0; j < h; ++j) {
                      const std::size_t i = r * h + j;
                      gx[i] = static_cast<float>(gx[i] + rstd[r] * (dxhat[j] - mean_d - xhat[i] * mean_dx));
                    }
                  }
                  if (ng.requires_grad) {
                    auto& gg = ng.ensure_grad();
                    for (std::size_t j = 0; j < h; ++j) gg[j] = static_cast<float>(gg[j] + dgain[j]);
                  }
                  if (nb.requires_grad) {
                    auto& gb = nb.ensure_grad();
                    for (std::size_t j = 0; j < h; ++j) gb[j] = static_cast<float>(gb[j] + dbias[j]);
                  }
                });
}

Tensor gelu(const Tensor& x) {
  // tanh approximation, as in GPT-2. The tanh values are kept for backward.
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  const auto xd = x.data();
  std::vector<float> out(x.size());
  std::vector<float> th(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xd[i];
    th[i] = std::tanh(static_cast<float>(c * (v + a * v * v * v)));
    out[i] = static_cast<float>(0.5 * v * (1.0 + th[i]));
  }
  return record(x.shape(), std::move(out), {x.node()}, "gelu", [th = std::move(th)](Node& self) {
    Node& nx = *self.inputs[0];
    auto& gx = nx.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = nx.data[i];
      const double t = th[i];
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
      gx[i] = static_cast<float>(gx[i] + self.grad[i] * d);
    }
  });
}

Tensor dropout(const Tensor& x, float p, bool train, CounterRng& rng) {
  if (p < 0.0f || p >= 1.0f) throw TensorError("dropout probability must be in [0, 1)");
  if (!train || p == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> mask(x.size());
  for (auto& m : mask) m = rng.uniform() < p ? 0.0f : keep_scale;
  const auto xd = x.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  return record(x.shape(), std::move(out), {x.node()}, "dropout", [mask = std::move(mask)](Node& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * mask[i];
  });
}

namespace {

Tensor gather_impl(const Tensor& table, std::vector<std::size_t> rows, const char* op) {
  if (table.rank() != 2) throw TensorError(std::string(op) + " expects a rank-2 table, got " + shape_str(table.shape()));
  const std::size_t n_rows = table.dim(0), h = table.dim(1);
  for (auto r : rows) {
    if (r >= n_rows) {
      throw TensorError(std::string(op) + ": index " + std::to_string(r) + " out of range for " +
                        shape_str(table.shape()));
    }
  }
  if (rows.empty()) throw TensorError(std::string(op) + ": empty index list");
  const auto td = table.data();
  std::vector<float> out(rows.size() * h);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(td.data() + rows[i] * h, h, out.data() + i * h);
  Shape shape{rows.size(), h};
  return record(std::move(shape), std::move(out), {table.node()}, op, [rows = std::move(rows), h](Node& self) {
    auto& gt = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      float* dst = gt.data() + rows[i] * h;
      const float* src = self.grad.data() + i * h;
      for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
    }
  });
}

}  // namespace

Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids) {
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (auto id : ids) {
    if (id < 0) throw TensorError("embedding_lookup: negative id " + std::to_string(id));
    rows.push_back(static_cast<std::size_t>(id));
  }
  return gather_impl(table, std::move(rows), "embedding_lookup");
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  return gather_impl(x, std::vector<std::size_t>(rows.begin(), rows.end()), "gather_rows");
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets, std::int32_t ignore_id) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw TensorError("cross_entropy expects logits [t,V] with t targets, got " + shape_str(logits.shape()) +
                      " and " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t t = logits.dim(0), v = logits.dim(1);
  std::size_t count = 0;
  for (auto tg : targets) {
    if (tg == ignore_id) continue;
    if (tg < 0 || static_cast<std::size_t>(tg) >= v) {
      throw TensorError("cross_entropy: target " + std::to_string(tg) + " outside vocabulary of " + std::to_string(v));
    }
    ++count;
  }
  if (count == 0) throw TensorError("cross_entropy: undefined loss, every position is ignored");
  const auto ld = logits.data();
  std::vector<double> lse(t, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < t; ++r) {
    if (targets[r] == ignore_id) continue;
    const float* row = ld.data() + r * v;
    const float mx = *std::max_element(row, row + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
    lse[r] = mx + std::log(s);
    total += lse[r] - row[targets[r]];
  }
  const double mean = total / static_cast<double>(count);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  return record({1}, {static_cast<float>(mean)}, {logits.node()}, "cross_entropy",
                [tg = std::move(tg), lse = std::move(lse), t, v, count, ignore_id](Node& self) {
                  Node& nl = *self.inputs[0];
                  auto& gl = nl.ensure_grad();
                  const double upstream = self.grad[0] / static_cast<double>(count);
                  for (std::size_t r = 0; r < t; ++r) {
                    if (tg[r] == ignore_id) continue;
                    for (std::size_t j = 0; j < v; ++j) {
                      const std::size_t i = r * v + j;
                      double p = std::exp(static_cast<double>(nl.data[i]) - lse[r]);
                      if (static_cast<std::int32_t>(j) == tg[r]) p -= 1.0;
                      gl[i] = static_cast<float>(gl[i] + upstream * p);
                    }
                  }
                });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  return record({1}, {static_cast<float>(total)}, {x.node()}, "sum", [](Node& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (auto& g : gx) g += self.grad[0];
  });
}

Tensor select_columns(const Tensor& x, std::span<const std::size_t> columns) {
  if (x.rank() != 2) throw TensorError("select_columns expects rank 2, got " + shape_str(x.shape()));
  if (columns.empty()) throw TensorError("select_columns: empty column list");
  const std::size_t rows = x.dim(0), width = x.dim(1), c = columns.size();
  for (auto col : columns) {
    if (col >= width) throw TensorError("select_columns: column " + std::to_string(col) + " out of range");
  }
  const auto xd = x.data();
  std::vector<float> out(rows * c);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xd[r * width + columns[j]];
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  return record({rows, c}, std::move(out), {x.node()}, "select_columns",
                [cols = std::move(cols), rows, width](Node& self) {
                  auto& gx = self.inputs[0]->ensure_grad();
                  const std::size_t c = cols.size();
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < c; ++j) gx[r * width + cols[j]] += self.grad[r * c + j];
                });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  if (x.rank() != 2 || rows.size() != cols.size() || rows.empty()) {
    throw TensorError("pick expects rank-2 input and equal non-empty index lists");
  }
  const std::size_t width = x.dim(1);
  std::vector<std::size_t> flat(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0) || cols[i] >= width) throw TensorError("pick: index out of range");
    flat[i] = rows[i] * width + cols[i];
  }
  const auto xd = x.data();
  std::vector<float> out(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) out[i] = xd[flat[i]];
  const std::size_t n = flat.size();
  return record({n}, std::move(out), {x.node()}, "pick", [flat = std::move(flat)](Node& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < flat.size(); ++i) gx[flat[i]] += self.grad[i];
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& factors) {
  if (x.rank() != 2 || factors.shape() != Shape{x.dim(0)}) {
    throw TensorError("scale_rows shape mismatch: " + shape_str(x.shape()) + " by " + shape_str(factors.shape()));
  }
  const std::size_t rows = x.dim(0), h = x.dim(1);
  const auto xd = x.data();
  const auto fd = factors.data();
  std::vector<float> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < h; ++j) out[r * h + j] = xd[r * h + j] * fd[r];
  return record(x.shape(), std::move(out), {x.node(), factors.node()}, "scale_rows", [rows, h](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nf = *self.inputs[1];
    if (nx.requires_grad) {
      auto& gx = nx.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < h; ++j) gx[r * h + j] += self.grad[r * h + j] * nf.data[r];
    }
    if (nf.requires_grad) {
      auto& gf = nf.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < h; ++j) dot += static_cast<double>(self.grad[r * h + j]) * nx.data[r * h + j];
        gf[r] = static_cast<float>(gf[r] + dot);
      }
    }
  });
}

Tensor combine_rows(std::span<const Tensor> parts, std::span<const std::vector<std::size_t>> rows,
                    std::size_t n_rows, std::size_t width) {
  if (parts.size() != rows.size()) throw TensorError("combine_rows: parts/rows count mismatch");
  std::vector<float> out(n_rows * width, 0.0f);
  std::vector<NodePtr> inputs;
  std::vector<std::vector<std::size_t>> row_lists;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    if (parts[p].shape() != Shape{rows[p].size(), width}) {
      throw TensorError("combine_rows: part shape " + shape_str(parts[p].shape()) + " does not match its rows");
    }
    const auto pd = parts[p].data();
    for (std::size_t i = 0; i < rows[p].size(); ++i) {
      if (rows[p][i] >= n_rows) throw TensorError("combine_rows: row index out of range");
      float* dst = out.data() + rows[p][i] * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += pd[i * width + j];
    }
    inputs.push_back(parts[p].node());
    row_lists.push_back(rows[p]);
  }
  return record({n_rows, width}, std::move(out), std::move(inputs), "combine_rows",
                [row_lists = std::move(row_lists), width](Node& self) {
                  for (std::size_t p = 0; p < self.inputs.size(); ++p) {
                    Node& in = *self.inputs[p];
                    if (!in.requires_grad) continue;
                    auto& g = in.ensure_grad();
                    for (std::size_t i = 0; i < row_lists[p].size(); ++i) {
                      const float* src = self.grad.data() + row_lists[p][i] * width;
                      for (std::size_t j = 0; j < width; ++j) g[i * width + j] += src[j];
                    }
                  }
                });
}

std::vector<std::size_t> argmax(const Tensor& x) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.size() / n;
  const auto xd = x.data();
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (xd[r * n + j] > xd[r * n + best]) best = j;
    out[r] = best;
  }
  return out;
}

std::vector<std::size_t> top_k(std::span<const float> values, std::size_t k) {
  k = std::min(k, values.size());
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return values[a] > values[b] || (values[a] == values[b] && a < b);
                    });
  idx.resize(k);
  return idx;
}

}  // namespace polyglot
