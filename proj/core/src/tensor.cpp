#include "bmip/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <cblas.h>

namespace bmip {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

thread_local bool g_grad_enabled = true;

Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b,
                             const std::string& detail = {}) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_string(a) << " and " << shape_string(b);
  if (!detail.empty()) os << " (" << detail << ")";
  throw ShapeError(os.str());
}

std::size_t product(const Shape& shape, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= shape[i];
  return p;
}

void check_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_string(shape));
  }
}

// How the second operand of a binary op maps onto the first.
struct Broadcast {
  enum class Kind { Same, Tile, General } kind = Kind::Same;
  std::size_t period = 0;           // Tile: b index = i % period
  std::vector<std::size_t> index;   // General: b index for every element of a
};

Broadcast plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  Broadcast plan;
  if (a == b) return plan;
  if (b.size() > a.size()) shape_fail(op, a, b, "second operand has higher rank");
  const std::size_t offset = a.size() - b.size();
  bool tile = true;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] != a[offset + i]) {
      tile = false;
      if (b[i] != 1) shape_fail(op, a, b, "not broadcastable");
    }
  }
  if (tile) {
    plan.kind = Broadcast::Kind::Tile;
    plan.period = shape_numel(b);
    return plan;
  }
  plan.kind = Broadcast::Kind::General;
  const std::size_t n = shape_numel(a);
  plan.index.resize(n);
  std::vector<std::size_t> b_stride(a.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = b.size(); i-- > 0;) {
    b_stride[offset + i] = b[i] == 1 ? 0 : stride;
    stride *= b[i];
  }
  std::vector<std::size_t> counter(a.size(), 0);
  std::size_t bi = 0;
  for (std::size_t i = 0; i < n; ++i) {
    plan.index[i] = bi;
    for (std::size_t ax = a.size(); ax-- > 0;) {
      ++counter[ax];
      bi += b_stride[ax];
      if (counter[ax] < a[ax]) break;
      bi -= b_stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return plan;
}

enum class BinaryKind { Add, Sub, Mul };

// Calls f(i, j) for every element i of the first operand and its partner j
// in the second.
template <class F>
void for_each_pair(const Broadcast& plan, std::size_t n, F&& f) {
  switch (plan.kind) {
    case Broadcast::Kind::Same:
      for (std::size_t i = 0; i < n; ++i) f(i, i);
      break;
    case Broadcast::Kind::Tile:
      for (std::size_t base = 0; base < n; base += plan.period) {
        for (std::size_t j = 0; j < plan.period; ++j) f(base + j, j);
      }
      break;
    case Broadcast::Kind::General:
      for (std::size_t i = 0; i < n; ++i) f(i, plan.index[i]);
      break;
  }
}

Tensor binary(const char* op, BinaryKind kind, const Tensor& a, const Tensor& b) {
  auto plan = std::make_shared<Broadcast>(plan_broadcast(op, a.shape(), b.shape()));
  const double* av = a.data().data();
  const double* bv = b.data().data();
  std::vector<double> out(a.numel());
  double* o = out.data();
  switch (kind) {
    case BinaryKind::Add: for_each_pair(*plan, out.size(), [&](std::size_t i, std::size_t j) { o[i] = av[i] + bv[j]; }); break;
    case BinaryKind::Sub: for_each_pair(*plan, out.size(), [&](std::size_t i, std::size_t j) { o[i] = av[i] - bv[j]; }); break;
    case BinaryKind::Mul: for_each_pair(*plan, out.size(), [&](std::size_t i, std::size_t j) { o[i] = av[i] * bv[j]; }); break;
  }
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [plan, kind](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const double* g = self.grad.data();
    const std::size_t n = self.grad.size();
    if (na.requires_grad) {
      double* ga = na.ensure_grad().data();
      if (kind == BinaryKind::Mul) {
        const double* bv = nb.value.data();
        for_each_pair(*plan, n, [&](std::size_t i, std::size_t j) { ga[i] += g[i] * bv[j]; });
      } else {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
    }
    if (nb.requires_grad) {
      double* gb = nb.ensure_grad().data();
      switch (kind) {
        case BinaryKind::Add: for_each_pair(*plan, n, [&](std::size_t i, std::size_t j) { gb[j] += g[i]; }); break;
        case BinaryKind::Sub: for_each_pair(*plan, n, [&](std::size_t i, std::size_t j) { gb[j] -= g[i]; }); break;
        case BinaryKind::Mul: {
          const double* av = na.value.data();
          for_each_pair(*plan, n, [&](std::size_t i, std::size_t j) { gb[j] += g[i] * av[i]; });
          break;
        }
      }
    }
  });
}

// C[M, N] += op(A) op(B) with row-major operands. op(A) is [M, K]; A is
// stored [K, M] when trans_a. op(B) is [K, N]; B is stored [N, K] when trans_b.
void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K, const double* A,
          const double* B, double* C) {
  if (M == 0 || N == 0) return;
  if (K == 0) return;
  static const bool single_threaded = [] {
    // Seed-level parallelism happens above this layer; keep GEMM serial.
    openblas_set_num_threads(1);
    return true;
  }();
  (void)single_threaded;
  const auto m = static_cast<blasint>(M), n = static_cast<blasint>(N), k = static_cast<blasint>(K);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
              1.0, A, trans_a ? m : k, B, trans_b ? k : n, 1.0, C, n);
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Tensor ---------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_string(shape) + " cannot hold " +
                     std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() needs a single-element tensor, got " + shape_string(shape()));
  const double one = 1.0;
  GradTape(*this).backward(std::span<const double>(&one, 1));
}

Tensor Tensor::detach(bool requires_grad) const {
  return from(shape(), node_->value, requires_grad);
}

GradTape::GradTape(const Tensor& root) : root_(root.node()) {
  // Iterative post-order DFS; a node is emitted after all of its inputs.
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (root_->requires_grad) {
    stack.emplace_back(root_.get(), 0);
    seen.insert(root_.get());
  }
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

void GradTape::backward(std::span<const double> seed) const {
  if (order_.empty()) return;
  if (seed.size() != root_->value.size()) {
    throw ShapeError("backward seed has " + std::to_string(seed.size()) + " values for root " +
                     shape_string(root_->shape));
  }
  auto& g = root_->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// Elementwise ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinaryKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinaryKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinaryKind::Mul, a, b); }

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), {a.node()}, [factor](Node& self) {
    auto& ga = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double offset) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += offset;
  return make_result(a.shape(), std::move(out), {a.node()}, [](Node& self) {
    auto& ga = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

// Linear algebra --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2) shape_fail("matmul", as, bs, "left operand needs rank >= 2");
  const std::size_t K = as.back();
  const bool batched = bs.size() == 3;
  if (bs.size() != 2 && !batched) shape_fail("matmul", as, bs, "right operand needs rank 2 or 3");
  if (batched && (as.size() != 3 || as[0] != bs[0])) shape_fail("matmul", as, bs, "batch extents differ");
  const std::size_t bk = transpose_b ? bs.back() : bs[bs.size() - 2];
  const std::size_t N = transpose_b ? bs[bs.size() - 2] : bs.back();
  if (bk != K) shape_fail("matmul", as, bs, "inner dimensions differ");

  const std::size_t batches = batched ? as[0] : 1;
  const std::size_t rows = a.numel() / K / batches;  // rows per batch
  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(N);

  std::vector<double> C(batches * rows * N, 0.0);
  for (std::size_t t = 0; t < batches; ++t) {
    gemm(false, transpose_b, rows, N, K, a.data().data() + t * rows * K,
         b.data().data() + (batched ? t * K * N : 0), C.data() + t * rows * N);
  }

  return make_result(std::move(out_shape), std::move(C), {a.node(), b.node()},
                     [batches, rows, K, N, batched, transpose_b](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const double* G = self.grad.data();
    double* GA = na.requires_grad ? na.ensure_grad().data() : nullptr;
    double* GB = nb.requires_grad ? nb.ensure_grad().data() : nullptr;
    const double* A = na.value.data();
    const double* B = nb.value.data();
    for (std::size_t t = 0; t < batches; ++t) {
      const std::size_t boff = batched ? t * K * N : 0;
      const double* At = A + t * rows * K;
      const double* Gt = G + t * rows * N;
      // dA = G B^T (or G B when b is stored transposed).
      if (GA) gemm(false, !transpose_b, rows, K, N, Gt, B + boff, GA + t * rows * K);
      // dB = A^T G, or G^T A for the transposed layout.
      if (GB) {
        if (transpose_b) {
          gemm(true, false, N, K, rows, Gt, At, GB + boff);
        } else {
          gemm(true, false, K, N, rows, At, Gt, GB + boff);
        }
      }
    }
  });
}

// Structural -------------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Shape& first = parts.front().shape();
  check_axis("concat", first, axis);
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_fail("concat", first, s, "rank differs");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) shape_fail("concat", first, s, "extent differs off the concat axis");
    }
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = product(first, 0, axis);
  const std::size_t inner = product(first, axis + 1, first.size());
  std::vector<std::size_t> chunk;
  for (const auto& p : parts) chunk.push_back(p.shape()[axis] * inner);
  const std::size_t row = out_shape[axis] * inner;

  std::vector<double> out(outer * row);
  std::vector<NodePtr> inputs;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * chunk[k], chunk[k], out.data() + o * row + offset);
    }
    offset += chunk[k];
    inputs.push_back(parts[k].node());
  }
  return make_result(std::move(out_shape), std::move(out), std::move(inputs),
                     [outer, row, chunk](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      Node& in = *self.inputs[k];
      if (in.requires_grad) {
        auto& g = in.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = self.grad.data() + o * row + off;
          double* dst = g.data() + o * chunk[k];
          for (std::size_t i = 0; i < chunk[k]; ++i) dst[i] += src[i];
        }
      }
      off += chunk[k];
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  check_axis("slice", s, axis);
  if (begin >= end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for axis " + std::to_string(axis) + " of " + shape_string(s));
  }
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return index_select(a, axis, idx);
}

Tensor index_select(const Tensor& a, std::size_t axis, std::span<const std::size_t> indices) {
  const Shape& s = a.shape();
  check_axis("index_select", s, axis);
  if (indices.empty()) throw ShapeError("index_select: empty index list on " + shape_string(s));
  for (std::size_t i : indices) {
    if (i >= s[axis]) {
      throw ShapeError("index_select: index " + std::to_string(i) + " out of range for axis " +
                       std::to_string(axis) + " of " + shape_string(s));
    }
  }
  const std::size_t outer = product(s, 0, axis);
  const std::size_t inner = product(s, axis + 1, s.size());
  const std::size_t extent = s[axis];
  Shape out_shape = s;
  out_shape[axis] = indices.size();
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  std::vector<double> out(outer * idx->size() * inner);
  const auto src = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < idx->size(); ++j) {
      std::copy_n(src.data() + (o * extent + (*idx)[j]) * inner, inner,
                  out.data() + (o * idx->size() + j) * inner);
    }
  }
  return make_result(std::move(out_shape), std::move(out), {a.node()},
                     [outer, inner, extent, idx](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < idx->size(); ++j) {
        const double* src = self.grad.data() + (o * idx->size() + j) * inner;
        double* dst = g.data() + (o * extent + (*idx)[j]) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape, "element count differs");
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a.node()}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, std::span<const std::size_t> order) {
  const Shape& s = a.shape();
  const std::size_t r = s.size();
  std::vector<bool> used(r, false);
  if (order.size() != r) throw ShapeError("permute: order length differs from rank of " + shape_string(s));
  for (std::size_t ax : order) {
    if (ax >= r || used[ax]) throw ShapeError("permute: invalid axis order for " + shape_string(s));
    used[ax] = true;
  }
  std::vector<std::size_t> in_stride(r);
  for (std::size_t i = r, st = 1; i-- > 0;) {
    in_stride[i] = st;
    st *= s[i];
  }
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);  // input stride per output axis
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = s[order[i]];
    stride[i] = in_stride[order[i]];
  }
  const std::size_t n = a.numel();
  auto map = std::make_shared<std::vector<std::size_t>>(n);  // output -> input index
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*map)[i] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      src += stride[ax];
      if (counter[ax] < out_shape[ax]) break;
      src -= stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  std::vector<double> out(n);
  const auto av = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[(*map)[i]];
  return make_result(std::move(out_shape), std::move(out), {a.node()}, [map](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < map->size(); ++i) g[(*map)[i]] += self.grad[i];
  });
}

Tensor repeat_leading(const Tensor& a, std::size_t count) {
  if (count == 0) throw ShapeError("repeat_leading: count must be positive");
  Shape out_shape{count};
  out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
  const std::size_t n = a.numel();
  std::vector<double> out(count * n);
  for (std::size_t c = 0; c < count; ++c) std::copy_n(a.data().data(), n, out.data() + c * n);
  return make_result(std::move(out_shape), std::move(out), {a.node()}, [count, n](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t c = 0; c < count; ++c) {
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[c * n + i];
    }
  });
}

// Reductions -------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result({1}, {acc}, {a.node()}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, std::size_t axis) {
  const Shape& s = a.shape();
  check_axis("sum", s, axis);
  const std::size_t outer = product(s, 0, axis);
  const std::size_t extent = s[axis];
  const std::size_t inner = product(s, axis + 1, s.size());
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(outer * inner, 0.0);
  const auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      const double* src = av.data() + (o * extent + e) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  return make_result(std::move(out_shape), std::move(out), {a.node()},
                     [outer, extent, inner](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t e = 0; e < extent; ++e) {
        double* dst = g.data() + (o * extent + e) * inner;
        const double* src = self.grad.data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  check_axis("mean", a.shape(), axis);
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.shape()[axis]));
}

// Nonlinearities ---------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  check_axis("softmax", s, axis);
  const std::size_t outer = product(s, 0, axis);
  const std::size_t extent = s[axis];
  const std::size_t inner = product(s, axis + 1, s.size());
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      double peak = -INFINITY;
      for (std::size_t e = 0; e < extent; ++e) {
        const double v = xv[base + e * inner];
        if (!std::isfinite(v)) throw std::domain_error("softmax: non-finite input");
        peak = std::max(peak, v);
      }
      double total = 0.0;
      for (std::size_t e = 0; e < extent; ++e) {
        const double ev = std::exp(xv[base + e * inner] - peak);
        out[base + e * inner] = ev;
        total += ev;
      }
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= total;
    }
  }
  return make_result(s, std::move(out), {x.node()}, [outer, extent, inner](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const auto& y = self.value;
    const auto& dy = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * extent * inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < extent; ++e) dot += dy[base + e * inner] * y[base + e * inner];
        for (std::size_t e = 0; e < extent; ++e) {
          const std::size_t k = base + e * inner;
          g[k] += y[k] * (dy[k] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const Shape& s = x.shape();
  const std::size_t D = s.back();
  if (gain.shape() != Shape{D}) shape_fail("layer_norm", s, gain.shape(), "gain must match last axis");
  if (bias.shape() != Shape{D}) shape_fail("layer_norm", s, bias.shape(), "bias must match last axis");
  const std::size_t rows = x.numel() / D;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * D;
    double mu = 0.0;
    for (std::size_t d = 0; d < D; ++d) mu += xr[d];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t d = 0; d < D; ++d) var += (xr[d] - mu) * (xr[d] - mu);
    var /= static_cast<double>(D);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[r] = inv;
    for (std::size_t d = 0; d < D; ++d) {
      const double h = (xr[d] - mu) * inv;
      (*xhat)[r * D + d] = h;
      out[r * D + d] = h * gv[d] + bv[d];
    }
  }
  return make_result(s, std::move(out), {x.node(), gain.node(), bias.node()},
                     [rows, D, xhat, inv_std](Node& self) {
    Node& nx = *self.inputs[0];
    Node& ng = *self.inputs[1];
    Node& nb = *self.inputs[2];
    const auto& dy = self.grad;
    if (ng.requires_grad || nb.requires_grad) {
      double* gg = ng.requires_grad ? ng.ensure_grad().data() : nullptr;
      double* gb = nb.requires_grad ? nb.ensure_grad().data() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t d = 0; d < D; ++d) {
          if (gg) gg[d] += dy[r * D + d] * (*xhat)[r * D + d];
          if (gb) gb[d] += dy[r * D + d];
        }
      }
    }
    if (nx.requires_grad) {
      auto& gx = nx.ensure_grad();
      const auto& gain_v = ng.value;
      std::vector<double> dh(D);
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0;
        double m2 = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
          dh[d] = dy[r * D + d] * gain_v[d];
          m1 += dh[d];
          m2 += dh[d] * (*xhat)[r * D + d];
        }
        m1 /= static_cast<double>(D);
        m2 /= static_cast<double>(D);
        for (std::size_t d = 0; d < D; ++d) {
          gx[r * D + d] += (*inv_std)[r] * (dh[d] - m1 - (*xhat)[r * D + d] * m2);
        }
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(x.numel());
  const bool keep = grad_enabled() && x.requires_grad();
  auto tanhs = std::make_shared<std::vector<double>>(keep ? out.size() : 0);
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    const double t = std::tanh(kC * (v + kA * v * v * v));
    if (keep) (*tanhs)[i] = t;
    out[i] = 0.5 * v * (1.0 + t);
  }
  return make_result(x.shape(), std::move(out), {x.node()}, [tanhs](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = in.value[i];
      const double t = (*tanhs)[i];
      const double dt = (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    // Branches keep exp() from overflowing for large |v|.
    out[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_result(x.shape(), std::move(out), {x.node()}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = self.value[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  return make_result(x.shape(), std::move(out), {x.node()}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Tensor l2_normalize(const Tensor& x) {
  const std::size_t D = x.shape().back();
  const std::size_t rows = x.numel() / D;
  const auto xv = x.data();
  auto norms = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t d = 0; d < D; ++d) ss += xv[r * D + d] * xv[r * D + d];
    const double norm = std::sqrt(ss);
    if (!(norm > 0.0)) throw std::domain_error("l2_normalize: zero-norm row " + std::to_string(r));
    (*norms)[r] = norm;
    for (std::size_t d = 0; d < D; ++d) out[r * D + d] = xv[r * D + d] / norm;
  }
  return make_result(x.shape(), std::move(out), {x.node()}, [rows, D, norms](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t d = 0; d < D; ++d) dot += self.grad[r * D + d] * self.value[r * D + d];
      for (std::size_t d = 0; d < D; ++d) {
        g[r * D + d] += (self.grad[r * D + d] - self.value[r * D + d] * dot) / (*norms)[r];
      }
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_string(table.shape()));
  const std::size_t V = table.dim(0);
  const std::size_t D = table.dim(1);
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  auto rows = std::make_shared<std::vector<std::size_t>>();
  rows->reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw std::out_of_range("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(V));
    }
    rows->push_back(static_cast<std::size_t>(id));
  }
  std::vector<double> out(ids.size() * D);
  const auto tv = table.data();
  for (std::size_t i = 0; i < rows->size(); ++i) {
    std::copy_n(tv.data() + (*rows)[i] * D, D, out.data() + i * D);
  }
  return make_result({ids.size(), D}, std::move(out), {table.node()}, [rows, D](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < rows->size(); ++i) {
      for (std::size_t d = 0; d < D; ++d) g[(*rows)[i] * D + d] += self.grad[i * D + d];
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [B, N], got " + shape_string(logits.shape()));
  const std::size_t B = logits.dim(0);
  const std::size_t N = logits.dim(1);
  if (labels.size() != B) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_string(logits.shape()));
  }
  const auto lv = logits.data();
  auto probs = std::make_shared<std::vector<double>>(B * N);
  auto targets = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= N) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside " + std::to_string(N) + " classes");
    }
    const double* row = lv.data() + b * N;
    double peak = -INFINITY;
    for (std::size_t n = 0; n < N; ++n) {
      if (!std::isfinite(row[n])) throw std::domain_error("cross_entropy: non-finite logit");
      peak = std::max(peak, row[n]);
    }
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) total += std::exp(row[n] - peak);
    const double log_z = peak + std::log(total);
    for (std::size_t n = 0; n < N; ++n) (*probs)[b * N + n] = std::exp(row[n] - log_z);
    loss += log_z - row[static_cast<std::size_t>(y)];
  }
  loss /= static_cast<double>(B);
  return make_result({1}, {loss}, {logits.node()}, [B, N, probs, targets](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const double up = self.grad[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t n = 0; n < N; ++n) {
        const double onehot = static_cast<int>(n) == (*targets)[b] ? 1.0 : 0.0;
        g[b * N + n] += up * ((*probs)[b * N + n] - onehot);
      }
    }
  });
}

Tensor soft_cross_entropy(const Tensor& logits, std::span<const double> targets) {
  if (logits.rank() != 2) throw ShapeError("soft_cross_entropy: logits must be [B, N], got " + shape_string(logits.shape()));
  if (targets.size() != logits.numel()) {
    throw ShapeError("soft_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(logits.shape()));
  }
  const std::size_t B = logits.dim(0);
  const std::size_t N = logits.dim(1);
  const auto lv = logits.data();
  auto probs = std::make_shared<std::vector<double>>(B * N);
  auto weights = std::make_shared<std::vector<double>>(targets.begin(), targets.end());
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = lv.data() + b * N;
    double peak = -INFINITY;
    for (std::size_t n = 0; n < N; ++n) {
      if (!std::isfinite(row[n])) throw std::domain_error("soft_cross_entropy: non-finite logit");
      peak = std::max(peak, row[n]);
    }
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) total += std::exp(row[n] - peak);
    const double log_z = peak + std::log(total);
    for (std::size_t n = 0; n < N; ++n) {
      (*probs)[b * N + n] = std::exp(row[n] - log_z);
      loss -= targets[b * N + n] * (row[n] - log_z);
    }
  }
  loss /= static_cast<double>(B);
  return make_result({1}, {loss}, {logits.node()}, [B, N, probs, weights](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const double up = self.grad[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
      double mass = 0.0;
      for (std::size_t n = 0; n < N; ++n) mass += (*weights)[b * N + n];
      for (std::size_t n = 0; n < N; ++n) {
        g[b * N + n] += up * (mass * (*probs)[b * N + n] - (*weights)[b * N + n]);
      }
    }
  });
}

// Attention ----------------------------------------------------------------------

AttentionResult multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                                     const AttentionWeights& w, std::size_t heads,
                                     const AttentionEdit& edit) {
  if (queries.rank() != 3) throw ShapeError("multi_head_attention: queries must be [B, n, D], got " + shape_string(queries.shape()));
  if (keys.shape() != values.shape()) shape_fail("multi_head_attention", keys.shape(), values.shape(), "keys vs values");
  if (keys.rank() != 3 || keys.dim(0) != queries.dim(0) || keys.dim(2) != queries.dim(2)) {
    shape_fail("multi_head_attention", queries.shape(), keys.shape(), "queries vs keys");
  }
  const std::size_t B = queries.dim(0);
  const std::size_t nq = queries.dim(1);
  const std::size_t nk = keys.dim(1);
  const std::size_t D = queries.dim(2);
  if (heads == 0 || D % heads != 0) {
    throw ConfigError("multi_head_attention: width " + std::to_string(D) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t dh = D / heads;
  static constexpr std::size_t kSplit[] = {0, 2, 1, 3};

  auto split = [&](const Tensor& x, std::size_t n) {
    return reshape(permute(reshape(x, {B, n, heads, dh}), kSplit), {B * heads, n, dh});
  };
  Tensor q = split(add(matmul(queries, w.wq), w.bq), nq);
  Tensor k = split(add(matmul(keys, w.wk), w.bk), nk);
  Tensor v = split(add(matmul(values, w.wv), w.bv), nk);

  Tensor scores = scale(matmul(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor probs = reshape(softmax(scores, 2), {B, heads, nq, nk});
  if (edit) {
    probs = edit(probs);
    if (probs.shape() != Shape{B, heads, nq, nk}) {
      throw ShapeError("multi_head_attention: attention edit changed shape to " + shape_string(probs.shape()));
    }
  }
  Tensor context = matmul(reshape(probs, {B * heads, nq, nk}), v);
  context = reshape(permute(reshape(context, {B, heads, nq, dh}), kSplit), {B, nq, D});
  return {add(matmul(context, w.wo), w.bo), probs};
}

}  // namespace bmip
