#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bmip {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes do not conform. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid model/experiment configuration (e.g. width % heads != 0).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array of doubles participating in reverse-mode autodiff.
///
/// A Tensor is a cheap handle; copies share storage. Values produced by an op
/// are never modified afterwards. Leaf parameters are the exception: the
/// optimizer writes them in place between steps through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double at(std::size_t flat_index) const { return node_->value.at(flat_index); }

  bool requires_grad() const { return node_->requires_grad; }
  /// Only meaningful on leaves (parameters); op results derive the flag.
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient of the last backward pass; zeros if none reached this tensor.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  /// Seeds d(self)/d(self) = 1 and propagates. Requires a single-element tensor.
  void backward() const;

  /// Fresh leaf holding a copy of the values (no history).
  Tensor detach(bool requires_grad = false) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of the graph reachable from a root.
/// Replaying it backward visits every recorded node exactly once, each after
/// all of its consumers.
class GradTape {
 public:
  explicit GradTape(const Tensor& root);

  void backward(std::span<const double> seed) const;
  std::size_t size() const { return order_.size(); }
  /// Nodes in forward order (inputs before consumers).
  const std::vector<detail::Node*>& order() const { return order_; }

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;
};

/// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Elementwise arithmetic. The second operand broadcasts onto the first
// (right-aligned; each of its extents equals the first's or is 1). The first
// operand is never broadcast and fixes the result shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

/// a: [..., M, K]. b: [K, N] shared across leading axes, or [B, K, N] batched
/// against a of shape [B, M, K]. With transpose_b, b is read as [.., N, K].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor index_select(const Tensor& a, std::size_t axis, std::span<const std::size_t> indices);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, std::span<const std::size_t> order);
/// Prepends an axis of extent count, repeating a.
Tensor repeat_leading(const Tensor& a, std::size_t count);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);

/// Numerically stable softmax; rejects non-finite inputs.
Tensor softmax(const Tensor& x, std::size_t axis);

inline constexpr double kLayerNormEps = 1e-5;
/// Normalizes over the last axis with eps = kLayerNormEps, then applies gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);

/// Rows divided by their L2 norm over the last axis. Zero-norm rows are rejected.
Tensor l2_normalize(const Tensor& x);

/// Rows of table [V, D] for each id, shaped [ids.size(), D].
Tensor embedding(const Tensor& table, std::span<const int> ids);

/// Mean over rows of -log softmax(logits)[label]. logits: [B, N].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Mean over rows of -sum_n target[b, n] log softmax(logits)[b, n]; targets
/// are constant row-stochastic weights laid out like logits.
Tensor soft_cross_entropy(const Tensor& logits, std::span<const double> targets);

// Multi-head attention ------------------------------------------------------

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // [D, D] and [D]
};

struct AttentionResult {
  Tensor output;         // [B, n_query, D]
  Tensor attention_map;  // [B, heads, n_query, n_key]
};

/// Optional rewrite of the post-softmax probabilities ([B, heads, n_q, n_k])
/// before they weight the values.
using AttentionEdit = std::function<Tensor(const Tensor&)>;

AttentionResult multi_head_attention(const Tensor& queries, const Tensor& keys,
                                     const Tensor& values, const AttentionWeights& weights,
                                     std::size_t heads, const AttentionEdit& edit = {});

}  // namespace bmip
