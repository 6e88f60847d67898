#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace primroute {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct Node;
}

/// Dense row-major array of doubles with optional reverse-mode tracking.
///
/// A Tensor is a cheap handle; copies share the underlying storage. Values are
/// never changed by operations (results are new tensors). The only mutations
/// are gradient accumulation and optimizer updates of leaf tensors through
/// mutable_values().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  /// Marks a leaf as a differentiation target. Throws on non-leaf tensors.
  Tensor& set_tracked(bool tracked = true);
  bool tracked() const;
  bool is_leaf() const;
  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Writable view of a leaf's values (optimizers, loaders).
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const { return values()[i]; }
  double at(std::size_t row, std::size_t col) const;

  bool has_grad() const;
  std::span<const double> grad() const;
  /// Allocates a zero gradient buffer if absent.
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();

  /// Untracked leaf holding a copy of the values.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Runs reverse-mode differentiation from a scalar loss. Leaf gradients
/// accumulate across calls; call zero_grad() on parameters between steps.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations. Every result is tracked iff at least one input is tracked.
// ---------------------------------------------------------------------------

/// Matrix product of [m x k] and [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

enum class ElementwiseKind { kAdd, kSub, kMul, kRelu, kGelu, kSigmoid, kTanh, kExp, kLog, kNeg };

/// Generic dispatcher; binary kinds take two inputs and broadcast (numpy rules).
Tensor elementwise(ElementwiseKind kind, std::span<const Tensor> inputs);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
/// Exact GELU, x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
/// Clamps to [lo, hi]; gradient is passed only strictly inside the interval.
Tensor clip(const Tensor& x, double lo, double hi);
/// Elementwise minimum of equal-shaped tensors; ties route the gradient to `a`.
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

/// Rows of a [n x m] table selected by index, [ids.size() x m].
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// Picks x[i, cols[i]] from a [n x m] matrix, giving [n].
Tensor pick(const Tensor& x, std::span<const int> cols);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);

/// Row-wise softmax of a [n x m] matrix (log-sum-exp shifted).
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
/// Mean over rows of -log softmax(logits[i])[targets[i]]. A rank-1 logits
/// vector is treated as a single row.
Tensor softmax_crossentropy(const Tensor& logits, std::span<const int> targets);
Tensor softmax_crossentropy(const Tensor& logits, int target);

/// Normalizes each row of x to zero mean / unit variance, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Visibility rule for multi-head attention over packed sequences.
///
/// Query i may attend key j iff key_position[j] <= query_position[i] and the
/// key belongs to the same segment as the query or to kSharedSegment.
struct AttentionLayout {
  static constexpr int kSharedSegment = -1;
  std::vector<int> query_segment;
  std::vector<int> query_position;
  std::vector<int> key_segment;
  std::vector<int> key_position;

  /// Causal self-attention over sequences packed back to back.
  static AttentionLayout packed_causal(std::span<const std::size_t> segment_lengths);
};

/// Scaled dot-product attention; q is [nq x d], k and v are [nk x d], heads split d.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t num_heads,
                 const AttentionLayout& layout);

// ---------------------------------------------------------------------------
// Verification helpers.
// ---------------------------------------------------------------------------

/// Central-difference gradient estimate of a scalar function at x.
/// Throws NumericError naming the coordinate if f is non-finite there.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double step);

/// ||a - b|| / max(||a||, ||b||), or 0 when both norms are below `floor`.
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-12);

}  // namespace primroute
