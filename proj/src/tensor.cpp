#include "primroute/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "primroute/errors.hpp"

namespace primroute {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool tracked = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::span<double> grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

// Products run on owning (fully aligned) copies: Eigen's vectorized kernels
// peel a different number of leading elements depending on the address, so
// multiplying through a Map over std::vector storage could round differently
// from one allocation to the next.
RowMat owned(const std::vector<double>& v, Eigen::Index rows, Eigen::Index cols) {
  return ConstMap(v.data(), rows, cols);
}

void accumulate(std::span<double> dst, const RowMat& src) {
  const double* p = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += p[i];
}

NodePtr make_node(Shape shape, std::vector<double> value) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

const NodePtr& require(const Tensor& t, const char* op) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": undefined tensor operand");
  return t.node();
}

/// Builds the result node. If any parent is tracked, the result is tracked and
/// keeps `fn` to propagate its gradient.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                   std::function<void(Node&)> fn) {
  auto node = make_node(std::move(shape), std::move(value));
  const bool any_tracked =
      std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->tracked; });
  if (any_tracked) {
    node->tracked = true;
    node->leaf = false;
    node->parents = std::move(parents);
    node->backward_fn = std::move(fn);
  }
  return Tensor(node);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " operand, got " + shape_string(t.shape()));
  }
}

// Broadcasting ---------------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;  // per output axis; 0 when broadcast
  std::vector<std::size_t> stride_b;
  bool same = false;
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  bc.stride_a.assign(rank, 0);
  bc.stride_b.assign(rank, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ia = i + a.size() >= rank ? i + a.size() - rank : SIZE_MAX;
    const std::size_t ib = i + b.size() >= rank ? i + b.size() - rank : SIZE_MAX;
    const std::size_t da = ia == SIZE_MAX ? 1 : a[ia];
    const std::size_t db = ib == SIZE_MAX ? 1 : b[ib];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_string(a) + " and " +
                           shape_string(b) + " are not broadcast-compatible");
    }
    bc.out[i] = std::max(da, db);
    if (ia != SIZE_MAX && da != 1) bc.stride_a[i] = sa[ia];
    if (ib != SIZE_MAX && db != 1) bc.stride_b[i] = sb[ib];
  }
  return bc;
}

/// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t n = shape_numel(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = bc.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      ia += bc.stride_a[ax];
      ib += bc.stride_b[ax];
      if (idx[ax] < bc.out[ax]) break;
      ia -= bc.stride_a[ax] * idx[ax];
      ib -= bc.stride_b[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b, const char* op) {
  const auto& na = require(a, op);
  const auto& nb = require(b, op);
  auto bc = broadcast_shapes(na->shape, nb->shape, op);
  std::vector<double> out(shape_numel(bc.out));
  const double* va = na->value.data();
  const double* vb = nb->value.data();
  switch (kind) {
    case BinaryKind::kAdd:
      for_each_broadcast(bc, [&](std::size_t i, std::size_t x, std::size_t y) { out[i] = va[x] + vb[y]; });
      break;
    case BinaryKind::kSub:
      for_each_broadcast(bc, [&](std::size_t i, std::size_t x, std::size_t y) { out[i] = va[x] - vb[y]; });
      break;
    case BinaryKind::kMul:
      for_each_broadcast(bc, [&](std::size_t i, std::size_t x, std::size_t y) { out[i] = va[x] * vb[y]; });
      break;
  }
  Shape out_shape = bc.out;
  return make_result(std::move(out_shape), std::move(out), {na, nb},
                     [kind, bc = std::move(bc)](Node& self) {
                       Node& pa = *self.parents[0];
                       Node& pb = *self.parents[1];
                       const double* g = self.grad.data();
                       if (pa.tracked) {
                         auto ga = pa.grad_buffer();
                         const double* vb = pb.value.data();
                         for_each_broadcast(bc, [&](std::size_t i, std::size_t x, std::size_t y) {
                           ga[x] += kind == BinaryKind::kMul ? g[i] * vb[y] : g[i];
                         });
                       }
                       if (pb.tracked) {
                         auto gb = pb.grad_buffer();
                         const double* va = pa.value.data();
                         for_each_broadcast(bc, [&](std::size_t i, std::size_t x, std::size_t y) {
                           switch (kind) {
                             case BinaryKind::kAdd: gb[y] += g[i]; break;
                             case BinaryKind::kSub: gb[y] -= g[i]; break;
                             case BinaryKind::kMul: gb[y] += g[i] * va[x]; break;
                           }
                         });
                       }
                     });
}

/// Unary map with derivative expressed through input x and output y.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  const auto& nx = require(x, op);
  std::vector<double> out(nx->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(nx->value[i]);
  return make_result(nx->shape, std::move(out), {nx}, [deriv](Node& self) {
    Node& p = *self.parents[0];
    auto gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// Shape helpers ----------------------------------------------------------------

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Tensor -----------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  const auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor of shape " + shape_string(shape) + " cannot hold " +
                         std::to_string(values.size()) + " values");
  }
  return Tensor(make_node(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }
Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return from({n}, std::move(values));
}
Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return from({rows, cols}, std::move(values));
}

Tensor& Tensor::set_tracked(bool tracked) {
  require(*this, "set_tracked");
  if (!node_->leaf) throw std::logic_error("set_tracked: only leaf tensors can change tracking");
  node_->tracked = tracked;
  return *this;
}

bool Tensor::tracked() const { return node_ && node_->tracked; }
bool Tensor::is_leaf() const { return !node_ || node_->leaf; }
const Shape& Tensor::shape() const { return require(*this, "shape")->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return require(*this, "numel")->value.size(); }
std::span<const double> Tensor::values() const { return require(*this, "values")->value; }

std::span<double> Tensor::mutable_values() {
  require(*this, "mutable_values");
  if (!node_->leaf) throw std::logic_error("mutable_values: only leaf tensors may be written");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  require_rank(*this, 2, "at");
  return node_->value[row * node_->shape[1] + col];
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("grad(): tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() { return require(*this, "mutable_grad")->grad_buffer(); }

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(make_node(shape(), node_->value)); }

// Backward -----------------------------------------------------------------------

void backward(const Tensor& loss) {
  const auto& root = require(loss, "backward");
  if (root->value.size() != 1) {
    throw DimensionError("backward: loss must be a scalar, got shape " + shape_string(root->shape));
  }
  if (!root->tracked) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->tracked && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (!n->leaf) n->grad.assign(n->value.size(), 0.0);
  }
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->leaf && n->backward_fn) n->backward_fn(*n);
  }
}

// Operations ---------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& na = require(a, "matmul");
  const auto& nb = require(b, "matmul");
  if (na->shape.size() != 2 || nb->shape.size() != 2 || na->shape[1] != nb->shape[0]) {
    throw DimensionError("matmul: cannot multiply " + shape_string(na->shape) + " by " +
                         shape_string(nb->shape) + " (inner dimensions must agree)");
  }
  const auto m = static_cast<Eigen::Index>(na->shape[0]);
  const auto k = static_cast<Eigen::Index>(na->shape[1]);
  const auto n = static_cast<Eigen::Index>(nb->shape[1]);
  const RowMat c = owned(na->value, m, k) * owned(nb->value, k, n);
  std::vector<double> out(c.data(), c.data() + m * n);
  return make_result({na->shape[0], nb->shape[1]}, std::move(out), {na, nb}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const RowMat g = owned(self.grad, m, n);
    if (pa.tracked) accumulate(pa.grad_buffer(), RowMat(g * owned(pb.value, k, n).transpose()));
    if (pb.tracked) accumulate(pb.grad_buffer(), RowMat(owned(pa.value, m, k).transpose() * g));
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryKind::kAdd, a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryKind::kSub, a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryKind::kMul, a, b, "mul"); }

Tensor relu(const Tensor& x) {
  return unary(x, "relu", [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(x, "gelu", gelu_value, [](double v, double) { return gelu_derivative(v); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(x, "tanh", [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor neg(const Tensor& x) {
  return unary(x, "neg", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(x, "scale", [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(x, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor clip(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clip: lo > hi");
  return unary(x, "clip", [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor elementwise(ElementwiseKind kind, std::span<const Tensor> inputs) {
  const bool is_binary =
      kind == ElementwiseKind::kAdd || kind == ElementwiseKind::kSub || kind == ElementwiseKind::kMul;
  const std::size_t want = is_binary ? 2 : 1;
  if (inputs.size() != want) {
    throw std::invalid_argument("elementwise: expected " + std::to_string(want) + " inputs, got " +
                                std::to_string(inputs.size()));
  }
  switch (kind) {
    case ElementwiseKind::kAdd: return add(inputs[0], inputs[1]);
    case ElementwiseKind::kSub: return sub(inputs[0], inputs[1]);
    case ElementwiseKind::kMul: return mul(inputs[0], inputs[1]);
    case ElementwiseKind::kRelu: return relu(inputs[0]);
    case ElementwiseKind::kGelu: return gelu(inputs[0]);
    case ElementwiseKind::kSigmoid: return sigmoid(inputs[0]);
    case ElementwiseKind::kTanh: return tanh(inputs[0]);
    case ElementwiseKind::kExp: return exp(inputs[0]);
    case ElementwiseKind::kLog: return log(inputs[0]);
    case ElementwiseKind::kNeg: return neg(inputs[0]);
  }
  throw std::invalid_argument("elementwise: unknown kind");
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  const auto& na = require(a, "minimum");
  const auto& nb = require(b, "minimum");
  if (na->shape != nb->shape) {
    throw DimensionError("minimum: shapes " + shape_string(na->shape) + " and " + shape_string(nb->shape) + " differ");
  }
  std::vector<double> out(na->value.size());
  std::vector<char> take_a(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    take_a[i] = na->value[i] <= nb->value[i];
    out[i] = take_a[i] ? na->value[i] : nb->value[i];
  }
  return make_result(na->shape, std::move(out), {na, nb}, [take_a = std::move(take_a)](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.tracked) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) if (take_a[i]) g[i] += self.grad[i];
    }
    if (pb.tracked) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) if (!take_a[i]) g[i] += self.grad[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  const auto& nx = require(x, "sum");
  double total = 0.0;
  for (double v : nx->value) total += v;
  return make_result({}, {total}, {nx}, [](Node& self) {
    Node& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  const auto& nx = require(x, "reshape");
  if (shape_numel(shape) != nx->value.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(nx->shape) + " as " + shape_string(shape));
  }
  return make_result(std::move(shape), nx->value, {nx}, [](Node& self) {
    Node& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  const auto& nt = require(table, "gather_rows");
  if (nt->shape.size() != 2) throw DimensionError("gather_rows: table must be rank 2, got " + shape_string(nt->shape));
  if (ids.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t rows = nt->shape[0], cols = nt->shape[1];
  std::vector<double> out(ids.size() * cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(ids[i]) + " out of range for " +
                           std::to_string(rows) + " rows");
    }
    std::copy_n(nt->value.data() + ids[i] * cols, cols, out.data() + i * cols);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result({ids.size(), cols}, std::move(out), {nt}, [idx = std::move(idx), cols](Node& self) {
    Node& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t c = 0; c < cols; ++c) g[idx[i] * cols + c] += self.grad[i * cols + c];
    }
  });
}

Tensor pick(const Tensor& x, std::span<const int> cols_idx) {
  const auto& nx = require(x, "pick");
  if (nx->shape.size() != 2 || nx->shape[0] != cols_idx.size()) {
    throw DimensionError("pick: need [n x m] with n = " + std::to_string(cols_idx.size()) + ", got " +
                         shape_string(nx->shape));
  }
  const std::size_t cols = nx->shape[1];
  std::vector<double> out(cols_idx.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (cols_idx[i] < 0 || static_cast<std::size_t>(cols_idx[i]) >= cols) {
      throw DimensionError("pick: column " + std::to_string(cols_idx[i]) + " out of range");
    }
    out[i] = nx->value[i * cols + cols_idx[i]];
  }
  std::vector<int> idx(cols_idx.begin(), cols_idx.end());
  const std::size_t n = out.size();
  return make_result({n}, std::move(out), {nx}, [idx = std::move(idx), cols](Node& self) {
    Node& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * cols + idx[i]] += self.grad[i];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
  std::size_t rows = 0;
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols) {
      throw DimensionError("concat_rows: incompatible part " + shape_string(p.shape()));
    }
    rows += p.dim(0);
    nodes.push_back(p.node());
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const auto& n : nodes) out.insert(out.end(), n->value.begin(), n->value.end());
  return make_result({rows, cols}, std::move(out), std::move(nodes), [](Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      if (p->tracked) {
        auto g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += p->value.size();
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const auto& nx = require(x, "slice_rows");
  if (nx->shape.size() != 2 || begin >= end || end > nx->shape[0]) {
    throw DimensionError("slice_rows: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") for " + shape_string(nx->shape));
  }
  const std::size_t cols = nx->shape[1];
  std::vector<double> out(nx->value.begin() + begin * cols, nx->value.begin() + end * cols);
  return make_result({end - begin, cols}, std::move(out), {nx}, [begin, cols](Node& self) {
    Node& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * cols + i] += self.grad[i];
  });
}

namespace {

std::pair<std::size_t, std::size_t> as_rows(const Node& n, const char* op) {
  if (n.shape.size() == 1) return {1, n.shape[0]};
  if (n.shape.size() == 2) return {n.shape[0], n.shape[1]};
  throw DimensionError(std::string(op) + ": expected rank 1 or 2, got " + shape_string(n.shape));
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  const auto& nx = require(x, "softmax_rows");
  const auto [rows, cols] = as_rows(*nx, "softmax_rows");
  std::vector<double> out(nx->value.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = nx->value.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
  return make_result(nx->shape, std::move(out), {nx}, [rows, cols](Node& self) {
    Node& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* gy = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * gy[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (gy[c] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  const auto& nx = require(x, "log_softmax_rows");
  const auto [rows, cols] = as_rows(*nx, "log_softmax_rows");
  std::vector<double> out(nx->value.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = nx->value.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(in[c] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - lse;
  }
  return make_result(nx->shape, std::move(out), {nx}, [rows, cols](Node& self) {
    Node& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* gy = self.grad.data() + r * cols;
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) total += gy[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += gy[c] - std::exp(y[c]) * total;
    }
  });
}

Tensor softmax_crossentropy(const Tensor& logits, std::span<const int> targets) {
  const auto& nx = require(logits, "softmax_crossentropy");
  const auto [rows, cols] = as_rows(*nx, "softmax_crossentropy");
  if (targets.size() != rows) {
    throw DimensionError("softmax_crossentropy: " + std::to_string(rows) + " rows but " +
                         std::to_string(targets.size()) + " targets");
  }
  std::vector<double> probs(nx->value.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= cols) {
      throw DimensionError("softmax_crossentropy: target " + std::to_string(targets[r]) +
                           " outside vocabulary of size " + std::to_string(cols));
    }
    const double* in = nx->value.data() + r * cols;
    double* pr = probs.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += (pr[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) pr[c] /= total;
    loss += -(in[targets[r]] - mx - std::log(total));
  }
  loss /= static_cast<double>(rows);
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result({}, {loss}, {nx},
                     [probs = std::move(probs), tg = std::move(tg), rows, cols](Node& self) {
                       Node& p = *self.parents[0];
                       auto g = p.grad_buffer();
                       const double s = self.grad[0] / static_cast<double>(rows);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t c = 0; c < cols; ++c) {
                           const double onehot = static_cast<int>(c) == tg[r] ? 1.0 : 0.0;
                           g[r * cols + c] += s * (probs[r * cols + c] - onehot);
                         }
                       }
                     });
}

Tensor softmax_crossentropy(const Tensor& logits, int target) {
  const int t[1] = {target};
  return softmax_crossentropy(logits, std::span<const int>(t, 1));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto& nx = require(x, "layer_norm");
  const auto& ng = require(gain, "layer_norm");
  const auto& nb = require(bias, "layer_norm");
  const auto [rows, cols] = as_rows(*nx, "layer_norm");
  if (ng->value.size() != cols || nb->value.size() != cols) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(cols) + " entries");
  }
  std::vector<double> out(nx->value.size()), xhat(nx->value.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = nx->value.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (in[c] - mu) * inv_std[r];
      out[r * cols + c] = xhat[r * cols + c] * ng->value[c] + nb->value[c];
    }
  }
  return make_result(nx->shape, std::move(out), {nx, ng, nb},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       const double* gy = self.grad.data();
                       if (pg.tracked) {
                         auto g = pg.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < cols; ++c) g[c] += gy[r * cols + c] * xhat[r * cols + c];
                       }
                       if (pb.tracked) {
                         auto g = pb.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < cols; ++c) g[c] += gy[r * cols + c];
                       }
                       if (px.tracked) {
                         auto g = px.grad_buffer();
                         const double n = static_cast<double>(cols);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double sum_d = 0.0, sum_dx = 0.0;
                           for (std::size_t c = 0; c < cols; ++c) {
                             const double d = gy[r * cols + c] * pg.value[c];
                             sum_d += d;
                             sum_dx += d * xhat[r * cols + c];
                           }
                           for (std::size_t c = 0; c < cols; ++c) {
                             const double d = gy[r * cols + c] * pg.value[c];
                             g[r * cols + c] += inv_std[r] * (d - sum_d / n - xhat[r * cols + c] * sum_dx / n);
                           }
                         }
                       }
                     });
}

AttentionLayout AttentionLayout::packed_causal(std::span<const std::size_t> segment_lengths) {
  AttentionLayout layout;
  for (std::size_t s = 0; s < segment_lengths.size(); ++s) {
    for (std::size_t p = 0; p < segment_lengths[s]; ++p) {
      layout.query_segment.push_back(static_cast<int>(s));
      layout.query_position.push_back(static_cast<int>(p));
    }
  }
  layout.key_segment = layout.query_segment;
  layout.key_position = layout.query_position;
  return layout;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t num_heads,
                 const AttentionLayout& layout) {
  const auto& nq = require(q, "attention");
  const auto& nk = require(k, "attention");
  const auto& nv = require(v, "attention");
  if (nq->shape.size() != 2 || nk->shape.size() != 2 || nv->shape.size() != 2 ||
      nq->shape[1] != nk->shape[1] || nk->shape != nv->shape) {
    throw DimensionError("attention: incompatible q/k/v shapes " + shape_string(nq->shape) + ", " +
                         shape_string(nk->shape) + ", " + shape_string(nv->shape));
  }
  const std::size_t nqr = nq->shape[0], nkr = nk->shape[0], d = nq->shape[1];
  if (num_heads == 0 || d % num_heads != 0) throw DimensionError("attention: heads must divide model width");
  if (layout.query_segment.size() != nqr || layout.query_position.size() != nqr ||
      layout.key_segment.size() != nkr || layout.key_position.size() != nkr) {
    throw DimensionError("attention: layout does not match q/k row counts");
  }
  const std::size_t dh = d / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // Visible key lists per query.
  auto visible = std::make_shared<std::vector<std::vector<int>>>(nqr);
  for (std::size_t i = 0; i < nqr; ++i) {
    for (std::size_t j = 0; j < nkr; ++j) {
      const bool seg_ok = layout.key_segment[j] == layout.query_segment[i] ||
                          layout.key_segment[j] == AttentionLayout::kSharedSegment;
      if (seg_ok && layout.key_position[j] <= layout.query_position[i]) (*visible)[i].push_back(static_cast<int>(j));
    }
    if ((*visible)[i].empty()) throw DimensionError("attention: query row " + std::to_string(i) + " sees no keys");
  }

  // probs[i][h * |vis_i| + t]
  auto probs = std::make_shared<std::vector<std::vector<double>>>(nqr);
  std::vector<double> out(nqr * d, 0.0);
  for (std::size_t i = 0; i < nqr; ++i) {
    const auto& vis = (*visible)[i];
    auto& pr = (*probs)[i];
    pr.assign(num_heads * vis.size(), 0.0);
    for (std::size_t h = 0; h < num_heads; ++h) {
      const double* qi = nq->value.data() + i * d + h * dh;
      double* p = pr.data() + h * vis.size();
      double mx = -INFINITY;
      for (std::size_t t = 0; t < vis.size(); ++t) {
        const double* kj = nk->value.data() + vis[t] * d + h * dh;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        p[t] = s * inv_sqrt;
        mx = std::max(mx, p[t]);
      }
      double total = 0.0;
      for (std::size_t t = 0; t < vis.size(); ++t) total += (p[t] = std::exp(p[t] - mx));
      double* oi = out.data() + i * d + h * dh;
      for (std::size_t t = 0; t < vis.size(); ++t) {
        p[t] /= total;
        const double* vj = nv->value.data() + vis[t] * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p[t] * vj[c];
      }
    }
  }
  return make_result(
      {nqr, d}, std::move(out), {nq, nk, nv},
      [visible, probs, num_heads, dh, d, nqr, inv_sqrt](Node& self) {
        Node& pq = *self.parents[0];
        Node& pk = *self.parents[1];
        Node& pv = *self.parents[2];
        std::span<double> gq, gk, gv;
        if (pq.tracked) gq = pq.grad_buffer();
        if (pk.tracked) gk = pk.grad_buffer();
        if (pv.tracked) gv = pv.grad_buffer();
        std::vector<double> dp;
        for (std::size_t i = 0; i < nqr; ++i) {
          const auto& vis = (*visible)[i];
          const auto& pr = (*probs)[i];
          dp.resize(vis.size());
          for (std::size_t h = 0; h < num_heads; ++h) {
            const double* go = self.grad.data() + i * d + h * dh;
            const double* p = pr.data() + h * vis.size();
            double dot = 0.0;
            for (std::size_t t = 0; t < vis.size(); ++t) {
              const double* vj = pv.value.data() + vis[t] * d + h * dh;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
              dp[t] = s;
              dot += p[t] * s;
              if (pv.tracked) {
                double* gvj = gv.data() + vis[t] * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[t] * go[c];
              }
            }
            const double* qi = pq.value.data() + i * d + h * dh;
            for (std::size_t t = 0; t < vis.size(); ++t) {
              const double ds = p[t] * (dp[t] - dot) * inv_sqrt;
              const double* kj = pk.value.data() + vis[t] * d + h * dh;
              if (pq.tracked) {
                double* gqi = gq.data() + i * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
              }
              if (pk.tracked) {
                double* gkj = gk.data() + vis[t] * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

// Verification helpers -------------------------------------------------------------

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double step) {
  if (!(step > 0)) throw std::invalid_argument("finite_difference_grad: step must be positive");
  std::vector<double> base(x.values().begin(), x.values().end());
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto plus = base;
    auto minus = base;
    plus[i] += step;
    minus[i] -= step;
    const double fp = f(Tensor::from(x.shape(), std::move(plus)));
    const double fm = f(Tensor::from(x.shape(), std::move(minus)));
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_difference_grad: non-finite function value at coordinate " + std::to_string(i));
    }
    out[i] = (fp - fm) / (2.0 * step);
  }
  return Tensor::from(x.shape(), std::move(out));
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw DimensionError("relative_error: length mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom < floor) return 0.0;
  return std::sqrt(diff) / denom;
}

}  // namespace primroute
