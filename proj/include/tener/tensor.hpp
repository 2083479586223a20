#pragma once

// Dense row-major tensors with tape-free reverse-mode automatic differentiation.
//
// Every op result keeps shared ownership of its inputs plus a closure that
// pushes its gradient back into them. backward() orders the reachable nodes
// topologically and runs each closure exactly once, in reverse.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace tener {

using Scalar = double;
using Shape = std::vector<std::size_t>;

/// Operand shapes do not conform to an op.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A documented precondition was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// An architectural or numeric configuration is invalid.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string format_shape(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backprop;

  bool is_leaf() const { return !backprop; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Scalar{0});
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return from(std::move(shape), std::vector<Scalar>(n, Scalar{0}),
                requires_grad);
  }

  static Tensor full(Shape shape, Scalar fill, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return from(std::move(shape), std::vector<Scalar>(n, fill), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<Scalar> values,
                     bool requires_grad = false) {
    if (shape.empty())
      throw ShapeError("tensor: shape must have at least one axis");
    for (auto extent : shape)
      if (extent == 0)
        throw ShapeError("tensor: zero extent in shape " + format_shape(shape));
    if (shape_size(shape) != values.size())
      throw ShapeError("tensor: shape " + format_shape(shape) + " holds " +
                       std::to_string(shape_size(shape)) + " values, got " +
                       std::to_string(values.size()));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<Scalar> values, bool requires_grad = false) {
    return from({rows, cols}, std::move(values), requires_grad);
  }

  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }

  /// Row count of a matrix; treats rank-1 tensors as a single row.
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const Scalar> data() const { return node_->value; }
  std::span<Scalar> data() { return node_->value; }

  Scalar item() const {
    if (size() != 1)
      throw ContractError("item: tensor of shape " + format_shape(shape()) +
                          " is not a scalar");
    return node_->value[0];
  }

  Scalar at(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
  }
  Scalar& at(std::size_t r, std::size_t c) {
    return node_->value[r * cols() + c];
  }

  bool requires_grad() const { return node_->requires_grad; }

  /// Accumulated gradient; all zeros if none has been written.
  std::span<const Scalar> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<Scalar> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }

  /// Whether any backward pass has reached this tensor since the last clear.
  bool has_grad() const { return !node_->grad.empty(); }

  void zero_grad() {
    if (!node_->grad.empty())
      std::fill(node_->grad.begin(), node_->grad.end(), Scalar{0});
  }
  void clear_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph history.
  Tensor detach() const { return from(shape(), node_->value, false); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  if (!grad_enabled()) return false;
  for (const auto* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

// Builds an op result. The closure is attached only when some input is tracked.
inline Tensor make_result(Shape shape, std::vector<Scalar> value,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool tracked = false;
  if (grad_enabled())
    for (const auto& in : inputs) tracked = tracked || in.requires_grad();
  if (tracked) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " +
                     format_shape(t.shape()));
}

[[noreturn]] inline void mismatch(const char* op, const Tensor& a,
                                  const Tensor& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " +
                   format_shape(a.shape()) + " vs " + format_shape(b.shape()));
}

inline std::vector<Node*> topological_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second)
        stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // inputs before consumers
}

}  // namespace detail

/// Populates grads of every tracked leaf reachable from a scalar root.
/// Leaf grads accumulate across calls; interior grads are recomputed.
inline void backward(const Tensor& root) {
  if (root.size() != 1)
    throw ContractError("backward: root must be a scalar, got shape " +
                        format_shape(root.shape()));
  auto* r = root.node().get();
  if (!r->requires_grad) return;
  auto order = detail::topological_order(r);
  for (auto* n : order) {
    if (n->is_leaf())
      n->ensure_grad();
    else
      n->grad.assign(n->value.size(), Scalar{0});
  }
  r->grad[0] += 1;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backprop(**it);
}

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::mismatch("add", a, b);
  std::vector<Scalar> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    for (auto& in : n.inputs)
      if (in->requires_grad)
        for (std::size_t i = 0; i < n.grad.size(); ++i) in->grad[i] += n.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::mismatch("sub", a, b);
  std::vector<Scalar> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    auto& x = *n.inputs[0];
    auto& y = *n.inputs[1];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (x.requires_grad) x.grad[i] += n.grad[i];
      if (y.requires_grad) y.grad[i] -= n.grad[i];
    }
  });
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::mismatch("mul", a, b);
  std::vector<Scalar> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    auto& x = *n.inputs[0];
    auto& y = *n.inputs[1];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (x.requires_grad) x.grad[i] += n.grad[i] * y.value[i];
      if (y.requires_grad) y.grad[i] += n.grad[i] * x.value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, Scalar factor) {
  std::vector<Scalar> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [factor](detail::Node& n) {
                               auto& x = *n.inputs[0];
                               for (std::size_t i = 0; i < n.grad.size(); ++i)
                                 x.grad[i] += n.grad[i] * factor;
                             });
}

/// Adds a length-n vector to every row of an m×n matrix (leading-batch expansion).
inline Tensor add_rowwise(const Tensor& a, const Tensor& row) {
  const std::size_t n = a.cols();
  if (row.size() != n || a.rank() > 2 || row.rows() != 1)
    detail::mismatch("add_rowwise", a, row);
  const std::size_t m = a.size() / n;
  std::vector<Scalar> out(a.size());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c)
      out[r * n + c] = a.data()[r * n + c] + row.data()[c];
  return detail::make_result(a.shape(), std::move(out), {a, row},
                             [m, n](detail::Node& node) {
    auto& x = *node.inputs[0];
    auto& b = *node.inputs[1];
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        const Scalar g = node.grad[r * n + c];
        if (x.requires_grad) x.grad[r * n + c] += g;
        if (b.requires_grad) b.grad[c] += g;
      }
  });
}

namespace detail {

template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D dfdx_from_output) {
  std::vector<Scalar> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
  return make_result(a.shape(), std::move(out), {a}, [dfdx_from_output](Node& n) {
    auto& x = *n.inputs[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      x.grad[i] += n.grad[i] * dfdx_from_output(x.value[i], n.value[i]);
  });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](Scalar x) { return x > 0 ? x : Scalar{0}; },
      [](Scalar x, Scalar) { return x > 0 ? Scalar{1} : Scalar{0}; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, [](Scalar x) { return std::tanh(x); },
      [](Scalar, Scalar y) { return 1 - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a, [](Scalar x) { return 1 / (1 + std::exp(-x)); },
      [](Scalar, Scalar y) { return y * (1 - y); });
}

// ------------------------------------------------------------------- linear

/// (m×k)·(k×n).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) detail::mismatch("matmul", a, b);
  std::vector<Scalar> out(m * n, Scalar{0});
  const Scalar* A = a.data().data();
  const Scalar* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar av = A[i * k + p];
      if (av == 0) continue;
      const Scalar* brow = B + p * n;
      Scalar* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return detail::make_result({m, n}, std::move(out), {a, b},
                             [m, k, n](detail::Node& node) {
    auto& x = *node.inputs[0];
    auto& y = *node.inputs[1];
    const Scalar* G = node.grad.data();
    if (x.requires_grad)  // dA = G·Bᵀ
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          Scalar s = 0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * y.value[p * n + j];
          x.grad[i * k + p] += s;
        }
    if (y.requires_grad)  // dB = Aᵀ·G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const Scalar av = x.value[i * k + p];
          if (av == 0) continue;
          for (std::size_t j = 0; j < n; ++j) y.grad[p * n + j] += av * G[i * n + j];
        }
  });
}

/// (m×k)·(n×k)ᵀ without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_nt");
  detail::require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) detail::mismatch("matmul_nt", a, b);
  std::vector<Scalar> out(m * n);
  const Scalar* A = a.data().data();
  const Scalar* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      Scalar s = 0;
      for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
      out[i * n + j] = s;
    }
  return detail::make_result({m, n}, std::move(out), {a, b},
                             [m, k, n](detail::Node& node) {
    auto& x = *node.inputs[0];
    auto& y = *node.inputs[1];
    const Scalar* G = node.grad.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const Scalar g = G[i * n + j];
        if (g == 0) continue;
        for (std::size_t p = 0; p < k; ++p) {
          if (x.requires_grad) x.grad[i * k + p] += g * y.value[j * k + p];
          if (y.requires_grad) y.grad[j * k + p] += g * x.value[i * k + p];
        }
      }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<Scalar> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return detail::make_result({n, m}, std::move(out), {a}, [m, n](detail::Node& node) {
    auto& x = *node.inputs[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) x.grad[i * n + j] += node.grad[j * m + i];
  });
}

// --------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
  Scalar s = 0;
  for (auto v : a.data()) s += v;
  return detail::make_result({1}, {s}, {a}, [](detail::Node& n) {
    auto& x = *n.inputs[0];
    for (auto& g : x.grad) g += n.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), Scalar{1} / static_cast<Scalar>(a.size()));
}

/// Numerically stable softmax over the final axis. −∞ entries get weight 0.
inline Tensor softmax_lastdim(const Tensor& a) {
  const std::size_t n = a.cols();
  const std::size_t m = a.size() / n;
  std::vector<Scalar> out(a.size());
  for (std::size_t r = 0; r < m; ++r) {
    const Scalar* x = a.data().data() + r * n;
    Scalar* y = out.data() + r * n;
    const Scalar mx = *std::max_element(x, x + n);
    if (!std::isfinite(mx))
      throw ContractError("softmax_lastdim: row " + std::to_string(r) +
                          " has no finite entry (fully masked)");
    Scalar z = 0;
    for (std::size_t c = 0; c < n; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < n; ++c) y[c] /= z;
  }
  return detail::make_result(a.shape(), std::move(out), {a}, [m, n](detail::Node& node) {
    auto& x = *node.inputs[0];
    for (std::size_t r = 0; r < m; ++r) {
      const Scalar* y = node.value.data() + r * n;
      const Scalar* g = node.grad.data() + r * n;
      Scalar dot = 0;
      for (std::size_t c = 0; c < n; ++c) dot += y[c] * g[c];
      for (std::size_t c = 0; c < n; ++c) x.grad[r * n + c] += y[c] * (g[c] - dot);
    }
  });
}

/// log Σ exp over the final axis; result drops that axis (rank-1 input gives [1]).
inline Tensor logsumexp_lastdim(const Tensor& a) {
  const std::size_t n = a.cols();
  const std::size_t m = a.size() / n;
  std::vector<Scalar> out(m);
  for (std::size_t r = 0; r < m; ++r) {
    const Scalar* x = a.data().data() + r * n;
    const Scalar mx = *std::max_element(x, x + n);
    if (!std::isfinite(mx)) {
      out[r] = mx;
      continue;
    }
    Scalar z = 0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(x[c] - mx);
    out[r] = mx + std::log(z);
  }
  Shape shape = a.shape();
  shape.pop_back();
  if (shape.empty()) shape = {1};
  return detail::make_result(std::move(shape), std::move(out), {a},
                             [m, n](detail::Node& node) {
    auto& x = *node.inputs[0];
    for (std::size_t r = 0; r < m; ++r) {
      const Scalar lse = node.value[r];
      if (!std::isfinite(lse)) continue;
      for (std::size_t c = 0; c < n; ++c)
        x.grad[r * n + c] += node.grad[r] * std::exp(x.value[r * n + c] - lse);
    }
  });
}

/// Max over one axis of a matrix, keeping that axis with extent 1.
/// Ties resolve to the lowest index.
inline Tensor max_pool_over_axis(const Tensor& a, std::size_t axis) {
  detail::require_rank2(a, "max_pool_over_axis");
  if (axis > 1) throw ShapeError("max_pool_over_axis: axis must be 0 or 1");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const std::size_t outer = axis == 0 ? n : m;
  const std::size_t inner = axis == 0 ? m : n;
  if (inner == 0) throw ShapeError("max_pool_over_axis: pooled axis is empty");
  std::vector<Scalar> out(outer);
  std::vector<std::size_t> arg(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t best = 0;
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t idx = axis == 0 ? i * n + o : o * n + i;
      const std::size_t bidx = axis == 0 ? best * n + o : o * n + best;
      if (a.data()[idx] > a.data()[bidx]) best = i;
    }
    arg[o] = axis == 0 ? best * n + o : o * n + best;
    out[o] = a.data()[arg[o]];
  }
  Shape shape = axis == 0 ? Shape{1, n} : Shape{m, 1};
  return detail::make_result(std::move(shape), std::move(out), {a},
                             [arg = std::move(arg)](detail::Node& node) {
    auto& x = *node.inputs[0];
    for (std::size_t o = 0; o < arg.size(); ++o) x.grad[arg[o]] += node.grad[o];
  });
}

// ------------------------------------------------------------ restructuring

/// Contiguous sub-block [begin, begin+len) along an axis of a matrix.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin,
                    std::size_t len) {
  detail::require_rank2(a, "slice");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const std::size_t extent = axis == 0 ? m : n;
  if (axis > 1 || len == 0 || begin + len > extent)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + len) + ") out of bounds for shape " +
                     format_shape(a.shape()));
  const std::size_t om = axis == 0 ? len : m;
  const std::size_t on = axis == 0 ? n : len;
  const std::size_t r0 = axis == 0 ? begin : 0;
  const std::size_t c0 = axis == 0 ? 0 : begin;
  std::vector<Scalar> out(om * on);
  for (std::size_t r = 0; r < om; ++r)
    for (std::size_t c = 0; c < on; ++c)
      out[r * on + c] = a.data()[(r + r0) * n + c + c0];
  return detail::make_result({om, on}, std::move(out), {a},
                             [om, on, r0, c0, n](detail::Node& node) {
    auto& x = *node.inputs[0];
    for (std::size_t r = 0; r < om; ++r)
      for (std::size_t c = 0; c < on; ++c)
        x.grad[(r + r0) * n + c + c0] += node.grad[r * on + c];
  });
}

/// Splits a matrix along an axis into consecutive pieces of the given sizes.
inline std::vector<Tensor> split(const Tensor& a, std::size_t axis,
                                 const std::vector<std::size_t>& sizes) {
  detail::require_rank2(a, "split");
  std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (axis > 1 || total != a.dim(axis))
    throw ShapeError("split: sizes sum to " + std::to_string(total) +
                     " but axis has extent of shape " + format_shape(a.shape()));
  std::vector<Tensor> parts;
  std::size_t offset = 0;
  for (auto s : sizes) {
    parts.push_back(slice(a, axis, offset, s));
    offset += s;
  }
  return parts;
}

/// Joins matrices along an axis; the other extent must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const auto& p : parts) detail::require_rank2(p, "concat");
  const std::size_t keep = parts[0].dim(1 - axis);
  std::size_t extent = 0;
  for (const auto& p : parts) {
    if (p.dim(1 - axis) != keep) detail::mismatch("concat", parts[0], p);
    extent += p.dim(axis);
  }
  const std::size_t m = axis == 0 ? extent : keep;
  const std::size_t n = axis == 0 ? keep : extent;
  std::vector<Scalar> out(m * n);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t pm = p.dim(0), pn = p.dim(1);
    for (std::size_t r = 0; r < pm; ++r)
      for (std::size_t c = 0; c < pn; ++c) {
        const std::size_t rr = axis == 0 ? r + offset : r;
        const std::size_t cc = axis == 0 ? c : c + offset;
        out[rr * n + cc] = p.data()[r * pn + c];
      }
    offset += p.dim(axis);
  }
  return detail::make_result({m, n}, std::move(out), parts,
                             [axis, n, offsets = std::move(offsets)](detail::Node& node) {
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      auto& x = *node.inputs[k];
      if (!x.requires_grad) continue;
      const std::size_t pm = x.shape[0], pn = x.shape[1];
      for (std::size_t r = 0; r < pm; ++r)
        for (std::size_t c = 0; c < pn; ++c) {
          const std::size_t rr = axis == 0 ? r + offsets[k] : r;
          const std::size_t cc = axis == 0 ? c : c + offsets[k];
          x.grad[r * pn + c] += node.grad[rr * n + cc];
        }
    }
  });
}

/// Gathers table rows: result row i is table[ids[i]].
inline Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> ids) {
  detail::require_rank2(table, "embedding_lookup");
  if (ids.empty()) throw ShapeError("embedding_lookup: empty index list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  std::vector<Scalar> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= vocab)
      throw std::out_of_range("embedding_lookup: index " + std::to_string(idx[i]) +
                              " outside table of " + std::to_string(vocab) + " rows");
    std::copy_n(table.data().begin() + idx[i] * d, d, out.begin() + i * d);
  }
  const std::size_t count = idx.size();
  return detail::make_result({count, d}, std::move(out), {table},
                             [d, idx = std::move(idx)](detail::Node& node) {
    auto& t = *node.inputs[0];
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) t.grad[idx[i] * d + c] += node.grad[i * d + c];
  });
}

/// Stacks sliding windows of `width` consecutive rows (step `stride`) into rows
/// of length width·cols. A 1-d convolution is unfold_rows followed by matmul.
inline Tensor unfold_rows(const Tensor& a, std::size_t width, std::size_t stride = 1) {
  detail::require_rank2(a, "unfold_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (width == 0 || stride == 0 || width > m)
    throw ShapeError("unfold_rows: window " + std::to_string(width) +
                     " does not fit shape " + format_shape(a.shape()));
  const std::size_t windows = (m - width) / stride + 1;
  const std::size_t rowlen = width * n;
  std::vector<Scalar> out(windows * rowlen);
  for (std::size_t w = 0; w < windows; ++w)
    std::copy_n(a.data().begin() + w * stride * n, rowlen, out.begin() + w * rowlen);
  return detail::make_result({windows, rowlen}, std::move(out), {a},
                             [windows, rowlen, stride, n](detail::Node& node) {
    auto& x = *node.inputs[0];
    for (std::size_t w = 0; w < windows; ++w)
      for (std::size_t c = 0; c < rowlen; ++c)
        x.grad[w * stride * n + c] += node.grad[w * rowlen + c];
  });
}

/// Maps per-offset scores to a query×key grid: out[t][j] = a[t][t−j+window]
/// where a is l×(2·window+1) and columns index offsets −window..window.
/// With a single input row the same offset row is shared by every query.
inline Tensor gather_relative(const Tensor& a, std::size_t length, std::size_t window) {
  detail::require_rank2(a, "gather_relative");
  if (a.dim(1) != 2 * window + 1 || (a.dim(0) != length && a.dim(0) != 1) ||
      length == 0 || length - 1 > window)
    throw ShapeError("gather_relative: shape " + format_shape(a.shape()) +
                     " incompatible with length " + std::to_string(length) +
                     " and window " + std::to_string(window));
  const bool shared = a.dim(0) == 1 && length != 1;
  const std::size_t w = a.dim(1);
  std::vector<Scalar> out(length * length);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t j = 0; j < length; ++j) {
      const std::size_t col = t + window - j;
      out[t * length + j] = a.data()[(shared ? 0 : t) * w + col];
    }
  return detail::make_result({length, length}, std::move(out), {a},
                             [length, window, w, shared](detail::Node& node) {
    auto& x = *node.inputs[0];
    for (std::size_t t = 0; t < length; ++t)
      for (std::size_t j = 0; j < length; ++j)
        x.grad[(shared ? 0 : t) * w + t + window - j] += node.grad[t * length + j];
  });
}

// ------------------------------------------------------------ normalization

/// Per-row layer normalization over the final axis with affine gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         Scalar eps = 1e-5) {
  const std::size_t n = x.cols();
  if (gain.size() != n || bias.size() != n) detail::mismatch("layer_norm", x, gain);
  const std::size_t m = x.size() / n;
  std::vector<Scalar> out(x.size()), xhat(x.size()), rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    const Scalar* row = x.data().data() + r * n;
    Scalar mu = 0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<Scalar>(n);
    Scalar var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<Scalar>(n);
    rstd[r] = 1 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (row[c] - mu) * rstd[r];
      out[r * n + c] = xhat[r * n + c] * gain.data()[c] + bias.data()[c];
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x, gain, bias},
                             [m, n, xhat = std::move(xhat),
                              rstd = std::move(rstd)](detail::Node& node) {
    auto& in = *node.inputs[0];
    auto& g = *node.inputs[1];
    auto& b = *node.inputs[2];
    std::vector<Scalar> dxhat(n);
    for (std::size_t r = 0; r < m; ++r) {
      Scalar mean_d = 0, mean_dx = 0;
      for (std::size_t c = 0; c < n; ++c) {
        const Scalar go = node.grad[r * n + c];
        if (g.requires_grad) g.grad[c] += go * xhat[r * n + c];
        if (b.requires_grad) b.grad[c] += go;
        dxhat[c] = go * g.value[c];
        mean_d += dxhat[c];
        mean_dx += dxhat[c] * xhat[r * n + c];
      }
      if (!in.requires_grad) continue;
      mean_d /= static_cast<Scalar>(n);
      mean_dx /= static_cast<Scalar>(n);
      for (std::size_t c = 0; c < n; ++c)
        in.grad[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
    }
  });
}

/// Inverted dropout: zeroes entries with probability `rate` and rescales the
/// survivors by 1/(1−rate). Identity when not training.
inline Tensor dropout(const Tensor& x, Scalar rate, bool training,
                      std::mt19937_64* rng) {
  if (rate < 0 || rate >= 1) throw ConfigError("dropout: rate must lie in [0,1)");
  if (!training || rate == 0) return x;
  if (!rng) throw ContractError("dropout: training mode requires a generator");
  std::bernoulli_distribution keep(1 - rate);
  const Scalar factor = 1 / (1 - rate);
  std::vector<Scalar> scale_by(x.size());
  std::vector<Scalar> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    scale_by[i] = keep(*rng) ? factor : Scalar{0};
    out[i] = x.data()[i] * scale_by[i];
  }
  return detail::make_result(x.shape(), std::move(out), {x},
                             [scale_by = std::move(scale_by)](detail::Node& node) {
    auto& in = *node.inputs[0];
    for (std::size_t i = 0; i < scale_by.size(); ++i)
      in.grad[i] += node.grad[i] * scale_by[i];
  });
}

// -------------------------------------------------------------- grad check

/// Max elementwise relative error between the analytic gradient of a scalar
/// function and its central-difference estimate.
inline Scalar grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                         Scalar epsilon = 1e-6) {
  if (epsilon < 1e-8 || epsilon > 1e-4)
    throw ContractError("grad_check: epsilon must lie in [1e-8, 1e-4]");
  if (!x.requires_grad())
    throw ContractError("grad_check: input must track gradients");
  x.zero_grad();
  Tensor y = f(x);
  if (y.size() != 1)
    throw ContractError("grad_check: function returned shape " +
                        format_shape(y.shape()) + ", expected a scalar");
  backward(y);
  std::vector<Scalar> analytic(x.grad().begin(), x.grad().end());
  x.zero_grad();

  NoGradGuard no_grad;
  Scalar worst = 0;
  auto values = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Scalar saved = values[i];
    values[i] = saved + epsilon;
    const Scalar up = f(x).item();
    values[i] = saved - epsilon;
    const Scalar down = f(x).item();
    values[i] = saved;
    const Scalar numeric = (up - down) / (2 * epsilon);
    const Scalar denom =
        std::max({std::abs(analytic[i]), std::abs(numeric), Scalar{1e-10}});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------- parameters

/// Named, ordered collection of trainable leaves.
class ParameterStore {
 public:
  Tensor add(const std::string& name, Tensor t) {
    for (const auto& [n, _] : entries_)
      if (n == name) throw ConfigError("parameter '" + name + "' registered twice");
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return t;
    throw std::out_of_range("unknown parameter '" + name + "'");
  }
  Tensor& get(const std::string& name) {
    return const_cast<Tensor&>(std::as_const(*this).get(name));
  }
  bool contains(const std::string& name) const {
    for (const auto& [n, _] : entries_)
      if (n == name) return true;
    return false;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

/// Trainable matrix with entries uniform in ±1/√fan_in.
inline Tensor init_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const Scalar bound = 1 / std::sqrt(static_cast<Scalar>(fan_in));
  std::uniform_real_distribution<Scalar> dist(-bound, bound);
  std::vector<Scalar> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace tener
