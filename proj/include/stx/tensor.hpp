#pragma once

// Dense row-major double-precision tensors with taped reverse-mode
// differentiation. The tape is rebuilt on every forward pass (stochastic
// depth changes the topology per batch); backward() walks it once in
// reverse topological order and sums gradient contributions into every
// requires-grad node it reaches.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stx/error.hpp"

namespace stx {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Tape construction toggle. Numeric probes (finite differences, evaluation
// loops) switch it off to skip graph bookkeeping.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until the backward pass reaches it
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode>()) {}

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    validate_shape(shape);
    node_->shape = std::move(shape);
    node_->values.assign(shape_size(node_->shape), fill);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    validate_shape(shape);
    if (shape_size(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  std::vector<double>& values() { return node_->values; }
  const std::vector<double>& values() const { return node_->values; }
  double* data() { return node_->values.data(); }
  const double* data() const { return node_->values.data(); }

  double value() const {
    if (size() != 1) {
      throw ContractError("value(): tensor is not scalar, shape " + shape_str(shape()));
    }
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (node_->grad.empty()) {
      throw ContractError("grad(): gradient not populated; run backward() first");
    }
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Value copy detached from any graph.
  Tensor detach() const { return Tensor(node_->shape, node_->values, false); }

  std::shared_ptr<TensorNode>& node() { return node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

  // Reverse-mode sweep from a scalar root. Visits each reachable node exactly
  // once in reverse topological order; a node consumed by k operations
  // receives the sum of the k contributions.
  void backward() const {
    if (size() != 1) {
      throw ContractError("backward: root must be scalar, got shape " + shape_str(shape()));
    }
    std::vector<TensorNode*> order;
    topo_sort(node_.get(), order);
    node_->ensure_grad();
    node_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

 private:
  static void validate_shape(const Shape& shape) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in shape " + shape_str(shape));
    }
  }

  // Iterative post-order DFS over parent edges.
  static void topo_sort(TensorNode* root, std::vector<TensorNode*>& order) {
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorNode* parent = node->parents[next++].get();
        if (visited.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline bool any_requires_grad(const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

// Assembles an op node: result values plus, when the tape is live and some
// input needs gradients, the parent links and the local backward rule.
inline Tensor make_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                      std::function<void(TensorNode&)> backward_fn) {
  Tensor out(std::move(shape), std::move(values), false);
  if (grad_mode() && any_requires_grad(inputs)) {
    out.node()->requires_grad = true;
    out.node()->parents.reserve(inputs.size());
    for (const auto& t : inputs) out.node()->parents.push_back(t.node());
    out.node()->backward_fn = std::move(backward_fn);
  }
  return out;
}

inline void accumulate(const std::shared_ptr<TensorNode>& node, std::size_t i, double v) {
  if (!node->requires_grad) return;
  node->ensure_grad();
  node->grad[i] += v;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto pa = a.node(), pb = b.node();
  std::vector<double> av = a.values(), bv = b.values();
  return detail::make_op(a.shape(), std::move(out), {a, b},
                         [pa, pb, av = std::move(av), bv = std::move(bv)](TensorNode& n) {
                           if (pa->requires_grad) {
                             pa->ensure_grad();
                             for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pa->grad[i] += n.grad[i] * bv[i];
                           }
                           if (pb->requires_grad) {
                             pb->ensure_grad();
                             for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pb->grad[i] += n.grad[i] * av[i];
                           }
                         });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
  auto px = x.node();
  return detail::make_op(x.shape(), std::move(out), {x}, [px, c](TensorNode& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += c * n.grad[i];
  });
}

// y = x * mask elementwise against a fixed coefficient vector. Serves dropout
// (mask entries 0 or 1/keep) and winner-take-all gating (entries 0 or 1).
inline Tensor mul_mask(const Tensor& x, const std::vector<double>& mask) {
  if (mask.size() != x.size()) {
    throw ShapeError("mul_mask: mask length " + std::to_string(mask.size()) +
                     " does not match tensor " + shape_str(x.shape()));
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  auto px = x.node();
  return detail::make_op(x.shape(), std::move(out), {x}, [px, mask](TensorNode& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i] * mask[i];
  });
}

// x: [..., D], bias: [D]; broadcast over all leading dimensions.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.dim(0)) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match trailing dim of " +
                     shape_str(x.shape()));
  }
  const std::size_t d = bias.dim(0);
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.data()[r * d + j] + bias.data()[j];
  auto px = x.node(), pb = bias.node();
  return detail::make_op(x.shape(), std::move(out), {x, bias}, [px, pb, rows, d](TensorNode& n) {
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) pb->grad[j] += n.grad[r * d + j];
    }
  });
}

// x: [B, ...], c: [...]; adds c to every batch element (position encodings).
inline Tensor add_broadcast0(const Tensor& x, const Tensor& c) {
  if (x.rank() < 2 || c.size() == 0 || x.size() % c.size() != 0 ||
      !std::equal(c.shape().begin(), c.shape().end(), x.shape().begin() + 1)) {
    throw ShapeError("add_broadcast0: cannot broadcast " + shape_str(c.shape()) + " over " +
                     shape_str(x.shape()));
  }
  const std::size_t inner = c.size();
  const std::size_t batch = x.size() / inner;
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < inner; ++i) out[b * inner + i] = x.data()[b * inner + i] + c.data()[i];
  auto px = x.node(), pc = c.node();
  return detail::make_op(x.shape(), std::move(out), {x, c}, [px, pc, batch, inner](TensorNode& n) {
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i];
    }
    if (pc->requires_grad) {
      pc->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < inner; ++i) pc->grad[i] += n.grad[b * inner + i];
    }
  });
}

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_size(new_shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  }
  auto px = x.node();
  return detail::make_op(std::move(new_shape), x.values(), {x}, [px](TensorNode& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i];
  });
}

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += x.data()[i];
  auto px = x.node();
  return detail::make_op(Shape{1}, {total}, {x}, [px](TensorNode& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += n.grad[0];
  });
}

// x: [B, S, F] -> [B, F], average over the middle axis.
inline Tensor mean_axis1(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("mean_axis1: expected rank-3 tensor, got " + shape_str(x.shape()));
  const std::size_t b_n = x.dim(0), s_n = x.dim(1), f_n = x.dim(2);
  std::vector<double> out(b_n * f_n, 0.0);
  for (std::size_t b = 0; b < b_n; ++b)
    for (std::size_t s = 0; s < s_n; ++s)
      for (std::size_t f = 0; f < f_n; ++f) out[b * f_n + f] += x.data()[(b * s_n + s) * f_n + f];
  for (double& v : out) v /= static_cast<double>(s_n);
  auto px = x.node();
  return detail::make_op(Shape{b_n, f_n}, std::move(out), {x}, [px, b_n, s_n, f_n](TensorNode& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const double inv = 1.0 / static_cast<double>(s_n);
    for (std::size_t b = 0; b < b_n; ++b)
      for (std::size_t s = 0; s < s_n; ++s)
        for (std::size_t f = 0; f < f_n; ++f)
          px->grad[(b * s_n + s) * f_n + f] += n.grad[b * f_n + f] * inv;
  });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n_cols = b.dim(1);
  std::vector<double> out(m * n_cols, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.data()[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * n_cols;
      double* orow = out.data() + i * n_cols;
      for (std::size_t j = 0; j < n_cols; ++j) orow[j] += av * brow[j];
    }
  auto pa = a.node(), pb = b.node();
  std::vector<double> av = a.values(), bv = b.values();
  return detail::make_op(
      Shape{m, n_cols}, std::move(out), {a, b},
      [pa, pb, av = std::move(av), bv = std::move(bv), m, k, n_cols](TensorNode& n) {
        // dA = dC * B^T, dB = A^T * dC
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n_cols; ++j) {
              const double g = n.grad[i * n_cols + j];
              if (g == 0.0) continue;
              for (std::size_t p = 0; p < k; ++p) pa->grad[i * k + p] += g * bv[p * n_cols + j];
            }
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double a_ip = av[i * k + p];
              if (a_ip == 0.0) continue;
              for (std::size_t j = 0; j < n_cols; ++j)
                pb->grad[p * n_cols + j] += a_ip * n.grad[i * n_cols + j];
            }
        }
      });
}

// Batched product over matching leading dimension: [N,m,k] x [N,k,n] -> [N,m,n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n_cols = b.dim(2);
  std::vector<double> out(batch * m * n_cols, 0.0);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* A = a.data() + bi * m * k;
    const double* B = b.data() + bi * k * n_cols;
    double* O = out.data() + bi * m * n_cols;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A[i * k + p];
        if (av == 0.0) continue;
        for (std::size_t j = 0; j < n_cols; ++j) O[i * n_cols + j] += av * B[p * n_cols + j];
      }
  }
  auto pa = a.node(), pb = b.node();
  std::vector<double> av = a.values(), bv = b.values();
  return detail::make_op(
      Shape{batch, m, n_cols}, std::move(out), {a, b},
      [pa, pb, av = std::move(av), bv = std::move(bv), batch, m, k, n_cols](TensorNode& n) {
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const double* A = av.data() + bi * m * k;
          const double* B = bv.data() + bi * k * n_cols;
          const double* G = n.grad.data() + bi * m * n_cols;
          if (pa->requires_grad) {
            pa->ensure_grad();
            double* dA = pa->grad.data() + bi * m * k;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n_cols; ++j) {
                const double g = G[i * n_cols + j];
                if (g == 0.0) continue;
                for (std::size_t p = 0; p < k; ++p) dA[i * k + p] += g * B[p * n_cols + j];
              }
          }
          if (pb->requires_grad) {
            pb->ensure_grad();
            double* dB = pb->grad.data() + bi * k * n_cols;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                const double a_ip = A[i * k + p];
                if (a_ip == 0.0) continue;
                for (std::size_t j = 0; j < n_cols; ++j)
                  dB[p * n_cols + j] += a_ip * G[i * n_cols + j];
              }
          }
        }
      });
}

inline Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: need rank >= 2, got " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  const std::size_t m = out_shape[out_shape.size() - 2], n_cols = out_shape.back();
  std::swap(out_shape[out_shape.size() - 2], out_shape.back());
  const std::size_t batch = x.size() / (m * n_cols);
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n_cols; ++j)
        out[b * m * n_cols + j * m + i] = x.data()[b * m * n_cols + i * n_cols + j];
  auto px = x.node();
  return detail::make_op(std::move(out_shape), std::move(out), {x}, [px, batch, m, n_cols](TensorNode& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n_cols; ++j)
          px->grad[b * m * n_cols + i * n_cols + j] += n.grad[b * m * n_cols + j * m + i];
  });
}

// [a, b, c, d] -> [a, c, b, d]; used to regroup attention heads.
inline Tensor swap_axes12(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("swap_axes12: expected rank-4 tensor, got " + shape_str(x.shape()));
  const std::size_t d0 = x.dim(0), d1 = x.dim(1), d2 = x.dim(2), d3 = x.dim(3);
  std::vector<double> out(x.size());
  for (std::size_t i0 = 0; i0 < d0; ++i0)
    for (std::size_t i1 = 0; i1 < d1; ++i1)
      for (std::size_t i2 = 0; i2 < d2; ++i2)
        for (std::size_t i3 = 0; i3 < d3; ++i3)
          out[((i0 * d2 + i2) * d1 + i1) * d3 + i3] = x.data()[((i0 * d1 + i1) * d2 + i2) * d3 + i3];
  auto px = x.node();
  return detail::make_op(Shape{d0, d2, d1, d3}, std::move(out), {x}, [px, d0, d1, d2, d3](TensorNode& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i0 = 0; i0 < d0; ++i0)
      for (std::size_t i1 = 0; i1 < d1; ++i1)
        for (std::size_t i2 = 0; i2 < d2; ++i2)
          for (std::size_t i3 = 0; i3 < d3; ++i3)
            px->grad[((i0 * d1 + i1) * d2 + i2) * d3 + i3] +=
                n.grad[((i0 * d2 + i2) * d1 + i1) * d3 + i3];
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

// Max-subtracted softmax over the last dimension; each slice sums to 1.
inline Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1 || x.shape().back() < 1) {
    throw ShapeError("softmax_lastdim: bad shape " + shape_str(x.shape()));
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x.data()[i])) throw NumericError("softmax_lastdim: non-finite input");
  }
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * d;
    double mx = row[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      out[r * d + j] = std::exp(row[j] - mx);
      denom += out[r * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] /= denom;
  }
  auto px = x.node();
  std::vector<double> yv = out;
  return detail::make_op(x.shape(), std::move(out), {x},
                         [px, yv = std::move(yv), rows, d](TensorNode& n) {
                           if (!px->requires_grad) return;
                           px->ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < d; ++j) dot += n.grad[r * d + j] * yv[r * d + j];
                             for (std::size_t j = 0; j < d; ++j)
                               px->grad[r * d + j] += yv[r * d + j] * (n.grad[r * d + j] - dot);
                           }
                         });
}

// x * Phi(x) with Phi the exact standard-normal CDF (erfc form keeps the
// negative tail accurate).
inline double gelu_value(double x) {
  return x * 0.5 * std::erfc(-x * 0.70710678118654752440);
}

inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu_value(x.data()[i]);
  auto px = x.node();
  std::vector<double> xv = x.values();
  return detail::make_op(x.shape(), std::move(out), {x}, [px, xv = std::move(xv)](TensorNode& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double x_i = xv[i];
      const double cdf = 0.5 * std::erfc(-x_i * 0.70710678118654752440);
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * x_i * x_i);
      px->grad[i] += n.grad[i] * (cdf + x_i * pdf);
    }
  });
}

}  // namespace stx
