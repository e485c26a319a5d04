#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <vector>

#include "desire/numerics/types.hpp"

namespace desire {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in creation order, so the record is
/// already topologically sorted and backward is a single reverse sweep.
///
/// Gradient buffers exist only for nodes that require a gradient; constants
/// (frozen weights, inputs) never get one.
class Tape {
 public:
  /// Receives the upstream gradient of the node it is attached to.
  using BackwardFn = std::function<void(Tape&, const Matrix& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);

  /// Appends the result of a primitive. The node requires a gradient iff any
  /// parent does; otherwise the backward rule is dropped.
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward);

  /// d(loss)/d(node) for every node reachable from a 1x1 loss.
  void backward(Var loss);

  bool has_grad(Var v) const;
  const Matrix& grad(Var v) const;

  /// Adds `delta` into the gradient of `target`; no-op for constants.
  template <typename Derived>
  void accumulate(Var target, const Eigen::MatrixBase<Derived>& delta) {
    Node& node = nodes_[target.id()];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
      node.grad = delta;
    } else {
      node.grad += delta;
    }
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t grad_buffer_count() const;

 private:
  struct Node {
    Matrix value;
    mutable Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  void check_owner(Var v) const;

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable kernels. Each checks shapes (DimensionError) and finiteness
// of its result (NumericError).

Var matmul(Var a, Var b);
/// a * b^T without materializing the transpose.
Var matmul_transposed(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
/// x (n x d) + bias (1 x d) broadcast over rows.
Var add_row(Var x, Var bias);
Var scale(Var x, double factor);
/// s (1 x 1) times x.
Var scalar_mul(Var s, Var x);
Var sum(Var x);
Var mean(Var x);
Var square(Var x);
Var square_norm(Var x);

Var softmax_rows(Var x);
Var gelu(Var x);
/// Row-wise layer normalization with affine gamma/beta (1 x d each).
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Averages consecutive groups of `group` rows: (n x d) -> (n/group x d).
Var mean_pool(Var x, Index group);

/// Multi-head self-attention over sequences of `tokens` consecutive rows of
/// already-projected q, k, v (each n x d). Returns the concatenated heads.
Var attention(Var q, Var k, Var v, Index num_heads, Index tokens);

/// Mean negative log-softmax probability of the labels; 1x1 result.
Var cross_entropy(Var logits, const std::vector<int>& labels);

/// Row-wise min-max normalization (n x C, C >= 2). `degenerate[r]` is set for
/// rows with max == min; those rows map to zeros and receive no gradient.
/// Ties route the gradient to the first occurrence of the min/max.
Var minmax_normalize_rows(Var x, std::vector<bool>* degenerate = nullptr);

/// Shannon entropy (nats) of softmax of each row: (n x C) -> (n x 1).
Var softmax_entropy_rows(Var x);

/// Gathers rows by index: (n x d) -> (k x d).
Var select_rows(Var x, const std::vector<Index>& rows);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var x) { return scale(x, s); }

}  // namespace desire
