#include "desire/numerics/autodiff.hpp"

#include <cmath>
#include <numbers>

namespace desire {

const Matrix& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

void Tape::check_owner(Var v) const {
  if (v.tape() != this || v.id() >= nodes_.size()) throw ConsistencyError("tape: variable from another tape");
}

Var Tape::constant(Matrix value) {
  require_finite(value, "tape constant");
  nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
  require_finite(value, "tape variable");
  nodes_.push_back(Node{std::move(value), Matrix(), true, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward) {
  bool needs_grad = false;
  for (Var p : parents) {
    check_owner(p);
    needs_grad = needs_grad || nodes_[p.id()].requires_grad;
  }
  if (!value.allFinite()) throw NumericError("kernel produced a non-finite value");
  nodes_.push_back(Node{std::move(value), Matrix(), needs_grad, needs_grad ? std::move(backward) : nullptr});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  check_owner(loss);
  const Matrix& v = nodes_[loss.id()].value;
  if (v.rows() != 1 || v.cols() != 1) throw DimensionError("backward: loss must be 1x1, got " + shape_string(v));
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].grad = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.size() == 0) continue;
    // Closures only touch parents' grads (lower ids), so node.grad stays put.
    node.backward(*this, node.grad);
  }
}

bool Tape::has_grad(Var v) const {
  check_owner(v);
  return nodes_[v.id()].grad.size() != 0;
}

const Matrix& Tape::grad(Var v) const {
  check_owner(v);
  const Node& n = nodes_[v.id()];
  if (!n.requires_grad) throw ConsistencyError("tape: constant has no gradient");
  // Unreached variable: gradient is identically zero.
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

std::size_t Tape::grad_buffer_count() const {
  std::size_t count = 0;
  for (const Node& n : nodes_) count += n.grad.size() != 0 ? 1 : 0;
  return count;
}

// ---------------------------------------------------------------------------

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw ConsistencyError("kernel: invalid variable");
  return *a.tape();
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": " + shape_string(a.value()) + " vs " + shape_string(b.value()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_string(a.value()) + " x " + shape_string(b.value()));
  }
  Tape& t = tape_of(a);
  Matrix out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (a.requires_grad()) tp.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) tp.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_transposed(Var a, Var b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_transposed: " + shape_string(a.value()) + " x " + shape_string(b.value()) + "^T");
  }
  Tape& t = tape_of(a);
  Matrix out = a.value() * b.value().transpose();
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (a.requires_grad()) tp.accumulate(a, g * b.value());
    if (b.requires_grad()) tp.accumulate(b, g.transpose() * a.value());
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tape& t = tape_of(a);
  Matrix out = a.value() + b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tape& t = tape_of(a);
  Matrix out = a.value() - b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

Var hadamard(Var a, Var b) {
  require_same_shape(a, b, "hadamard");
  Tape& t = tape_of(a);
  Matrix out = a.value().cwiseProduct(b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (a.requires_grad()) tp.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) tp.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var add_row(Var x, Var bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw DimensionError("add_row: bias " + shape_string(bias.value()) + " for " + shape_string(x.value()));
  }
  Tape& t = tape_of(x);
  Matrix out = x.value().rowwise() + bias.value().row(0);
  return t.record(std::move(out), {x, bias}, [x, bias](Tape& tp, const Matrix& g) {
    tp.accumulate(x, g);
    if (bias.requires_grad()) tp.accumulate(bias, g.colwise().sum());
  });
}

Var scale(Var x, double factor) {
  Tape& t = tape_of(x);
  Matrix out = factor * x.value();
  return t.record(std::move(out), {x}, [x, factor](Tape& tp, const Matrix& g) { tp.accumulate(x, factor * g); });
}

Var scalar_mul(Var s, Var x) {
  if (s.rows() != 1 || s.cols() != 1) throw DimensionError("scalar_mul: scalar is " + shape_string(s.value()));
  Tape& t = tape_of(x);
  Matrix out = s.value()(0, 0) * x.value();
  return t.record(std::move(out), {s, x}, [s, x](Tape& tp, const Matrix& g) {
    if (s.requires_grad()) tp.accumulate(s, Matrix::Constant(1, 1, g.cwiseProduct(x.value()).sum()));
    if (x.requires_grad()) tp.accumulate(x, s.value()(0, 0) * g);
  });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  Matrix out = Matrix::Constant(1, 1, x.value().sum());
  return t.record(std::move(out), {x}, [x](Tape& tp, const Matrix& g) {
    tp.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

Var mean(Var x) {
  if (x.value().size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var square(Var x) { return hadamard(x, x); }

Var square_norm(Var x) { return sum(square(x)); }

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  const Matrix& in = x.value();
  Matrix out(in.rows(), in.cols());
  for (Index r = 0; r < in.rows(); ++r) {
    const double shift = in.row(r).maxCoeff();
    out.row(r) = (in.row(r).array() - shift).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  Matrix probs = out;
  return t.record(std::move(out), {x}, [x, probs = std::move(probs)](Tape& tp, const Matrix& g) {
    const Vector dot = g.cwiseProduct(probs).rowwise().sum();
    Matrix dx = probs.cwiseProduct(g.colwise() - dot);
    tp.accumulate(x, dx);
  });
}

Var gelu(Var x) {
  // Tanh form: 0.5 x (1 + tanh(u)) == x * sigmoid(2u), u = c (x + 0.044715 x^3).
  Tape& t = tape_of(x);
  const double c = std::sqrt(2.0 / std::numbers::pi);
  const auto in = x.value().array();
  const Eigen::ArrayXXd u2 = 2.0 * c * (in + 0.044715 * in.cube());
  Eigen::ArrayXXd gate = 1.0 / (1.0 + (-u2).exp());
  Matrix out = (in * gate).matrix();
  return t.record(std::move(out), {x}, [x, c, gate = std::move(gate)](Tape& tp, const Matrix& g) {
    const auto in = x.value().array();
    const Eigen::ArrayXXd du2 = 2.0 * c * (1.0 + 3.0 * 0.044715 * in.square());
    const Eigen::ArrayXXd d = gate + in * gate * (1.0 - gate) * du2;
    tp.accumulate(x, (g.array() * d).matrix());
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  const Index n = x.rows();
  const Index d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw DimensionError("layer_norm_rows: affine params must be 1x" + std::to_string(d));
  }
  Tape& t = tape_of(x);
  const Matrix& in = x.value();
  const Vector mu = in.rowwise().mean();
  Matrix centered = in.colwise() - mu;
  const Vector inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<double>(d)) + eps).rsqrt().matrix();
  Matrix normed = centered.array().colwise() * inv_std.array();
  Matrix out = (normed.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  (void)n;
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, normed = std::move(normed), inv_std](Tape& tp, const Matrix& g) {
                    if (gamma.requires_grad()) tp.accumulate(gamma, g.cwiseProduct(normed).colwise().sum());
                    if (beta.requires_grad()) tp.accumulate(beta, g.colwise().sum());
                    if (x.requires_grad()) {
                      const Matrix dn = (g.array().rowwise() * gamma.value().row(0).array()).matrix();
                      const Vector mean_dn = dn.rowwise().mean();
                      const Vector mean_dn_n = dn.cwiseProduct(normed).rowwise().mean();
                      Matrix dx = dn.colwise() - mean_dn;
                      dx -= (normed.array().colwise() * mean_dn_n.array()).matrix();
                      dx = (dx.array().colwise() * inv_std.array()).matrix();
                      tp.accumulate(x, dx);
                    }
                  });
}

Var mean_pool(Var x, Index group) {
  if (group <= 0 || x.rows() % group != 0) {
    throw DimensionError("mean_pool: " + std::to_string(x.rows()) + " rows not divisible by " + std::to_string(group));
  }
  Tape& t = tape_of(x);
  const Index groups = x.rows() / group;
  Matrix out(groups, x.cols());
  for (Index s = 0; s < groups; ++s) out.row(s) = x.value().middleRows(s * group, group).colwise().mean();
  return t.record(std::move(out), {x}, [x, group, groups](Tape& tp, const Matrix& g) {
    Matrix dx(x.rows(), x.cols());
    const double w = 1.0 / static_cast<double>(group);
    for (Index s = 0; s < groups; ++s) dx.middleRows(s * group, group).rowwise() = w * g.row(s);
    tp.accumulate(x, dx);
  });
}

Var attention(Var q, Var k, Var v, Index num_heads, Index tokens) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const Index n = q.rows();
  const Index d = q.cols();
  if (num_heads <= 0 || d % num_heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (tokens <= 0 || n % tokens != 0) throw DimensionError("attention: rows not divisible by sequence length");
  const Index head_dim = d / num_heads;
  const Index sequences = n / tokens;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Tape& t = tape_of(q);

  Matrix probs(n, num_heads * tokens);
  Matrix out(n, d);
  Matrix scores(tokens, tokens);
  for (Index s = 0; s < sequences; ++s) {
    for (Index h = 0; h < num_heads; ++h) {
      const auto qb = q.value().block(s * tokens, h * head_dim, tokens, head_dim);
      const auto kb = k.value().block(s * tokens, h * head_dim, tokens, head_dim);
      const auto vb = v.value().block(s * tokens, h * head_dim, tokens, head_dim);
      scores.noalias() = scale_factor * (qb * kb.transpose());
      for (Index r = 0; r < tokens; ++r) {
        const double shift = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - shift).exp().matrix();
        scores.row(r) /= scores.row(r).sum();
      }
      probs.block(s * tokens, h * tokens, tokens, tokens) = scores;
      out.block(s * tokens, h * head_dim, tokens, head_dim).noalias() = scores * vb;
    }
  }
  return t.record(
      std::move(out), {q, k, v},
      [q, k, v, num_heads, tokens, head_dim, sequences, scale_factor, probs = std::move(probs)](Tape& tp,
                                                                                            const Matrix& g) {
        Matrix dq = Matrix::Zero(q.rows(), q.cols());
        Matrix dk = Matrix::Zero(q.rows(), q.cols());
        Matrix dv = Matrix::Zero(q.rows(), q.cols());
        Matrix dp(tokens, tokens);
        Matrix ds(tokens, tokens);
        for (Index s = 0; s < sequences; ++s) {
          for (Index h = 0; h < num_heads; ++h) {
            const Index r0 = s * tokens;
            const Index c0 = h * head_dim;
            const auto p = probs.block(r0, h * tokens, tokens, tokens);
            const auto go = g.block(r0, c0, tokens, head_dim);
            const auto qb = q.value().block(r0, c0, tokens, head_dim);
            const auto kb = k.value().block(r0, c0, tokens, head_dim);
            const auto vb = v.value().block(r0, c0, tokens, head_dim);
            dv.block(r0, c0, tokens, head_dim).noalias() = p.transpose() * go;
            dp.noalias() = go * vb.transpose();
            const Vector row_dot = dp.cwiseProduct(p).rowwise().sum();
            ds = p.cwiseProduct(dp.colwise() - row_dot);
            dq.block(r0, c0, tokens, head_dim).noalias() = scale_factor * (ds * kb);
            dk.block(r0, c0, tokens, head_dim).noalias() = scale_factor * (ds.transpose() * qb);
          }
        }
        tp.accumulate(q, dq);
        tp.accumulate(k, dk);
        tp.accumulate(v, dv);
      });
}

Var cross_entropy(Var logits, const std::vector<int>& labels) {
  const Index n = logits.rows();
  const Index c = logits.cols();
  if (static_cast<Index>(labels.size()) != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  }
  if (n == 0) throw DimensionError("cross_entropy: empty batch");
  Tape& t = tape_of(logits);
  Matrix probs(n, c);
  double total = 0.0;
  for (Index r = 0; r < n; ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(label) + " outside [0," + std::to_string(c) + ")");
    }
    const auto row = logits.value().row(r);
    const double shift = row.maxCoeff();
    const double log_norm = std::log((row.array() - shift).exp().sum()) + shift;
    probs.row(r) = (row.array() - log_norm).exp().matrix();
    total -= row(label) - log_norm;
  }
  Matrix out = Matrix::Constant(1, 1, total / static_cast<double>(n));
  return t.record(std::move(out), {logits}, [logits, labels, probs = std::move(probs)](Tape& tp, const Matrix& g) {
    Matrix dx = probs;
    for (std::size_t r = 0; r < labels.size(); ++r) dx(static_cast<Index>(r), labels[r]) -= 1.0;
    dx *= g(0, 0) / static_cast<double>(labels.size());
    tp.accumulate(logits, dx);
  });
}

Var minmax_normalize_rows(Var x, std::vector<bool>* degenerate) {
  const Index n = x.rows();
  const Index c = x.cols();
  if (c < 2) throw DimensionError("minmax_normalize_rows: need at least 2 columns");
  Tape& t = tape_of(x);
  Matrix out(n, c);
  std::vector<Index> arg_min(static_cast<std::size_t>(n));
  std::vector<Index> arg_max(static_cast<std::size_t>(n));
  Vector range(n);
  if (degenerate) degenerate->assign(static_cast<std::size_t>(n), false);
  for (Index r = 0; r < n; ++r) {
    const auto row = x.value().row(r);
    Index lo = 0;
    Index hi = 0;
    // minCoeff/maxCoeff with index return the first occurrence.
    const double vmin = row.minCoeff(&lo);
    const double vmax = row.maxCoeff(&hi);
    arg_min[static_cast<std::size_t>(r)] = lo;
    arg_max[static_cast<std::size_t>(r)] = hi;
    range(r) = vmax - vmin;
    if (range(r) == 0.0) {
      out.row(r).setZero();
      if (degenerate) (*degenerate)[static_cast<std::size_t>(r)] = true;
    } else {
      out.row(r) = (row.array() - vmin) / range(r);
    }
  }
  Matrix normed = out;
  return t.record(std::move(out), {x},
                  [x, arg_min = std::move(arg_min), arg_max = std::move(arg_max), range,
                   normed = std::move(normed)](Tape& tp, const Matrix& g) {
                    Matrix dx = Matrix::Zero(x.rows(), x.cols());
                    for (Index r = 0; r < x.rows(); ++r) {
                      const double rg = range(r);
                      if (rg == 0.0) continue;
                      const double g_sum = g.row(r).sum();
                      const double gy_sum = g.row(r).dot(normed.row(r));
                      dx.row(r) = g.row(r) / rg;
                      dx(r, arg_min[static_cast<std::size_t>(r)]) += (gy_sum - g_sum) / rg;
                      dx(r, arg_max[static_cast<std::size_t>(r)]) -= gy_sum / rg;
                    }
                    tp.accumulate(x, dx);
                  });
}

Var softmax_entropy_rows(Var x) {
  const Index n = x.rows();
  const Index c = x.cols();
  if (c < 1) throw DimensionError("softmax_entropy_rows: empty rows");
  Tape& t = tape_of(x);
  Matrix probs(n, c);
  Matrix log_probs(n, c);
  Matrix out(n, 1);
  for (Index r = 0; r < n; ++r) {
    const auto row = x.value().row(r);
    const double shift = row.maxCoeff();
    const double log_norm = std::log((row.array() - shift).exp().sum()) + shift;
    log_probs.row(r) = (row.array() - log_norm).matrix();
    probs.row(r) = log_probs.row(r).array().exp().matrix();
    out(r, 0) = std::max(0.0, -probs.row(r).dot(log_probs.row(r)));
  }
  Vector entropy = out.col(0);
  return t.record(std::move(out), {x},
                  [x, probs = std::move(probs), log_probs = std::move(log_probs), entropy](Tape& tp, const Matrix& g) {
                    // dH/dx_k = -p_k (log p_k + H)
                    Matrix dx = -(probs.array() * (log_probs.colwise() + entropy).array()).matrix();
                    dx = (dx.array().colwise() * g.col(0).array()).matrix();
                    tp.accumulate(x, dx);
                  });
}

Var select_rows(Var x, const std::vector<Index>& rows) {
  Tape& t = tape_of(x);
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw IndexError("select_rows: row " + std::to_string(rows[i]));
    out.row(static_cast<Index>(i)) = x.value().row(rows[i]);
  }
  return t.record(std::move(out), {x}, [x, rows](Tape& tp, const Matrix& g) {
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) += g.row(static_cast<Index>(i));
    tp.accumulate(x, dx);
  });
}

}  // namespace desire
