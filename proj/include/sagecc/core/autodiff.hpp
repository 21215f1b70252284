#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation of one forward pass. Vars are light handles
// into the tape; gradients are accumulated back into Parameters on backward().

#include "sagecc/core/tensor.hpp"

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace sagecc {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

namespace ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
    std::string op;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value, std::string_view op = "const");
  Var parameter(Parameter& p);

  /// Register an op node. `backward` is dropped when no input requires grad.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward,
             std::string_view op);
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn backward,
             std::string_view op);

  /// Seeds d(root)/d(root) = 1 and propagates into every Parameter leaf.
  void backward(const Var& root);

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  /// Accumulate into a node's gradient, allocating it lazily.
  void accumulate(int id, const Matrix& g);
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.grad += g;
  }
  const Matrix& grad_of(int id);

  size_t size() const { return nodes_.size(); }

  void push_scope(std::string name) { scopes_.push_back(std::move(name)); }
  void pop_scope() { scopes_.pop_back(); }
  /// "scope/op" labels of every recorded node, in creation order.
  std::vector<std::string> trace() const;

 private:
  std::string label(std::string_view op) const;

  std::vector<Node> nodes_;
  std::vector<std::string> scopes_;
  std::unordered_map<const Parameter*, int> bound_;
};

class ScopeGuard {
 public:
  ScopeGuard(Tape& tape, std::string name) : tape_(tape) { tape_.push_scope(std::move(name)); }
  ~ScopeGuard() { tape_.pop_scope(); }
  ScopeGuard(const ScopeGuard&) = delete;
  ScopeGuard& operator=(const ScopeGuard&) = delete;

 private:
  Tape& tape_;
};

// Elementwise and broadcasting arithmetic.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// a + row, where row is 1 x cols(a), broadcast down the rows.
Var add_row(const Var& a, const Var& row);
/// Each row i of a multiplied by col(i), col is rows(a) x 1.
Var mul_col(const Var& a, const Var& col);
/// a * s where s is a 1 x 1 Var.
Var mul_scalar(const Var& a, const Var& s);
/// 1_rows * row, a rows x cols(row) matrix.
Var broadcast_rows(const Var& row, Index rows);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var relu(const Var& a);
Var abs(const Var& a);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps);

/// Column-wise normalization over all rows (batch statistics).
Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps,
                     RowVector* batch_mean, RowVector* batch_var);

Var mean_rows(const Var& a);
/// Column means with each column summed in ascending order, so the value does
/// not depend on row order.
Var mean_rows_ordered(const Var& a);
Var sum_all(const Var& a);
Var mean_all(const Var& a);

Var vconcat(std::span<const Var> parts);
Var hconcat(std::span<const Var> parts);
Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
Var gather_rows(const Var& a, std::span<const int> ids);

/// Patch extraction for a (height*width) x C grid; output (ho*wo) x (k*k*C),
/// zero padded, column order (ky, kx, c).
Var im2col(const Var& x, int height, int width, int kernel, int stride, int pad, int* out_h,
           int* out_w);

/// Row-wise cosine similarity, rows(a) x 1. Rows where either norm < eps
/// yield 0 with zero gradient.
Var row_cosine(const Var& a, const Var& b, double eps);

}  // namespace ad
}  // namespace sagecc
