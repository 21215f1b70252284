#include "sagecc/core/autodiff.hpp"

#include "sagecc/core/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sagecc::ad {

const Matrix& Var::value() const { return tape_->node(id_).value; }
const Matrix& Var::grad() const { return tape_->grad_of(id_); }
bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

Var Tape::constant(Matrix value, std::string_view op) {
  Node n;
  n.value = std::move(value);
  n.op = label(op);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(Parameter& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return {this, it->second};
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = p.trainable;
  n.op = label("param:" + p.name);
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  bound_[&p] = id;
  return {this, id};
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward,
                 std::string_view op) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward), op);
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn backward,
                 std::string_view op) {
  Node n;
  n.value = std::move(value);
  n.op = label(op);
  for (const Var& v : inputs) {
    if (v.tape() != this) throw Error("autodiff: mixing vars from different tapes");
    n.requires_grad = n.requires_grad || v.requires_grad();
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Matrix& g) {
  Node& n = node(id);
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

const Matrix& Tape::grad_of(int id) {
  Node& n = node(id);
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw Error("autodiff: root belongs to another tape");
  Node& r = node(root.id());
  if (!r.requires_grad) return;
  r.grad = Matrix::Ones(r.value.rows(), r.value.cols());
  for (int id = root.id(); id >= 0; --id) {
    Node& n = node(id);
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr && n.param->trainable) {
      if (n.param->grad.size() == 0) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

std::string Tape::label(std::string_view op) const {
  std::string s;
  for (const auto& scope : scopes_) {
    s += scope;
    s += '/';
  }
  s += op;
  return s;
}

std::vector<std::string> Tape::trace() const {
  std::vector<std::string> out;
  out.reserve(nodes_.size());
  for (const auto& n : nodes_) out.push_back(n.op);
  return out;
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tape& t = *a.tape();
  int ia = a.id(), ib = b.id();
  return t.record(a.value() + b.value(), {a, b},
                  [ia, ib](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    tp.accumulate(ia, g);
                    tp.accumulate(ib, g);
                  },
                  "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tape& t = *a.tape();
  int ia = a.id(), ib = b.id();
  return t.record(a.value() - b.value(), {a, b},
                  [ia, ib](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    tp.accumulate(ia, g);
                    tp.accumulate(ib, (-g).eval());
                  },
                  "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tape& t = *a.tape();
  int ia = a.id(), ib = b.id();
  return t.record(a.value().cwiseProduct(b.value()), {a, b},
                  [ia, ib](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    tp.accumulate(ia, g.cwiseProduct(tp.node(ib).value));
                    tp.accumulate(ib, g.cwiseProduct(tp.node(ia).value));
                  },
                  "mul");
}

Var scale(const Var& a, double s) {
  Tape& t = *a.tape();
  int ia = a.id();
  return t.record(a.value() * s, {a},
                  [ia, s](Tape& tp, int self) { tp.accumulate(ia, tp.node(self).grad * s); },
                  "scale");
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bad row shape");
  Tape& t = *a.tape();
  int ia = a.id(), ir = row.id();
  Matrix v = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(v), {a, row},
                  [ia, ir](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    tp.accumulate(ia, g);
                    tp.accumulate(ir, g.colwise().sum());
                  },
                  "add_row");
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeError("mul_col: bad column shape");
  Tape& t = *a.tape();
  int ia = a.id(), ic = col.id();
  Matrix v = a.value().array().colwise() * col.value().col(0).array();
  return t.record(std::move(v), {a, col},
                  [ia, ic](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    const Matrix& av = tp.node(ia).value;
                    const Matrix& cv = tp.node(ic).value;
                    tp.accumulate(ia, (g.array().colwise() * cv.col(0).array()).matrix());
                    tp.accumulate(ic, g.cwiseProduct(av).rowwise().sum());
                  },
                  "mul_col");
}

Var mul_scalar(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("mul_scalar: scalar must be 1x1");
  Tape& t = *a.tape();
  int ia = a.id(), is = s.id();
  return t.record(a.value() * s.scalar(), {a, s},
                  [ia, is](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    tp.accumulate(ia, g * tp.node(is).value(0, 0));
                    Matrix gs(1, 1);
                    gs(0, 0) = g.cwiseProduct(tp.node(ia).value).sum();
                    tp.accumulate(is, gs);
                  },
                  "mul_scalar");
}

Var broadcast_rows(const Var& row, Index rows) {
  if (row.rows() != 1) throw ShapeError("broadcast_rows: expected a row vector");
  Tape& t = *row.tape();
  int ir = row.id();
  Matrix v = row.value().replicate(rows, 1);
  return t.record(std::move(v), {row},
                  [ir](Tape& tp, int self) {
                    tp.accumulate(ir, tp.node(self).grad.colwise().sum());
                  },
                  "broadcast_rows");
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dims " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()));
  }
  Tape& t = *a.tape();
  int ia = a.id(), ib = b.id();
  Matrix v = a.value() * b.value();
  return t.record(std::move(v), {a, b},
                  [ia, ib](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    if (tp.node(ia).requires_grad) {
                      tp.accumulate(ia, (g * tp.node(ib).value.transpose()).eval());
                    }
                    if (tp.node(ib).requires_grad) {
                      tp.accumulate(ib, (tp.node(ia).value.transpose() * g).eval());
                    }
                  },
                  "matmul");
}

Var transpose(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id();
  Matrix v = a.value().transpose();
  return t.record(std::move(v), {a},
                  [ia](Tape& tp, int self) {
                    tp.accumulate(ia, tp.node(self).grad.transpose().eval());
                  },
                  "transpose");
}

Var relu(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id();
  Matrix v = a.value().cwiseMax(0.0);
  return t.record(std::move(v), {a},
                  [ia](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    const Matrix& x = tp.node(ia).value;
                    tp.accumulate(ia, (x.array() > 0.0).select(g, 0.0).matrix().eval());
                  },
                  "relu");
}

Var abs(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id();
  Matrix v = a.value().cwiseAbs();
  return t.record(std::move(v), {a},
                  [ia](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    const Matrix& x = tp.node(ia).value;
                    Matrix sign = x.unaryExpr([](double e) {
                      return static_cast<double>((e > 0.0) - (e < 0.0));
                    });
                    tp.accumulate(ia, g.cwiseProduct(sign));
                  },
                  "abs");
}

namespace {

Matrix softmax_value(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    if (!std::isfinite(m)) {
      // Fully masked row: no admissible key.
      out.row(i).setZero();
      continue;
    }
    out.row(i) = (x.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

}  // namespace

Var softmax_rows(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id();
  return t.record(softmax_value(a.value()), {a},
                  [ia](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    const Matrix& p = tp.node(self).value;
                    Vector dot = g.cwiseProduct(p).rowwise().sum();
                    Matrix gx = p.cwiseProduct(g.colwise() - dot);
                    tp.accumulate(ia, gx);
                  },
                  "softmax");
}

Var log_softmax_rows(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id();
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  return t.record(std::move(out), {a},
                  [ia](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    Matrix p = tp.node(self).value.array().exp();
                    Vector gsum = g.rowwise().sum();
                    Matrix gx = g - (p.array().colwise() * gsum.array()).matrix();
                    tp.accumulate(ia, gx);
                  },
                  "log_softmax");
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index n = x.rows(), d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw ShapeError("layer_norm: affine shape mismatch");
  }
  const Matrix& xv = x.value();
  Matrix xhat(n, d);
  Vector inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  Tape& t = *x.tape();
  int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.record(std::move(out), {x, gamma, beta},
                  [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    const RowVector gam = tp.node(ig).value.row(0);
                    tp.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                    tp.accumulate(ib, g.colwise().sum());
                    if (!tp.node(ix).requires_grad) return;
                    const Index d = g.cols();
                    Matrix gh = g.array().rowwise() * gam.array();
                    Matrix gx(g.rows(), d);
                    for (Index i = 0; i < g.rows(); ++i) {
                      const double m1 = gh.row(i).mean();
                      const double m2 = gh.row(i).cwiseProduct(xhat.row(i)).mean();
                      gx.row(i) =
                          inv_std(i) * (gh.row(i).array() - m1 - xhat.row(i).array() * m2);
                    }
                    tp.accumulate(ix, gx);
                  },
                  "layer_norm");
}

Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps,
                     RowVector* batch_mean, RowVector* batch_var) {
  const Index n = x.rows(), d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw ShapeError("batch_norm: affine shape mismatch");
  }
  const Matrix& xv = x.value();
  RowVector mu = xv.colwise().mean();
  Matrix centered = xv.rowwise() - mu;
  RowVector var = centered.array().square().colwise().mean();
  RowVector inv_std = (var.array() + eps).rsqrt();
  Matrix xhat = centered.array().rowwise() * inv_std.array();
  if (batch_mean != nullptr) *batch_mean = mu;
  if (batch_var != nullptr) *batch_var = var;
  Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  Tape& t = *x.tape();
  int ix = x.id(), ig = gamma.id(), ib = beta.id();
  (void)n;
  return t.record(std::move(out), {x, gamma, beta},
                  [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    const RowVector gam = tp.node(ig).value.row(0);
                    tp.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                    tp.accumulate(ib, g.colwise().sum());
                    if (!tp.node(ix).requires_grad) return;
                    Matrix gh = g.array().rowwise() * gam.array();
                    RowVector m1 = gh.colwise().mean();
                    RowVector m2 = gh.cwiseProduct(xhat).colwise().mean();
                    Matrix gx = (gh.rowwise() - m1) - (xhat.array().rowwise() * m2.array()).matrix();
                    gx = gx.array().rowwise() * inv_std.array();
                    tp.accumulate(ix, gx);
                  },
                  "batch_norm");
}

Var mean_rows(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id();
  const Index n = a.rows();
  Matrix v = a.value().colwise().mean();
  return t.record(std::move(v), {a},
                  [ia, n](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    tp.accumulate(ia, (g.replicate(n, 1) / static_cast<double>(n)).eval());
                  },
                  "mean_rows");
}

Var mean_rows_ordered(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id();
  const Index n = a.rows();
  const Matrix& av = a.value();
  Matrix v(1, av.cols());
  std::vector<double> column(static_cast<size_t>(n));
  for (Index c = 0; c < av.cols(); ++c) {
    for (Index r = 0; r < n; ++r) column[static_cast<size_t>(r)] = av(r, c);
    std::sort(column.begin(), column.end());
    double acc = 0.0;
    for (double x : column) acc += x;
    v(0, c) = acc / static_cast<double>(n);
  }
  return t.record(std::move(v), {a},
                  [ia, n](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    tp.accumulate(ia, (g.replicate(n, 1) / static_cast<double>(n)).eval());
                  },
                  "mean_rows_ordered");
}

Var sum_all(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id();
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return t.record(std::move(v), {a},
                  [ia, r, c](Tape& tp, int self) {
                    tp.accumulate(ia, Matrix::Constant(r, c, tp.node(self).grad(0, 0)));
                  },
                  "sum_all");
}

Var mean_all(const Var& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

Var vconcat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("vconcat: no inputs");
  Tape& t = *parts[0].tape();
  const Index c = parts[0].cols();
  Index r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) throw ShapeError("vconcat: column mismatch");
    r += p.rows();
  }
  Matrix v(r, c);
  std::vector<std::pair<int, Index>> spans;
  Index off = 0;
  for (const Var& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.rows();
  }
  return t.record(std::move(v), parts,
                  [spans = std::move(spans)](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    for (auto [id, o] : spans) {
                      tp.accumulate(id, g.middleRows(o, tp.node(id).value.rows()).eval());
                    }
                  },
                  "vconcat");
}

Var hconcat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("hconcat: no inputs");
  Tape& t = *parts[0].tape();
  const Index r = parts[0].rows();
  Index c = 0;
  for (const Var& p : parts) {
    if (p.rows() != r) throw ShapeError("hconcat: row mismatch");
    c += p.cols();
  }
  Matrix v(r, c);
  std::vector<std::pair<int, Index>> spans;
  Index off = 0;
  for (const Var& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.cols();
  }
  return t.record(std::move(v), parts,
                  [spans = std::move(spans)](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    for (auto [id, o] : spans) {
                      tp.accumulate(id, g.middleCols(o, tp.node(id).value.cols()).eval());
                    }
                  },
                  "hconcat");
}

Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: range");
  Tape& t = *a.tape();
  int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  Matrix v = a.value().middleRows(start, count);
  return t.record(std::move(v), {a},
                  [ia, start, count, r, c](Tape& tp, int self) {
                    Matrix g = Matrix::Zero(r, c);
                    g.middleRows(start, count) = tp.node(self).grad;
                    tp.accumulate(ia, g);
                  },
                  "slice_rows");
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: range");
  Tape& t = *a.tape();
  int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  Matrix v = a.value().middleCols(start, count);
  return t.record(std::move(v), {a},
                  [ia, start, count, r, c](Tape& tp, int self) {
                    Matrix g = Matrix::Zero(r, c);
                    g.middleCols(start, count) = tp.node(self).grad;
                    tp.accumulate(ia, g);
                  },
                  "slice_cols");
}

Var gather_rows(const Var& a, std::span<const int> ids) {
  Tape& t = *a.tape();
  int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  Matrix v(static_cast<Index>(ids.size()), c);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= r) throw InputError("gather_rows: index out of range");
    v.row(static_cast<Index>(i)) = a.value().row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return t.record(std::move(v), {a},
                  [ia, r, c, idx = std::move(idx)](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    Matrix ga = Matrix::Zero(r, c);
                    for (size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Index>(i));
                    tp.accumulate(ia, ga);
                  },
                  "gather_rows");
}

Var im2col(const Var& x, int height, int width, int kernel, int stride, int pad, int* out_h,
           int* out_w) {
  if (x.rows() != static_cast<Index>(height) * width) throw ShapeError("im2col: grid size");
  const int ho = (height + 2 * pad - kernel) / stride + 1;
  const int wo = (width + 2 * pad - kernel) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("im2col: kernel larger than padded input");
  const Index c = x.cols();
  // Source row for every (output cell, kernel tap); -1 for padding.
  std::vector<int> src(static_cast<size_t>(ho) * wo * kernel * kernel, -1);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      for (int ky = 0; ky < kernel; ++ky) {
        for (int kx = 0; kx < kernel; ++kx) {
          const int iy = oy * stride - pad + ky;
          const int ix = ox * stride - pad + kx;
          const size_t slot = ((static_cast<size_t>(oy) * wo + ox) * kernel + ky) * kernel + kx;
          if (iy >= 0 && iy < height && ix >= 0 && ix < width) src[slot] = iy * width + ix;
        }
      }
    }
  }
  const int taps = kernel * kernel;
  const Matrix& xv = x.value();
  Matrix v = Matrix::Zero(static_cast<Index>(ho) * wo, taps * c);
  for (Index o = 0; o < v.rows(); ++o) {
    for (int k = 0; k < taps; ++k) {
      const int s = src[static_cast<size_t>(o) * taps + k];
      if (s >= 0) v.row(o).segment(k * c, c) = xv.row(s);
    }
  }
  if (out_h != nullptr) *out_h = ho;
  if (out_w != nullptr) *out_w = wo;
  Tape& t = *x.tape();
  int id = x.id();
  const Index rows_in = x.rows();
  return t.record(std::move(v), {x},
                  [id, rows_in, c, taps, src = std::move(src)](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    Matrix gx = Matrix::Zero(rows_in, c);
                    for (Index o = 0; o < g.rows(); ++o) {
                      for (int k = 0; k < taps; ++k) {
                        const int s = src[static_cast<size_t>(o) * taps + k];
                        if (s >= 0) gx.row(s) += g.row(o).segment(k * c, c);
                      }
                    }
                    tp.accumulate(id, gx);
                  },
                  "im2col");
}

Var row_cosine(const Var& a, const Var& b, double eps) {
  require_same_shape(a, b, "row_cosine");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Index n = av.rows();
  Vector na = av.rowwise().norm();
  Vector nb = bv.rowwise().norm();
  Matrix out(n, 1);
  for (Index i = 0; i < n; ++i) {
    if (na(i) < eps || nb(i) < eps) {
      out(i, 0) = 0.0;
      continue;
    }
    // Same summation order for all three sums, so identical rows give exactly 1.
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (Index k = 0; k < av.cols(); ++k) {
      dot += av(i, k) * bv(i, k);
      sa += av(i, k) * av(i, k);
      sb += bv(i, k) * bv(i, k);
    }
    out(i, 0) = std::clamp(dot / std::sqrt(sa * sb), -1.0, 1.0);
  }
  Tape& t = *a.tape();
  int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b},
                  [ia, ib, eps, na = std::move(na), nb = std::move(nb)](Tape& tp, int self) {
                    const Matrix& g = tp.node(self).grad;
                    const Matrix& av = tp.node(ia).value;
                    const Matrix& bv = tp.node(ib).value;
                    const Matrix& cv = tp.node(self).value;
                    Matrix ga = Matrix::Zero(av.rows(), av.cols());
                    Matrix gb = Matrix::Zero(bv.rows(), bv.cols());
                    for (Index i = 0; i < av.rows(); ++i) {
                      if (na(i) < eps || nb(i) < eps) continue;
                      const double c = cv(i, 0);
                      ga.row(i) = g(i, 0) * (bv.row(i) / (na(i) * nb(i)) - c * av.row(i) / (na(i) * na(i)));
                      gb.row(i) = g(i, 0) * (av.row(i) / (na(i) * nb(i)) - c * bv.row(i) / (nb(i) * nb(i)));
                    }
                    tp.accumulate(ia, ga);
                    tp.accumulate(ib, gb);
                  },
                  "row_cosine");
}

}  // namespace sagecc::ad
