#include "sagecc/core/nn.hpp"

#include "sagecc/core/errors.hpp"

#include <cmath>
#include <limits>

namespace sagecc::nn {

Parameter& ParameterStore::create(const std::string& name, Matrix init, bool trainable) {
  if (find(name) != nullptr) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = std::move(init);
  p->trainable = trainable;
  p->zero_grad();
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterStore::xavier(const std::string& name, Index rows, Index cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return create(name, std::move(m));
}

Parameter& ParameterStore::zeros(const std::string& name, Index rows, Index cols, bool trainable) {
  return create(name, Matrix::Zero(rows, cols), trainable);
}

Parameter& ParameterStore::constant(const std::string& name, Index rows, Index cols, double v,
                                    bool trainable) {
  return create(name, Matrix::Constant(rows, cols, v), trainable);
}

Parameter& ParameterStore::normal(const std::string& name, Index rows, Index cols, double stddev,
                                  Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return create(name, std::move(m));
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

Parameter& ParameterStore::at(const std::string& name) {
  Parameter* p = find(name);
  if (p == nullptr) throw ConfigError("unknown parameter: " + name);
  return *p;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterStore::trainable() {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (p->trainable) out.push_back(p.get());
  }
  return out;
}

Index ParameterStore::count() const { return count(""); }

Index ParameterStore::count(const std::string& prefix) const {
  Index n = 0;
  for (const auto& p : params_) {
    if (p->trainable && p->name.rfind(prefix, 0) == 0) n += p->size();
  }
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

Linear::Linear(ParameterStore& store, const std::string& name, Index in, Index out, Rng& rng,
               bool bias)
    : weight_(&store.xavier(name + ".weight", in, out, rng)),
      bias_(bias ? &store.zeros(name + ".bias", 1, out) : nullptr) {}

ad::Var Linear::operator()(ad::Tape& tape, const ad::Var& x) const {
  ad::Var y = ad::matmul(x, tape.parameter(*weight_));
  if (bias_ != nullptr) y = ad::add_row(y, tape.parameter(*bias_));
  return y;
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, Index dim, double eps)
    : gamma_(&store.constant(name + ".gamma", 1, dim, 1.0)),
      beta_(&store.zeros(name + ".beta", 1, dim)),
      eps_(eps) {}

ad::Var LayerNorm::operator()(ad::Tape& tape, const ad::Var& x) const {
  return ad::layer_norm_rows(x, tape.parameter(*gamma_), tape.parameter(*beta_), eps_);
}

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& name,
                                       Index query_dim, Index kv_dim, Index model_dim, int heads,
                                       Rng& rng)
    : q_(store, name + ".q", query_dim, model_dim, rng),
      k_(store, name + ".k", kv_dim, model_dim, rng),
      v_(store, name + ".v", kv_dim, model_dim, rng),
      o_(store, name + ".o", model_dim, query_dim, rng),
      heads_(heads) {
  if (heads < 1 || model_dim % heads != 0) {
    throw ConfigError(name + ": model dim " + std::to_string(model_dim) +
                      " not divisible by heads " + std::to_string(heads));
  }
}

ad::Var MultiHeadAttention::operator()(ad::Tape& tape, const ad::Var& query, const ad::Var& kv,
                                       const ad::Var* bias, bool causal,
                                       const AttentionProbe* probe) const {
  ad::Var q = q_(tape, query);
  ad::Var k = k_(tape, kv);
  ad::Var v = v_(tape, kv);
  const Index model_dim = q.cols();
  const Index head_dim = model_dim / heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const Index tq = query.rows(), tk = kv.rows();

  std::optional<ad::Var> mask;
  if (causal) {
    Matrix m = Matrix::Zero(tq, tk);
    for (Index i = 0; i < tq; ++i) {
      for (Index j = i + 1; j < tk; ++j) m(i, j) = -std::numeric_limits<double>::infinity();
    }
    mask = tape.constant(std::move(m), "causal_mask");
  }

  std::vector<ad::Var> outs;
  std::vector<Matrix> probs;
  for (int h = 0; h < heads_; ++h) {
    ad::Var qh = ad::slice_cols(q, h * head_dim, head_dim);
    ad::Var kh = ad::slice_cols(k, h * head_dim, head_dim);
    ad::Var vh = ad::slice_cols(v, h * head_dim, head_dim);
    ad::Var logits = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
    if (bias != nullptr) logits = ad::add(logits, *bias);
    if (mask) logits = ad::add(logits, *mask);
    ad::Var p = ad::softmax_rows(logits);
    if (probe != nullptr) probs.push_back(p.value());
    outs.push_back(ad::matmul(p, vh));
  }
  if (probe != nullptr) (*probe)(probs);
  ad::Var merged = heads_ == 1 ? outs.front() : ad::hconcat(outs);
  return o_(tape, merged);
}

Conv2d::Conv2d(ParameterStore& store, const std::string& name, Index in_channels,
               Index out_channels, int kernel, int stride, int pad, Rng& rng)
    : kernel_(kernel), stride_(stride), pad_(pad) {
  // He-style uniform init for ReLU stacks.
  const Index fan_in = static_cast<Index>(kernel) * kernel * in_channels;
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix w(fan_in, out_channels);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  weight_ = &store.create(name + ".weight", std::move(w));
  bias_ = &store.zeros(name + ".bias", 1, out_channels);
}

ad::Var Conv2d::operator()(ad::Tape& tape, const ad::Var& x, int height, int width, int* out_h,
                           int* out_w) const {
  ad::Var cols = kernel_ == 1 && stride_ == 1 && pad_ == 0
                     ? x
                     : ad::im2col(x, height, width, kernel_, stride_, pad_, out_h, out_w);
  if (kernel_ == 1 && stride_ == 1 && pad_ == 0) {
    if (out_h != nullptr) *out_h = height;
    if (out_w != nullptr) *out_w = width;
  }
  return ad::add_row(ad::matmul(cols, tape.parameter(*weight_)), tape.parameter(*bias_));
}

BatchNorm::BatchNorm(ParameterStore& store, const std::string& name, Index channels,
                     double momentum, double eps)
    : gamma_(&store.constant(name + ".gamma", 1, channels, 1.0)),
      beta_(&store.zeros(name + ".beta", 1, channels)),
      running_mean_(&store.zeros(name + ".running_mean", 1, channels, false)),
      running_var_(&store.constant(name + ".running_var", 1, channels, 1.0, false)),
      momentum_(momentum),
      eps_(eps) {}

ad::Var BatchNorm::operator()(ad::Tape& tape, const ad::Var& x, bool training) const {
  ad::Var gamma = tape.parameter(*gamma_);
  ad::Var beta = tape.parameter(*beta_);
  if (training) {
    RowVector mean, var;
    ad::Var y = ad::batch_norm_train(x, gamma, beta, eps_, &mean, &var);
    const double n = static_cast<double>(x.rows());
    const RowVector unbiased = n > 1 ? RowVector(var * (n / (n - 1.0))) : var;
    running_mean_->value = (1.0 - momentum_) * running_mean_->value + momentum_ * mean;
    running_var_->value = (1.0 - momentum_) * running_var_->value + momentum_ * unbiased;
    return y;
  }
  const RowVector inv = (running_var_->value.row(0).array() + eps_).rsqrt();
  ad::Var centered = ad::add_row(x, tape.constant(-running_mean_->value, "bn_mean"));
  Matrix diag = inv.asDiagonal();
  ad::Var normed = ad::matmul(centered, tape.constant(std::move(diag), "bn_inv_std"));
  ad::Var scaled = ad::mul(normed, ad::broadcast_rows(gamma, x.rows()));
  return ad::add_row(scaled, beta);
}

void Adam::step(const std::vector<Parameter*>& params) {
  if (m_.empty()) {
    for (const Parameter* p : params) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (m_.size() != params.size()) throw TrainingError("Adam: parameter list changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (p.grad.size() == 0) continue;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseAbs2();
    p.value.array() -=
        lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
  }
}

double grad_norm(const std::vector<Parameter*>& params) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    if (p->grad.size() != 0) sq += p->grad.squaredNorm();
  }
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Parameter* p : params) p->grad *= s;
  }
  return norm;
}

}  // namespace sagecc::nn
