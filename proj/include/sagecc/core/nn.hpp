#pragma once

#include "sagecc/core/autodiff.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace sagecc::nn {

using Rng = std::mt19937_64;

/// Owns every learnable tensor (and non-trainable buffers) of a model.
/// Insertion order is the serialization order.
class ParameterStore {
 public:
  Parameter& create(const std::string& name, Matrix init, bool trainable = true);
  Parameter& xavier(const std::string& name, Index rows, Index cols, Rng& rng);
  Parameter& zeros(const std::string& name, Index rows, Index cols, bool trainable = true);
  Parameter& constant(const std::string& name, Index rows, Index cols, double v,
                      bool trainable = true);
  Parameter& normal(const std::string& name, Index rows, Index cols, double stddev, Rng& rng);

  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> trainable();
  /// Total number of trainable scalars.
  Index count() const;
  /// Trainable scalars in parameters whose name starts with `prefix`.
  Index count(const std::string& prefix) const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, Index in, Index out, Rng& rng,
         bool bias = true);
  ad::Var operator()(ad::Tape& tape, const ad::Var& x) const;
  Index in_features() const { return weight_->value.rows(); }
  Index out_features() const { return weight_->value.cols(); }
  Parameter& weight() const { return *weight_; }
  Parameter* bias() const { return bias_; }

 private:
  Parameter* weight_ = nullptr;  // in x out
  Parameter* bias_ = nullptr;    // 1 x out
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, Index dim, double eps = 1e-5);
  ad::Var operator()(ad::Tape& tape, const ad::Var& x) const;

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
  double eps_ = 1e-5;
};

/// Records post-softmax attention weights, one matrix per head.
using AttentionProbe = std::function<void(const std::vector<Matrix>& probs)>;

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, const std::string& name, Index query_dim,
                     Index kv_dim, Index model_dim, int heads, Rng& rng);

  /// `bias` (optional) is added to every head's logits before softmax and
  /// must be rows(query) x rows(kv). `causal` masks keys j > i.
  ad::Var operator()(ad::Tape& tape, const ad::Var& query, const ad::Var& kv,
                     const ad::Var* bias = nullptr, bool causal = false,
                     const AttentionProbe* probe = nullptr) const;

  int heads() const { return heads_; }
  const Linear& q() const { return q_; }
  const Linear& k() const { return k_; }
  const Linear& v() const { return v_; }
  const Linear& out() const { return o_; }

 private:
  Linear q_, k_, v_, o_;
  int heads_ = 1;
};

/// k x k convolution over a (h*w) x C grid, via im2col.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterStore& store, const std::string& name, Index in_channels, Index out_channels,
         int kernel, int stride, int pad, Rng& rng);
  ad::Var operator()(ad::Tape& tape, const ad::Var& x, int height, int width, int* out_h,
                     int* out_w) const;

 private:
  Parameter* weight_ = nullptr;  // (k*k*Cin) x Cout
  Parameter* bias_ = nullptr;
  int kernel_ = 1;
  int stride_ = 1;
  int pad_ = 0;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParameterStore& store, const std::string& name, Index channels, double momentum = 0.1,
            double eps = 1e-5);
  /// Training mode normalizes with batch statistics over all rows and updates
  /// running statistics; inference mode applies the running statistics.
  ad::Var operator()(ad::Tape& tape, const ad::Var& x, bool training) const;

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
  Parameter* running_mean_ = nullptr;
  Parameter* running_var_ = nullptr;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(const std::vector<Parameter*>& params);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::int64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

/// Global L2 norm over all gradients.
double grad_norm(const std::vector<Parameter*>& params);
/// Rescale gradients so the global norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm);

}  // namespace sagecc::nn
