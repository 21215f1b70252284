#pragma once

// Change-aware caption decoder: fusion of the change vectors into r, the
// prior-derived cross-attention bias, a Transformer decoder and the
// label-smoothed training loss. Decoding strategies are model-agnostic.

#include "sagecc/backbone_encoder.hpp"
#include "sagecc/core/autodiff.hpp"
#include "sagecc/core/nn.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace sagecc {

struct DecoderConfig {
  int layers = 2;
  int heads = 4;
  int disc_proj = 64;
  int sem_proj = 64;
  int kg_proj = 64;
  int ffn_dim = 384;
  int max_len = 24;
  double alpha_init = 1.0;
  double beta_init = 0.0;
  double label_smoothing = 0.1;
  double ln_eps = 1e-5;
  /// Test hook: projections fixed to identity and no LayerNorm in fusion.
  bool passthrough_fusion = false;

  int model_dim() const { return disc_proj + sem_proj + kg_proj; }  // d_f
};

/// pi = alpha * vec(M) + beta * vec(C) as an (h*w) column.
template <typename Derived1, typename Derived2>
VectorX<typename Derived1::Scalar> bias_pi(const Eigen::MatrixBase<Derived1>& change,
                                           const Eigen::MatrixBase<Derived2>& consistency,
                                           typename Derived1::Scalar alpha,
                                           typename Derived1::Scalar beta) {
  using Scalar = typename Derived1::Scalar;
  if (change.rows() != consistency.rows() || change.cols() != consistency.cols()) {
    throw ShapeError("bias_pi: prior map shapes differ");
  }
  VectorX<Scalar> pi(change.size());
  Index k = 0;
  for (Index y = 0; y < change.rows(); ++y) {
    for (Index x = 0; x < change.cols(); ++x, ++k) {
      pi(k) = alpha * change(y, x) + beta * consistency(y, x);
    }
  }
  return pi;
}

/// B = 1_T pi^T.
Matrix build_bias(const PriorMaps& priors, double alpha, double beta, int steps);

/// Per-layer cross-attention probabilities, one matrix per head.
using CrossAttentionProbe = std::function<void(int layer, const std::vector<Matrix>& probs)>;

class CaptionDecoder {
 public:
  CaptionDecoder(nn::ParameterStore& store, const DecoderConfig& config, int vocab_size,
                 int visual_dim, int disc_dim, int sem_dim, int kg_dim, nn::Rng& rng);

  /// r = LN([W_d f_disc ; W_s f_sem ; W_g f_kg]), 1 x d_f.
  ad::Var fuse_change(ad::Tape& tape, const ad::Var& f_disc, const ad::Var& f_sem,
                      const ad::Var& f_kg) const;
  /// pi column from differentiable priors, using the learned alpha and beta.
  ad::Var bias_column(ad::Tape& tape, const PriorVars& priors) const;
  /// logits (T x V) for tokens[0..T). `pi` may be null for a bias-free decoder.
  ad::Var forward(ad::Tape& tape, std::span<const int> tokens, const ad::Var& visual,
                  const ad::Var& r, const ad::Var* pi,
                  const CrossAttentionProbe* probe = nullptr) const;

  const DecoderConfig& config() const { return config_; }
  int vocab_size() const { return vocab_size_; }
  Parameter& alpha() const { return *alpha_; }
  Parameter& beta() const { return *beta_; }

 private:
  struct Layer {
    nn::MultiHeadAttention self_attn;
    nn::LayerNorm norm_self;
    nn::MultiHeadAttention cross_attn;
    nn::LayerNorm norm_cross;
    nn::Linear ffn_in;
    nn::Linear ffn_out;
  };

  DecoderConfig config_;
  int vocab_size_;
  int disc_dim_, sem_dim_, kg_dim_;
  nn::Linear proj_disc_, proj_sem_, proj_kg_;
  nn::LayerNorm fuse_norm_;
  Parameter* embedding_ = nullptr;  // V x d_f
  Parameter* alpha_ = nullptr;
  Parameter* beta_ = nullptr;
  std::vector<Layer> layers_;
  nn::Linear output_;
};

/// Label-smoothed CE averaged over non-pad positions: target (1 - eps) on the
/// gold token and eps / (V - 1) elsewhere.
ad::Var ce_loss(const ad::Var& logits, std::span<const int> targets, double epsilon, int pad_id);

/// Log-probabilities of the next token given a prefix that starts with BOS.
using NextTokenFn = std::function<RowVector(const std::vector<int>& prefix)>;

struct DecodeOptions {
  int bos = 1;
  int eos = 2;
  int max_len = 24;
  std::string strategy = "greedy";  // greedy | beam
  int beam = 3;
};

/// Generated tokens without BOS and EOS.
std::vector<int> greedy_decode(const NextTokenFn& next, int bos, int eos, int max_len);
/// Keeps the top-k of all expansions by summed log-prob; EOS expansions finish.
/// The result maximizes log-prob divided by generated length (EOS included).
std::vector<int> beam_decode(const NextTokenFn& next, int bos, int eos, int max_len, int k);
std::vector<int> generate(const NextTokenFn& next, const DecodeOptions& options);

}  // namespace sagecc
