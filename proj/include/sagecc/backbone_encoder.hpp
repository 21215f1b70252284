#pragma once

// Bi-temporal consistency encoder: Siamese spatial features, cross-time
// attention refinement, cosine consistency/change priors and prior-guided
// fusion into the global embedding consumed by the caption decoder.

#include "sagecc/core/autodiff.hpp"
#include "sagecc/core/errors.hpp"
#include "sagecc/core/nn.hpp"

#include <algorithm>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sagecc {

struct EncoderConfig {
  std::string backbone = "desk";
  std::vector<int> backbone_channels = {16, 32, 64};
  int blocks = 2;
  int heads = 4;
  int embed_dim = 64;  // C_e
  double cosine_eps = 1e-8;
  /// Only read by the full-scale backbone adapter.
  std::string backbone_weights;

  int channels() const { return backbone_channels.back(); }
};

struct FeatureGrid {
  ad::Var data;  // (h*w) x C
  int height = 0;
  int width = 0;
  int epoch = 1;
  bool positional_added = false;
};

/// Consistency and change maps, each h x w, consistency + change = 1.
struct PriorMaps {
  Matrix consistency;
  Matrix change;
};

/// Prior maps as differentiable (h*w) x 1 columns.
struct PriorVars {
  ad::Var consistency;
  ad::Var change;
  int height = 0;
  int width = 0;

  PriorMaps maps() const;
};

struct GlobalEmbedding {
  ad::Var data;  // (h*w) x C_e
  int height = 0;
  int width = 0;
};

/// Pixel-wise consistency prior (cos + 1) / 2 for two (h*w) x C grids.
/// Returns an (h*w) column; pixels with a near-zero vector map to 0.5.
template <typename Derived1, typename Derived2>
VectorX<typename Derived1::Scalar> consistency_prior(const Eigen::MatrixBase<Derived1>& f1,
                                                     const Eigen::MatrixBase<Derived2>& f2,
                                                     double eps = 1e-8) {
  using Scalar = typename Derived1::Scalar;
  if (f1.rows() != f2.rows() || f1.cols() != f2.cols()) {
    throw ShapeError("consistency_prior: shape mismatch");
  }
  VectorX<Scalar> out(f1.rows());
  for (Index i = 0; i < f1.rows(); ++i) {
    const Scalar n1 = f1.row(i).norm();
    const Scalar n2 = f2.row(i).norm();
    const Scalar cos = (n1 < eps || n2 < eps) ? Scalar(0) : f1.row(i).dot(f2.row(i)) / (n1 * n2);
    out(i) = (std::clamp(cos, Scalar(-1), Scalar(1)) + Scalar(1)) / Scalar(2);
  }
  return out;
}

/// Shared-weight per-epoch feature extractor.
class SpatialBackbone {
 public:
  virtual ~SpatialBackbone() = default;
  /// `image` is (H*W) x 3.
  virtual FeatureGrid forward(ad::Tape& tape, const Grid<double>& image) const = 0;
  virtual int stride() const = 0;
  virtual int channels() const = 0;
};

/// Three stride-2 3x3 convolutions with ReLU (total stride 8).
class DeskBackbone final : public SpatialBackbone {
 public:
  DeskBackbone(nn::ParameterStore& store, const std::vector<int>& channels, nn::Rng& rng);
  FeatureGrid forward(ad::Tape& tape, const Grid<double>& image) const override;
  int stride() const override { return 1 << static_cast<int>(stages_.size()); }
  int channels() const override { return channels_; }

 private:
  std::vector<nn::Conv2d> stages_;
  int channels_ = 0;
};

/// Slot for a pretrained ResNet-101 trunk; requires a weight file.
class ResNet101Backbone final : public SpatialBackbone {
 public:
  explicit ResNet101Backbone(const std::string& weights_path);
  FeatureGrid forward(ad::Tape& tape, const Grid<double>& image) const override;
  int stride() const override { return 32; }
  int channels() const override { return 2048; }
};

/// One cross-time block: residual self-attention per stream followed by
/// residual cross-attention against [H1; H2]. Weights are shared by streams.
class ConsistencyBlock {
 public:
  ConsistencyBlock(nn::ParameterStore& store, const std::string& name, int channels, int heads,
                   nn::Rng& rng);
  std::pair<ad::Var, ad::Var> operator()(ad::Tape& tape, const ad::Var& f1,
                                         const ad::Var& f2) const;

  const nn::MultiHeadAttention& self_attention() const { return self_attn_; }
  const nn::MultiHeadAttention& cross_attention() const { return cross_attn_; }

 private:
  nn::LayerNorm norm_self_, norm_query_, norm_context_;
  nn::MultiHeadAttention self_attn_, cross_attn_;
};

/// Conv3x3-BN-ReLU followed by a 1x1 projection.
class FusionHead {
 public:
  FusionHead(nn::ParameterStore& store, const std::string& name, int in_channels, int out_channels,
             nn::Rng& rng);
  /// Runs the head on several samples at once; batch statistics span all of them.
  std::vector<ad::Var> operator()(ad::Tape& tape, std::span<const ad::Var> inputs, int height,
                                  int width, bool training) const;

 private:
  nn::Conv2d conv_;
  nn::BatchNorm norm_;
  nn::Conv2d project_;
};

struct EncoderOutput {
  FeatureGrid refined1;
  FeatureGrid refined2;
  PriorVars priors;
  GlobalEmbedding embedding;
};

class BiTemporalEncoder {
 public:
  BiTemporalEncoder(nn::ParameterStore& store, const EncoderConfig& config, nn::Rng& rng);

  /// F_i^(0) = backbone(X_i) + P for both epochs.
  std::pair<FeatureGrid, FeatureGrid> extract_features(ad::Tape& tape, const Grid<double>& image1,
                                                       const Grid<double>& image2) const;
  std::pair<FeatureGrid, FeatureGrid> consistency_refine(ad::Tape& tape, const FeatureGrid& f1,
                                                         const FeatureGrid& f2) const;
  PriorVars compute_priors(ad::Tape& tape, const FeatureGrid& f1, const FeatureGrid& f2) const;
  /// [f1*C, f2*C, |f1-f2|*M, M], (h*w) x (3C+1).
  ad::Var fusion_input(const FeatureGrid& f1, const FeatureGrid& f2, const PriorVars& priors) const;
  GlobalEmbedding fuse_global(ad::Tape& tape, const FeatureGrid& f1, const FeatureGrid& f2,
                              const PriorVars& priors, bool training) const;

  EncoderOutput encode(ad::Tape& tape, const Grid<double>& image1, const Grid<double>& image2,
                       bool training) const;
  /// Batched encode so the fusion head's batch statistics span the batch.
  std::vector<EncoderOutput> encode_batch(ad::Tape& tape,
                                          std::span<const std::pair<const Grid<double>*, const Grid<double>*>> pairs,
                                          bool training) const;

  const EncoderConfig& config() const { return config_; }
  const SpatialBackbone& backbone() const { return *backbone_; }
  const std::vector<ConsistencyBlock>& blocks() const { return blocks_; }
  const FusionHead& head() const { return *head_; }

 private:
  EncoderConfig config_;
  std::unique_ptr<SpatialBackbone> backbone_;
  std::vector<ConsistencyBlock> blocks_;
  std::unique_ptr<FusionHead> head_;
};

/// Standalone consistency refinement with an explicit block count.
std::pair<FeatureGrid, FeatureGrid> consistency_refine(ad::Tape& tape,
                                                       std::span<const ConsistencyBlock> blocks,
                                                       const FeatureGrid& f1,
                                                       const FeatureGrid& f2, int n_blocks);

}  // namespace sagecc
