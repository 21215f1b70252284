#pragma once

// Segmentation-guided change-region mining.
//
// Motion level: filter segmenter masks, pool RoI descriptors, match regions
// across epochs with a dustbin Sinkhorn matcher and encode the unmatched
// regions. Semantic level: prompt-detected regions ranked by image-text
// similarity, top-q pooled per image.

#include "sagecc/core/autodiff.hpp"
#include "sagecc/core/nn.hpp"
#include "sagecc/core/positional.hpp"
#include "sagecc/foundation_adapters.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sagecc {

struct RegionProposal {
  Mask mask;
  Box box;
  double score = 0.0;
  long area = 0;
  double cx = 0.0;
  double cy = 0.0;
};

struct MinerConfig {
  int max_masks = 50;
  /// Negative selects 0.1% of the image pixels (rounded up).
  int min_area = -1;
  double nms_iou = 0.7;
  double min_score = 0.5;
  int roi_size = 14;
  int pooled_size = 7;
  int descriptor_dim = 32;
  int pos_dim = 16;
  double tau = 0.2;
  /// Minimum sweeps; iteration continues until the real-row marginals are
  /// within sinkhorn_tol of 1 or sinkhorn_max_iters is reached.
  int sinkhorn_iters = 20;
  double sinkhorn_tol = 1e-9;
  int sinkhorn_max_iters = 1000;
  double temperature = 0.1;
  /// Affinity assigned to the dustbin row and column before scaling.
  double dustbin_affinity = 0.5;
  std::string pooling = "mean";  // mean | attention
  int q = 5;
  std::vector<std::string> prompts = {"building", "road", "vegetation"};
  std::string matcher = "sinkhorn";  // sinkhorn | superglue
  /// Disabled levels create no parameters of their own.
  bool motion = true;
  bool semantic = true;

  int effective_min_area(int height, int width) const;
  int motion_dim() const { return 2 * (descriptor_dim + pos_dim); }
  int semantic_dim() const { return 2 * descriptor_dim; }
};

struct MatchResult {
  Matrix scores;   // N1 x N2 in [0, 1]
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> matches;
  std::vector<int> unmatched1;
  std::vector<int> unmatched2;
};

/// Score/area filtering, greedy mask-IoU NMS and top-k truncation; output
/// sorted by descending score.
std::vector<RegionProposal> filter_proposals(const SegmenterOutput& raw, int max_masks,
                                             int min_area, double nms_iou, double min_score);

/// Proposal built from a mask: tight box, area and centroid.
RegionProposal make_proposal(Mask mask, double score);

double mask_iou(const Mask& a, const Mask& b);

/// Bilinear sample of a feature grid at continuous feature coordinates where
/// cell (i, j) has its center at (j + 0.5, i + 0.5). Coordinates clamp to the border.
template <typename Scalar>
RowVectorX<Scalar> bilinear_sample(const Grid<Scalar>& grid, Scalar u, Scalar v) {
  const Scalar x = std::clamp(u - Scalar(0.5), Scalar(0), Scalar(grid.width - 1));
  const Scalar y = std::clamp(v - Scalar(0.5), Scalar(0), Scalar(grid.height - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, grid.width - 1);
  const int y1 = std::min(y0 + 1, grid.height - 1);
  const Scalar ax = x - Scalar(x0);
  const Scalar ay = y - Scalar(y0);
  return (Scalar(1) - ay) * ((Scalar(1) - ax) * grid.pixel(y0, x0) + ax * grid.pixel(y0, x1)) +
         ay * ((Scalar(1) - ax) * grid.pixel(y1, x0) + ax * grid.pixel(y1, x1));
}

/// RoIAlign of a pixel box onto an out x out grid with 2x2 samples per bin.
/// Boxes narrower than one feature cell sample the box center for every bin.
template <typename Scalar>
MatrixX<Scalar> roi_align(const Grid<Scalar>& features, const Box& box, Scalar spatial_scale,
                          int out) {
  const Scalar fx0 = box.x0 * spatial_scale, fx1 = box.x1 * spatial_scale;
  const Scalar fy0 = box.y0 * spatial_scale, fy1 = box.y1 * spatial_scale;
  MatrixX<Scalar> pooled(static_cast<Index>(out) * out, features.channels());
  const bool collapsed = (fx1 - fx0) < Scalar(1) || (fy1 - fy0) < Scalar(1);
  if (collapsed) {
    const RowVectorX<Scalar> center =
        bilinear_sample(features, (fx0 + fx1) / Scalar(2), (fy0 + fy1) / Scalar(2));
    pooled.rowwise() = center;
    return pooled;
  }
  const Scalar bw = (fx1 - fx0) / Scalar(out);
  const Scalar bh = (fy1 - fy0) / Scalar(out);
  constexpr int kSamples = 2;
  for (int by = 0; by < out; ++by) {
    for (int bx = 0; bx < out; ++bx) {
      RowVectorX<Scalar> acc = RowVectorX<Scalar>::Zero(features.channels());
      for (int sy = 0; sy < kSamples; ++sy) {
        for (int sx = 0; sx < kSamples; ++sx) {
          const Scalar u = fx0 + bw * (Scalar(bx) + (Scalar(sx) + Scalar(0.5)) / Scalar(kSamples));
          const Scalar v = fy0 + bh * (Scalar(by) + (Scalar(sy) + Scalar(0.5)) / Scalar(kSamples));
          acc += bilinear_sample(features, u, v);
        }
      }
      pooled.row(static_cast<Index>(by) * out + bx) = acc / Scalar(kSamples * kSamples);
    }
  }
  return pooled;
}

/// Adaptive average pooling of an in x in grid ((in*in) x C) to out x out.
template <typename Scalar>
MatrixX<Scalar> adaptive_avg_pool(const MatrixX<Scalar>& grid, int in, int out) {
  MatrixX<Scalar> pooled(static_cast<Index>(out) * out, grid.cols());
  for (int oy = 0; oy < out; ++oy) {
    const int y0 = (oy * in) / out, y1 = ((oy + 1) * in + out - 1) / out;
    for (int ox = 0; ox < out; ++ox) {
      const int x0 = (ox * in) / out, x1 = ((ox + 1) * in + out - 1) / out;
      RowVectorX<Scalar> acc = RowVectorX<Scalar>::Zero(grid.cols());
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) acc += grid.row(static_cast<Index>(y) * in + x);
      }
      pooled.row(static_cast<Index>(oy) * out + ox) = acc / Scalar((y1 - y0) * (x1 - x0));
    }
  }
  return pooled;
}

/// Log-domain Sinkhorn on an (N1+1) x (N2+1) logit matrix whose last row and
/// column are dustbins. Real rows/columns have unit marginals; the dustbin row
/// carries N2 and the dustbin column N1. Runs `iterations` sweeps, then keeps
/// going while some real row sum is off by more than `tol` (tol <= 0 disables
/// this), up to `max_iterations`. Columns are exact after every sweep.
template <typename Scalar>
MatrixX<Scalar> sinkhorn_dustbin(const MatrixX<Scalar>& logits, int iterations, Scalar tol = Scalar(0),
                                 int max_iterations = 0) {
  const Index r = logits.rows(), c = logits.cols();
  const Index n1 = r - 1, n2 = c - 1;
  VectorX<Scalar> log_mu(r), log_nu(c);
  log_mu.head(n1).setZero();
  log_mu(n1) = std::log(std::max<Scalar>(Scalar(n2), Scalar(1e-300)));
  log_nu.head(n2).setZero();
  log_nu(n2) = std::log(std::max<Scalar>(Scalar(n1), Scalar(1e-300)));
  VectorX<Scalar> u = VectorX<Scalar>::Zero(r), v = VectorX<Scalar>::Zero(c);
  auto logsumexp = [](const auto& vec) {
    const Scalar m = vec.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((vec.array() - m).exp().sum());
  };
  auto row_error = [&] {
    Scalar err(0);
    for (Index i = 0; i < n1; ++i) {
      err = std::max(err, std::abs(std::exp(u(i) + logsumexp((logits.row(i).transpose() + v).eval())) - Scalar(1)));
    }
    return err;
  };
  const int cap = std::max(iterations, max_iterations);
  for (int it = 0; it < cap; ++it) {
    if (it >= iterations && (tol <= Scalar(0) || row_error() <= tol)) break;
    for (Index i = 0; i < r; ++i) {
      u(i) = log_mu(i) - logsumexp((logits.row(i).transpose() + v).eval());
    }
    for (Index j = 0; j < c; ++j) {
      v(j) = log_nu(j) - logsumexp((logits.col(j) + u).eval());
    }
  }
  MatrixX<Scalar> p(r, c);
  for (Index i = 0; i < r; ++i) {
    for (Index j = 0; j < c; ++j) p(i, j) = std::exp(logits(i, j) + u(i) + v(j));
  }
  // Zero-mass dustbin marginals (one side empty) produce exp(-inf) rows/cols.
  if (n1 == 0) p.row(n1).setZero();
  if (n2 == 0) p.col(n2).setZero();
  return p;
}

struct MatchConfig {
  double tau = 0.2;
  int sinkhorn_iters = 20;
  double sinkhorn_tol = 1e-9;
  int sinkhorn_max_iters = 1000;
  double temperature = 0.1;
  double dustbin_affinity = 0.5;
  int pos_dim = 16;
};

/// Affinity 0.5*cos(descriptors) + 0.5*cos(centroid encodings), augmented with
/// dustbins and divided by the temperature.
Matrix matching_logits(const Matrix& desc1, const Matrix& centroids1, const Matrix& desc2,
                       const Matrix& centroids2, const MatchConfig& config);

/// Mutual-best pairs whose score exceeds tau, plus the unmatched index sets.
MatchResult threshold_matches(const Matrix& scores, double tau);

MatchResult match_regions(const Matrix& desc1, const Matrix& centroids1, const Matrix& desc2,
                          const Matrix& centroids2, const MatchConfig& config);

/// Frozen per-image inputs: proposals and their pooled RoI blocks.
struct RegionInputs {
  std::vector<RegionProposal> proposals;
  std::vector<Matrix> pooled;  // (pooled*pooled) x C_s per proposal
  int image_height = 0;
  int image_width = 0;

  size_t size() const { return proposals.size(); }
  Matrix centroids() const;
};

/// RoIAlign + adaptive pooling for every proposal.
RegionInputs pool_regions(const Grid<double>& dense_features, int feature_stride,
                          std::vector<RegionProposal> proposals, const MinerConfig& config,
                          int image_height, int image_width);

RegionInputs prepare_motion_inputs(const Image& image, const MaskSegmenter& segmenter,
                                   const MinerConfig& config);
RegionInputs prepare_semantic_inputs(const Image& image, const PromptDetector& detector,
                                     const MaskSegmenter& segmenter, const MinerConfig& config);

struct DescriptorSet {
  ad::Var vectors;  // N x d; invalid when N == 0
  Matrix centroids;  // N x 2 (x, y)
  int epoch = 1;

  Index count() const { return centroids.rows(); }
  Matrix values() const;
};

/// Rank regions by their best prompt similarity and return the top-q indices.
std::vector<int> select_top_q(const Matrix& similarity, int q);

/// Row-normalized region embeddings times row-normalized text embeddings.
Matrix text_region_similarity(const Matrix& regions, const Matrix& text);

class RegionMiner {
 public:
  RegionMiner(nn::ParameterStore& store, const MinerConfig& config, int feature_channels,
              nn::Rng& rng);

  /// g_theta over each pooled block: conv3x3 -> ReLU -> spatial mean -> linear.
  ad::Var describe_block(ad::Tape& tape, const Matrix& pooled) const;
  DescriptorSet describe_regions(ad::Tape& tape, const RegionInputs& inputs, int epoch) const;
  DescriptorSet describe_regions(ad::Tape& tape, const Grid<double>& dense_features,
                                 int feature_stride, std::span<const RegionProposal> proposals,
                                 int image_height, int image_width) const;

  MatchResult match(const DescriptorSet& d1, const DescriptorSet& d2) const;

  /// [descriptor ; centroid encoding] pooled per epoch over unmatched regions.
  ad::Var motion_change_repr(ad::Tape& tape, const MatchResult& match, const DescriptorSet& d1,
                             const DescriptorSet& d2) const;
  /// Every region treated as unmatched (matcher disabled).
  static MatchResult all_unmatched(Index n1, Index n2);

  ad::Var semantic_change_repr(ad::Tape& tape, const RegionInputs& image1,
                               const RegionInputs& image2, const Matrix& text_embeddings,
                               std::vector<int>* selected1 = nullptr,
                               std::vector<int>* selected2 = nullptr) const;
  ad::Var semantic_change_repr(ad::Tape& tape, const Image& image1, const Image& image2,
                               const PromptDetector& detector, const MaskSegmenter& segmenter,
                               const TextEncoder& text) const;

  ad::Var no_change(ad::Tape& tape) const { return tape.parameter(*no_change_); }
  ad::Var null_semantic(ad::Tape& tape) const { return tape.parameter(*null_semantic_); }

  const MinerConfig& config() const { return config_; }
  MatchConfig match_config() const;

 private:
  ad::Var pool_set(ad::Tape& tape, const ad::Var& rows) const;

  MinerConfig config_;
  nn::Conv2d head_conv_;
  nn::Linear head_out_;
  Parameter* no_change_ = nullptr;      // 1 x (d + d_pos)
  Parameter* null_semantic_ = nullptr;  // 1 x d
  Parameter* pool_query_ = nullptr;     // attention pooling, (d + d_pos) x 1
};

/// Writes masks as PNG and matches as line-pair JSON under `dir`.
void dump_region_debug(const std::string& dir, const RegionInputs& image1,
                       const RegionInputs& image2, const MatchResult& match);

}  // namespace sagecc
