#pragma once

// Interfaces to the frozen external models (mask segmenter, prompt detector,
// text encoder, learned matcher) and deterministic mock implementations.
//
// Mocks are pure functions of (input, seed). Real backends are configured by
// checkpoint paths and raise BackendUnavailable when they cannot run.

#include "sagecc/core/errors.hpp"
#include "sagecc/core/image.hpp"
#include "sagecc/core/tensor.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sagecc {

struct SegmenterOutput {
  std::vector<Mask> masks;
  std::vector<double> scores;
  Grid<double> dense_features;
};

struct DetectionSet {
  std::vector<Box> boxes;
  std::vector<int> labels;  // index into the prompt list
  std::vector<double> scores;

  size_t size() const { return boxes.size(); }
  bool empty() const { return boxes.empty(); }
};

struct AdapterConfig {
  std::string backend = "mock";  // mock | real
  std::uint64_t seed = 0;
  int text_dim = 32;
  int feature_channels = 32;
  int feature_stride = 4;
  int quantize_bits = 3;  // color bits kept per channel by the mock segmenter
  // Real-backend keys.
  std::string sam_checkpoint;
  std::string sam_feature_layer = "neck";
  std::string detector_checkpoint;
  std::string text_checkpoint;
  std::string matcher_weights;
  std::string device = "cpu";
};

/// Palette of the synthetic scene generator. The mock detector recognizes
/// object classes by these colors.
namespace palette {
using Rgb = std::array<std::uint8_t, 3>;
inline constexpr Rgb bareland = {196, 164, 120};
inline constexpr Rgb building = {40, 72, 200};
inline constexpr Rgb road = {120, 120, 120};
inline constexpr Rgb vegetation = {48, 160, 64};
inline constexpr std::array<const char*, 3> class_names = {"building", "road", "vegetation"};
/// Color of an object class name, or nullptr when unknown.
const Rgb* class_color(const std::string& name);
}  // namespace palette

class MaskSegmenter {
 public:
  virtual ~MaskSegmenter() = default;
  virtual SegmenterOutput segment_auto(const Image& image) const = 0;
  virtual SegmenterOutput segment_boxes(const Image& image, const DetectionSet& boxes) const = 0;
  /// Pixels per dense-feature cell.
  virtual int feature_stride() const = 0;
};

class PromptDetector {
 public:
  virtual ~PromptDetector() = default;
  virtual DetectionSet detect(const Image& image, std::span<const std::string> prompts) const = 0;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  /// |strings| x dim, L2-normalized rows.
  virtual Matrix embed(std::span<const std::string> strings) const = 0;
  virtual int dim() const = 0;
};

/// Learned cross-epoch matcher slot; returns N1 x N2 match confidences.
class LearnedMatcher {
 public:
  virtual ~LearnedMatcher() = default;
  virtual Matrix scores(const Matrix& desc1, const Matrix& centroids1, const Matrix& desc2,
                        const Matrix& centroids2) const = 0;
};

/// Connected components (4-connectivity) of equal quantized color inside `roi`.
/// Returns a label image (H x W, -1 outside roi) and the component count.
struct ComponentLabels {
  std::vector<int> labels;
  std::vector<long> sizes;
  int count = 0;
};
ComponentLabels label_components(const Image& image, const Box& roi, int quantize_bits);

/// Area over convex-hull area, using pixel corners so axis-aligned
/// rectangles score exactly 1.
double mask_solidity(const Mask& mask);

/// Tight bounding box of a non-empty mask.
Box mask_box(const Mask& mask);

class MockSegmenter final : public MaskSegmenter {
 public:
  explicit MockSegmenter(const AdapterConfig& config);
  SegmenterOutput segment_auto(const Image& image) const override;
  SegmenterOutput segment_boxes(const Image& image, const DetectionSet& boxes) const override;
  int feature_stride() const override { return stride_; }

  /// Random projection of per-cell color histograms, (H/s * W/s) x C.
  Grid<double> dense_features(const Image& image) const;

 private:
  int stride_;
  int quantize_bits_;
  Matrix projection_;  // histogram bins x channels
};

class MockDetector final : public PromptDetector {
 public:
  explicit MockDetector(const AdapterConfig& config);
  DetectionSet detect(const Image& image, std::span<const std::string> prompts) const override;

 private:
  int quantize_bits_;
};

class MockTextEncoder final : public TextEncoder {
 public:
  explicit MockTextEncoder(const AdapterConfig& config);
  Matrix embed(std::span<const std::string> strings) const override;
  int dim() const override { return dim_; }

 private:
  int dim_;
  std::uint64_t seed_;
};

class SamSegmenter final : public MaskSegmenter {
 public:
  explicit SamSegmenter(const AdapterConfig& config);
  SegmenterOutput segment_auto(const Image& image) const override;
  SegmenterOutput segment_boxes(const Image& image, const DetectionSet& boxes) const override;
  int feature_stride() const override { return 16; }
};

class GroundingDinoDetector final : public PromptDetector {
 public:
  explicit GroundingDinoDetector(const AdapterConfig& config);
  DetectionSet detect(const Image& image, std::span<const std::string> prompts) const override;
};

class BertTextEncoder final : public TextEncoder {
 public:
  explicit BertTextEncoder(const AdapterConfig& config);
  Matrix embed(std::span<const std::string> strings) const override;
  int dim() const override { return 768; }
};

class SuperGlueMatcher final : public LearnedMatcher {
 public:
  explicit SuperGlueMatcher(const AdapterConfig& config);
  Matrix scores(const Matrix& desc1, const Matrix& centroids1, const Matrix& desc2,
                const Matrix& centroids2) const override;
};

std::unique_ptr<MaskSegmenter> make_segmenter(const AdapterConfig& config);
std::unique_ptr<PromptDetector> make_detector(const AdapterConfig& config);
std::unique_ptr<TextEncoder> make_text_encoder(const AdapterConfig& config);

}  // namespace sagecc
