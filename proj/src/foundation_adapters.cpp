#include "sagecc/foundation_adapters.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <random>

namespace sagecc {

namespace palette {
const Rgb* class_color(const std::string& name) {
  if (name == "building") return &building;
  if (name == "road") return &road;
  if (name == "vegetation") return &vegetation;
  return nullptr;
}
}  // namespace palette

namespace {

int color_key(const std::uint8_t* px, int bits) {
  const int shift = 8 - bits;
  return ((px[0] >> shift) << (2 * bits)) | ((px[1] >> shift) << bits) | (px[2] >> shift);
}

void check_image(const Image& image) {
  if (image.empty()) throw InputError("adapter: empty image");
  if (image.rgb.size() != static_cast<size_t>(image.height) * image.width * 3) {
    throw InputError("adapter: image buffer size does not match its shape");
  }
}

void check_box(const Image& image, const Box& b) {
  if (b.x0 < 0 || b.y0 < 0 || b.x1 > image.width || b.y1 > image.height || b.x0 >= b.x1 ||
      b.y0 >= b.y1) {
    throw InputError("adapter: box (" + std::to_string(b.x0) + "," + std::to_string(b.y0) + "," +
                     std::to_string(b.x1) + "," + std::to_string(b.y1) + ") outside image " +
                     std::to_string(image.width) + "x" + std::to_string(image.height));
  }
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void require_file(const std::string& what, const std::string& path) {
  if (path.empty() || !std::filesystem::exists(path)) {
    throw BackendUnavailable(what + ": checkpoint not found: '" + path + "'");
  }
  throw BackendUnavailable(what + ": inference runtime not built into this binary");
}

}  // namespace

ComponentLabels label_components(const Image& image, const Box& roi, int quantize_bits) {
  check_image(image);
  ComponentLabels out;
  const int h = image.height, w = image.width;
  out.labels.assign(static_cast<size_t>(h) * w, -1);
  std::vector<int> keys(static_cast<size_t>(h) * w);
  for (int y = roi.y0; y < roi.y1; ++y) {
    for (int x = roi.x0; x < roi.x1; ++x) {
      keys[static_cast<size_t>(y) * w + x] = color_key(image.px(y, x), quantize_bits);
    }
  }
  std::deque<std::pair<int, int>> queue;
  for (int y = roi.y0; y < roi.y1; ++y) {
    for (int x = roi.x0; x < roi.x1; ++x) {
      const size_t idx = static_cast<size_t>(y) * w + x;
      if (out.labels[idx] >= 0) continue;
      const int label = out.count++;
      const int key = keys[idx];
      long size = 0;
      out.labels[idx] = label;
      queue.emplace_back(y, x);
      while (!queue.empty()) {
        auto [cy, cx] = queue.front();
        queue.pop_front();
        ++size;
        constexpr int dy[] = {-1, 1, 0, 0};
        constexpr int dx[] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dy[k], nx = cx + dx[k];
          if (ny < roi.y0 || ny >= roi.y1 || nx < roi.x0 || nx >= roi.x1) continue;
          const size_t n = static_cast<size_t>(ny) * w + nx;
          if (out.labels[n] >= 0 || keys[n] != key) continue;
          out.labels[n] = label;
          queue.emplace_back(ny, nx);
        }
      }
      out.sizes.push_back(size);
    }
  }
  return out;
}

double mask_solidity(const Mask& mask) {
  using Pt = std::pair<long, long>;
  std::vector<Pt> pts;
  long area = 0;
  for (int y = 0; y < mask.height; ++y) {
    int lo = -1, hi = -1;
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      ++area;
      if (lo < 0) lo = x;
      hi = x;
    }
    if (lo < 0) continue;
    pts.insert(pts.end(), {{lo, y}, {lo, y + 1}, {hi + 1, y}, {hi + 1, y + 1}});
  }
  if (area == 0) return 0.0;
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  auto cross = [](const Pt& o, const Pt& a, const Pt& b) {
    return (a.first - o.first) * (b.second - o.second) - (a.second - o.second) * (b.first - o.first);
  };
  std::vector<Pt> hull(2 * pts.size());
  size_t k = 0;
  for (const Pt& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k > 0 ? k - 1 : 0);
  long twice = 0;
  for (size_t i = 0; i < hull.size(); ++i) {
    const Pt& a = hull[i];
    const Pt& b = hull[(i + 1) % hull.size()];
    twice += a.first * b.second - b.first * a.second;
  }
  const double hull_area = std::abs(static_cast<double>(twice)) / 2.0;
  if (hull_area <= 0.0) return 1.0;
  return std::min(1.0, static_cast<double>(area) / hull_area);
}

Box mask_box(const Mask& mask) {
  Box b{mask.width, mask.height, 0, 0};
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      b.x0 = std::min(b.x0, x);
      b.y0 = std::min(b.y0, y);
      b.x1 = std::max(b.x1, x + 1);
      b.y1 = std::max(b.y1, y + 1);
    }
  }
  if (b.x1 == 0) throw InputError("mask_box: empty mask");
  return b;
}

MockSegmenter::MockSegmenter(const AdapterConfig& config)
    : stride_(config.feature_stride), quantize_bits_(config.quantize_bits) {
  if (stride_ < 1 || config.feature_channels < 1) throw ConfigError("mock segmenter: bad dims");
  constexpr int kBins = 12;  // 4 bins per channel
  std::mt19937_64 rng(splitmix64(config.seed ^ 0x5eedULL));
  std::normal_distribution<double> dist(0.0, 1.0);
  projection_.resize(kBins, config.feature_channels);
  for (Index i = 0; i < projection_.size(); ++i) projection_.data()[i] = dist(rng);
}

Grid<double> MockSegmenter::dense_features(const Image& image) const {
  check_image(image);
  Grid<double> g;
  g.height = std::max(1, image.height / stride_);
  g.width = std::max(1, image.width / stride_);
  Matrix hist = Matrix::Zero(static_cast<Index>(g.height) * g.width, projection_.rows());
  for (int cy = 0; cy < g.height; ++cy) {
    for (int cx = 0; cx < g.width; ++cx) {
      const int y0 = cy * stride_, x0 = cx * stride_;
      const int y1 = std::min(image.height, y0 + stride_), x1 = std::min(image.width, x0 + stride_);
      auto row = hist.row(static_cast<Index>(cy) * g.width + cx);
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          const std::uint8_t* p = image.px(y, x);
          for (int c = 0; c < 3; ++c) row(c * 4 + (p[c] >> 6)) += 1.0;
        }
      }
      row /= static_cast<double>((y1 - y0) * (x1 - x0));
    }
  }
  g.data = hist * projection_;
  return g;
}

SegmenterOutput MockSegmenter::segment_auto(const Image& image) const {
  check_image(image);
  SegmenterOutput out;
  const Box all{0, 0, image.width, image.height};
  ComponentLabels cc = label_components(image, all, quantize_bits_);
  out.masks.assign(static_cast<size_t>(cc.count), Mask(image.height, image.width));
  for (size_t i = 0; i < cc.labels.size(); ++i) {
    out.masks[static_cast<size_t>(cc.labels[i])].bits[i] = 1;
  }
  for (const Mask& m : out.masks) out.scores.push_back(mask_solidity(m));
  out.dense_features = dense_features(image);
  return out;
}

SegmenterOutput MockSegmenter::segment_boxes(const Image& image, const DetectionSet& boxes) const {
  check_image(image);
  SegmenterOutput out;
  for (const Box& b : boxes.boxes) {
    check_box(image, b);
    ComponentLabels cc = label_components(image, b, quantize_bits_);
    const int best = static_cast<int>(
        std::max_element(cc.sizes.begin(), cc.sizes.end()) - cc.sizes.begin());
    Mask m(image.height, image.width);
    for (size_t i = 0; i < cc.labels.size(); ++i) {
      if (cc.labels[i] == best) m.bits[i] = 1;
    }
    out.scores.push_back(mask_solidity(m));
    out.masks.push_back(std::move(m));
  }
  out.dense_features = dense_features(image);
  return out;
}

MockDetector::MockDetector(const AdapterConfig& config) : quantize_bits_(config.quantize_bits) {}

DetectionSet MockDetector::detect(const Image& image, std::span<const std::string> prompts) const {
  check_image(image);
  if (prompts.empty()) throw InputError("detect: empty prompt list");
  DetectionSet out;
  const Box all{0, 0, image.width, image.height};
  ComponentLabels cc = label_components(image, all, quantize_bits_);
  // Quantized color of each component, from its first pixel in raster order.
  std::vector<int> comp_key(static_cast<size_t>(cc.count), -1);
  std::vector<Box> comp_box(static_cast<size_t>(cc.count), Box{image.width, image.height, 0, 0});
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const int l = cc.labels[static_cast<size_t>(y) * image.width + x];
      if (comp_key[static_cast<size_t>(l)] < 0) comp_key[static_cast<size_t>(l)] = color_key(image.px(y, x), quantize_bits_);
      Box& b = comp_box[static_cast<size_t>(l)];
      b.x0 = std::min(b.x0, x);
      b.y0 = std::min(b.y0, y);
      b.x1 = std::max(b.x1, x + 1);
      b.y1 = std::max(b.y1, y + 1);
    }
  }
  for (size_t k = 0; k < prompts.size(); ++k) {
    const palette::Rgb* color = palette::class_color(prompts[k]);
    if (color == nullptr) continue;
    const int key = color_key(color->data(), quantize_bits_);
    for (int l = 0; l < cc.count; ++l) {
      if (comp_key[static_cast<size_t>(l)] != key) continue;
      out.boxes.push_back(comp_box[static_cast<size_t>(l)]);
      out.labels.push_back(static_cast<int>(k));
      out.scores.push_back(1.0);
    }
  }
  return out;
}

MockTextEncoder::MockTextEncoder(const AdapterConfig& config)
    : dim_(config.text_dim), seed_(config.seed) {
  if (dim_ < 1) throw ConfigError("mock text encoder: dim must be positive");
}

Matrix MockTextEncoder::embed(std::span<const std::string> strings) const {
  Matrix out = Matrix::Zero(static_cast<Index>(strings.size()), dim_);
  for (size_t i = 0; i < strings.size(); ++i) {
    if (strings[i].empty()) throw InputError("embed_text: empty string");
    const std::string padded = "#" + strings[i] + "#";
    auto row = out.row(static_cast<Index>(i));
    for (size_t p = 0; p + 3 <= padded.size(); ++p) {
      const std::uint64_t h = splitmix64(fnv1a(std::string_view(padded).substr(p, 3)) ^ seed_);
      const double sign = (h >> 32) & 1U ? 1.0 : -1.0;
      row(static_cast<Index>(h % static_cast<std::uint64_t>(dim_))) += sign;
    }
    const double n = row.norm();
    if (n > 0.0) {
      row /= n;
    } else {
      row(0) = 1.0;
    }
  }
  return out;
}

SamSegmenter::SamSegmenter(const AdapterConfig& config) {
  require_file("sam segmenter", config.sam_checkpoint);
}
SegmenterOutput SamSegmenter::segment_auto(const Image&) const {
  throw BackendUnavailable("sam segmenter unavailable");
}
SegmenterOutput SamSegmenter::segment_boxes(const Image&, const DetectionSet&) const {
  throw BackendUnavailable("sam segmenter unavailable");
}

GroundingDinoDetector::GroundingDinoDetector(const AdapterConfig& config) {
  require_file("grounding dino detector", config.detector_checkpoint);
}
DetectionSet GroundingDinoDetector::detect(const Image&, std::span<const std::string>) const {
  throw BackendUnavailable("grounding dino detector unavailable");
}

BertTextEncoder::BertTextEncoder(const AdapterConfig& config) {
  require_file("bert text encoder", config.text_checkpoint);
}
Matrix BertTextEncoder::embed(std::span<const std::string>) const {
  throw BackendUnavailable("bert text encoder unavailable");
}

SuperGlueMatcher::SuperGlueMatcher(const AdapterConfig& config) {
  require_file("superglue matcher", config.matcher_weights);
}
Matrix SuperGlueMatcher::scores(const Matrix&, const Matrix&, const Matrix&, const Matrix&) const {
  throw BackendUnavailable("superglue matcher unavailable");
}

std::unique_ptr<MaskSegmenter> make_segmenter(const AdapterConfig& config) {
  if (config.backend == "mock") return std::make_unique<MockSegmenter>(config);
  if (config.backend == "real") return std::make_unique<SamSegmenter>(config);
  throw ConfigError("unknown adapter backend: " + config.backend);
}

std::unique_ptr<PromptDetector> make_detector(const AdapterConfig& config) {
  if (config.backend == "mock") return std::make_unique<MockDetector>(config);
  if (config.backend == "real") return std::make_unique<GroundingDinoDetector>(config);
  throw ConfigError("unknown adapter backend: " + config.backend);
}

std::unique_ptr<TextEncoder> make_text_encoder(const AdapterConfig& config) {
  if (config.backend == "mock") return std::make_unique<MockTextEncoder>(config);
  if (config.backend == "real") return std::make_unique<BertTextEncoder>(config);
  throw ConfigError("unknown adapter backend: " + config.backend);
}

}  // namespace sagecc
