#include "sagecc/backbone_encoder.hpp"

#include "sagecc/core/positional.hpp"

#include <cmath>
#include <filesystem>

namespace sagecc {

PriorMaps PriorVars::maps() const {
  PriorMaps m;
  m.consistency = Eigen::Map<const Matrix>(consistency.value().data(), height, width);
  m.change = Eigen::Map<const Matrix>(change.value().data(), height, width);
  return m;
}

DeskBackbone::DeskBackbone(nn::ParameterStore& store, const std::vector<int>& channels,
                           nn::Rng& rng) {
  if (channels.empty()) throw ConfigError("desk backbone needs at least one stage");
  int in = 3;
  for (size_t i = 0; i < channels.size(); ++i) {
    stages_.emplace_back(store, "encoder.backbone.conv" + std::to_string(i), in, channels[i], 3, 2,
                         1, rng);
    in = channels[i];
  }
  channels_ = channels.back();
}

FeatureGrid DeskBackbone::forward(ad::Tape& tape, const Grid<double>& image) const {
  if (image.channels() != 3) throw ShapeError("backbone: expected 3 image channels");
  if (!image.data.allFinite()) throw InputError("backbone: non-finite pixel values");
  if (image.height % stride() != 0 || image.width % stride() != 0) {
    throw ShapeError("backbone: image size " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + " not divisible by stride " +
                     std::to_string(stride()));
  }
  ad::Var x = tape.constant(image.data, "image");
  int h = image.height, w = image.width;
  for (const auto& conv : stages_) {
    int oh = 0, ow = 0;
    x = ad::relu(conv(tape, x, h, w, &oh, &ow));
    h = oh;
    w = ow;
  }
  return FeatureGrid{x, h, w, 1, false};
}

ResNet101Backbone::ResNet101Backbone(const std::string& weights_path) {
  if (weights_path.empty() || !std::filesystem::exists(weights_path)) {
    throw BackendUnavailable("resnet101 backbone: weight file not found: '" + weights_path + "'");
  }
  throw BackendUnavailable("resnet101 backbone: inference runtime not built into this binary");
}

FeatureGrid ResNet101Backbone::forward(ad::Tape&, const Grid<double>&) const {
  throw BackendUnavailable("resnet101 backbone unavailable");
}

ConsistencyBlock::ConsistencyBlock(nn::ParameterStore& store, const std::string& name,
                                   int channels, int heads, nn::Rng& rng)
    : norm_self_(store, name + ".norm_self", channels),
      norm_query_(store, name + ".norm_query", channels),
      norm_context_(store, name + ".norm_context", channels),
      self_attn_(store, name + ".self_attn", channels, channels, channels, heads, rng),
      cross_attn_(store, name + ".cross_attn", channels, channels, channels, heads, rng) {}

std::pair<ad::Var, ad::Var> ConsistencyBlock::operator()(ad::Tape& tape, const ad::Var& f1,
                                                         const ad::Var& f2) const {
  auto self = [&](const ad::Var& f) {
    ad::Var n = norm_self_(tape, f);
    return ad::add(f, self_attn_(tape, n, n));
  };
  ad::Var h1 = self(f1);
  ad::Var h2 = self(f2);
  const ad::Var both[] = {h1, h2};
  ad::Var context = norm_context_(tape, ad::vconcat(both));
  ad::Var out1 = ad::add(h1, cross_attn_(tape, norm_query_(tape, h1), context));
  ad::Var out2 = ad::add(h2, cross_attn_(tape, norm_query_(tape, h2), context));
  return {out1, out2};
}

FusionHead::FusionHead(nn::ParameterStore& store, const std::string& name, int in_channels,
                       int out_channels, nn::Rng& rng)
    : conv_(store, name + ".conv", in_channels, out_channels, 3, 1, 1, rng),
      norm_(store, name + ".bn", out_channels),
      project_(store, name + ".project", out_channels, out_channels, 1, 1, 0, rng) {}

std::vector<ad::Var> FusionHead::operator()(ad::Tape& tape, std::span<const ad::Var> inputs,
                                            int height, int width, bool training) const {
  std::vector<ad::Var> convolved;
  for (const ad::Var& x : inputs) convolved.push_back(conv_(tape, x, height, width, nullptr, nullptr));
  ad::Var stacked = convolved.size() == 1 ? convolved.front() : ad::vconcat(convolved);
  ad::Var activated = ad::relu(norm_(tape, stacked, training));
  ad::Var projected = project_(tape, activated, height, width, nullptr, nullptr);
  std::vector<ad::Var> out;
  const Index cells = static_cast<Index>(height) * width;
  if (inputs.size() == 1) {
    out.push_back(projected);
  } else {
    for (size_t i = 0; i < inputs.size(); ++i) {
      out.push_back(ad::slice_rows(projected, static_cast<Index>(i) * cells, cells));
    }
  }
  return out;
}

BiTemporalEncoder::BiTemporalEncoder(nn::ParameterStore& store, const EncoderConfig& config,
                                     nn::Rng& rng)
    : config_(config) {
  if (config.blocks < 1) throw ConfigError("encoder: n_blocks must be >= 1");
  if (config.backbone == "desk") {
    backbone_ = std::make_unique<DeskBackbone>(store, config.backbone_channels, rng);
  } else if (config.backbone == "resnet101") {
    backbone_ = std::make_unique<ResNet101Backbone>(config.backbone_weights);
  } else {
    throw ConfigError("encoder: unknown backbone '" + config.backbone + "'");
  }
  const int c = backbone_->channels();
  for (int b = 0; b < config.blocks; ++b) {
    blocks_.emplace_back(store, "encoder.block" + std::to_string(b), c, config.heads, rng);
  }
  head_ = std::make_unique<FusionHead>(store, "encoder.fusion", 3 * c + 1, config.embed_dim, rng);
}

std::pair<FeatureGrid, FeatureGrid> BiTemporalEncoder::extract_features(
    ad::Tape& tape, const Grid<double>& image1, const Grid<double>& image2) const {
  if (image1.height != image2.height || image1.width != image2.width ||
      image1.channels() != image2.channels()) {
    throw ShapeError("extract_features: bi-temporal images differ in shape");
  }
  ad::ScopeGuard scope(tape, "backbone");
  FeatureGrid f1 = backbone_->forward(tape, image1);
  FeatureGrid f2 = backbone_->forward(tape, image2);
  ad::Var pos = tape.constant(sinusoid_2d<double>(f1.height, f1.width, f1.data.cols()), "pos2d");
  f1.data = ad::add(f1.data, pos);
  f2.data = ad::add(f2.data, pos);
  f1.epoch = 1;
  f2.epoch = 2;
  f1.positional_added = f2.positional_added = true;
  return {f1, f2};
}

std::pair<FeatureGrid, FeatureGrid> consistency_refine(ad::Tape& tape,
                                                       std::span<const ConsistencyBlock> blocks,
                                                       const FeatureGrid& f1,
                                                       const FeatureGrid& f2, int n_blocks) {
  if (n_blocks < 1) throw ConfigError("consistency_refine: n_blocks must be >= 1");
  if (static_cast<size_t>(n_blocks) > blocks.size()) {
    throw ConfigError("consistency_refine: only " + std::to_string(blocks.size()) +
                      " blocks constructed");
  }
  if (f1.height != f2.height || f1.width != f2.width || f1.data.cols() != f2.data.cols()) {
    throw ShapeError("consistency_refine: stream shapes differ");
  }
  ad::ScopeGuard scope(tape, "consistency");
  ad::Var a = f1.data, b = f2.data;
  for (int i = 0; i < n_blocks; ++i) std::tie(a, b) = blocks[static_cast<size_t>(i)](tape, a, b);
  FeatureGrid o1 = f1, o2 = f2;
  o1.data = a;
  o2.data = b;
  return {o1, o2};
}

std::pair<FeatureGrid, FeatureGrid> BiTemporalEncoder::consistency_refine(
    ad::Tape& tape, const FeatureGrid& f1, const FeatureGrid& f2) const {
  return sagecc::consistency_refine(tape, blocks_, f1, f2, config_.blocks);
}

PriorVars BiTemporalEncoder::compute_priors(ad::Tape& tape, const FeatureGrid& f1,
                                            const FeatureGrid& f2) const {
  if (f1.height != f2.height || f1.width != f2.width || f1.data.cols() != f2.data.cols()) {
    throw ShapeError("compute_priors: stream shapes differ");
  }
  ad::ScopeGuard scope(tape, "priors");
  ad::Var cos = ad::row_cosine(f1.data, f2.data, config_.cosine_eps);
  const Index n = cos.rows();
  ad::Var half = tape.constant(Matrix::Constant(n, 1, 0.5), "half");
  ad::Var consistency = ad::add(ad::scale(cos, 0.5), half);
  ad::Var change = ad::sub(tape.constant(Matrix::Ones(n, 1), "ones"), consistency);
  return PriorVars{consistency, change, f1.height, f1.width};
}

ad::Var BiTemporalEncoder::fusion_input(const FeatureGrid& f1, const FeatureGrid& f2,
                                        const PriorVars& priors) const {
  const ad::Var parts[] = {
      ad::mul_col(f1.data, priors.consistency),
      ad::mul_col(f2.data, priors.consistency),
      ad::mul_col(ad::abs(ad::sub(f1.data, f2.data)), priors.change),
      priors.change,
  };
  return ad::hconcat(parts);
}

GlobalEmbedding BiTemporalEncoder::fuse_global(ad::Tape& tape, const FeatureGrid& f1,
                                               const FeatureGrid& f2, const PriorVars& priors,
                                               bool training) const {
  ad::ScopeGuard scope(tape, "fusion");
  const ad::Var g[] = {fusion_input(f1, f2, priors)};
  auto out = (*head_)(tape, g, f1.height, f1.width, training);
  return GlobalEmbedding{out.front(), f1.height, f1.width};
}

EncoderOutput BiTemporalEncoder::encode(ad::Tape& tape, const Grid<double>& image1,
                                        const Grid<double>& image2, bool training) const {
  const std::pair<const Grid<double>*, const Grid<double>*> one[] = {{&image1, &image2}};
  return encode_batch(tape, one, training).front();
}

std::vector<EncoderOutput> BiTemporalEncoder::encode_batch(
    ad::Tape& tape, std::span<const std::pair<const Grid<double>*, const Grid<double>*>> pairs,
    bool training) const {
  std::vector<EncoderOutput> outs;
  std::vector<ad::Var> fusion_inputs;
  for (const auto& [a, b] : pairs) {
    EncoderOutput o;
    auto [f1, f2] = extract_features(tape, *a, *b);
    std::tie(o.refined1, o.refined2) = consistency_refine(tape, f1, f2);
    o.priors = compute_priors(tape, o.refined1, o.refined2);
    {
      ad::ScopeGuard scope(tape, "fusion");
      fusion_inputs.push_back(fusion_input(o.refined1, o.refined2, o.priors));
    }
    outs.push_back(std::move(o));
  }
  if (outs.empty()) return outs;
  ad::ScopeGuard scope(tape, "fusion");
  const int h = outs.front().refined1.height, w = outs.front().refined1.width;
  for (const auto& o : outs) {
    if (o.refined1.height != h || o.refined1.width != w) {
      throw ShapeError("encode_batch: samples in one batch must share image size");
    }
  }
  auto embedded = (*head_)(tape, fusion_inputs, h, w, training);
  for (size_t i = 0; i < outs.size(); ++i) {
    outs[i].embedding = GlobalEmbedding{embedded[i], h, w};
  }
  return outs;
}

}  // namespace sagecc
