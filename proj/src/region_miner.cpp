#include "sagecc/region_miner.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <numeric>

namespace sagecc {

int MinerConfig::effective_min_area(int height, int width) const {
  if (min_area >= 0) return min_area;
  const long pixels = static_cast<long>(height) * width;
  return static_cast<int>((pixels + 999) / 1000);
}

double mask_iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("mask_iou: mask shapes differ");
  long inter = 0, uni = 0;
  for (size_t i = 0; i < a.bits.size(); ++i) {
    inter += (a.bits[i] && b.bits[i]) ? 1 : 0;
    uni += (a.bits[i] || b.bits[i]) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

RegionProposal make_proposal(Mask mask, double score) {
  RegionProposal p;
  p.box = mask_box(mask);
  p.score = score;
  double sx = 0.0, sy = 0.0;
  for (int y = p.box.y0; y < p.box.y1; ++y) {
    for (int x = p.box.x0; x < p.box.x1; ++x) {
      if (!mask.at(y, x)) continue;
      ++p.area;
      sx += x + 0.5;
      sy += y + 0.5;
    }
  }
  p.cx = sx / static_cast<double>(p.area);
  p.cy = sy / static_cast<double>(p.area);
  p.mask = std::move(mask);
  return p;
}

std::vector<RegionProposal> filter_proposals(const SegmenterOutput& raw, int max_masks,
                                             int min_area, double nms_iou, double min_score) {
  if (max_masks < 1) throw ConfigError("filter_proposals: max_masks must be >= 1");
  if (raw.masks.size() != raw.scores.size()) {
    throw ShapeError("filter_proposals: masks and scores differ in length");
  }
  std::vector<size_t> order;
  for (size_t i = 0; i < raw.masks.size(); ++i) {
    if (raw.scores[i] < min_score) continue;
    if (raw.masks[i].popcount() < std::max(min_area, 1)) continue;
    order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return raw.scores[a] > raw.scores[b]; });
  std::vector<size_t> kept;
  for (size_t i : order) {
    bool suppressed = false;
    for (size_t k : kept) {
      if (mask_iou(raw.masks[i], raw.masks[k]) > nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(i);
    if (kept.size() == static_cast<size_t>(max_masks)) break;
  }
  std::vector<RegionProposal> out;
  out.reserve(kept.size());
  for (size_t i : kept) out.push_back(make_proposal(raw.masks[i], raw.scores[i]));
  return out;
}

Matrix matching_logits(const Matrix& desc1, const Matrix& centroids1, const Matrix& desc2,
                       const Matrix& centroids2, const MatchConfig& config) {
  const Index n1 = desc1.rows(), n2 = desc2.rows();
  auto normalized = [](const Matrix& m) {
    Matrix out = m;
    for (Index i = 0; i < out.rows(); ++i) {
      const double n = out.row(i).norm();
      out.row(i) = n < 1e-8 ? RowVector::Zero(out.cols()) : RowVector(out.row(i) / n);
    }
    return out;
  };
  auto encode = [&](const Matrix& c) {
    Matrix pe(c.rows(), config.pos_dim);
    for (Index i = 0; i < c.rows(); ++i) pe.row(i) = point_encoding<double>(c(i, 0), c(i, 1), config.pos_dim);
    return normalized(pe);
  };
  Matrix affinity = Matrix::Zero(n1, n2);
  if (n1 > 0 && n2 > 0) {
    affinity = 0.5 * normalized(desc1) * normalized(desc2).transpose() +
               0.5 * encode(centroids1) * encode(centroids2).transpose();
  }
  Matrix logits(n1 + 1, n2 + 1);
  logits.topLeftCorner(n1, n2) = affinity / config.temperature;
  logits.col(n2).setConstant(config.dustbin_affinity / config.temperature);
  logits.row(n1).setConstant(config.dustbin_affinity / config.temperature);
  return logits;
}

MatchResult threshold_matches(const Matrix& scores, double tau) {
  const Index n1 = scores.rows(), n2 = scores.cols();
  MatchResult r;
  r.scores = scores;
  r.matches.setZero(n1, n2);
  if (n1 > 0 && n2 > 0) {
    std::vector<Index> row_best(static_cast<size_t>(n1)), col_best(static_cast<size_t>(n2));
    for (Index i = 0; i < n1; ++i) scores.row(i).maxCoeff(&row_best[static_cast<size_t>(i)]);
    for (Index j = 0; j < n2; ++j) scores.col(j).maxCoeff(&col_best[static_cast<size_t>(j)]);
    for (Index i = 0; i < n1; ++i) {
      const Index j = row_best[static_cast<size_t>(i)];
      if (col_best[static_cast<size_t>(j)] == i && scores(i, j) > tau) r.matches(i, j) = 1;
    }
  }
  for (Index i = 0; i < n1; ++i) {
    if (n2 == 0 || r.matches.row(i).maxCoeff() == 0) r.unmatched1.push_back(static_cast<int>(i));
  }
  for (Index j = 0; j < n2; ++j) {
    if (n1 == 0 || r.matches.col(j).maxCoeff() == 0) r.unmatched2.push_back(static_cast<int>(j));
  }
  return r;
}

MatchResult match_regions(const Matrix& desc1, const Matrix& centroids1, const Matrix& desc2,
                          const Matrix& centroids2, const MatchConfig& config) {
  if (!(config.tau > 0.0 && config.tau < 1.0)) throw ConfigError("match_regions: tau must be in (0,1)");
  if (desc1.rows() > 0 && desc2.rows() > 0 && desc1.cols() != desc2.cols()) {
    throw ShapeError("match_regions: descriptor dims differ");
  }
  const Index n1 = desc1.rows(), n2 = desc2.rows();
  if (n1 == 0 || n2 == 0) return threshold_matches(Matrix::Zero(n1, n2), config.tau);
  const Matrix p = sinkhorn_dustbin<double>(
      matching_logits(desc1, centroids1, desc2, centroids2, config), config.sinkhorn_iters,
      config.sinkhorn_tol, config.sinkhorn_max_iters);
  return threshold_matches(p.topLeftCorner(n1, n2), config.tau);
}

Matrix RegionInputs::centroids() const {
  Matrix c(static_cast<Index>(proposals.size()), 2);
  for (size_t i = 0; i < proposals.size(); ++i) {
    c(static_cast<Index>(i), 0) = proposals[i].cx;
    c(static_cast<Index>(i), 1) = proposals[i].cy;
  }
  return c;
}

RegionInputs pool_regions(const Grid<double>& dense_features, int feature_stride,
                          std::vector<RegionProposal> proposals, const MinerConfig& config,
                          int image_height, int image_width) {
  if (!dense_features.data.allFinite()) throw InputError("describe_regions: non-finite features");
  RegionInputs in;
  in.image_height = image_height;
  in.image_width = image_width;
  const double scale = 1.0 / static_cast<double>(feature_stride);
  for (const auto& p : proposals) {
    Matrix roi = roi_align<double>(dense_features, p.box, scale, config.roi_size);
    in.pooled.push_back(adaptive_avg_pool<double>(roi, config.roi_size, config.pooled_size));
  }
  in.proposals = std::move(proposals);
  return in;
}

RegionInputs prepare_motion_inputs(const Image& image, const MaskSegmenter& segmenter,
                                   const MinerConfig& config) {
  SegmenterOutput raw = segmenter.segment_auto(image);
  auto proposals = filter_proposals(raw, config.max_masks,
                                    config.effective_min_area(image.height, image.width),
                                    config.nms_iou, config.min_score);
  return pool_regions(raw.dense_features, segmenter.feature_stride(), std::move(proposals), config,
                      image.height, image.width);
}

RegionInputs prepare_semantic_inputs(const Image& image, const PromptDetector& detector,
                                     const MaskSegmenter& segmenter, const MinerConfig& config) {
  if (config.prompts.empty()) throw ConfigError("semantic_change_repr: prompt list is empty");
  DetectionSet boxes = detector.detect(image, config.prompts);
  SegmenterOutput refined = segmenter.segment_boxes(image, boxes);
  std::vector<RegionProposal> proposals;
  for (size_t i = 0; i < refined.masks.size(); ++i) {
    if (refined.masks[i].popcount() == 0) continue;
    proposals.push_back(make_proposal(refined.masks[i], refined.scores[i]));
  }
  return pool_regions(refined.dense_features, segmenter.feature_stride(), std::move(proposals),
                      config, image.height, image.width);
}

Matrix DescriptorSet::values() const {
  if (count() == 0) return Matrix(0, 0);
  return vectors.value();
}

std::vector<int> select_top_q(const Matrix& similarity, int q) {
  if (q < 1) throw ConfigError("semantic_change_repr: q must be >= 1");
  std::vector<int> idx(static_cast<size_t>(similarity.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<double> best(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) best[i] = similarity.row(static_cast<Index>(i)).maxCoeff();
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return best[static_cast<size_t>(a)] > best[static_cast<size_t>(b)];
  });
  if (idx.size() > static_cast<size_t>(q)) idx.resize(static_cast<size_t>(q));
  return idx;
}

Matrix text_region_similarity(const Matrix& regions, const Matrix& text) {
  if (regions.cols() != text.cols()) {
    throw ShapeError("text_region_similarity: region dim " + std::to_string(regions.cols()) +
                     " != text dim " + std::to_string(text.cols()));
  }
  auto normalized = [](Matrix m) {
    for (Index i = 0; i < m.rows(); ++i) {
      const double n = m.row(i).norm();
      if (n > 1e-12) m.row(i) /= n;
    }
    return m;
  };
  return normalized(regions) * normalized(text).transpose();
}

RegionMiner::RegionMiner(nn::ParameterStore& store, const MinerConfig& config,
                         int feature_channels, nn::Rng& rng)
    : config_(config),
      head_conv_(store, "miner.head.conv", feature_channels, config.descriptor_dim, 3, 1, 0, rng),
      head_out_(store, "miner.head.out", config.descriptor_dim, config.descriptor_dim, rng) {
  if (config.pooled_size < 3) throw ConfigError("region miner: pooled size must be >= 3");
  if (config.pooling != "mean" && config.pooling != "attention") {
    throw ConfigError("region miner: unknown pooling '" + config.pooling + "'");
  }
  if (config.matcher != "sinkhorn" && config.matcher != "superglue") {
    throw ConfigError("region miner: unknown matcher '" + config.matcher + "'");
  }
  const int enriched = config.descriptor_dim + config.pos_dim;
  if (config.motion) no_change_ = &store.normal("miner.no_change", 1, enriched, 0.02, rng);
  if (config.semantic) {
    null_semantic_ = &store.normal("miner.null_semantic", 1, config.descriptor_dim, 0.02, rng);
  }
  if (config.motion && config.pooling == "attention") {
    pool_query_ = &store.normal("miner.pool_query", enriched, 1, 0.02, rng);
  }
}

MatchConfig RegionMiner::match_config() const {
  return MatchConfig{config_.tau,         config_.sinkhorn_iters, config_.sinkhorn_tol,
                     config_.sinkhorn_max_iters, config_.temperature, config_.dustbin_affinity,
                     config_.pos_dim};
}

ad::Var RegionMiner::describe_block(ad::Tape& tape, const Matrix& pooled) const {
  const int s = config_.pooled_size;
  int oh = 0, ow = 0;
  ad::Var x = ad::relu(head_conv_(tape, tape.constant(pooled, "roi"), s, s, &oh, &ow));
  return head_out_(tape, ad::mean_rows(x));
}

DescriptorSet RegionMiner::describe_regions(ad::Tape& tape, const RegionInputs& inputs,
                                            int epoch) const {
  DescriptorSet d;
  d.epoch = epoch;
  d.centroids = inputs.centroids();
  if (inputs.size() == 0) return d;
  std::vector<ad::Var> rows;
  rows.reserve(inputs.size());
  for (const auto& block : inputs.pooled) rows.push_back(describe_block(tape, block));
  d.vectors = rows.size() == 1 ? rows.front() : ad::vconcat(rows);
  return d;
}

DescriptorSet RegionMiner::describe_regions(ad::Tape& tape, const Grid<double>& dense_features,
                                            int feature_stride,
                                            std::span<const RegionProposal> proposals,
                                            int image_height, int image_width) const {
  if (proposals.empty()) throw InputError("describe_regions: no proposals");
  RegionInputs in = pool_regions(dense_features, feature_stride,
                                 {proposals.begin(), proposals.end()}, config_, image_height,
                                 image_width);
  return describe_regions(tape, in, 1);
}

MatchResult RegionMiner::match(const DescriptorSet& d1, const DescriptorSet& d2) const {
  if (config_.matcher == "superglue") {
    throw BackendUnavailable("region miner: superglue matcher requires the real backend");
  }
  return match_regions(d1.values(), d1.centroids, d2.values(), d2.centroids, match_config());
}

MatchResult RegionMiner::all_unmatched(Index n1, Index n2) {
  MatchResult r;
  r.scores = Matrix::Zero(n1, n2);
  r.matches.setZero(n1, n2);
  for (Index i = 0; i < n1; ++i) r.unmatched1.push_back(static_cast<int>(i));
  for (Index j = 0; j < n2; ++j) r.unmatched2.push_back(static_cast<int>(j));
  return r;
}

ad::Var RegionMiner::pool_set(ad::Tape& tape, const ad::Var& rows) const {
  if (config_.pooling == "mean") return ad::mean_rows(rows);
  ad::Var weights = ad::softmax_rows(
      ad::transpose(ad::matmul(rows, tape.parameter(*pool_query_))));
  return ad::matmul(weights, rows);
}

ad::Var RegionMiner::motion_change_repr(ad::Tape& tape, const MatchResult& match,
                                        const DescriptorSet& d1, const DescriptorSet& d2) const {
  if (!config_.motion) throw ConfigError("region miner: motion level disabled");
  ad::ScopeGuard scope(tape, "motion");
  auto half = [&](const DescriptorSet& d, const std::vector<int>& unmatched) {
    if (unmatched.empty()) return no_change(tape);
    for (int i : unmatched) {
      if (i < 0 || i >= d.count()) throw ShapeError("motion_change_repr: index out of range");
    }
    Matrix pe(static_cast<Index>(unmatched.size()), config_.pos_dim);
    for (size_t k = 0; k < unmatched.size(); ++k) {
      const auto i = static_cast<Index>(unmatched[k]);
      pe.row(static_cast<Index>(k)) =
          point_encoding<double>(d.centroids(i, 0), d.centroids(i, 1), config_.pos_dim);
    }
    const ad::Var parts[] = {ad::gather_rows(d.vectors, unmatched), tape.constant(pe, "centroid_pe")};
    return pool_set(tape, ad::hconcat(parts));
  };
  const ad::Var halves[] = {half(d1, match.unmatched1), half(d2, match.unmatched2)};
  return ad::hconcat(halves);
}

ad::Var RegionMiner::semantic_change_repr(ad::Tape& tape, const RegionInputs& image1,
                                          const RegionInputs& image2,
                                          const Matrix& text_embeddings,
                                          std::vector<int>* selected1,
                                          std::vector<int>* selected2) const {
  if (!config_.semantic) throw ConfigError("region miner: semantic level disabled");
  ad::ScopeGuard scope(tape, "semantic");
  auto half = [&](const RegionInputs& in, int epoch, std::vector<int>* selected) {
    if (selected) selected->clear();
    if (in.size() == 0) return null_semantic(tape);
    DescriptorSet d = describe_regions(tape, in, epoch);
    std::vector<int> top =
        select_top_q(text_region_similarity(d.vectors.value(), text_embeddings), config_.q);
    if (selected) *selected = top;
    return ad::mean_rows(ad::gather_rows(d.vectors, top));
  };
  const ad::Var halves[] = {half(image1, 1, selected1), half(image2, 2, selected2)};
  return ad::hconcat(halves);
}

ad::Var RegionMiner::semantic_change_repr(ad::Tape& tape, const Image& image1,
                                          const Image& image2, const PromptDetector& detector,
                                          const MaskSegmenter& segmenter,
                                          const TextEncoder& text) const {
  RegionInputs a = prepare_semantic_inputs(image1, detector, segmenter, config_);
  RegionInputs b = prepare_semantic_inputs(image2, detector, segmenter, config_);
  return semantic_change_repr(tape, a, b, text.embed(config_.prompts));
}

void dump_region_debug(const std::string& dir, const RegionInputs& image1,
                       const RegionInputs& image2, const MatchResult& match) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto dump = [&](const RegionInputs& in, int epoch) {
    for (size_t i = 0; i < in.size(); ++i) {
      write_mask_png((fs::path(dir) / ("mask_t" + std::to_string(epoch) + "_" +
                                       std::to_string(i) + ".png"))
                         .string(),
                     in.proposals[i].mask);
    }
  };
  dump(image1, 1);
  dump(image2, 2);
  nlohmann::json lines = nlohmann::json::array();
  for (Index i = 0; i < match.matches.rows(); ++i) {
    for (Index j = 0; j < match.matches.cols(); ++j) {
      if (!match.matches(i, j)) continue;
      const auto& a = image1.proposals[static_cast<size_t>(i)];
      const auto& b = image2.proposals[static_cast<size_t>(j)];
      lines.push_back({{"from", {a.cx, a.cy}}, {"to", {b.cx, b.cy}},
                       {"i", i}, {"j", j}, {"score", match.scores(i, j)}});
    }
  }
  nlohmann::json doc = {{"matches", lines},
                        {"unmatched_1", match.unmatched1},
                        {"unmatched_2", match.unmatched2},
                        {"masks_1", image1.size()},
                        {"masks_2", image2.size()}};
  std::ofstream(fs::path(dir) / "matches.json") << doc.dump(2) << '\n';
}

}  // namespace sagecc
