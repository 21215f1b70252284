#include "doctest.h"

#include "sagecc/region_miner.hpp"
#include "support.hpp"

#include <algorithm>
#include <numeric>

using namespace sagecc;
using sagecc::testing::random_matrix;

namespace {

Mask pixel_block(int h, int w, int x0, int y0, int bw, int bh) {
  Mask m(h, w);
  for (int y = y0; y < y0 + bh; ++y) {
    for (int x = x0; x < x0 + bw; ++x) m.set(y, x);
  }
  return m;
}

MinerConfig small_config() {
  MinerConfig c;
  c.descriptor_dim = 6;
  c.pos_dim = 4;
  c.roi_size = 7;
  c.pooled_size = 7;
  return c;
}

// Probability-domain Sinkhorn with the same marginals, for comparison.
Matrix sinkhorn_oracle(const Matrix& logits, int iters) {
  const Index r = logits.rows(), c = logits.cols();
  Vector a = Vector::Ones(r), b = Vector::Ones(c);
  a(r - 1) = static_cast<double>(c - 1);
  b(c - 1) = static_cast<double>(r - 1);
  const Matrix k = logits.array().exp().matrix();
  Vector u = Vector::Ones(r), v = Vector::Ones(c);
  for (int it = 0; it < iters; ++it) {
    u = a.cwiseQuotient(k * v);
    v = b.cwiseQuotient(k.transpose() * u);
  }
  return u.asDiagonal() * k * v.asDiagonal();
}

DescriptorSet make_set(ad::Tape& t, const Matrix& vectors, const Matrix& centroids, int epoch) {
  DescriptorSet d;
  d.vectors = t.constant(vectors);
  d.centroids = centroids;
  d.epoch = epoch;
  return d;
}

RowVector enriched(const Matrix& vectors, const Matrix& centroids, Index i, int pos_dim) {
  RowVector out(vectors.cols() + pos_dim);
  out << vectors.row(i), point_encoding<double>(centroids(i, 0), centroids(i, 1), pos_dim);
  return out;
}

}  // namespace

TEST_CASE("default knobs") {
  const MinerConfig c;
  CHECK(c.tau == 0.2);
  CHECK(c.max_masks == 50);
  CHECK(c.q >= 1);
  CHECK(c.prompts == std::vector<std::string>{"building", "road", "vegetation"});
  CHECK(c.effective_min_area(64, 64) == 5);
}

TEST_CASE("proposal filtering: nms, top-k and area") {
  SegmenterOutput raw;
  const Mask m = pixel_block(16, 16, 2, 2, 4, 4);
  raw.masks = {m, m};
  raw.scores = {0.8, 0.9};
  auto kept = filter_proposals(raw, 50, 1, 0.5, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);
  CHECK(kept[0].box == Box{2, 2, 6, 6});
  CHECK(kept[0].area == 16);
  CHECK(kept[0].cx == doctest::Approx(4.0));

  SegmenterOutput many;
  for (int i = 0; i < 60; ++i) {
    many.masks.push_back(pixel_block(8, 8, i % 8, i / 8, 1, 1));
    many.scores.push_back(0.5 + 0.008 * ((i * 37) % 60));
  }
  kept = filter_proposals(many, 50, 1, 0.7, 0.5);
  REQUIRE(kept.size() == 50);
  std::vector<double> sorted = many.scores;
  std::sort(sorted.rbegin(), sorted.rend());
  for (size_t i = 0; i < kept.size(); ++i) CHECK(kept[i].score == sorted[i]);

  SegmenterOutput tiny;
  tiny.masks = {pixel_block(16, 16, 0, 0, 3, 1), pixel_block(16, 16, 5, 5, 4, 4)};
  tiny.scores = {0.9, 0.9};
  kept = filter_proposals(tiny, 50, 10, 0.7, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].area == 16);
}

TEST_CASE("constant feature field pools to a constant block") {
  nn::Rng rng(1);
  nn::ParameterStore store;
  const MinerConfig cfg = small_config();
  RegionMiner miner(store, cfg, 3, rng);
  Grid<double> feats;
  feats.height = 4;
  feats.width = 4;
  feats.data = Matrix::Zero(16, 3);
  feats.data.rowwise() = RowVector{{0.3, -1.0, 2.0}};
  std::vector<RegionProposal> props = {make_proposal(pixel_block(16, 16, 0, 0, 16, 16), 1.0),
                                       make_proposal(pixel_block(16, 16, 0, 0, 16, 16), 1.0)};
  const RegionInputs in = pool_regions(feats, 4, props, cfg, 16, 16);
  for (Index i = 0; i < in.pooled[0].rows(); ++i) CHECK(in.pooled[0].row(i) == feats.data.row(0));
  ad::Tape t;
  const DescriptorSet d = miner.describe_regions(t, in, 1);
  const Matrix direct = miner.describe_block(t, in.pooled[0]).value();
  CHECK(d.values().row(0) == direct);
  CHECK(d.values().row(1) == direct);
}

TEST_CASE("single-cell feature grid broadcasts and matches a direct head evaluation") {
  nn::Rng rng(2);
  nn::ParameterStore store;
  const MinerConfig cfg = small_config();
  RegionMiner miner(store, cfg, 3, rng);
  Grid<double> feats;
  feats.height = 1;
  feats.width = 1;
  feats.data = random_matrix(1, 3, rng);
  const std::vector<RegionProposal> props = {make_proposal(pixel_block(4, 4, 1, 2, 2, 1), 1.0)};
  ad::Tape t;
  const DescriptorSet d = miner.describe_regions(t, feats, 4, props, 4, 4);

  // Every 3x3 valid window sees the same cell, so the conv output is constant.
  const Matrix& wc = store.at("miner.head.conv.weight").value;
  RowVector h = store.at("miner.head.conv.bias").value;
  for (int tap = 0; tap < 9; ++tap) h += feats.data.row(0) * wc.middleRows(tap * 3, 3);
  h = h.cwiseMax(0.0);
  const RowVector expected = h * store.at("miner.head.out.weight").value + store.at("miner.head.out.bias").value;
  CHECK((d.values().row(0) - expected).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(miner.describe_regions(t, feats, 4, {}, 4, 4), InputError);
}

TEST_CASE("matching: self-match, empty side and swap symmetry") {
  nn::Rng rng(3);
  const MatchConfig cfg;
  Matrix desc = Matrix::Identity(3, 6) + 0.1 * random_matrix(3, 6, rng);
  Matrix cent(3, 2);
  cent << 5, 5, 40, 10, 20, 50;
  const MatchResult self = match_regions(desc, cent, desc, cent, cfg);
  for (Index i = 0; i < 3; ++i) {
    for (Index j = 0; j < 3; ++j) CHECK(self.matches(i, j) == (i == j ? 1 : 0));
  }
  CHECK(self.unmatched1.empty());
  CHECK(self.unmatched2.empty());

  const MatchResult empty = match_regions(desc, cent, Matrix(0, 6), Matrix(0, 2), cfg);
  CHECK(empty.unmatched1 == std::vector<int>{0, 1, 2});
  CHECK(empty.unmatched2.empty());
  const MatchResult empty2 = match_regions(Matrix(0, 6), Matrix(0, 2), desc, cent, cfg);
  CHECK(empty2.unmatched1.empty());
  CHECK(empty2.unmatched2 == std::vector<int>{0, 1, 2});

  const Matrix d2 = random_matrix(4, 6, rng);
  Matrix c2(4, 2);
  c2 << 5, 6, 30, 30, 60, 2, 20, 48;
  const MatchResult ab = match_regions(desc, cent, d2, c2, cfg);
  const MatchResult ba = match_regions(d2, c2, desc, cent, cfg);
  CHECK((ab.scores - ba.scores.transpose()).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(ab.matches == ba.matches.transpose());
  CHECK(ab.unmatched1 == ba.unmatched2);
  CHECK(ab.unmatched2 == ba.unmatched1);

  MatchConfig bad;
  bad.tau = 1.0;
  CHECK_THROWS_AS(match_regions(desc, cent, desc, cent, bad), ConfigError);
}

TEST_CASE("sinkhorn agrees with a probability-domain oracle and meets its marginals") {
  Matrix desc(2, 3), desc2(2, 3);
  desc << 1, 0, 0, 0, 1, 0.2;
  desc2 << 0.9, 0.1, 0, 0.3, 0.8, 0;
  Matrix cent(2, 2), cent2(2, 2);
  cent << 4, 4, 20, 12;
  cent2 << 5, 4, 18, 14;
  const MatchConfig cfg;
  const Matrix logits = matching_logits(desc, cent, desc2, cent2, cfg);
  REQUIRE(logits.rows() == 3);
  // Fixed sweep count against the oracle, then the converged default.
  const Matrix fixed = sinkhorn_dustbin<double>(logits, 20);
  CHECK((fixed - sinkhorn_oracle(logits, 20)).cwiseAbs().maxCoeff() < 1e-10);
  const Matrix p = sinkhorn_dustbin<double>(logits, cfg.sinkhorn_iters, cfg.sinkhorn_tol, cfg.sinkhorn_max_iters);
  CHECK((p - sinkhorn_oracle(logits, 200)).cwiseAbs().maxCoeff() < 1e-8);
  for (Index i = 0; i < 2; ++i) {
    CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-6);
    CHECK(std::abs(p.col(i).sum() - 1.0) < 1e-6);
  }
  const MatchResult r = match_regions(desc, cent, desc2, cent2, cfg);
  CHECK((r.scores - p.topLeftCorner(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("random sinkhorn problems meet their marginals") {
  nn::Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const int n1 = 1 + trial % 5, n2 = 1 + (trial * 3) % 6;
    const Matrix logits =
        matching_logits(random_matrix(n1, 8, rng), 64.0 * random_matrix(n1, 2, rng).cwiseAbs(),
                        random_matrix(n2, 8, rng), 64.0 * random_matrix(n2, 2, rng).cwiseAbs(),
                        MatchConfig{});
    const Matrix p = sinkhorn_dustbin<double>(logits, 20, 1e-9, 1000);
    for (Index i = 0; i < n1; ++i) CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-6);
    for (Index j = 0; j < n2; ++j) CHECK(std::abs(p.col(j).sum() - 1.0) < 1e-6);
    CHECK((p.array() >= 0.0).all());
  }
}

TEST_CASE("motion change representation") {
  nn::Rng rng(5);
  nn::ParameterStore store;
  const MinerConfig cfg = small_config();
  RegionMiner miner(store, cfg, 3, rng);
  ad::Tape t;
  const Matrix v1 = random_matrix(3, 6, rng), v2 = random_matrix(2, 6, rng);
  Matrix c1(3, 2), c2(2, 2);
  c1 << 1, 2, 10, 3, 7, 7;
  c2 << 4, 4, 9, 1;
  const DescriptorSet d1 = make_set(t, v1, c1, 1), d2 = make_set(t, v2, c2, 2);
  const Matrix nc = store.at("miner.no_change").value;

  MatchResult none = RegionMiner::all_unmatched(3, 2);
  none.unmatched1.clear();
  none.unmatched2.clear();
  Matrix f = miner.motion_change_repr(t, none, d1, d2).value();
  REQUIRE(f.cols() == cfg.motion_dim());
  CHECK(f.leftCols(10) == nc);
  CHECK(f.rightCols(10) == nc);

  MatchResult one = none;
  one.unmatched2 = {1};
  f = miner.motion_change_repr(t, one, d1, d2).value();
  CHECK(f.leftCols(10) == nc);
  CHECK((f.rightCols(10) - enriched(v2, c2, 1, 4)).cwiseAbs().maxCoeff() == 0.0);

  const MatchResult all = RegionMiner::all_unmatched(3, 2);
  f = miner.motion_change_repr(t, all, d1, d2).value();
  RowVector sum = RowVector::Zero(10);
  for (Index i = 0; i < 3; ++i) sum += enriched(v1, c1, i, 4);
  CHECK((f.leftCols(10) - sum / 3.0).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("top-q selection equals an argsort of row maxima") {
  Matrix s(5, 3);
  s << 0.1, 0.7, 0.2,
       0.9, 0.0, 0.1,
       0.3, 0.3, 0.3,
       0.0, 0.2, 0.8,
       0.5, 0.6, 0.1;
  std::vector<int> order(5);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return s.row(a).maxCoeff() > s.row(b).maxCoeff(); });
  order.resize(3);
  CHECK(select_top_q(s, 3) == order);
  CHECK(select_top_q(s, 10).size() == 5);
  CHECK_THROWS_AS(select_top_q(s, 0), ConfigError);

  nn::Rng rng(6);
  const Matrix text = random_matrix(3, 4, rng);
  Matrix regions = random_matrix(4, 4, rng);
  regions.row(2) = 2.5 * text.row(1);
  const Matrix sim = text_region_similarity(regions, text);
  CHECK(sim(2, 1) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(select_top_q(sim, 1) == std::vector<int>{2});
  CHECK_THROWS_AS(text_region_similarity(regions, random_matrix(3, 5, rng)), ShapeError);
}

TEST_CASE("semantic representation falls back to the null embedding") {
  nn::Rng rng(7);
  nn::ParameterStore store;
  MinerConfig cfg = small_config();
  RegionMiner miner(store, cfg, 3, rng);
  ad::Tape t;
  RegionInputs none;
  const Matrix f = miner.semantic_change_repr(t, none, none, random_matrix(3, 6, rng)).value();
  const Matrix ns = store.at("miner.null_semantic").value;
  REQUIRE(f.cols() == 12);
  CHECK(f.leftCols(6) == ns);
  CHECK(f.rightCols(6) == ns);
}

TEST_CASE("disabled levels create no parameters and refuse to run") {
  nn::Rng rng(8);
  nn::ParameterStore store;
  MinerConfig cfg = small_config();
  cfg.motion = false;
  cfg.semantic = false;
  RegionMiner miner(store, cfg, 3, rng);
  CHECK(store.find("miner.no_change") == nullptr);
  CHECK(store.find("miner.null_semantic") == nullptr);
  ad::Tape t;
  RegionInputs none;
  CHECK_THROWS_AS(miner.semantic_change_repr(t, none, none, Matrix::Zero(1, 6)), ConfigError);
  const DescriptorSet d = make_set(t, Matrix::Zero(1, 6), Matrix::Zero(1, 2), 1);
  CHECK_THROWS_AS(miner.motion_change_repr(t, RegionMiner::all_unmatched(1, 1), d, d), ConfigError);
}
