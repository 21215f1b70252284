#include "doctest.h"

#include "sagecc/graph_reasoner.hpp"
#include "support.hpp"

#include <numeric>
#include <random>

using namespace sagecc;
using sagecc::testing::grad_check;
using sagecc::testing::random_matrix;

namespace {

ChangeKG make_kg(int nodes, int relations, const std::vector<std::array<int, 3>>& edges) {
  ChangeKG kg;
  for (int i = 0; i < nodes; ++i) kg.entities.push_back("e" + std::to_string(i));
  for (int r = 0; r < relations; ++r) kg.relations.push_back("r" + std::to_string(r));
  kg.a_conn.resize(2, static_cast<Index>(edges.size()));
  kg.a_type.resize(static_cast<Index>(edges.size()));
  for (size_t k = 0; k < edges.size(); ++k) {
    kg.a_conn(0, static_cast<Index>(k)) = edges[k][0];
    kg.a_conn(1, static_cast<Index>(k)) = edges[k][2];
    kg.a_type(static_cast<Index>(k)) = edges[k][1];
    kg.frequency.push_back(1);
  }
  return kg;
}

ChangeKG random_kg(std::mt19937_64& rng, int nodes, int relations, int edges) {
  std::vector<std::array<int, 3>> e;
  for (int k = 0; k < edges; ++k) {
    e.push_back({static_cast<int>(rng() % nodes), static_cast<int>(rng() % relations),
                 static_cast<int>(rng() % nodes)});
  }
  return make_kg(nodes, relations, e);
}

ReasonerConfig micro(int dim = 4, int layers = 2) {
  ReasonerConfig c;
  c.hidden = dim;
  c.out_dim = dim;
  c.layers = layers;
  return c;
}

void randomize(nn::ParameterStore& store, nn::Rng& rng) {
  for (Parameter* p : store.all()) p->value = random_matrix(p->value.rows(), p->value.cols(), rng, 0.6);
}

// Loops over every (node, relation, in-neighbour) triple.
Matrix message_oracle(const GraphReasoner& g, const ChangeKG& kg, Matrix h) {
  const Index n = h.rows();
  for (int l = 0; l < g.config().layers; ++l) {
    const Matrix& w0 = g.self_weight(l).value;
    Matrix next(n, h.cols());
    for (Index i = 0; i < n; ++i) {
      RowVector acc = h.row(i) * w0;
      for (int r = 0; r < g.num_relations(); ++r) {
        std::vector<Index> nbrs;
        for (Index e = 0; e < kg.edges(); ++e) {
          if (kg.a_conn(1, e) == i && kg.a_type(e) == r) nbrs.push_back(kg.a_conn(0, e));
        }
        for (Index j : nbrs) {
          acc += (h.row(j) * g.relation_weight(l, r).value) / static_cast<double>(nbrs.size());
        }
      }
      next.row(i) = acc.cwiseMax(0.0);
    }
    h = next;
  }
  return h;
}

}  // namespace

TEST_CASE("zero-edge graph reduces to the self loop") {
  nn::Rng rng(1);
  nn::ParameterStore store;
  GraphReasoner g(store, micro(4, 1), 4, 2, rng);
  const ChangeKG kg = make_kg(3, 2, {});
  ad::Tape t;
  const Matrix h = random_matrix(3, 4, rng);
  const Matrix out = g.rgcn_forward(t, t.constant(h), kg).value();
  CHECK(out == (h * g.self_weight(0).value).cwiseMax(0.0));
}

TEST_CASE("single edge with identity relation weight") {
  nn::Rng rng(2);
  nn::ParameterStore store;
  GraphReasoner g(store, micro(3, 1), 3, 1, rng);
  g.self_weight(0).value.setZero();
  g.relation_weight(0, 0).value.setIdentity();
  const Matrix h = (Matrix(2, 3) << 0.5, -1.0, 2.0, 3.0, 1.0, -4.0).finished();
  ad::Tape t;
  const Matrix fwd = g.rgcn_forward(t, t.constant(h), make_kg(2, 1, {{0, 0, 1}})).value();
  CHECK(fwd.row(0).isZero(0.0));
  CHECK(fwd.row(1) == h.row(0).cwiseMax(0.0));
  // Reversed edge: the roles swap.
  const Matrix rev = g.rgcn_forward(t, t.constant(h), make_kg(2, 1, {{1, 0, 0}})).value();
  CHECK(rev.row(1).isZero(0.0));
  CHECK(rev.row(0) == h.row(1).cwiseMax(0.0));
}

TEST_CASE("message passing matches a triple-loop oracle on random graphs") {
  std::mt19937_64 gen(3);
  nn::Rng rng(3);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int nodes = trial == 0 ? 5 : 1 + static_cast<int>(gen() % 7);
    const int rels = trial == 0 ? 2 : 1 + static_cast<int>(gen() % 3);
    const ChangeKG kg = random_kg(gen, nodes, rels, static_cast<int>(gen() % 12));
    nn::ParameterStore store;
    GraphReasoner g(store, micro(5, 2), 5, rels, rng);
    randomize(store, rng);
    const Matrix h = random_matrix(nodes, 5, rng);
    ad::Tape t;
    const Matrix out = g.rgcn_forward(t, t.constant(h), kg).value();
    worst = std::max(worst, (out - message_oracle(g, kg, h)).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("relation adjacency normalizes by per-relation in-degree") {
  const ChangeKG kg = make_kg(3, 2, {{0, 0, 2}, {1, 0, 2}, {1, 1, 2}});
  const auto a = relation_adjacency(kg, 2);
  CHECK(a[0](2, 0) == 0.5);
  CHECK(a[0](2, 1) == 0.5);
  CHECK(a[1](2, 1) == 1.0);
  CHECK(a[1].sum() == 1.0);
}

TEST_CASE("identity projection and mean readout") {
  nn::Rng rng(4);
  nn::ParameterStore store;
  ReasonerConfig cfg = micro(6, 1);
  cfg.identity_projection = true;
  GraphReasoner g(store, cfg, 6, 1, rng);
  ad::Tape t;
  const Matrix e = random_matrix(3, 6, rng);
  CHECK(g.init_nodes(t, e).value() == e);
  const Matrix r = g.readout(t, t.constant(e)).value();
  CHECK((r - (e.row(0) + e.row(1) + e.row(2)) / 3.0).cwiseAbs().maxCoeff() < 1e-15);

  AdapterConfig acfg;
  acfg.text_dim = 6;
  MockTextEncoder text(acfg);
  ChangeKG kg = make_kg(7, 1, {{0, 0, 1}});
  const Matrix nodes = g.init_nodes(t, kg, text).value();
  CHECK(nodes.rows() == 7);
  CHECK(nodes == text.embed(kg.entities));
  CHECK_THROWS_AS(g.init_nodes(t, ChangeKG{}, text), EmptyGraphError);

  nn::ParameterStore s2;
  ReasonerConfig proj = micro(16, 2);
  GraphReasoner g2(s2, proj, 32, 1, rng);
  CHECK(g2.init_nodes(t, random_matrix(7, 32, rng)).value().cols() == 16);
  nn::ParameterStore s3;
  CHECK_THROWS_AS(GraphReasoner(s3, cfg, 32, 1, rng), ConfigError);
}

TEST_CASE("single node readout is the projection of its state") {
  nn::Rng rng(5);
  nn::ParameterStore store;
  GraphReasoner g(store, micro(4, 1), 4, 1, rng);
  ad::Tape t;
  const Matrix h = random_matrix(1, 4, rng);
  const Matrix out = g.readout(t, t.constant(h)).value();
  const Matrix expected = h * store.at("graph.output.weight").value + store.at("graph.output.bias").value;
  CHECK((out - expected).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("node relabeling: equivariant states, invariant readout") {
  std::mt19937_64 gen(6);
  nn::Rng rng(6);
  nn::ParameterStore store;
  GraphReasoner g(store, micro(4, 2), 4, 2, rng);
  const ChangeKG kg = random_kg(gen, 6, 2, 9);
  std::vector<int> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  ChangeKG pk = kg;
  for (Index e = 0; e < kg.edges(); ++e) {
    pk.a_conn(0, e) = perm[static_cast<size_t>(kg.a_conn(0, e))];
    pk.a_conn(1, e) = perm[static_cast<size_t>(kg.a_conn(1, e))];
  }
  const Matrix emb = random_matrix(6, 4, rng);
  Matrix pemb(6, 4);
  for (int i = 0; i < 6; ++i) pemb.row(perm[static_cast<size_t>(i)]) = emb.row(i);

  ad::Tape t;
  const Matrix h = g.rgcn_forward(t, g.init_nodes(t, emb), kg).value();
  const Matrix ph = g.rgcn_forward(t, g.init_nodes(t, pemb), pk).value();
  for (int i = 0; i < 6; ++i) {
    CHECK((h.row(i) - ph.row(perm[static_cast<size_t>(i)])).cwiseAbs().maxCoeff() < 1e-12);
  }
  // Readout on exactly permuted rows is bit-identical.
  Matrix hp(6, 4);
  for (int i = 0; i < 6; ++i) hp.row(perm[static_cast<size_t>(i)]) = h.row(i);
  CHECK(g.readout(t, t.constant(h)).value() == g.readout(t, t.constant(hp)).value());
  CHECK((g.forward(t, emb, kg).value() - g.forward(t, pemb, pk).value()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradients through two layers and readout") {
  std::mt19937_64 gen(7);
  nn::Rng rng(7);
  for (const char* readout : {"mean", "attention"}) {
    nn::ParameterStore store;
    ReasonerConfig cfg = micro(5, 2);
    cfg.readout = readout;
    GraphReasoner g(store, cfg, 6, 2, rng);
    const ChangeKG kg = random_kg(gen, 5, 2, 8);
    const Matrix emb = random_matrix(5, 6, rng);
    const Matrix w = random_matrix(1, 5, rng);
    auto loss = [&](ad::Tape& t) {
      ad::Var f = g.forward(t, emb, kg);
      return ad::sum_all(ad::mul(ad::mul(f, f), t.constant(w)));
    };
    const auto r = grad_check(store, loss);
    CHECK(r.checked > 50);
    CHECK_MESSAGE(r.max_rel_error < 1e-5, readout, " ", r.worst);
  }
}

TEST_CASE("gcn variant shares one weight across relations") {
  nn::Rng rng(8);
  nn::ParameterStore store;
  ReasonerConfig cfg = micro(4, 2);
  cfg.encoder = "gcn";
  GraphReasoner g(store, cfg, 4, 3, rng);
  CHECK(&g.relation_weight(0, 0) == &g.relation_weight(0, 2));
  nn::ParameterStore s2;
  cfg.encoder = "gat";
  CHECK_THROWS_AS(GraphReasoner(s2, cfg, 4, 3, rng), ConfigError);
}
