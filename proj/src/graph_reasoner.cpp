#include "sagecc/graph_reasoner.hpp"

namespace sagecc {

std::vector<Matrix> relation_adjacency(const ChangeKG& kg, int num_relations) {
  const auto n = static_cast<Index>(kg.entities.size());
  std::vector<Matrix> a(static_cast<size_t>(num_relations), Matrix::Zero(n, n));
  for (Index j = 0; j < kg.edges(); ++j) {
    const int r = kg.a_type(j);
    if (r < 0 || r >= num_relations) {
      throw ShapeError("relation_adjacency: relation index " + std::to_string(r) +
                       " outside the " + std::to_string(num_relations) + " configured relations");
    }
    const int src = kg.a_conn(0, j), dst = kg.a_conn(1, j);
    if (src < 0 || src >= n || dst < 0 || dst >= n) throw ShapeError("relation_adjacency: bad entity index");
    a[static_cast<size_t>(r)](dst, src) += 1.0;
  }
  for (auto& m : a) {
    for (Index i = 0; i < n; ++i) {
      const double c = m.row(i).sum();
      if (c > 0.0) m.row(i) /= c;
    }
  }
  return a;
}

GraphReasoner::GraphReasoner(nn::ParameterStore& store, const ReasonerConfig& config,
                             int text_dim, int num_relations, nn::Rng& rng)
    : config_(config), num_relations_(num_relations) {
  if (config.layers < 1) throw ConfigError("graph reasoner: layers must be >= 1");
  if (num_relations < 1) throw ConfigError("graph reasoner: need at least one relation");
  if (config.encoder != "rgcn" && config.encoder != "gcn") {
    throw ConfigError("graph reasoner: unsupported encoder '" + config.encoder + "'");
  }
  if (config.readout != "mean" && config.readout != "attention") {
    throw ConfigError("graph reasoner: unknown readout '" + config.readout + "'");
  }
  const int h = config.hidden;
  if (config.identity_projection) {
    if (text_dim != h || config.out_dim != h) {
      throw ConfigError("graph reasoner: identity projection needs text_dim == hidden == out_dim");
    }
  } else {
    input_ = nn::Linear(store, "graph.input", text_dim, h, rng, false);
    output_ = nn::Linear(store, "graph.output", h, config.out_dim, rng);
  }
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = "graph.layer" + std::to_string(l);
    self_.push_back(&store.xavier(p + ".self", h, h, rng));
    std::vector<Parameter*> rel;
    if (config.encoder == "gcn") {
      rel.push_back(&store.xavier(p + ".shared", h, h, rng));
    } else {
      for (int r = 0; r < num_relations; ++r) {
        rel.push_back(&store.xavier(p + ".rel" + std::to_string(r), h, h, rng));
      }
    }
    relation_.push_back(std::move(rel));
  }
  if (config.readout == "attention") query_ = &store.normal("graph.readout_query", h, 1, 0.1, rng);
}

Parameter& GraphReasoner::relation_weight(int layer, int relation) const {
  const auto& rel = relation_[static_cast<size_t>(layer)];
  return *rel[config_.encoder == "gcn" ? 0 : static_cast<size_t>(relation)];
}

ad::Var GraphReasoner::init_nodes(ad::Tape& tape, const Matrix& entity_embeddings) const {
  if (entity_embeddings.rows() == 0) throw EmptyGraphError("init_nodes: graph has no entities");
  ad::Var raw = tape.constant(entity_embeddings, "entity_text");
  return config_.identity_projection ? raw : input_(tape, raw);
}

ad::Var GraphReasoner::init_nodes(ad::Tape& tape, const ChangeKG& kg,
                                  const TextEncoder& text) const {
  if (kg.empty()) throw EmptyGraphError("init_nodes: graph has no entities");
  return init_nodes(tape, text.embed(kg.entities));
}

ad::Var GraphReasoner::rgcn_forward(ad::Tape& tape, const ad::Var& states,
                                    const ChangeKG& kg) const {
  if (states.rows() != static_cast<Index>(kg.entities.size())) {
    throw ShapeError("rgcn_forward: state rows do not match entity count");
  }
  const auto adjacency = relation_adjacency(kg, num_relations_);
  std::vector<ad::Var> a;
  std::vector<bool> active;
  for (const auto& m : adjacency) {
    a.push_back(tape.constant(m, "adjacency"));
    active.push_back(!m.isZero(0.0));
  }
  ad::Var h = states;
  for (int l = 0; l < config_.layers; ++l) {
    ad::Var acc = ad::matmul(h, tape.parameter(*self_[static_cast<size_t>(l)]));
    for (int r = 0; r < num_relations_; ++r) {
      if (!active[static_cast<size_t>(r)]) continue;
      ad::Var w = tape.parameter(relation_weight(l, r));
      acc = ad::add(acc, ad::matmul(a[static_cast<size_t>(r)], ad::matmul(h, w)));
    }
    h = ad::relu(acc);
  }
  return h;
}

ad::Var GraphReasoner::readout(ad::Tape& tape, const ad::Var& states) const {
  if (states.rows() == 0) throw EmptyGraphError("readout: no nodes");
  ad::Var pooled;
  if (config_.readout == "mean") {
    pooled = ad::mean_rows_ordered(states);
  } else {
    ad::Var weights = ad::softmax_rows(ad::transpose(ad::matmul(states, tape.parameter(*query_))));
    pooled = ad::matmul(weights, states);
  }
  return config_.identity_projection ? pooled : output_(tape, pooled);
}

ad::Var GraphReasoner::forward(ad::Tape& tape, const Matrix& entity_embeddings,
                               const ChangeKG& kg) const {
  ad::ScopeGuard scope(tape, "graph");
  return readout(tape, rgcn_forward(tape, init_nodes(tape, entity_embeddings), kg));
}

}  // namespace sagecc
