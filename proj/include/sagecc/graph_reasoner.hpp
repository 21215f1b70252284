#pragma once

// Relation-aware message passing over the change knowledge graph and a
// permutation-invariant readout into the graph prior vector.

#include "sagecc/core/autodiff.hpp"
#include "sagecc/core/nn.hpp"
#include "sagecc/foundation_adapters.hpp"
#include "sagecc/kg_builder.hpp"

#include <string>
#include <vector>

namespace sagecc {

struct ReasonerConfig {
  std::string encoder = "rgcn";  // rgcn | gcn
  int layers = 2;
  int hidden = 64;    // d_h
  int out_dim = 64;   // d_kg
  std::string readout = "mean";  // mean | attention
  /// Skip the learned input/output projections (dims must agree).
  bool identity_projection = false;
};

/// Per-relation aggregation matrices: A_r(i, j) = 1 / c_{i,r} for every edge
/// j -> i of relation r, where c_{i,r} is the in-degree of i under r.
std::vector<Matrix> relation_adjacency(const ChangeKG& kg, int num_relations);

class GraphReasoner {
 public:
  GraphReasoner(nn::ParameterStore& store, const ReasonerConfig& config, int text_dim,
                int num_relations, nn::Rng& rng);

  /// h^(0) = projection(text embedding) for every entity.
  ad::Var init_nodes(ad::Tape& tape, const Matrix& entity_embeddings) const;
  ad::Var init_nodes(ad::Tape& tape, const ChangeKG& kg, const TextEncoder& text) const;
  /// L layers of h_i <- ReLU(h_i W_0 + sum_r sum_{j in N_i^r} h_j W_r / c_{i,r}).
  ad::Var rgcn_forward(ad::Tape& tape, const ad::Var& states, const ChangeKG& kg) const;
  ad::Var readout(ad::Tape& tape, const ad::Var& states) const;
  /// init -> message passing -> readout, 1 x d_kg.
  ad::Var forward(ad::Tape& tape, const Matrix& entity_embeddings, const ChangeKG& kg) const;

  const ReasonerConfig& config() const { return config_; }
  int num_relations() const { return num_relations_; }
  Parameter& self_weight(int layer) const { return *self_[static_cast<size_t>(layer)]; }
  /// Relation weight of a layer (the shared weight for the GCN variant).
  Parameter& relation_weight(int layer, int relation) const;

 private:
  ReasonerConfig config_;
  int num_relations_;
  nn::Linear input_;
  nn::Linear output_;
  std::vector<Parameter*> self_;
  std::vector<std::vector<Parameter*>> relation_;
  Parameter* query_ = nullptr;
};

}  // namespace sagecc
