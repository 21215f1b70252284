#pragma once

// Change knowledge graph built from a caption corpus: triple extraction,
// entity normalization, frequency filtering and index encoding.

#include "sagecc/core/errors.hpp"
#include "sagecc/core/tensor.hpp"
#include "sagecc/foundation_adapters.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace sagecc {

struct Triple {
  std::string head;
  std::string relation;
  std::string tail;
  long frequency = 1;

  bool same_edge(const Triple& o) const {
    return head == o.head && relation == o.relation && tail == o.tail;
  }
  bool operator==(const Triple&) const = default;
};

/// Canonical order: (head, relation, tail, frequency).
bool triple_less(const Triple& a, const Triple& b);
/// Sorted, with duplicate edges merged by summing frequencies.
std::vector<Triple> canonicalize(std::vector<Triple> triples);

struct ChangeKG {
  std::vector<std::string> entities;
  std::vector<std::string> relations;
  Eigen::Matrix<int, 2, Eigen::Dynamic> a_conn;  // row 0 = head index, row 1 = tail index
  Eigen::VectorXi a_type;
  std::vector<long> frequency;  // per column

  Index edges() const { return a_conn.cols(); }
  bool empty() const { return entities.empty(); }
  bool operator==(const ChangeKG& o) const {
    return entities == o.entities && relations == o.relations && a_conn == o.a_conn &&
           a_type == o.a_type && frequency == o.frequency;
  }
};

/// Relation pattern: a verb phrase (token sequence) that links subject and object.
struct RelationPattern {
  std::string relation;
  std::vector<std::vector<std::string>> phrases;
};

struct PatternTable {
  std::vector<RelationPattern> patterns;
  /// Tokens dropped from the start of a noun phrase.
  std::vector<std::string> determiners;
  /// Tokens dropped from the end of a subject (auxiliaries).
  std::vector<std::string> auxiliaries;

  static PatternTable builtin();
  static PatternTable load(const std::string& path);
};

/// Lowercase, punctuation stripped, whitespace split.
std::vector<std::string> caption_tokens(const std::string& caption);
std::string singularize(const std::string& word);
/// Singularizes the final word of a phrase.
std::string normalize_entity(const std::string& phrase);

class TripleExtractor {
 public:
  virtual ~TripleExtractor() = default;
  virtual std::vector<Triple> extract(std::span<const std::string> captions) const = 0;
};

class RuleExtractor final : public TripleExtractor {
 public:
  explicit RuleExtractor(PatternTable table = PatternTable::builtin());
  std::vector<Triple> extract(std::span<const std::string> captions) const override;
  /// Triples of one caption, each with frequency 1.
  std::vector<Triple> extract_one(const std::string& caption) const;

 private:
  PatternTable table_;
};

/// Slot for an LLM-backed extractor.
class LlmExtractor final : public TripleExtractor {
 public:
  explicit LlmExtractor(const std::string& endpoint);
  std::vector<Triple> extract(std::span<const std::string> captions) const override;
};

std::vector<Triple> extract_triples(std::span<const std::string> captions,
                                    const TripleExtractor& extractor);

struct MergeResult {
  std::vector<Triple> triples;
  std::map<std::string, std::string> mapping;  // raw entity -> representative
};

class EntityMerger {
 public:
  virtual ~EntityMerger() = default;
  virtual MergeResult merge(std::span<const Triple> triples) const = 0;
};

/// Singularize, embed and cluster by single linkage at cosine >= threshold.
class EmbeddingMerger final : public EntityMerger {
 public:
  EmbeddingMerger(const TextEncoder& encoder, double threshold = 0.9);
  MergeResult merge(std::span<const Triple> triples) const override;

 private:
  const TextEncoder& encoder_;
  double threshold_;
};

/// Slot for the LLM-guided merger driven by an instruction file.
class LlmMerger final : public EntityMerger {
 public:
  explicit LlmMerger(const std::string& instruction_path);
  MergeResult merge(std::span<const Triple> triples) const override;
};

MergeResult merge_entities(std::span<const Triple> triples, const EntityMerger& merger);

/// Drops triples with frequency < k and throws EmptyGraphError when none remain.
std::vector<Triple> filter_by_frequency(std::span<const Triple> triples, long k);

/// Entity (or relation) frequencies: sum of triple frequencies over mentions.
std::map<std::string, long> entity_frequencies(std::span<const Triple> triples);

ChangeKG encode_graph(std::span<const Triple> triples);
std::vector<Triple> decode_graph(const ChangeKG& kg);

/// Versioned JSON: {"version", "entities", "relations", "triples"}.
void save_graph(const std::string& path, const ChangeKG& kg);
ChangeKG load_graph(const std::string& path);
std::string graph_to_json(const ChangeKG& kg);
ChangeKG graph_from_json(const std::string& text);

struct KgBuildConfig {
  long k = 50;
  double merge_threshold = 0.9;
  std::string patterns;  // empty selects the built-in table
};

/// extract -> merge -> filter -> encode.
ChangeKG build_graph(std::span<const std::string> captions, const TextEncoder& encoder,
                     const KgBuildConfig& config);

}  // namespace sagecc
