#include "doctest.h"

#include "sagecc/kg_builder.hpp"

#include <algorithm>
#include <filesystem>
#include <random>
#include <set>

using namespace sagecc;

namespace {

std::set<std::tuple<std::string, std::string, std::string>> edge_set(std::span<const Triple> ts) {
  std::set<std::tuple<std::string, std::string, std::string>> s;
  for (const auto& t : ts) s.insert({t.head, t.relation, t.tail});
  return s;
}

std::vector<Triple> random_triples(std::mt19937_64& rng, int n) {
  const char* ents[] = {"building", "road", "tree", "bareland", "river", "parking lot", "house"};
  const char* rels[] = {"appear-on", "built-along", "replaced-by"};
  std::vector<Triple> out;
  while (static_cast<int>(out.size()) < n) {
    Triple t{ents[rng() % 7], rels[rng() % 3], ents[rng() % 7], static_cast<long>(1 + rng() % 90)};
    if (t.head == t.tail) continue;
    bool dup = false;
    for (const auto& o : out) dup = dup || o.same_edge(t);
    if (!dup) out.push_back(t);
  }
  return out;
}

}  // namespace

TEST_CASE("rule extractor on change captions") {
  RuleExtractor ex;
  const auto ts = ex.extract_one("A crossroad and several buildings appear on the bareland.");
  CHECK(edge_set(ts) == edge_set(std::vector<Triple>{{"crossroad", "appear-on", "bareland"},
                                                     {"building", "appear-on", "bareland"}}));
  CHECK(ex.extract_one("the scene is the same as before").empty());
  CHECK(ex.extract_one("there is no difference").empty());

  const std::vector<std::string> three(3, "some trees are replaced by a road");
  const auto counted = extract_triples(three, ex);
  REQUIRE(counted.size() == 1);
  CHECK(counted[0] == Triple{"tree", "replaced-by", "road", 3});

  // The longer phrase wins over its prefix relation.
  const auto along = ex.extract_one("a road is built along the river");
  REQUIRE(along.size() == 1);
  CHECK(along[0].relation == "built-along");
}

TEST_CASE("singularization") {
  CHECK(singularize("buildings") == "building");
  CHECK(singularize("building") == "building");
  CHECK(singularize("bodies") == "body");
  CHECK(singularize("churches") == "church");
  CHECK(singularize("grass") == "grass");
  CHECK(singularize("bus") == "bus");
  CHECK(normalize_entity("Parking Lots") == "parking lot");
}

TEST_CASE("entity merging") {
  AdapterConfig cfg;
  MockTextEncoder text(cfg);
  EmbeddingMerger merger(text);

  const std::vector<Triple> houses = {{"house", "appear-on", "bareland", 2}, {"houses", "appear-on", "bareland", 1}};
  const MergeResult m = merge_entities(houses, merger);
  REQUIRE(m.triples.size() == 1);
  CHECK(m.triples[0] == Triple{"house", "appear-on", "bareland", 3});
  CHECK(m.mapping.at("houses") == "house");
  CHECK(m.mapping.at("house") == "house");

  const MergeResult twice = merge_entities(m.triples, merger);
  CHECK(twice.triples == m.triples);

  // Identity when no pair reaches the threshold, checked against all pairwise cosines.
  const std::vector<std::string> names = {"building", "road", "tree", "river", "bareland"};
  const Matrix e = text.embed(names);
  for (size_t i = 0; i < names.size(); ++i) {
    for (size_t j = i + 1; j < names.size(); ++j) REQUIRE(e.row(i).dot(e.row(j)) < 0.9);
  }
  std::vector<Triple> disjoint;
  for (size_t i = 0; i + 1 < names.size(); ++i) disjoint.push_back({names[i], "appear-on", names[i + 1], 1});
  const MergeResult id = merge_entities(disjoint, merger);
  for (const auto& [raw, rep] : id.mapping) CHECK(raw == rep);
  CHECK(edge_set(id.triples) == edge_set(disjoint));
  CHECK(merge_entities(std::vector<Triple>{}, merger).triples.empty());
}

TEST_CASE("frequency filter") {
  const std::vector<Triple> ts = {{"a", "r", "b", 49}, {"c", "r", "d", 50}, {"e", "s", "f", 51}};
  CHECK(filter_by_frequency(ts, 0) == ts);
  const auto kept = filter_by_frequency(ts, 50);
  REQUIRE(kept.size() == 2);
  const ChangeKG kg = encode_graph(kept);
  std::set<std::string> rebuilt;
  for (const auto& t : kept) rebuilt.insert({t.head, t.tail});
  CHECK(std::set<std::string>(kg.entities.begin(), kg.entities.end()) == rebuilt);
  CHECK(std::find(kg.entities.begin(), kg.entities.end(), "a") == kg.entities.end());
  CHECK_THROWS_AS(filter_by_frequency(ts, 52), EmptyGraphError);
  CHECK(KgBuildConfig{}.k == 50);

  std::mt19937_64 rng(5);
  const auto many = random_triples(rng, 20);
  size_t prev = SIZE_MAX;
  for (long k = 0; k <= 90; k += 10) {
    size_t n = 0;
    try {
      n = encode_graph(filter_by_frequency(many, k)).entities.size();
    } catch (const EmptyGraphError&) {
      n = 0;
    }
    CHECK(n <= prev);
    prev = n;
  }
}

TEST_CASE("graph encoding") {
  const ChangeKG one = encode_graph(std::vector<Triple>{{"a", "r", "b", 1}});
  CHECK(one.entities == std::vector<std::string>{"a", "b"});
  CHECK(one.a_conn(0, 0) == 0);
  CHECK(one.a_conn(1, 0) == 1);
  CHECK(one.a_type(0) == 0);

  const std::vector<Triple> shared = {{"building", "appear-on", "bareland", 4}, {"building", "built-along", "road", 2}};
  const ChangeKG kg = encode_graph(shared);
  CHECK(kg.entities.front() == "building");
  CHECK(kg.a_conn(0, 0) == kg.a_conn(0, 1));
  CHECK(edge_set(decode_graph(kg)) == edge_set(shared));
  CHECK_THROWS_AS(encode_graph(std::vector<Triple>{}), EmptyGraphError);

  std::mt19937_64 rng(6);
  auto ts = random_triples(rng, 10);
  const ChangeKG a = encode_graph(ts);
  const ChangeKG b = encode_graph(decode_graph(a));
  CHECK(a == b);
  std::shuffle(ts.begin(), ts.end(), rng);
  CHECK(encode_graph(ts) == a);

  // Entities sorted by descending total frequency, ties lexicographic.
  const auto freq = entity_frequencies(ts);
  for (size_t i = 1; i < a.entities.size(); ++i) {
    const long f0 = freq.at(a.entities[i - 1]), f1 = freq.at(a.entities[i]);
    CHECK((f0 > f1 || (f0 == f1 && a.entities[i - 1] < a.entities[i])));
  }
}

TEST_CASE("graph json round trip") {
  std::mt19937_64 rng(7);
  const ChangeKG kg = encode_graph(random_triples(rng, 8));
  CHECK(graph_from_json(graph_to_json(kg)) == kg);
  const auto path = (std::filesystem::temp_directory_path() / "sagecc_kg_test.json").string();
  save_graph(path, kg);
  CHECK(load_graph(path) == kg);
  CHECK_THROWS_AS(graph_from_json("{\"version\": 7}"), ParseError);
  CHECK_THROWS_AS(graph_from_json("not json"), ParseError);
  CHECK_THROWS_AS(load_graph("/nonexistent/graph.json"), InputError);
}

TEST_CASE("build graph end to end") {
  std::vector<std::string> caps;
  for (int i = 0; i < 3; ++i) caps.push_back("several buildings appear on the bareland");
  caps.push_back("a house appears on the bareland");
  caps.push_back("the scene is the same as before");
  MockTextEncoder text{AdapterConfig{}};
  KgBuildConfig cfg;
  cfg.k = 2;
  const ChangeKG kg = build_graph(caps, text, cfg);
  REQUIRE(kg.edges() == 1);
  CHECK(decode_graph(kg)[0] == Triple{"building", "appear-on", "bareland", 3});
  cfg.k = 50;
  CHECK_THROWS_AS(build_graph(caps, text, cfg), EmptyGraphError);
}

TEST_CASE("shipped pattern file equals the built-in table") {
  const PatternTable file = PatternTable::load(std::string(SAGECC_SOURCE_DIR) + "/data/kg_patterns.json");
  const PatternTable builtin = PatternTable::builtin();
  REQUIRE(file.patterns.size() == builtin.patterns.size());
  for (size_t i = 0; i < file.patterns.size(); ++i) {
    CHECK(file.patterns[i].relation == builtin.patterns[i].relation);
    CHECK(file.patterns[i].phrases == builtin.patterns[i].phrases);
  }
  CHECK(file.determiners == builtin.determiners);
  CHECK(file.auxiliaries == builtin.auxiliaries);
  CHECK_THROWS_AS(PatternTable::load("/nonexistent/patterns.json"), InputError);
}
