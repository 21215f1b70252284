#include "sagecc/kg_builder.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <optional>
#include <tuple>
#include <set>
#include <sstream>

namespace sagecc {

namespace {

using nlohmann::json;

std::vector<std::string> split_words(const std::string& phrase) {
  std::istringstream in(phrase);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string join(std::span<const std::string> words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

bool contains(const std::vector<std::string>& set, const std::string& w) {
  return std::find(set.begin(), set.end(), w) != set.end();
}

/// Index order by descending count, ties lexicographic.
std::vector<std::string> frequency_order(const std::map<std::string, long>& counts) {
  std::vector<std::pair<std::string, long>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> out;
  out.reserve(items.size());
  for (auto& [name, _] : items) out.push_back(name);
  return out;
}

}  // namespace

bool triple_less(const Triple& a, const Triple& b) {
  return std::tie(a.head, a.relation, a.tail, a.frequency) <
         std::tie(b.head, b.relation, b.tail, b.frequency);
}

std::vector<Triple> canonicalize(std::vector<Triple> triples) {
  std::sort(triples.begin(), triples.end(), triple_less);
  std::vector<Triple> out;
  for (auto& t : triples) {
    if (!out.empty() && out.back().same_edge(t)) {
      out.back().frequency += t.frequency;
    } else {
      out.push_back(std::move(t));
    }
  }
  return out;
}

PatternTable PatternTable::builtin() {
  PatternTable t;
  auto add = [&](const std::string& relation, std::initializer_list<const char*> phrases) {
    RelationPattern p{relation, {}};
    for (const char* ph : phrases) p.phrases.push_back(split_words(ph));
    t.patterns.push_back(std::move(p));
  };
  add("appear-on", {"appear on", "appears on", "appeared on", "emerge on", "emerges on"});
  add("appear-in", {"appear in", "appears in", "appeared in"});
  add("built-along", {"built along", "constructed along", "built beside"});
  add("built-on", {"built on", "constructed on"});
  add("replaced-by", {"replaced by"});
  add("turned-into", {"turned into", "turns into", "turn into", "converted into"});
  t.determiners = {"a",     "an",    "the",   "this",     "that",     "these",   "those",
                   "several", "some", "many", "few",      "lots",     "of",      "two",
                   "three", "four",  "five",  "multiple", "numerous", "another", "other"};
  t.auxiliaries = {"is", "are", "was", "were", "has", "have", "been", "be", "being", "had"};
  return t;
}

PatternTable PatternTable::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("pattern table not found: " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("pattern table " + path + ": " + e.what());
  }
  if (doc.value("version", 0) != 1) throw ParseError("pattern table " + path + ": unsupported version");
  PatternTable t;
  for (const auto& p : doc.at("patterns")) {
    RelationPattern rp{p.at("relation").get<std::string>(), {}};
    for (const auto& ph : p.at("phrases")) rp.phrases.push_back(split_words(ph.get<std::string>()));
    t.patterns.push_back(std::move(rp));
  }
  t.determiners = doc.value("determiners", std::vector<std::string>{});
  t.auxiliaries = doc.value("auxiliaries", std::vector<std::string>{});
  return t;
}

std::vector<std::string> caption_tokens(const std::string& caption) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : caption) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || c == '-' || c == '\'') {
      cur += static_cast<char>(std::tolower(u));
    } else if (c == ',') {
      flush();
      out.emplace_back(",");
    } else {
      flush();
    }
  }
  flush();
  return out;
}

std::string singularize(const std::string& w) {
  auto ends = [&](std::string_view s) {
    return w.size() > s.size() && w.compare(w.size() - s.size(), s.size(), s) == 0;
  };
  if (w.size() <= 3) return w;
  if (ends("ies")) return w.substr(0, w.size() - 3) + "y";
  if (ends("sses") || ends("ches") || ends("shes") || ends("xes") || ends("zes")) {
    return w.substr(0, w.size() - 2);
  }
  if (ends("ss") || ends("us") || ends("is")) return w;
  if (ends("s")) return w.substr(0, w.size() - 1);
  return w;
}

std::string normalize_entity(const std::string& phrase) {
  std::string lower;
  for (char c : phrase) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  auto words = split_words(lower);
  if (words.empty()) return {};
  words.back() = singularize(words.back());
  return join(words);
}

RuleExtractor::RuleExtractor(PatternTable table) : table_(std::move(table)) {
  // Longest phrases first so "built along" wins over shorter prefixes.
  for (auto& p : table_.patterns) {
    std::stable_sort(p.phrases.begin(), p.phrases.end(),
                     [](const auto& a, const auto& b) { return a.size() > b.size(); });
  }
}

std::vector<Triple> RuleExtractor::extract_one(const std::string& caption) const {
  const auto tokens = caption_tokens(caption);
  struct Hit {
    size_t begin, end;
    const std::string* relation;
  };
  std::vector<Hit> hits;
  for (size_t i = 0; i < tokens.size();) {
    std::optional<Hit> found;
    for (const auto& p : table_.patterns) {
      for (const auto& ph : p.phrases) {
        if (ph.empty() || i + ph.size() > tokens.size()) continue;
        if (!std::equal(ph.begin(), ph.end(), tokens.begin() + static_cast<long>(i))) continue;
        if (!found || ph.size() > found->end - found->begin) found = Hit{i, i + ph.size(), &p.relation};
      }
    }
    if (found) {
      hits.push_back(*found);
      i = found->end;
    } else {
      ++i;
    }
  }

  auto noun_phrase = [&](std::vector<std::string> words) -> std::string {
    size_t b = 0;
    while (b < words.size() && contains(table_.determiners, words[b])) ++b;
    words.erase(words.begin(), words.begin() + static_cast<long>(b));
    if (words.empty()) return {};
    return normalize_entity(join(words));
  };
  auto is_boundary = [](const std::string& w) { return w == "and" || w == ","; };

  std::vector<Triple> out;
  size_t cursor = 0;
  for (const Hit& h : hits) {
    std::vector<std::string> subject(tokens.begin() + static_cast<long>(cursor),
                                     tokens.begin() + static_cast<long>(h.begin));
    while (!subject.empty() && contains(table_.auxiliaries, subject.back())) subject.pop_back();
    size_t obj_end = h.end;
    while (obj_end < tokens.size() && !is_boundary(tokens[obj_end])) ++obj_end;
    const std::string object = noun_phrase(
        {tokens.begin() + static_cast<long>(h.end), tokens.begin() + static_cast<long>(obj_end)});
    cursor = obj_end < tokens.size() ? obj_end + 1 : obj_end;
    if (object.empty()) continue;

    std::vector<std::string> part;
    auto emit = [&] {
      const bool clause = std::any_of(part.begin(), part.end(),
                                      [&](const auto& w) { return contains(table_.auxiliaries, w); });
      if (!clause) {
        const std::string head = noun_phrase(part);
        if (!head.empty()) out.push_back(Triple{head, *h.relation, object, 1});
      }
      part.clear();
    };
    for (const auto& w : subject) {
      if (is_boundary(w)) {
        emit();
      } else {
        part.push_back(w);
      }
    }
    emit();
  }
  return out;
}

std::vector<Triple> RuleExtractor::extract(std::span<const std::string> captions) const {
  std::vector<Triple> all;
  for (const auto& c : captions) {
    auto t = extract_one(c);
    all.insert(all.end(), t.begin(), t.end());
  }
  return canonicalize(std::move(all));
}

LlmExtractor::LlmExtractor(const std::string& endpoint) {
  throw BackendUnavailable("llm extractor: no client available for endpoint '" + endpoint + "'");
}

std::vector<Triple> LlmExtractor::extract(std::span<const std::string>) const {
  throw BackendUnavailable("llm extractor unavailable");
}

std::vector<Triple> extract_triples(std::span<const std::string> captions,
                                    const TripleExtractor& extractor) {
  if (captions.empty()) throw InputError("extract_triples: empty caption list");
  return extractor.extract(captions);
}

std::map<std::string, long> entity_frequencies(std::span<const Triple> triples) {
  std::map<std::string, long> f;
  for (const auto& t : triples) {
    f[t.head] += t.frequency;
    f[t.tail] += t.frequency;
  }
  return f;
}

EmbeddingMerger::EmbeddingMerger(const TextEncoder& encoder, double threshold)
    : encoder_(encoder), threshold_(threshold) {}

MergeResult EmbeddingMerger::merge(std::span<const Triple> triples) const {
  MergeResult r;
  std::map<std::string, long> freq;  // per normalized form
  std::map<std::string, std::string> normalized;
  for (const auto& [raw, f] : entity_frequencies(triples)) {
    const std::string n = normalize_entity(raw);
    normalized[raw] = n;
    freq[n] += f;
  }
  std::vector<std::string> forms;
  for (const auto& [n, _] : freq) forms.push_back(n);
  std::vector<size_t> parent(forms.size());
  std::iota(parent.begin(), parent.end(), size_t{0});
  auto find = [&](size_t i) {
    while (parent[i] != i) {
      parent[i] = parent[parent[i]];
      i = parent[i];
    }
    return i;
  };
  if (!forms.empty()) {
    const Matrix e = encoder_.embed(forms);
    const Matrix sim = e * e.transpose();
    for (size_t i = 0; i < forms.size(); ++i) {
      for (size_t j = i + 1; j < forms.size(); ++j) {
        if (sim(static_cast<Index>(i), static_cast<Index>(j)) >= threshold_) parent[find(j)] = find(i);
      }
    }
  }
  std::map<size_t, std::string> representative;
  for (size_t i = 0; i < forms.size(); ++i) {
    const size_t root = find(i);
    auto it = representative.find(root);
    if (it == representative.end() || freq[forms[i]] > freq[it->second] ||
        (freq[forms[i]] == freq[it->second] && forms[i] < it->second)) {
      representative[root] = forms[i];
    }
  }
  std::map<std::string, std::string> form_rep;
  for (size_t i = 0; i < forms.size(); ++i) form_rep[forms[i]] = representative[find(i)];
  for (const auto& [raw, n] : normalized) r.mapping[raw] = form_rep[n];
  std::vector<Triple> remapped;
  for (const auto& t : triples) {
    remapped.push_back(Triple{r.mapping.at(t.head), t.relation, r.mapping.at(t.tail), t.frequency});
  }
  r.triples = canonicalize(std::move(remapped));
  return r;
}

LlmMerger::LlmMerger(const std::string& instruction_path) {
  throw BackendUnavailable("llm merger: no client available (instructions: '" + instruction_path + "')");
}

MergeResult LlmMerger::merge(std::span<const Triple>) const {
  throw BackendUnavailable("llm merger unavailable");
}

MergeResult merge_entities(std::span<const Triple> triples, const EntityMerger& merger) {
  return merger.merge(triples);
}

std::vector<Triple> filter_by_frequency(std::span<const Triple> triples, long k) {
  if (k < 0) throw ConfigError("filter_by_frequency: k must be >= 0");
  std::vector<Triple> out;
  for (const auto& t : triples) {
    if (t.frequency >= k) out.push_back(t);
  }
  if (out.empty()) {
    throw EmptyGraphError("filter_by_frequency: no triple has frequency >= " + std::to_string(k));
  }
  return out;
}

ChangeKG encode_graph(std::span<const Triple> input) {
  if (input.empty()) throw EmptyGraphError("encode_graph: no triples");
  const auto triples = canonicalize({input.begin(), input.end()});
  ChangeKG kg;
  std::map<std::string, long> rel_freq;
  for (const auto& t : triples) rel_freq[t.relation] += t.frequency;
  kg.entities = frequency_order(entity_frequencies(triples));
  kg.relations = frequency_order(rel_freq);
  std::map<std::string, int> eid, rid;
  for (size_t i = 0; i < kg.entities.size(); ++i) eid[kg.entities[i]] = static_cast<int>(i);
  for (size_t i = 0; i < kg.relations.size(); ++i) rid[kg.relations[i]] = static_cast<int>(i);
  struct Column {
    int src, type, tgt;
    long freq;
  };
  std::vector<Column> cols;
  for (const auto& t : triples) cols.push_back({eid[t.head], rid[t.relation], eid[t.tail], t.frequency});
  std::sort(cols.begin(), cols.end(), [](const Column& a, const Column& b) {
    return std::tie(a.src, a.type, a.tgt) < std::tie(b.src, b.type, b.tgt);
  });
  const auto m = static_cast<Index>(cols.size());
  kg.a_conn.resize(2, m);
  kg.a_type.resize(m);
  for (Index j = 0; j < m; ++j) {
    const auto& c = cols[static_cast<size_t>(j)];
    kg.a_conn(0, j) = c.src;
    kg.a_conn(1, j) = c.tgt;
    kg.a_type(j) = c.type;
    kg.frequency.push_back(c.freq);
  }
  return kg;
}

std::vector<Triple> decode_graph(const ChangeKG& kg) {
  std::vector<Triple> out;
  const auto ne = static_cast<int>(kg.entities.size());
  const auto nr = static_cast<int>(kg.relations.size());
  for (Index j = 0; j < kg.edges(); ++j) {
    const int s = kg.a_conn(0, j), t = kg.a_conn(1, j), r = kg.a_type(j);
    if (s < 0 || s >= ne || t < 0 || t >= ne || r < 0 || r >= nr) {
      throw ShapeError("decode_graph: index out of range in column " + std::to_string(j));
    }
    out.push_back(Triple{kg.entities[static_cast<size_t>(s)], kg.relations[static_cast<size_t>(r)],
                         kg.entities[static_cast<size_t>(t)],
                         kg.frequency.empty() ? 1 : kg.frequency[static_cast<size_t>(j)]});
  }
  return canonicalize(std::move(out));
}

std::string graph_to_json(const ChangeKG& kg) {
  json triples = json::array();
  for (const auto& t : decode_graph(kg)) {
    triples.push_back({{"head", t.head}, {"relation", t.relation}, {"tail", t.tail},
                       {"frequency", t.frequency}});
  }
  json doc = {{"version", 1},
              {"entities", kg.entities},
              {"relations", kg.relations},
              {"triples", triples}};
  return doc.dump(2);
}

ChangeKG graph_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("graph json: ") + e.what());
  }
  if (doc.value("version", 0) != 1) throw ParseError("graph json: unsupported version");
  std::vector<Triple> triples;
  try {
    for (const auto& t : doc.at("triples")) {
      triples.push_back(Triple{t.at("head").get<std::string>(), t.at("relation").get<std::string>(),
                               t.at("tail").get<std::string>(), t.value("frequency", 1L)});
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("graph json: ") + e.what());
  }
  ChangeKG kg = encode_graph(triples);
  if (doc.contains("entities") && doc["entities"].get<std::vector<std::string>>() != kg.entities) {
    throw ParseError("graph json: entity list inconsistent with triples");
  }
  return kg;
}

void save_graph(const std::string& path, const ChangeKG& kg) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write graph file: " + path);
  out << graph_to_json(kg) << '\n';
}

ChangeKG load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("graph file not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return graph_from_json(ss.str());
}

ChangeKG build_graph(std::span<const std::string> captions, const TextEncoder& encoder,
                     const KgBuildConfig& config) {
  RuleExtractor extractor(config.patterns.empty() ? PatternTable::builtin()
                                                  : PatternTable::load(config.patterns));
  auto triples = extract_triples(captions, extractor);
  if (triples.empty()) throw EmptyGraphError("build_graph: no triples extracted from captions");
  EmbeddingMerger merger(encoder, config.merge_threshold);
  auto merged = merge_entities(triples, merger);
  return encode_graph(filter_by_frequency(merged.triples, config.k));
}

}  // namespace sagecc
