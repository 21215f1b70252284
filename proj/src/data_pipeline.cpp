#include "sagecc/data_pipeline.hpp"

#include "sagecc/core/errors.hpp"
#include "sagecc/foundation_adapters.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace sagecc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw InputError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(what + ": " + e.what());
  }
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Portable bounded draw; std distributions differ across standard libraries.
int draw(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

bool overlaps(const Box& a, const Box& b, int gap) {
  return a.x0 < b.x1 + gap && b.x0 < a.x1 + gap && a.y0 < b.y1 + gap && b.y0 < a.y1 + gap;
}

}  // namespace

Vocabulary::Vocabulary() {
  tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (int i = 0; i < 4; ++i) index_[tokens_[static_cast<size_t>(i)]] = i;
}

Vocabulary Vocabulary::build(std::span<const std::string> captions, int min_freq) {
  if (captions.empty()) throw InputError("build_vocab: empty corpus");
  std::map<std::string, long> freq;
  for (const auto& c : captions) {
    for (const auto& t : tokenize(c)) ++freq[t];
  }
  std::vector<std::pair<std::string, long>> items;
  for (const auto& [t, f] : freq) {
    if (f >= min_freq) items.emplace_back(t, f);
  }
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  v.min_freq_ = min_freq;
  for (const auto& [t, _] : items) {
    if (v.index_.count(t)) continue;
    v.index_[t] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(t);
  }
  return v;
}

Vocabulary build_vocab(std::span<const std::string> captions, int min_freq) {
  return Vocabulary::build(captions, min_freq);
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw InputError("vocabulary: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& caption) const {
  std::vector<int> out;
  for (const auto& t : tokenize(caption)) out.push_back(id(t));
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    if (i == kEos) break;
    if (i == kPad || i == kBos) continue;
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

std::string Vocabulary::to_json() const {
  return json{{"min_freq", min_freq_}, {"tokens", tokens_}}.dump();
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  json j = parse_json(text, "vocabulary");
  Vocabulary v;
  auto tokens = j.at("tokens").get<std::vector<std::string>>();
  if (tokens.size() < 4 || !std::equal(v.tokens_.begin(), v.tokens_.end(), tokens.begin())) {
    throw ParseError("vocabulary: special tokens missing");
  }
  v.tokens_ = std::move(tokens);
  v.index_.clear();
  for (size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
      throw ParseError("vocabulary: duplicate token '" + v.tokens_[i] + "'");
    }
  }
  v.min_freq_ = j.value("min_freq", 1);
  return v;
}

const std::vector<BiTemporalSample>& Dataset::split(const std::string& name) const {
  static const std::vector<BiTemporalSample> empty;
  auto it = splits.find(name);
  return it == splits.end() ? empty : it->second;
}

std::vector<std::string> Dataset::all_captions(const std::string& split_name) const {
  std::vector<std::string> out;
  for (const auto& s : split(split_name)) out.insert(out.end(), s.captions.begin(), s.captions.end());
  return out;
}

size_t Dataset::size() const {
  size_t n = 0;
  for (const auto& [_, v] : splits) n += v.size();
  return n;
}

std::string caption_from_edits(std::span<const ShapeEdit> edits) {
  std::map<std::string, int> added, removed;
  for (const auto& e : edits) {
    if (e.action == "add") ++added[e.cls];
    if (e.action == "remove") ++removed[e.cls];
  }
  std::vector<std::string> clauses;
  auto plural = [](int n) { return n > 1; };
  for (const char* cls : palette::class_names) {
    const int n = added[cls];
    if (n == 0) continue;
    const std::string c = cls;
    if (c == "building") {
      clauses.push_back(plural(n) ? "several buildings appear on the bareland"
                                  : "a building appears on the bareland");
    } else if (c == "road") {
      clauses.push_back(plural(n) ? "several roads are built along the bareland"
                                  : "a road is built along the bareland");
    } else {
      clauses.push_back("vegetation appears on the bareland");
    }
  }
  for (const char* cls : palette::class_names) {
    const int n = removed[cls];
    if (n == 0) continue;
    const std::string c = cls;
    if (c == "building") {
      clauses.push_back(plural(n) ? "several buildings are replaced by bareland"
                                  : "a building is replaced by bareland");
    } else if (c == "road") {
      clauses.push_back(plural(n) ? "the roads are removed" : "the road is removed");
    } else {
      clauses.push_back("the vegetation is replaced by bareland");
    }
  }
  if (clauses.empty()) return kNoChangeCaption;
  std::string out = clauses.front();
  for (size_t i = 1; i < clauses.size(); ++i) out += " and " + clauses[i];
  return out;
}

std::vector<std::string> captions_from_edits(std::span<const ShapeEdit> edits) {
  return std::vector<std::string>(5, caption_from_edits(edits));
}

void draw_shape(Image& image, const std::string& cls, const Box& box) {
  const palette::Rgb* color = palette::class_color(cls);
  if (color == nullptr) throw InputError("draw_shape: unknown class '" + cls + "'");
  const double cx = 0.5 * (box.x0 + box.x1), cy = 0.5 * (box.y0 + box.y1);
  const double rx = 0.5 * box.width(), ry = 0.5 * box.height();
  for (int y = box.y0; y < box.y1; ++y) {
    for (int x = box.x0; x < box.x1; ++x) {
      if (cls == "vegetation") {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        if (dx * dx + dy * dy > 1.0) continue;
      }
      std::copy(color->begin(), color->end(), image.px(y, x));
    }
  }
}

namespace {

Box random_box(std::mt19937_64& rng, const std::string& cls, int grid) {
  const double s = grid / 64.0;
  auto scaled = [&](int v) { return std::max(2, static_cast<int>(std::lround(v * s))); };
  int w = 0, h = 0;
  if (cls == "building") {
    w = draw(rng, scaled(8), scaled(14));
    h = draw(rng, scaled(8), scaled(14));
  } else if (cls == "road") {
    const int len = draw(rng, scaled(16), scaled(28));
    const int thick = scaled(4);
    if (draw(rng, 0, 1) == 0) {
      w = len;
      h = thick;
    } else {
      w = thick;
      h = len;
    }
  } else {
    w = draw(rng, scaled(10), scaled(16));
    h = draw(rng, scaled(10), scaled(16));
  }
  const int margin = 1;
  const int x0 = draw(rng, margin, grid - margin - w);
  const int y0 = draw(rng, margin, grid - margin - h);
  return Box{x0, y0, x0 + w, y0 + h};
}

}  // namespace

Dataset synth_generate(const SynthConfig& config) {
  if (config.n < 1) throw InputError("synth_generate: n must be >= 1");
  if (config.grid_size < 32) throw InputError("synth_generate: grid_size must be >= 32");
  std::mt19937_64 rng(config.seed);
  Dataset ds;
  ds.format = "levir-cc";
  const int n_val = static_cast<int>(std::lround(config.n * config.val_fraction));
  const int n_test = static_cast<int>(std::lround(config.n * config.test_fraction));
  const int n_train = config.n - n_val - n_test;
  if (n_train < 0) throw InputError("synth_generate: split fractions exceed 1");
  const int gap = 2;

  for (int i = 0; i < config.n; ++i) {
    const std::string split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    char name[32];
    std::snprintf(name, sizeof name, "%s_%06d", split.c_str(), i);

    std::vector<ShapeEdit> shapes;
    std::vector<Box> occupied;
    auto place = [&](const std::string& cls) -> std::optional<Box> {
      for (int attempt = 0; attempt < config.max_retries; ++attempt) {
        Box b = random_box(rng, cls, config.grid_size);
        bool clash = false;
        for (const auto& o : occupied) clash = clash || overlaps(b, o, gap);
        if (!clash) {
          occupied.push_back(b);
          return b;
        }
      }
      return std::nullopt;
    };
    auto random_class = [&] {
      return std::string(palette::class_names[static_cast<size_t>(draw(rng, 0, 2))]);
    };

    const int initial = draw(rng, 0, 3);
    for (int k = 0; k < initial; ++k) {
      const std::string cls = random_class();
      auto b = place(cls);
      if (!b) throw InputError("synth_generate: cannot place shapes without overlap (sample " + std::string(name) + ")");
      shapes.push_back(ShapeEdit{cls, "none", *b});
    }
    // 1 in 5 pairs are no-change; the rest get one or two edits.
    const int edits = draw(rng, 0, 4) == 0 ? 0 : draw(rng, 1, 2);
    for (int e = 0; e < edits; ++e) {
      std::vector<size_t> removable;
      for (size_t k = 0; k < shapes.size(); ++k) {
        if (shapes[k].action == "none") removable.push_back(k);
      }
      if (!removable.empty() && draw(rng, 0, 1) == 0) {
        shapes[removable[static_cast<size_t>(draw(rng, 0, static_cast<int>(removable.size()) - 1))]].action = "remove";
      } else {
        const std::string cls = random_class();
        auto b = place(cls);
        if (!b) throw InputError("synth_generate: cannot place shapes without overlap (sample " + std::string(name) + ")");
        shapes.push_back(ShapeEdit{cls, "add", *b});
      }
    }

    BiTemporalSample s;
    s.id = name;
    s.split = split;
    s.image_a = Image(config.grid_size, config.grid_size);
    s.image_a.fill(palette::bareland[0], palette::bareland[1], palette::bareland[2]);
    s.image_b = s.image_a;
    for (const auto& sh : shapes) {
      if (sh.action != "add") draw_shape(s.image_a, sh.cls, sh.box);
      if (sh.action != "remove") draw_shape(s.image_b, sh.cls, sh.box);
    }
    s.captions = captions_from_edits(shapes);
    ds.edits[s.id] = shapes;
    ds.splits[split].push_back(std::move(s));
  }
  return ds;
}

Manifest Manifest::levir_cc() {
  Manifest m;
  m.counts = {{"train", 6815}, {"val", 1333}, {"test", 1929}};
  return m;
}

std::string Manifest::to_json() const {
  nlohmann::ordered_json j;
  j["version"] = version;
  j["format"] = format;
  j["captions_file"] = captions_file;
  nlohmann::ordered_json splits;
  for (const char* s : kSplits) {
    auto it = counts.find(s);
    if (it != counts.end()) splits[s] = it->second;
  }
  j["splits"] = splits;
  return j.dump(2);
}

Manifest Manifest::from_json(const std::string& text) {
  json j = parse_json(text, "manifest");
  Manifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != 1) throw ParseError("manifest: unsupported version " + std::to_string(m.version));
    m.format = j.value("format", std::string("levir-cc"));
    m.captions_file = j.value("captions_file", std::string("LevirCCcaptions.json"));
    for (const auto& [k, v] : j.at("splits").items()) m.counts[k] = v.get<long>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
  return m;
}

void write_dataset(const Dataset& dataset, const std::string& root) {
  const fs::path base(root);
  nlohmann::ordered_json images = nlohmann::ordered_json::array();
  Manifest manifest;
  manifest.format = dataset.format;
  int imgid = 0, sentid = 0;
  for (const char* split : kSplits) {
    const auto& samples = dataset.split(split);
    if (samples.empty()) continue;
    manifest.counts[split] = static_cast<long>(samples.size());
    fs::create_directories(base / "images" / split / "A");
    fs::create_directories(base / "images" / split / "B");
    for (const auto& s : samples) {
      const std::string file = s.id + ".png";
      write_png((base / "images" / split / "A" / file).string(), s.image_a);
      write_png((base / "images" / split / "B" / file).string(), s.image_b);
      nlohmann::ordered_json sentences = nlohmann::ordered_json::array();
      std::vector<int> ids;
      for (const auto& c : s.captions) {
        sentences.push_back({{"tokens", tokenize(c)}, {"raw", c}, {"imgid", imgid}, {"sentid", sentid}});
        ids.push_back(sentid++);
      }
      const bool changed = !(s.captions.size() == 5 && s.captions.front() == kNoChangeCaption);
      images.push_back({{"filepath", split},
                        {"filename", file},
                        {"imgid", imgid++},
                        {"split", split},
                        {"sentences", sentences},
                        {"changeflag", changed ? 1 : 0},
                        {"sentids", ids}});
    }
  }
  std::ofstream(base / manifest.captions_file) << nlohmann::ordered_json{{"images", images}}.dump() << '\n';
  std::ofstream(base / "manifest.json") << manifest.to_json() << '\n';
  if (!dataset.edits.empty()) {
    nlohmann::ordered_json samples = nlohmann::ordered_json::array();
    for (const auto& [id, edits] : dataset.edits) {
      nlohmann::ordered_json list = nlohmann::ordered_json::array();
      for (const auto& e : edits) {
        list.push_back({{"class", e.cls}, {"action", e.action},
                        {"box", {e.box.x0, e.box.y0, e.box.x1, e.box.y1}}});
      }
      samples.push_back({{"id", id}, {"edits", list}});
    }
    std::ofstream(base / "edits.json") << nlohmann::ordered_json{{"version", 1}, {"samples", samples}}.dump(1) << '\n';
  }
}

std::map<std::string, std::vector<DatasetIndexEntry>> index_dataset(const std::string& root,
                                                                    const std::string& format) {
  if (format != "levir-cc") throw ConfigError("load_dataset: unsupported format '" + format + "'");
  const fs::path base(root);
  if (root.empty() || !fs::is_directory(base)) throw InputError("dataset not found: '" + root + "'");
  std::optional<Manifest> manifest;
  if (fs::exists(base / "manifest.json")) manifest = Manifest::from_json(read_text(base / "manifest.json"));
  const std::string captions_file = manifest ? manifest->captions_file : "LevirCCcaptions.json";
  if (!fs::exists(base / captions_file)) {
    throw InputError("dataset not found: '" + root + "' has no " + captions_file);
  }
  json doc = parse_json(read_text(base / captions_file), captions_file);

  std::map<std::string, std::vector<DatasetIndexEntry>> out;
  std::map<std::string, std::set<std::string>> seen;
  try {
    for (const auto& img : doc.at("images")) {
      DatasetIndexEntry e;
      e.split = img.at("split").get<std::string>();
      if (e.split == "valid") e.split = "val";
      const std::string file = img.at("filename").get<std::string>();
      const std::string dir = img.value("filepath", e.split);
      e.id = fs::path(file).stem().string();
      e.path_a = (base / "images" / dir / "A" / file).string();
      e.path_b = (base / "images" / dir / "B" / file).string();
      for (const auto& s : img.at("sentences")) e.captions.push_back(trim(s.at("raw").get<std::string>()));
      std::erase_if(e.captions, [](const std::string& c) { return c.empty(); });
      if (e.captions.empty()) throw InputError("sample " + e.id + ": no captions");
      if (!seen[e.split].insert(e.id).second) {
        throw InputError("sample id " + e.id + " duplicated in split " + e.split);
      }
      out[e.split].push_back(std::move(e));
    }
  } catch (const json::exception& ex) {
    throw ParseError(captions_file + ": " + ex.what());
  }
  if (manifest) {
    for (const auto& [split, count] : manifest->counts) {
      const long actual = out.count(split) ? static_cast<long>(out[split].size()) : 0;
      if (actual != count) {
        throw InputError("manifest expects " + std::to_string(count) + " " + split +
                         " samples, captions file lists " + std::to_string(actual));
      }
    }
  }
  return out;
}

BiTemporalSample load_sample(const DatasetIndexEntry& entry) {
  BiTemporalSample s;
  s.id = entry.id;
  s.split = entry.split;
  s.captions = entry.captions;
  try {
    s.image_a = read_png(entry.path_a);
    s.image_b = read_png(entry.path_b);
  } catch (const InputError& e) {
    throw InputError("sample " + entry.id + ": " + e.what());
  }
  if (s.image_a.height != s.image_b.height || s.image_a.width != s.image_b.width) {
    throw InputError("sample " + entry.id + ": epoch images differ in shape");
  }
  return s;
}

Dataset load_dataset(const std::string& root, const std::string& format) {
  Dataset ds;
  ds.format = format;
  for (auto& [split, entries] : index_dataset(root, format)) {
    auto& dst = ds.splits[split];
    for (const auto& e : entries) dst.push_back(load_sample(e));
  }
  const fs::path edits_path = fs::path(root) / "edits.json";
  if (fs::exists(edits_path)) {
    json doc = parse_json(read_text(edits_path), "edits.json");
    try {
      for (const auto& s : doc.at("samples")) {
        std::vector<ShapeEdit> list;
        for (const auto& e : s.at("edits")) {
          const auto b = e.at("box").get<std::vector<int>>();
          if (b.size() != 4) throw ParseError("edits.json: box needs 4 values");
          list.push_back(ShapeEdit{e.at("class").get<std::string>(), e.at("action").get<std::string>(),
                                   Box{b[0], b[1], b[2], b[3]}});
        }
        ds.edits[s.at("id").get<std::string>()] = std::move(list);
      }
    } catch (const json::exception& ex) {
      throw ParseError(std::string("edits.json: ") + ex.what());
    }
  }
  return ds;
}

}  // namespace sagecc
