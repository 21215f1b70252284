#include "doctest.h"

#include "sagecc/data_pipeline.hpp"
#include "sagecc/foundation_adapters.hpp"

#include "json.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

using namespace sagecc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sagecc_data_" + name);
  fs::remove_all(p);
  return p;
}

SynthConfig small_synth(std::uint64_t seed, int n) {
  SynthConfig c;
  c.seed = seed;
  c.n = n;
  c.val_fraction = 0.2;
  c.test_fraction = 0.2;
  return c;
}

int count_label(const DetectionSet& d, int label) {
  return static_cast<int>(std::count(d.labels.begin(), d.labels.end(), label));
}

}  // namespace

TEST_CASE("split counts of the standard manifest") {
  const Manifest m = Manifest::levir_cc();
  CHECK(m.counts.at("train") == 6815);
  CHECK(m.counts.at("val") == 1333);
  CHECK(m.counts.at("test") == 1929);
  const Manifest back = Manifest::from_json(m.to_json());
  CHECK(back.counts == m.counts);
  CHECK(back.captions_file == "LevirCCcaptions.json");
  CHECK_THROWS_AS(Manifest::from_json("{\"version\": 2}"), ParseError);
}

TEST_CASE("missing dataset roots") {
  const fs::path empty = scratch("empty");
  fs::create_directories(empty);
  for (const std::string root : {std::string(), empty.string(), (empty / "nope").string()}) {
    try {
      load_dataset(root);
      FAIL("expected an error");
    } catch (const InputError& e) {
      CHECK(std::string(e.what()).find("dataset not found") != std::string::npos);
    }
  }
  CHECK_THROWS_AS(load_dataset(empty.string(), "dubai-cc"), ConfigError);
}

TEST_CASE("synthetic datasets round trip through disk") {
  const Dataset ds = synth_generate(small_synth(11, 12));
  CHECK(ds.size() == 12);
  CHECK(ds.split("val").size() == 2);
  CHECK(ds.split("test").size() == 2);
  const fs::path root = scratch("roundtrip");
  write_dataset(ds, root.string());
  const Dataset back = load_dataset(root.string());
  for (const char* s : kSplits) CHECK(back.split(s) == ds.split(s));
  CHECK(back.edits == ds.edits);

  // A manifest with the true counts validates; a wrong one is rejected.
  Manifest m;
  m.counts = {{"train", 8}, {"val", 2}, {"test", 2}};
  std::ofstream(root / "manifest.json") << m.to_json();
  CHECK(load_dataset(root.string()).size() == 12);
  std::ofstream(root / "manifest.json") << Manifest::levir_cc().to_json();
  CHECK_THROWS_AS(load_dataset(root.string()), InputError);
}

TEST_CASE("corrupted datasets error instead of yielding samples") {
  const Dataset ds = synth_generate(small_synth(12, 5));
  const fs::path root = scratch("corrupt");
  write_dataset(ds, root.string());
  const fs::path captions = root / "LevirCCcaptions.json";
  std::ifstream in(captions);
  const nlohmann::json doc = nlohmann::json::parse(in);
  const std::string first = ds.split("train").front().id;

  auto rewrite = [&](const nlohmann::json& j) { std::ofstream(captions) << j.dump(); };
  auto expect_error_mentioning = [&](const std::string& needle) {
    try {
      load_dataset(root.string());
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };

  std::ofstream(captions) << doc.dump().substr(0, 40);
  CHECK_THROWS_AS(load_dataset(root.string()), ParseError);

  nlohmann::json no_caps = doc;
  for (auto& s : no_caps["images"][0]["sentences"]) s["raw"] = "  ";
  rewrite(no_caps);
  expect_error_mentioning(first);

  nlohmann::json dup = doc;
  dup["images"].push_back(doc["images"][0]);
  rewrite(dup);
  expect_error_mentioning("duplicated");

  rewrite(doc);
  const fs::path img_b = root / "images" / "train" / "B" / (first + ".png");
  const Image original = read_png(img_b.string());
  write_png(img_b.string(), Image(16, 16));
  expect_error_mentioning(first);
  fs::remove(img_b);
  expect_error_mentioning(first);
  write_png(img_b.string(), original);
  CHECK(load_dataset(root.string()).size() == 5);
}

TEST_CASE("vocabulary") {
  const std::vector<std::string> corpus = {"a a b"};
  const Vocabulary v = build_vocab(corpus, 2);
  CHECK(v.contains("a"));
  CHECK_FALSE(v.contains("b"));
  CHECK(v.encode("a b") == std::vector<int>{v.id("a"), Vocabulary::kUnk});
  CHECK(v.token(Vocabulary::kPad) == "<pad>");
  CHECK(v.size() == 5);

  const std::vector<std::string> caps = {"a building appears on the bareland", "the road is removed",
                                         "several buildings appear near the road", "the road is removed"};
  const Vocabulary full = build_vocab(caps, 1);
  for (const auto& c : caps) CHECK(full.decode(full.encode(c)) == c);
  std::vector<int> framed = {Vocabulary::kBos};
  for (int id : full.encode(caps[0])) framed.push_back(id);
  framed.push_back(Vocabulary::kEos);
  framed.push_back(full.id("road"));
  CHECK(full.decode(framed) == caps[0]);

  // Frequency order, ties lexicographic.
  CHECK(full.token(4) == "the");
  CHECK(full.token(5) == "road");
  std::vector<std::string> shuffled = caps;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 5; ++i) {
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(build_vocab(shuffled, 1) == full);
  }
  CHECK(Vocabulary::from_json(full.to_json()) == full);
  CHECK_THROWS_AS(build_vocab(std::vector<std::string>{}, 1), InputError);
  CHECK_THROWS_AS(full.token(full.size()), InputError);
}

TEST_CASE("synthetic generation is deterministic") {
  const Dataset a = synth_generate(small_synth(42, 10));
  const Dataset b = synth_generate(small_synth(42, 10));
  for (const char* s : kSplits) CHECK(a.split(s) == b.split(s));
  CHECK(a.edits == b.edits);
  const Dataset c = synth_generate(small_synth(43, 10));
  CHECK_FALSE(a.split("train") == c.split("train"));
  SynthConfig bad = small_synth(1, 0);
  CHECK_THROWS_AS(synth_generate(bad), InputError);
}

TEST_CASE("captions are a pure function of the edit script") {
  const Dataset ds = synth_generate(small_synth(5, 60));
  int no_change = 0;
  for (const char* s : kSplits) {
    for (const auto& sample : ds.split(s)) {
      const auto& script = ds.edits.at(sample.id);
      CHECK(sample.captions == captions_from_edits(script));
      CHECK(sample.captions.size() == 5);
      CHECK(sample.image_a.height == sample.image_b.height);
      const bool unchanged = std::all_of(script.begin(), script.end(), [](const ShapeEdit& e) { return e.action == "none"; });
      if (unchanged) {
        ++no_change;
        CHECK(sample.captions == std::vector<std::string>(5, kNoChangeCaption));
        CHECK(sample.image_a == sample.image_b);
      }
    }
  }
  CHECK(no_change > 0);
  const std::vector<ShapeEdit> add = {{"building", "add", Box{4, 4, 12, 12}}};
  CHECK(caption_from_edits(add) == "a building appears on the bareland");
  const std::vector<ShapeEdit> rm = {{"road", "remove", Box{4, 4, 30, 8}}};
  CHECK(caption_from_edits(rm) == "the road is removed");
}

TEST_CASE("an added building is one more detector box in epoch B") {
  const Dataset ds = synth_generate(small_synth(9, 80));
  MockDetector det{AdapterConfig{}};
  const std::string prompts[] = {"building"};
  int checked = 0;
  for (const char* s : kSplits) {
    for (const auto& sample : ds.split(s)) {
      const auto& script = ds.edits.at(sample.id);
      int adds = 0, removes = 0;
      for (const auto& e : script) {
        if (e.cls != "building") continue;
        adds += e.action == "add";
        removes += e.action == "remove";
      }
      if (adds != 1 || removes != 0) continue;
      ++checked;
      CHECK(count_label(det.detect(sample.image_b, prompts), 0) ==
            count_label(det.detect(sample.image_a, prompts), 0) + 1);
    }
  }
  CHECK(checked >= 3);
}
