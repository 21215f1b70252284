#pragma once

// Bi-temporal caption datasets: LEVIR-CC style on-disk layout, vocabulary,
// and a procedural generator of synthetic scenes with scripted edits.
//
// Layout under a dataset root:
//   images/<split>/A/<name>.png, images/<split>/B/<name>.png
//   LevirCCcaptions.json   {"images": [{filepath, filename, split, sentences: [{raw}]}]}
//   manifest.json          optional split counts (see docs/dataset_manifest.md)
//   edits.json             synthetic sets only: ground-truth edit scripts

#include "sagecc/core/image.hpp"
#include "sagecc/eval_metrics.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sagecc {

inline constexpr std::array<const char*, 3> kSplits = {"train", "val", "test"};

struct BiTemporalSample {
  std::string id;
  std::string split;
  Image image_a;
  Image image_b;
  std::vector<std::string> captions;

  bool operator==(const BiTemporalSample&) const = default;
};

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary();
  /// Tokens ordered by descending frequency, ties lexicographic.
  static Vocabulary build(std::span<const std::string> captions, int min_freq);

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  int size() const { return static_cast<int>(tokens_.size()); }
  int min_freq() const { return min_freq_; }

  /// Caption ids without BOS/EOS; unknown words map to UNK.
  std::vector<int> encode(const std::string& caption) const;
  /// Stops at EOS and skips PAD/BOS.
  std::string decode(std::span<const int> ids) const;

  const std::vector<std::string>& tokens() const { return tokens_; }
  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);
  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
  int min_freq_ = 1;
};

Vocabulary build_vocab(std::span<const std::string> captions, int min_freq);

/// One object edit in a synthetic scene.
struct ShapeEdit {
  std::string cls;     // building | road | vegetation
  std::string action;  // add | remove | none
  Box box;             // bounding box of the shape

  bool operator==(const ShapeEdit&) const = default;
};

struct SynthConfig {
  std::uint64_t seed = 0;
  int n = 50;
  int grid_size = 64;
  double val_fraction = 0.0;
  double test_fraction = 0.0;
  int max_retries = 200;
};

struct DatasetIndexEntry {
  std::string id;
  std::string split;
  std::string path_a;
  std::string path_b;
  std::vector<std::string> captions;
};

struct Dataset {
  std::string format = "levir-cc";
  std::map<std::string, std::vector<BiTemporalSample>> splits;
  /// Edit scripts keyed by sample id (synthetic sets only).
  std::map<std::string, std::vector<ShapeEdit>> edits;

  const std::vector<BiTemporalSample>& split(const std::string& name) const;
  std::vector<std::string> all_captions(const std::string& split_name) const;
  size_t size() const;
};

/// Caption set of an edit script (five copies of the templated sentence).
std::vector<std::string> captions_from_edits(std::span<const ShapeEdit> edits);
std::string caption_from_edits(std::span<const ShapeEdit> edits);
inline const std::string kNoChangeCaption = "the scene is the same as before";

/// Draws one shape into an image with the class palette color.
void draw_shape(Image& image, const std::string& cls, const Box& box);

Dataset synth_generate(const SynthConfig& config);
void write_dataset(const Dataset& dataset, const std::string& root);

/// Parses the caption file and validates the manifest; images are read lazily.
std::map<std::string, std::vector<DatasetIndexEntry>> index_dataset(const std::string& root,
                                                                    const std::string& format);
BiTemporalSample load_sample(const DatasetIndexEntry& entry);
Dataset load_dataset(const std::string& root, const std::string& format = "levir-cc");

struct Manifest {
  int version = 1;
  std::string format = "levir-cc";
  std::string captions_file = "LevirCCcaptions.json";
  std::map<std::string, long> counts;

  static Manifest levir_cc();
  std::string to_json() const;
  static Manifest from_json(const std::string& text);
};

}  // namespace sagecc
