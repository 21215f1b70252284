#pragma once

// End-to-end wiring: configuration, model assembly, training with
// best-BLEU-4 selection, evaluation, single-pair captioning and checkpoints.

#include "sagecc/backbone_encoder.hpp"
#include "sagecc/caption_generator.hpp"
#include "sagecc/data_pipeline.hpp"
#include "sagecc/eval_metrics.hpp"
#include "sagecc/foundation_adapters.hpp"
#include "sagecc/graph_reasoner.hpp"
#include "sagecc/kg_builder.hpp"
#include "sagecc/region_miner.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace sagecc {

/// Component switches for ablation runs. A disabled component
/// contributes a learned null embedding and creates no other parameters.
struct AblationFlags {
  bool mcl = true;  // motion-level change localization
  bool sg = true;   // cross-epoch matcher (off: every region unmatched)
  bool sca = true;  // semantic-level change aggregation
  bool cgr = true;  // change graph reasoner

  bool operator==(const AblationFlags&) const = default;
};

struct DatasetConfig {
  std::string root;  // empty: generate the synthetic set in memory
  std::string format = "levir-cc";
  SynthConfig synth;
};

struct TrainConfig {
  static constexpr int kSchemaVersion = 1;

  std::uint64_t seed = 0;
  double lr = 1e-4;
  double lr_decay = 0.5;
  int lr_step_epochs = 5;
  int max_epochs = 50;
  int batch_size = 8;
  double grad_clip = 5.0;
  int min_freq = 2;
  std::string validate_split = "val";
  DecodeOptions decode;
  std::string output_dir;

  DatasetConfig dataset;
  EncoderConfig encoder;
  AdapterConfig adapters;
  MinerConfig miner;
  KgBuildConfig kg;
  ReasonerConfig reasoner;
  DecoderConfig decoder;
  AblationFlags ablation;

  /// Throws ConfigError naming the first invalid knob.
  void validate() const;
  std::string to_json() const;
  /// Strict: unknown keys are errors; missing keys keep their defaults.
  static TrainConfig from_json(const std::string& text);
  static TrainConfig load(const std::string& path);
  /// Learning rate for a 1-based epoch (step decay).
  double lr_at(int epoch) const;
};

/// desk | overfit | baseline | a | b | c | d
TrainConfig preset(const std::string& name);
std::vector<std::string> preset_names();
/// Applies SAGECC_SEED when set.
void apply_seed_override(TrainConfig& config);

/// Frozen per-sample inputs computed once from the adapters.
struct SampleInputs {
  Grid<double> grid_a;
  Grid<double> grid_b;
  RegionInputs motion_a, motion_b;
  RegionInputs semantic_a, semantic_b;
  std::vector<std::vector<int>> captions;  // token ids
};

struct ForwardOutput {
  ad::Var visual;  // (h*w) x C_e
  ad::Var pi;      // (h*w) x 1
  ad::Var r;       // 1 x d_f
  EncoderOutput encoder;
  MatchResult match;
  std::vector<int> selected_a, selected_b;
};

class Model {
 public:
  /// Builds every component. `kg` is required when the graph reasoner is enabled.
  Model(const TrainConfig& config, Vocabulary vocab, std::optional<ChangeKG> kg);

  SampleInputs prepare(const BiTemporalSample& sample) const;
  SampleInputs prepare(const Image& a, const Image& b) const;

  std::vector<ForwardOutput> forward_batch(ad::Tape& tape,
                                           std::span<const SampleInputs* const> batch,
                                           bool training) const;
  /// Mean teacher-forced loss over the batch, one caption per sample.
  ad::Var loss(ad::Tape& tape, std::span<const SampleInputs* const> batch,
               std::span<const int> caption_index, bool training) const;

  std::vector<int> generate(const ForwardOutput& out, const DecodeOptions& options) const;
  std::string caption(const SampleInputs& inputs, const DecodeOptions& options) const;

  const TrainConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::optional<ChangeKG>& kg() const { return kg_; }
  nn::ParameterStore& params() { return store_; }
  const nn::ParameterStore& params() const { return store_; }
  const BiTemporalEncoder& encoder() const { return *encoder_; }
  const CaptionDecoder& decoder() const { return *decoder_; }
  const RegionMiner* miner() const { return miner_.get(); }
  const GraphReasoner* reasoner() const { return reasoner_.get(); }

 private:
  TrainConfig config_;
  Vocabulary vocab_;
  std::optional<ChangeKG> kg_;
  nn::ParameterStore store_;
  std::unique_ptr<MaskSegmenter> segmenter_;
  std::unique_ptr<PromptDetector> detector_;
  std::unique_ptr<TextEncoder> text_;
  std::unique_ptr<BiTemporalEncoder> encoder_;
  std::unique_ptr<RegionMiner> miner_;
  std::unique_ptr<GraphReasoner> reasoner_;
  std::unique_ptr<CaptionDecoder> decoder_;
  Matrix prompt_embeddings_;
  Matrix entity_embeddings_;
  Parameter* null_disc_ = nullptr;
  Parameter* null_sem_ = nullptr;
  Parameter* null_kg_ = nullptr;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double grad_norm = 0.0;
  MetricReport validation;
};

struct TrainResult {
  int best_epoch = 0;
  double best_bleu4 = -1.0;
  double final_train_loss = 0.0;
  std::vector<EpochRecord> history;
  std::string checkpoint_path;
  std::unique_ptr<Model> model;  // parameters of the best epoch

  std::string report_json() const;
};

using ProgressFn = std::function<void(const EpochRecord&)>;

Dataset resolve_dataset(const TrainConfig& config);
/// Vocabulary and graph derived from the train split.
Vocabulary dataset_vocab(const Dataset& dataset, int min_freq);
ChangeKG dataset_graph(const Dataset& dataset, const TrainConfig& config);

TrainResult train(const TrainConfig& config, const Dataset& dataset, const ProgressFn& progress = {});
TrainResult train(const TrainConfig& config, const ProgressFn& progress = {});

/// Decodes every sample of a prepared split.
std::vector<std::string> predict(const Model& model, std::span<const SampleInputs> inputs,
                                 const DecodeOptions& options);
MetricReport evaluate(const Model& model, const std::vector<BiTemporalSample>& samples,
                      const DecodeOptions& options);
/// Fails with ConfigError when the dataset vocabulary differs from the checkpoint's.
MetricReport evaluate_split(const Model& model, const Dataset& dataset, const std::string& split,
                            const DecodeOptions& options);

struct CaptionResult {
  std::string caption;
  std::vector<int> tokens;
  PriorMaps priors;
  size_t masks_a = 0;
  size_t masks_b = 0;
  MatchResult match;
  std::vector<int> selected_a, selected_b;
};

/// Full pipeline on one pair; writes a debug bundle when `debug_dir` is set.
CaptionResult caption_pair(const Model& model, const Image& a, const Image& b,
                           const std::string& debug_dir = {});

/// Binary container: magic, version, JSON header (config, vocab, graph,
/// parameter table, metadata), then raw little-endian doubles.
void save_checkpoint(const std::string& path, const Model& model, int epoch, double val_bleu4);
struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  int epoch = 0;
  double val_bleu4 = 0.0;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace sagecc
