#include "sagecc/harness.hpp"

#include "sagecc/core/errors.hpp"

#include "json.hpp"

#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace sagecc {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

// One field list drives both serialization and strict parsing.
struct JsonWriter {
  ojson& j;
  template <typename T>
  void operator()(const char* key, const T& v) {
    j[key] = v;
  }
  template <typename F>
  void section(const char* key, F&& f) {
    ojson sub = ojson::object();
    JsonWriter w{sub};
    f(w);
    j[key] = std::move(sub);
  }
};

struct JsonReader {
  const json& j;
  std::string path;
  std::set<std::string> known;

  template <typename T>
  void operator()(const char* key, T& v) {
    known.insert(key);
    if (!j.contains(key)) return;
    try {
      v = j.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: '" + path + key + "' has the wrong type");
    }
  }
  template <typename F>
  void section(const char* key, F&& f) {
    known.insert(key);
    if (!j.contains(key)) return;
    const json& sub = j.at(key);
    if (!sub.is_object()) throw ConfigError("config: '" + path + key + "' must be an object");
    JsonReader r{sub, path + key + ".", {}};
    f(r);
    r.finish();
  }
  void finish() const {
    for (const auto& [k, _] : j.items()) {
      if (!known.count(k)) throw ConfigError("config: unknown key '" + path + k + "'");
    }
  }
};

template <typename V>
void visit_config(V& v, TrainConfig& c) {
  v("seed", c.seed);
  v("lr", c.lr);
  v("lr_decay", c.lr_decay);
  v("lr_step_epochs", c.lr_step_epochs);
  v("max_epochs", c.max_epochs);
  v("batch_size", c.batch_size);
  v("grad_clip", c.grad_clip);
  v("min_freq", c.min_freq);
  v("validate_split", c.validate_split);
  v("output_dir", c.output_dir);
  v.section("decode", [&](auto& s) {
    s("strategy", c.decode.strategy);
    s("beam", c.decode.beam);
    s("max_len", c.decode.max_len);
  });
  v.section("dataset", [&](auto& s) {
    s("root", c.dataset.root);
    s("format", c.dataset.format);
    s.section("synth", [&](auto& t) {
      t("seed", c.dataset.synth.seed);
      t("n", c.dataset.synth.n);
      t("grid_size", c.dataset.synth.grid_size);
      t("val_fraction", c.dataset.synth.val_fraction);
      t("test_fraction", c.dataset.synth.test_fraction);
      t("max_retries", c.dataset.synth.max_retries);
    });
  });
  v.section("encoder", [&](auto& s) {
    s("backbone", c.encoder.backbone);
    s("backbone_channels", c.encoder.backbone_channels);
    s("blocks", c.encoder.blocks);
    s("heads", c.encoder.heads);
    s("embed_dim", c.encoder.embed_dim);
    s("cosine_eps", c.encoder.cosine_eps);
    s("backbone_weights", c.encoder.backbone_weights);
  });
  v.section("adapters", [&](auto& s) {
    s("backend", c.adapters.backend);
    s("seed", c.adapters.seed);
    s("text_dim", c.adapters.text_dim);
    s("feature_channels", c.adapters.feature_channels);
    s("feature_stride", c.adapters.feature_stride);
    s("quantize_bits", c.adapters.quantize_bits);
    s("sam_checkpoint", c.adapters.sam_checkpoint);
    s("sam_feature_layer", c.adapters.sam_feature_layer);
    s("detector_checkpoint", c.adapters.detector_checkpoint);
    s("text_checkpoint", c.adapters.text_checkpoint);
    s("matcher_weights", c.adapters.matcher_weights);
    s("device", c.adapters.device);
  });
  v.section("miner", [&](auto& s) {
    s("max_masks", c.miner.max_masks);
    s("min_area", c.miner.min_area);
    s("nms_iou", c.miner.nms_iou);
    s("min_score", c.miner.min_score);
    s("roi_size", c.miner.roi_size);
    s("pooled_size", c.miner.pooled_size);
    s("descriptor_dim", c.miner.descriptor_dim);
    s("pos_dim", c.miner.pos_dim);
    s("tau", c.miner.tau);
    s("sinkhorn_iters", c.miner.sinkhorn_iters);
    s("sinkhorn_tol", c.miner.sinkhorn_tol);
    s("sinkhorn_max_iters", c.miner.sinkhorn_max_iters);
    s("temperature", c.miner.temperature);
    s("dustbin_affinity", c.miner.dustbin_affinity);
    s("pooling", c.miner.pooling);
    s("q", c.miner.q);
    s("prompts", c.miner.prompts);
    s("matcher", c.miner.matcher);
  });
  v.section("kg", [&](auto& s) {
    s("k", c.kg.k);
    s("merge_threshold", c.kg.merge_threshold);
    s("patterns", c.kg.patterns);
  });
  v.section("reasoner", [&](auto& s) {
    s("encoder", c.reasoner.encoder);
    s("layers", c.reasoner.layers);
    s("hidden", c.reasoner.hidden);
    s("out_dim", c.reasoner.out_dim);
    s("readout", c.reasoner.readout);
    s("identity_projection", c.reasoner.identity_projection);
  });
  v.section("decoder", [&](auto& s) {
    s("layers", c.decoder.layers);
    s("heads", c.decoder.heads);
    s("disc_proj", c.decoder.disc_proj);
    s("sem_proj", c.decoder.sem_proj);
    s("kg_proj", c.decoder.kg_proj);
    s("ffn_dim", c.decoder.ffn_dim);
    s("max_len", c.decoder.max_len);
    s("alpha_init", c.decoder.alpha_init);
    s("beta_init", c.decoder.beta_init);
    s("label_smoothing", c.decoder.label_smoothing);
    s("ln_eps", c.decoder.ln_eps);
  });
  v.section("ablation", [&](auto& s) {
    s("mcl", c.ablation.mcl);
    s("sg", c.ablation.sg);
    s("sca", c.ablation.sca);
    s("cgr", c.ablation.cgr);
  });
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("config: " + what);
}

bool one_of(const std::string& v, std::initializer_list<const char*> options) {
  for (const char* o : options) {
    if (v == o) return true;
  }
  return false;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void TrainConfig::validate() const {
  require(lr > 0.0 && std::isfinite(lr), "lr must be positive");
  require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must be in (0, 1]");
  require(lr_step_epochs >= 1, "lr_step_epochs must be >= 1");
  require(max_epochs >= 1, "max_epochs must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(grad_clip > 0.0, "grad_clip must be positive");
  require(min_freq >= 1, "min_freq must be >= 1");
  require(one_of(validate_split, {"train", "val", "test"}), "validate_split must be train|val|test");
  require(one_of(decode.strategy, {"greedy", "beam"}), "decode.strategy must be greedy|beam");
  require(decode.beam >= 1, "decode.beam must be >= 1");
  require(decode.max_len >= 1 && decode.max_len <= decoder.max_len,
          "decode.max_len must be in [1, decoder.max_len]");

  if (dataset.root.empty()) {
    require(dataset.synth.n >= 1, "dataset.synth.n must be >= 1");
    require(dataset.synth.grid_size >= 16, "dataset.synth.grid_size must be >= 16");
    require(dataset.synth.val_fraction >= 0.0 && dataset.synth.test_fraction >= 0.0 &&
                dataset.synth.val_fraction + dataset.synth.test_fraction < 1.0,
            "dataset.synth split fractions must be non-negative and sum below 1");
  }
  require(dataset.format == "levir-cc", "dataset.format must be levir-cc");

  require(one_of(encoder.backbone, {"desk", "resnet101"}), "encoder.backbone must be desk|resnet101");
  require(!encoder.backbone_channels.empty(), "encoder.backbone_channels must not be empty");
  for (int ch : encoder.backbone_channels) require(ch >= 1, "encoder.backbone_channels must be positive");
  require(encoder.blocks >= 0, "encoder.blocks must be >= 0");
  require(encoder.heads >= 1 && encoder.channels() % encoder.heads == 0,
          "encoder.heads must divide the backbone channel count");
  require(encoder.embed_dim >= 1, "encoder.embed_dim must be >= 1");

  require(one_of(adapters.backend, {"mock", "real"}), "adapters.backend must be mock|real");
  require(adapters.text_dim >= 1 && adapters.feature_channels >= 1 && adapters.feature_stride >= 1,
          "adapter dims must be positive");
  require(adapters.quantize_bits >= 1 && adapters.quantize_bits <= 8,
          "adapters.quantize_bits must be in [1, 8]");

  require(miner.max_masks >= 1, "miner.max_masks must be >= 1");
  require(miner.nms_iou > 0.0 && miner.nms_iou <= 1.0, "miner.nms_iou must be in (0, 1]");
  require(miner.tau >= 0.0 && miner.tau <= 1.0, "miner.tau must be in [0, 1]");
  require(miner.sinkhorn_iters >= 1, "miner.sinkhorn_iters must be >= 1");
  require(miner.sinkhorn_tol >= 0.0, "miner.sinkhorn_tol must be >= 0");
  require(miner.sinkhorn_max_iters >= miner.sinkhorn_iters,
          "miner.sinkhorn_max_iters must be >= miner.sinkhorn_iters");
  require(miner.temperature > 0.0, "miner.temperature must be positive");
  require(miner.q >= 1, "miner.q must be >= 1");
  require(miner.roi_size >= miner.pooled_size && miner.pooled_size >= 3,
          "miner.roi_size >= miner.pooled_size >= 3");
  require(miner.descriptor_dim >= 1 && miner.pos_dim >= 2 && miner.pos_dim % 4 == 0,
          "miner.pos_dim must be a positive multiple of 4");
  require(one_of(miner.pooling, {"mean", "attention"}), "miner.pooling must be mean|attention");
  require(one_of(miner.matcher, {"sinkhorn", "superglue"}), "miner.matcher must be sinkhorn|superglue");
  require(!miner.prompts.empty(), "miner.prompts must not be empty");
  if (ablation.sca && adapters.backend == "mock") {
    require(adapters.text_dim == miner.descriptor_dim,
            "adapters.text_dim must equal miner.descriptor_dim for region-text similarity");
  }

  require(kg.k >= 0, "kg.k must be >= 0");
  require(kg.merge_threshold > 0.0 && kg.merge_threshold <= 1.0, "kg.merge_threshold must be in (0, 1]");

  require(one_of(reasoner.encoder, {"rgcn", "gcn"}), "reasoner.encoder must be rgcn|gcn");
  require(one_of(reasoner.readout, {"mean", "attention"}), "reasoner.readout must be mean|attention");
  require(reasoner.layers >= 1 && reasoner.hidden >= 1 && reasoner.out_dim >= 1,
          "reasoner dims must be positive");

  require(decoder.layers >= 1, "decoder.layers must be >= 1");
  require(decoder.disc_proj >= 1 && decoder.sem_proj >= 1 && decoder.kg_proj >= 1 &&
              decoder.ffn_dim >= 1,
          "decoder dims must be positive");
  require(decoder.heads >= 1 && decoder.model_dim() % decoder.heads == 0,
          "decoder.heads must divide disc_proj + sem_proj + kg_proj");
  require(decoder.max_len >= 1, "decoder.max_len must be >= 1");
  require(decoder.label_smoothing >= 0.0 && decoder.label_smoothing < 1.0,
          "decoder.label_smoothing must be in [0, 1)");
  require(!decoder.passthrough_fusion, "decoder.passthrough_fusion is a test hook");
}

std::string TrainConfig::to_json() const {
  ojson j;
  j["schema_version"] = kSchemaVersion;
  TrainConfig copy = *this;
  JsonWriter w{j};
  visit_config(w, copy);
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  if (!j.contains("schema_version")) throw ConfigError("config: missing schema_version");
  if (!j.at("schema_version").is_number_integer() || j.at("schema_version").get<int>() != kSchemaVersion) {
    throw ConfigError("config: unsupported schema_version (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
  TrainConfig c;
  JsonReader r{j, "", {"schema_version"}};
  visit_config(r, c);
  r.finish();
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".toml") {
    throw ConfigError("config: TOML is not supported, use JSON");
  }
  return from_json(read_file(path));
}

double TrainConfig::lr_at(int epoch) const {
  if (epoch < 1) throw ConfigError("lr_at: epochs are 1-based");
  return lr * std::pow(lr_decay, (epoch - 1) / lr_step_epochs);
}

std::vector<std::string> preset_names() {
  return {"desk", "overfit", "baseline", "a", "b", "c", "d"};
}

TrainConfig preset(const std::string& name) {
  TrainConfig c;
  c.dataset.synth.n = 100;
  c.dataset.synth.val_fraction = 0.1;
  c.dataset.synth.test_fraction = 0.1;
  c.output_dir = "runs/" + name;
  if (name == "desk" || name == "d") return c;
  if (name == "overfit") {
    // Memorization run: every pair is in train and validation selects on train.
    c.dataset.synth.n = 50;
    c.dataset.synth.val_fraction = 0.0;
    c.dataset.synth.test_fraction = 0.0;
    c.validate_split = "train";
    c.max_epochs = 30;
    c.lr = 2e-3;
    c.min_freq = 1;
    c.kg.k = 5;
    c.decoder.label_smoothing = 0.0;
    return c;
  }
  if (name == "baseline") {
    c.ablation = {false, false, false, false};
    return c;
  }
  if (name == "a") {
    c.ablation = {true, false, false, false};
    return c;
  }
  if (name == "b") {
    c.ablation = {true, true, false, false};
    return c;
  }
  if (name == "c") {
    c.ablation = {true, true, true, false};
    return c;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

void apply_seed_override(TrainConfig& config) {
  const char* env = std::getenv("SAGECC_SEED");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == nullptr || *end != '\0') throw ConfigError("SAGECC_SEED must be an unsigned integer");
  config.seed = v;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const TrainConfig& config, Vocabulary vocab, std::optional<ChangeKG> kg)
    : config_(config), vocab_(std::move(vocab)), kg_(std::move(kg)) {
  config_.validate();
  const AblationFlags& f = config_.ablation;
  if (f.sg && !f.mcl) throw ConfigError("ablation: the matcher requires motion-level localization");
  if (f.cgr && (!kg_ || kg_->empty())) throw ConfigError("ablation: graph reasoner needs a change graph");

  nn::Rng rng(config_.seed);
  if (f.mcl || f.sca) segmenter_ = make_segmenter(config_.adapters);
  if (f.sca) detector_ = make_detector(config_.adapters);
  if (f.sca || f.cgr) text_ = make_text_encoder(config_.adapters);

  encoder_ = std::make_unique<BiTemporalEncoder>(store_, config_.encoder, rng);

  MinerConfig mc = config_.miner;
  mc.motion = f.mcl;
  mc.semantic = f.sca;
  if (f.mcl || f.sca) {
    miner_ = std::make_unique<RegionMiner>(store_, mc, config_.adapters.feature_channels, rng);
  }
  if (f.sca) {
    if (text_->dim() != mc.descriptor_dim) {
      throw ConfigError("text encoder dim " + std::to_string(text_->dim()) +
                        " differs from the region descriptor dim " + std::to_string(mc.descriptor_dim));
    }
    prompt_embeddings_ = text_->embed(mc.prompts);
  }
  if (f.cgr) {
    reasoner_ = std::make_unique<GraphReasoner>(store_, config_.reasoner, text_->dim(),
                                                static_cast<int>(kg_->relations.size()), rng);
    entity_embeddings_ = text_->embed(kg_->entities);
  }
  if (!f.mcl) null_disc_ = &store_.normal("model.null_disc", 1, mc.motion_dim(), 0.02, rng);
  if (!f.sca) null_sem_ = &store_.normal("model.null_sem", 1, mc.semantic_dim(), 0.02, rng);
  if (!f.cgr) null_kg_ = &store_.normal("model.null_kg", 1, config_.reasoner.out_dim, 0.02, rng);

  decoder_ = std::make_unique<CaptionDecoder>(store_, config_.decoder, vocab_.size(),
                                              config_.encoder.embed_dim, mc.motion_dim(),
                                              mc.semantic_dim(), config_.reasoner.out_dim, rng);
}

SampleInputs Model::prepare(const Image& a, const Image& b) const {
  if (a.empty() || b.empty()) throw InputError("empty image");
  if (a.height != b.height || a.width != b.width) {
    throw InputError("image shapes differ: " + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                     std::to_string(b.width));
  }
  SampleInputs in;
  in.grid_a = to_grid(a);
  in.grid_b = to_grid(b);
  if (config_.ablation.mcl) {
    in.motion_a = prepare_motion_inputs(a, *segmenter_, miner_->config());
    in.motion_b = prepare_motion_inputs(b, *segmenter_, miner_->config());
  }
  if (config_.ablation.sca) {
    in.semantic_a = prepare_semantic_inputs(a, *detector_, *segmenter_, miner_->config());
    in.semantic_b = prepare_semantic_inputs(b, *detector_, *segmenter_, miner_->config());
  }
  return in;
}

SampleInputs Model::prepare(const BiTemporalSample& sample) const {
  SampleInputs in;
  try {
    in = prepare(sample.image_a, sample.image_b);
  } catch (const Error& e) {
    throw InputError(sample.id + ": " + e.what());
  }
  const auto max_len = static_cast<size_t>(config_.decoder.max_len);
  for (const auto& c : sample.captions) {
    std::vector<int> ids = vocab_.encode(c);
    if (ids.size() > max_len) ids.resize(max_len);
    in.captions.push_back(std::move(ids));
  }
  return in;
}

std::vector<ForwardOutput> Model::forward_batch(ad::Tape& tape,
                                                std::span<const SampleInputs* const> batch,
                                                bool training) const {
  std::vector<std::pair<const Grid<double>*, const Grid<double>*>> pairs;
  for (const SampleInputs* s : batch) pairs.emplace_back(&s->grid_a, &s->grid_b);
  std::vector<EncoderOutput> enc = encoder_->encode_batch(tape, pairs, training);

  const AblationFlags& f = config_.ablation;
  const ad::Var f_kg =
      f.cgr ? reasoner_->forward(tape, entity_embeddings_, *kg_) : tape.parameter(*null_kg_);

  std::vector<ForwardOutput> out;
  out.reserve(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    const SampleInputs& in = *batch[i];
    ForwardOutput o;
    o.encoder = std::move(enc[i]);
    ad::Var f_disc;
    if (f.mcl) {
      ad::ScopeGuard scope(tape, "motion");
      const DescriptorSet d1 = miner_->describe_regions(tape, in.motion_a, 1);
      const DescriptorSet d2 = miner_->describe_regions(tape, in.motion_b, 2);
      o.match = f.sg ? miner_->match(d1, d2) : RegionMiner::all_unmatched(d1.count(), d2.count());
      f_disc = miner_->motion_change_repr(tape, o.match, d1, d2);
    } else {
      f_disc = tape.parameter(*null_disc_);
    }
    const ad::Var f_sem =
        f.sca ? miner_->semantic_change_repr(tape, in.semantic_a, in.semantic_b, prompt_embeddings_,
                                             &o.selected_a, &o.selected_b)
              : tape.parameter(*null_sem_);
    o.r = decoder_->fuse_change(tape, f_disc, f_sem, f_kg);
    o.pi = decoder_->bias_column(tape, o.encoder.priors);
    o.visual = o.encoder.embedding.data;
    out.push_back(std::move(o));
  }
  return out;
}

ad::Var Model::loss(ad::Tape& tape, std::span<const SampleInputs* const> batch,
                    std::span<const int> caption_index, bool training) const {
  if (batch.empty() || caption_index.size() != batch.size()) {
    throw InputError("loss: batch and caption index sizes differ");
  }
  std::vector<ForwardOutput> outs = forward_batch(tape, batch, training);
  ad::ScopeGuard scope(tape, "loss");
  ad::Var total;
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& caps = batch[i]->captions;
    if (caps.empty()) throw InputError("loss: sample without captions");
    const auto& ids = caps[static_cast<size_t>(caption_index[i]) % caps.size()];
    std::vector<int> input{Vocabulary::kBos};
    input.insert(input.end(), ids.begin(), ids.end());
    std::vector<int> target(ids.begin(), ids.end());
    target.push_back(Vocabulary::kEos);
    const ad::Var logits = decoder_->forward(tape, input, outs[i].visual, outs[i].r, &outs[i].pi);
    const ad::Var l = ce_loss(logits, target, config_.decoder.label_smoothing, Vocabulary::kPad);
    total = total.valid() ? ad::add(total, l) : l;
  }
  return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

std::vector<int> Model::generate(const ForwardOutput& out, const DecodeOptions& options) const {
  const Matrix visual = out.visual.value();
  const Matrix r = out.r.value();
  const Matrix pi = out.pi.value();
  NextTokenFn next = [&](const std::vector<int>& prefix) {
    ad::Tape t;
    const ad::Var v = t.constant(visual), rv = t.constant(r), p = t.constant(pi);
    const ad::Var logits = decoder_->forward(t, prefix, v, rv, &p);
    const ad::Var lp = ad::log_softmax_rows(ad::slice_rows(logits, logits.rows() - 1, 1));
    return RowVector(lp.value().row(0));
  };
  DecodeOptions o = options;
  o.bos = Vocabulary::kBos;
  o.eos = Vocabulary::kEos;
  o.max_len = std::min(options.max_len, config_.decoder.max_len);
  return sagecc::generate(next, o);
}

std::string Model::caption(const SampleInputs& inputs, const DecodeOptions& options) const {
  ad::Tape tape;
  const SampleInputs* batch[] = {&inputs};
  const std::vector<ForwardOutput> outs = forward_batch(tape, batch, false);
  return vocab_.decode(generate(outs.front(), options));
}

// ---------------------------------------------------------------------------
// Training and evaluation

Dataset resolve_dataset(const TrainConfig& config) {
  if (config.dataset.root.empty()) return synth_generate(config.dataset.synth);
  return load_dataset(config.dataset.root, config.dataset.format);
}

Vocabulary dataset_vocab(const Dataset& dataset, int min_freq) {
  const std::vector<std::string> caps = dataset.all_captions("train");
  if (caps.empty()) throw InputError("dataset has no training captions");
  return build_vocab(caps, min_freq);
}

ChangeKG dataset_graph(const Dataset& dataset, const TrainConfig& config) {
  const std::vector<std::string> caps = dataset.all_captions("train");
  auto text = make_text_encoder(config.adapters);
  return build_graph(caps, *text, config.kg);
}

namespace {

std::vector<std::vector<std::string>> references_of(const std::vector<BiTemporalSample>& samples) {
  std::vector<std::vector<std::string>> refs;
  refs.reserve(samples.size());
  for (const auto& s : samples) refs.push_back(s.captions);
  return refs;
}

MetricReport score_prepared(const Model& model, std::span<const SampleInputs> inputs,
                            const std::vector<BiTemporalSample>& samples,
                            const DecodeOptions& options) {
  return score_corpus(make_corpus(predict(model, inputs, options), references_of(samples)));
}

std::vector<SampleInputs> prepare_all(const Model& model, const std::vector<BiTemporalSample>& samples) {
  std::vector<SampleInputs> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(model.prepare(s));
  return out;
}

std::string grad_diagnostics(const nn::ParameterStore& store) {
  std::vector<std::pair<double, std::string>> norms;
  bool nonfinite = false;
  for (const Parameter* p : store.all()) {
    if (!p->trainable || p->grad.size() == 0) continue;
    const double n = p->grad.norm();
    if (!std::isfinite(n)) nonfinite = true;
    norms.emplace_back(std::isfinite(n) ? n : std::numeric_limits<double>::infinity(), p->name);
  }
  std::sort(norms.begin(), norms.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::ostringstream ss;
  ss << (nonfinite ? "non-finite gradients;" : "gradients finite;") << " largest grad norms:";
  for (size_t i = 0; i < std::min<size_t>(5, norms.size()); ++i) {
    ss << ' ' << norms[i].second << '=' << norms[i].first;
  }
  return ss.str();
}

// Fisher-Yates with a portable draw so orderings agree across standard libraries.
void shuffle(std::vector<size_t>& v, nn::Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

}  // namespace

std::vector<std::string> predict(const Model& model, std::span<const SampleInputs> inputs,
                                 const DecodeOptions& options) {
  std::vector<std::string> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) out.push_back(model.caption(in, options));
  return out;
}

MetricReport evaluate(const Model& model, const std::vector<BiTemporalSample>& samples,
                      const DecodeOptions& options) {
  if (samples.empty()) throw InputError("evaluate: empty split");
  const std::vector<SampleInputs> inputs = prepare_all(model, samples);
  return score_prepared(model, inputs, samples, options);
}

MetricReport evaluate_split(const Model& model, const Dataset& dataset, const std::string& split,
                            const DecodeOptions& options) {
  const auto& samples = dataset.split(split);
  if (samples.empty()) throw InputError("evaluate: split '" + split + "' is empty");
  const auto train_it = dataset.splits.find("train");
  if (train_it != dataset.splits.end() && !train_it->second.empty()) {
    const Vocabulary rebuilt = dataset_vocab(dataset, model.config().min_freq);
    if (!(rebuilt == model.vocab())) {
      throw ConfigError("vocabulary mismatch: checkpoint has " + std::to_string(model.vocab().size()) +
                        " tokens, dataset train split yields " + std::to_string(rebuilt.size()));
    }
  } else {
    for (const auto& s : samples) {
      for (const auto& c : s.captions) {
        for (const auto& w : caption_tokens(c)) {
          if (!model.vocab().contains(w)) {
            throw ConfigError("vocabulary mismatch: '" + w + "' in " + s.id +
                              " is not in the checkpoint vocabulary");
          }
        }
      }
    }
  }
  return evaluate(model, samples, options);
}

TrainResult train(const TrainConfig& config, const Dataset& dataset, const ProgressFn& progress) {
  config.validate();
  const auto& train_samples = dataset.split("train");
  if (train_samples.empty()) throw InputError("train: dataset has no training samples");
  const auto& val_samples = dataset.split(config.validate_split);
  if (val_samples.empty()) throw InputError("train: validation split '" + config.validate_split + "' is empty");

  Vocabulary vocab = dataset_vocab(dataset, config.min_freq);
  std::optional<ChangeKG> kg;
  if (config.ablation.cgr) kg = dataset_graph(dataset, config);
  auto model = std::make_unique<Model>(config, std::move(vocab), std::move(kg));

  const std::vector<SampleInputs> train_inputs = prepare_all(*model, train_samples);
  std::vector<SampleInputs> val_storage;
  if (config.validate_split != "train") val_storage = prepare_all(*model, val_samples);
  std::span<const SampleInputs> val_inputs =
      config.validate_split == "train" ? std::span<const SampleInputs>(train_inputs)
                                       : std::span<const SampleInputs>(val_storage);

  nn::ParameterStore& store = model->params();
  const std::vector<Parameter*> trainable = store.trainable();
  nn::Adam opt(config.lr);
  nn::Rng order_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  DecodeOptions val_decode = config.decode;
  val_decode.strategy = "greedy";

  TrainResult result;
  std::vector<Matrix> best_values;
  std::vector<size_t> order(train_inputs.size());
  std::iota(order.begin(), order.end(), size_t{0});
  const auto bsz = static_cast<size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = config.lr_at(epoch);
    opt.set_lr(rec.lr);
    shuffle(order, order_rng);
    double loss_sum = 0.0, norm_sum = 0.0;
    size_t batches = 0;
    for (size_t start = 0; start < order.size(); start += bsz, ++batches) {
      const size_t end = std::min(order.size(), start + bsz);
      std::vector<const SampleInputs*> batch;
      std::vector<int> caption_index;
      for (size_t k = start; k < end; ++k) {
        batch.push_back(&train_inputs[order[k]]);
        caption_index.push_back(static_cast<int>((static_cast<size_t>(epoch - 1) + order[k]) %
                                                 std::max<size_t>(1, train_inputs[order[k]].captions.size())));
      }
      store.zero_grad();
      ad::Tape tape;
      const ad::Var loss = model->loss(tape, batch, caption_index, true);
      tape.backward(loss);
      const double norm = nn::grad_norm(trainable);
      if (!std::isfinite(loss.scalar()) || !std::isfinite(norm)) {
        std::string ids;
        for (size_t k = start; k < end; ++k) ids += (ids.empty() ? "" : ",") + train_samples[order[k]].id;
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches) + " [" + ids + "]: loss=" +
                            std::to_string(loss.scalar()) + "; " + grad_diagnostics(store));
      }
      nn::clip_grad_norm(trainable, config.grad_clip);
      opt.step(trainable);
      loss_sum += loss.scalar() * static_cast<double>(end - start);
      norm_sum += norm;
    }
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.grad_norm = norm_sum / static_cast<double>(batches);
    rec.validation = score_prepared(*model, val_inputs, val_samples, val_decode);
    result.history.push_back(rec);
    if (progress) progress(rec);
    if (rec.validation.bleu4 > result.best_bleu4) {
      result.best_bleu4 = rec.validation.bleu4;
      result.best_epoch = epoch;
      best_values.clear();
      for (const Parameter* p : store.all()) best_values.push_back(p->value);
      if (!config.output_dir.empty()) {
        fs::create_directories(config.output_dir);
        result.checkpoint_path = (fs::path(config.output_dir) / "best.ckpt").string();
        save_checkpoint(result.checkpoint_path, *model, epoch, rec.validation.bleu4);
      }
    }
  }
  result.final_train_loss = result.history.back().train_loss;
  const auto params = store.all();
  for (size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  result.model = std::move(model);
  return result;
}

TrainResult train(const TrainConfig& config, const ProgressFn& progress) {
  return train(config, resolve_dataset(config), progress);
}

std::string TrainResult::report_json() const {
  ojson j;
  j["best_epoch"] = best_epoch;
  j["best_bleu4"] = best_bleu4;
  j["final_train_loss"] = final_train_loss;
  j["checkpoint"] = checkpoint_path;
  ojson hist = ojson::array();
  for (const auto& r : history) {
    hist.push_back({{"epoch", r.epoch},
                    {"lr", r.lr},
                    {"train_loss", r.train_loss},
                    {"grad_norm", r.grad_norm},
                    {"validation", ojson::parse(r.validation.to_json())}});
  }
  j["history"] = std::move(hist);
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Single pair

namespace {

Image heatmap(const Matrix& m) {
  Image img(static_cast<int>(m.rows()), static_cast<int>(m.cols()));
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double v = std::clamp(m(y, x), 0.0, 1.0);
      const auto g = static_cast<std::uint8_t>(std::lround(v * 255.0));
      std::uint8_t* p = img.px(y, x);
      p[0] = p[1] = p[2] = g;
    }
  }
  return img;
}

ojson matrix_json(const Matrix& m) {
  ojson rows = ojson::array();
  for (Index i = 0; i < m.rows(); ++i) {
    ojson row = ojson::array();
    for (Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    rows.push_back(std::move(row));
  }
  return rows;
}

ojson selected_json(const RegionInputs& in, const std::vector<int>& selected) {
  ojson arr = ojson::array();
  for (int i : selected) {
    const Box& b = in.proposals[static_cast<size_t>(i)].box;
    arr.push_back({{"index", i}, {"box", {b.x0, b.y0, b.x1, b.y1}}});
  }
  return arr;
}

}  // namespace

CaptionResult caption_pair(const Model& model, const Image& a, const Image& b,
                           const std::string& debug_dir) {
  const SampleInputs in = model.prepare(a, b);
  ad::Tape tape;
  const SampleInputs* batch[] = {&in};
  const std::vector<ForwardOutput> outs = model.forward_batch(tape, batch, false);
  const ForwardOutput& o = outs.front();

  CaptionResult res;
  res.tokens = model.generate(o, model.config().decode);
  res.caption = model.vocab().decode(res.tokens);
  res.priors = o.encoder.priors.maps();
  res.masks_a = in.motion_a.size();
  res.masks_b = in.motion_b.size();
  res.match = o.match;
  res.selected_a = o.selected_a;
  res.selected_b = o.selected_b;

  if (!debug_dir.empty()) {
    fs::create_directories(debug_dir);
    const fs::path dir(debug_dir);
    write_png((dir / "prior_consistency.png").string(), heatmap(res.priors.consistency));
    write_png((dir / "prior_change.png").string(), heatmap(res.priors.change));
    ojson priors = {{"consistency", matrix_json(res.priors.consistency)},
                    {"change", matrix_json(res.priors.change)}};
    std::ofstream(dir / "priors.json") << priors.dump(2) << '\n';
    if (model.config().ablation.mcl) dump_region_debug(debug_dir, in.motion_a, in.motion_b, o.match);
    ojson summary;
    summary["caption"] = res.caption;
    summary["tokens"] = res.tokens;
    summary["masks"] = {res.masks_a, res.masks_b};
    summary["selected"] = {{"a", selected_json(in.semantic_a, res.selected_a)},
                           {"b", selected_json(in.semantic_b, res.selected_b)}};
    std::ofstream(dir / "caption.json") << summary.dump(2) << '\n';
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'A', 'G', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_raw(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw InputError("truncated checkpoint: " + path);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, int epoch, double val_bleu4) {
  ojson header;
  header["config"] = ojson::parse(model.config().to_json());
  header["vocab"] = ojson::parse(model.vocab().to_json());
  header["graph"] = model.kg() ? ojson::parse(graph_to_json(*model.kg())) : ojson();
  header["epoch"] = epoch;
  header["val_bleu4"] = val_bleu4;
  ojson table = ojson::array();
  for (const Parameter* p : model.params().all()) {
    table.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  }
  header["params"] = std::move(table);
  const std::string text = header.dump();

  const fs::path tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write checkpoint " + path);
    out.write(kMagic, sizeof kMagic);
    write_raw(out, kCheckpointVersion);
    write_raw(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const Parameter* p : model.params().all()) {
      out.write(reinterpret_cast<const char*>(p->value.data()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(p->value.size())));
    }
    if (!out) throw InputError("failed writing checkpoint " + path);
  }
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("checkpoint not found: " + path);
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw InputError("not a checkpoint: " + path);
  }
  const auto version = read_raw<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw InputError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = read_raw<std::uint64_t>(in, path);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw InputError("truncated checkpoint: " + path);

  json header;
  try {
    header = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError("corrupt checkpoint header: " + std::string(e.what()));
  }
  const TrainConfig config = TrainConfig::from_json(header.at("config").dump());
  Vocabulary vocab = Vocabulary::from_json(header.at("vocab").dump());
  std::optional<ChangeKG> kg;
  if (!header.at("graph").is_null()) kg = graph_from_json(header.at("graph").dump());

  LoadedCheckpoint ck;
  ck.model = std::make_unique<Model>(config, std::move(vocab), std::move(kg));
  ck.epoch = header.at("epoch").get<int>();
  ck.val_bleu4 = header.at("val_bleu4").get<double>();

  const auto params = ck.model->params().all();
  const json& table = header.at("params");
  if (table.size() != params.size()) {
    throw ConfigError("checkpoint has " + std::to_string(table.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter* p = params[i];
    const json& e = table[i];
    if (e.at("name").get<std::string>() != p->name || e.at("rows").get<Index>() != p->value.rows() ||
        e.at("cols").get<Index>() != p->value.cols()) {
      throw ConfigError("checkpoint tensor " + std::to_string(i) + " (" +
                        e.at("name").get<std::string>() + ") does not match " + p->name);
    }
    if (!in.read(reinterpret_cast<char*>(p->value.data()),
                 static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(p->value.size())))) {
      throw InputError("truncated checkpoint: " + path);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw InputError("trailing bytes in checkpoint: " + path);
  return ck;
}

}  // namespace sagecc
