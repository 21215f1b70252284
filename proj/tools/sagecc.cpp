// Command-line front end: train, eval, caption, kg build, data synth, metrics score.

#include "sagecc/harness.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
using namespace sagecc;

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::vector<json> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

// A line is either {"image_pair_id", key: ...} or the bare value.
std::pair<std::string, json> keyed(const json& row, const char* key, size_t index) {
  if (row.is_object()) {
    const std::string id = row.contains("image_pair_id") ? row.at("image_pair_id").get<std::string>()
                                                         : std::to_string(index);
    if (!row.contains(key)) throw ParseError(std::string("line ") + std::to_string(index + 1) + " lacks '" + key + "'");
    return {id, row.at(key)};
  }
  return {std::to_string(index), row};
}

int run_train(const std::string& config_path, const std::string& preset_name, const std::string& out_dir,
              int epochs) {
  TrainConfig config = config_path.empty() ? preset(preset_name) : TrainConfig::load(config_path);
  apply_seed_override(config);
  if (!out_dir.empty()) config.output_dir = out_dir;
  if (epochs > 0) config.max_epochs = epochs;
  config.validate();
  const TrainResult result = train(config, [](const EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.train_loss << " bleu4 "
              << r.validation.bleu4 << '\n';
  });
  std::cout << result.report_json() << '\n';
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& split, const std::string& data_root,
             const std::string& strategy, int beam, bool table) {
  LoadedCheckpoint ck = load_checkpoint(ckpt);
  TrainConfig config = ck.model->config();
  if (!data_root.empty()) config.dataset.root = data_root;
  const Dataset dataset = resolve_dataset(config);
  DecodeOptions options = config.decode;
  if (!strategy.empty()) options.strategy = strategy;
  if (beam > 0) options.beam = beam;
  const MetricReport report = evaluate_split(*ck.model, dataset, split, options);
  std::cout << report.to_json() << '\n';
  if (table) std::cerr << report.to_table();
  return 0;
}

int run_caption(const std::string& ckpt, const std::string& a, const std::string& b,
                const std::string& debug_dir) {
  LoadedCheckpoint ck = load_checkpoint(ckpt);
  const CaptionResult res = caption_pair(*ck.model, read_png(a), read_png(b), debug_dir);
  ojson j;
  j["caption"] = res.caption;
  j["masks"] = {res.masks_a, res.masks_b};
  if (!debug_dir.empty()) j["debug_dir"] = debug_dir;
  std::cout << j.dump(2) << '\n';
  return 0;
}

int run_kg_build(const std::string& captions_path, long k, const std::string& out,
                 const std::string& patterns) {
  std::vector<std::string> captions;
  const auto rows = read_jsonl(captions_path);
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto [id, caps] = keyed(rows[i], "captions", i);
    for (const auto& c : caps) captions.push_back(c.get<std::string>());
  }
  KgBuildConfig config;
  config.k = k;
  config.patterns = patterns;
  auto text = make_text_encoder(AdapterConfig{});
  const ChangeKG kg = build_graph(captions, *text, config);
  save_graph(out, kg);
  ojson j = {{"entities", kg.entities.size()}, {"relations", kg.relations.size()}, {"edges", kg.edges()},
             {"out", out}};
  std::cout << j.dump(2) << '\n';
  return 0;
}

int run_synth(std::uint64_t seed, int n, const std::string& out, int grid, double val, double test) {
  SynthConfig config;
  config.seed = seed;
  config.n = n;
  config.grid_size = grid;
  config.val_fraction = val;
  config.test_fraction = test;
  const Dataset ds = synth_generate(config);
  write_dataset(ds, out);
  ojson counts = ojson::object();
  for (const char* s : kSplits) counts[s] = ds.split(s).size();
  std::cout << ojson{{"out", out}, {"counts", counts}}.dump(2) << '\n';
  return 0;
}

int run_metrics(const std::string& hyp_path, const std::string& refs_path) {
  std::vector<std::string> ids, hyps;
  const auto hyp_rows = read_jsonl(hyp_path);
  for (size_t i = 0; i < hyp_rows.size(); ++i) {
    auto [id, v] = keyed(hyp_rows[i], "caption", i);
    ids.push_back(id);
    hyps.push_back(v.get<std::string>());
  }
  std::map<std::string, std::vector<std::string>> refs_by_id;
  const auto ref_rows = read_jsonl(refs_path);
  for (size_t i = 0; i < ref_rows.size(); ++i) {
    auto [id, v] = keyed(ref_rows[i], "captions", i);
    refs_by_id[id] = v.get<std::vector<std::string>>();
  }
  std::vector<std::vector<std::string>> refs;
  for (const auto& id : ids) {
    auto it = refs_by_id.find(id);
    if (it == refs_by_id.end()) throw InputError("no references for '" + id + "'");
    refs.push_back(it->second);
  }
  std::cout << score_corpus(make_corpus(hyps, refs)).to_json() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bi-temporal change captioning"};
  app.require_subcommand(1);

  std::string config_path, preset_name = "desk", out_dir;
  int epochs = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a model and keep the best-BLEU-4 checkpoint");
  auto* config_opt = train_cmd->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--preset", preset_name, "Built-in config when --config is absent")
      ->check(CLI::IsMember(preset_names()))
      ->excludes(config_opt);
  train_cmd->add_option("--out", out_dir, "Override output directory");
  train_cmd->add_option("--epochs", epochs, "Override max_epochs");

  std::string ckpt, split = "test", data_root, strategy;
  int beam = 0;
  bool table = false;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--split", split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--data", data_root, "Dataset root (default: the checkpoint's dataset)");
  eval_cmd->add_option("--strategy", strategy, "greedy | beam")->check(CLI::IsMember({"greedy", "beam"}));
  eval_cmd->add_option("--beam", beam, "Beam width");
  eval_cmd->add_flag("--table", table, "Also print a table to stderr");

  std::string img_a, img_b, debug_dir;
  auto* cap_cmd = app.add_subcommand("caption", "Caption one image pair");
  cap_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  cap_cmd->add_option("--a", img_a, "Earlier image (PNG)")->required();
  cap_cmd->add_option("--b", img_b, "Later image (PNG)")->required();
  cap_cmd->add_option("--debug-dir", debug_dir, "Write priors, masks and matches here");

  std::string captions_path, kg_out, patterns;
  long k = 50;
  auto* kg_cmd = app.add_subcommand("kg", "Change knowledge graph tools");
  kg_cmd->require_subcommand(1);
  auto* kg_build = kg_cmd->add_subcommand("build", "Build a graph from caption JSON lines");
  kg_build->add_option("--captions", captions_path, "JSON lines of {image_pair_id, captions}")
      ->required()
      ->check(CLI::ExistingFile);
  kg_build->add_option("--k", k, "Minimum triple frequency");
  kg_build->add_option("--out", kg_out, "Output graph JSON")->required();
  kg_build->add_option("--patterns", patterns, "Relation pattern table (JSON)");

  std::uint64_t seed = 0;
  int n = 50, grid = 64;
  double val = 0.0, test = 0.0;
  std::string data_out;
  auto* data_cmd = app.add_subcommand("data", "Dataset tools");
  data_cmd->require_subcommand(1);
  auto* synth = data_cmd->add_subcommand("synth", "Generate a synthetic dataset on disk");
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--n", n, "Number of pairs");
  synth->add_option("--out", data_out, "Output root")->required();
  synth->add_option("--grid", grid, "Image side in pixels");
  synth->add_option("--val", val, "Validation fraction");
  synth->add_option("--test", test, "Test fraction");

  std::string hyp_path, refs_path;
  auto* metrics_cmd = app.add_subcommand("metrics", "Caption metrics");
  metrics_cmd->require_subcommand(1);
  auto* score = metrics_cmd->add_subcommand("score", "Score hypotheses against references");
  score->add_option("--hyp", hyp_path, "JSON lines of {image_pair_id, caption}")->required()->check(CLI::ExistingFile);
  score->add_option("--refs", refs_path, "JSON lines of {image_pair_id, captions}")->required()->check(CLI::ExistingFile);

  std::string show_preset = "desk";
  auto* config_cmd = app.add_subcommand("config", "Print a preset as a JSON config");
  config_cmd->add_option("--preset", show_preset, "Preset name")->check(CLI::IsMember(preset_names()));

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return run_train(config_path, preset_name, out_dir, epochs);
    if (eval_cmd->parsed()) return run_eval(ckpt, split, data_root, strategy, beam, table);
    if (cap_cmd->parsed()) return run_caption(ckpt, img_a, img_b, debug_dir);
    if (kg_build->parsed()) return run_kg_build(captions_path, k, kg_out, patterns);
    if (synth->parsed()) return run_synth(seed, n, data_out, grid, val, test);
    if (score->parsed()) return run_metrics(hyp_path, refs_path);
    if (config_cmd->parsed()) {
      std::cout << preset(show_preset).to_json() << '\n';
      return 0;
    }
  } catch (const sagecc::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
