#pragma once

// Command implementations behind the `seaseg` executable. Each command takes a
// resolved RunConfig, writes its outputs plus a config snapshot under an
// output directory and reports progress to a stream.

#include "seaseg/dataio.hpp"
#include "seaseg/eval.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>

namespace seaseg {

// Raises the allocator's mmap and trim thresholds (glibc only). Large
// short-lived tensors otherwise cost a page-fault storm per graph.
void tune_allocator();

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  SynthConfig synth;
  TileOptions tile;
  int eval_max_dets = 1000;
  int log_every = 50;
  int val_images = 0;  // ablation validation set size; 0 means a quarter of synth.num_images

  EvalConfig eval_config() const;
};

// Sections "model", "synth", "tile", "eval", "run" and the key "seed"; any
// other top-level key is read as a dotted model key. Unknown keys throw
// ConfigError naming the key path.
void apply_run_json(RunConfig& cfg, const nlohmann::json& j);
// "section.key=value" or a dotted model key.
void apply_run_override(RunConfig& cfg, const std::string& assignment);
nlohmann::json to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);
// Writes `run_config.json` into `dir`.
void write_snapshot(const std::filesystem::path& dir, const RunConfig& cfg);

// ---- synth ----

struct SynthSummary {
  int images = 0;
  int instances = 0;
  int dropped = 0;
  std::map<std::string, int> per_class;
  std::vector<std::pair<std::string, int>> area_histogram;  // sqrt-area bins
};

SynthSummary cmd_synth(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);

// ---- tile ----

struct TileSummary {
  int images = 0;
  int patches = 0;
  int instances_in = 0;
  int instances_out = 0;
};

TileSummary cmd_tile(const RunConfig& cfg, const std::filesystem::path& manifest, const std::filesystem::path& out,
                     std::ostream& log);

// ---- train ----

// Reads every image of a manifest into training samples.
std::vector<TrainSample> load_samples(const std::filesystem::path& manifest_path, DatasetManifest* manifest = nullptr);

struct TrainSummary {
  long steps = 0;
  JointLossReport last;
  bool aborted = false;  // non-finite loss; last_good.ckpt holds the parameters
  std::filesystem::path checkpoint;
};

// Trains for model.train.steps steps. Writes loss_log.tsv (one row per step),
// periodic checkpoint.ckpt, the final model.ckpt and run_config.json.
TrainSummary cmd_train(const RunConfig& cfg, const std::filesystem::path& manifest, const std::filesystem::path& out,
                       std::ostream& log);
TrainSummary train_on(const RunConfig& cfg, const std::vector<TrainSample>& samples, int num_classes,
                      const std::filesystem::path& out, std::ostream& log);

// ---- eval ----

struct EvalOptions {
  std::optional<std::filesystem::path> checkpoint;
  // Bypasses inference with a stored results file.
  std::optional<std::filesystem::path> results_file;
  // Architecture the checkpoint must match.
  const ModelConfig* expected = nullptr;
};

// Runs inference over the manifest (or reads the results file) and writes
// results.json, report.json, report.txt and run_config.json.
EvalReport cmd_eval(const RunConfig& cfg, const EvalOptions& opt, const std::filesystem::path& manifest,
                    const std::filesystem::path& out, std::ostream& log);

// Inference over every manifest image with the checkpoint's weights and
// architecture and the given post-processing settings.
std::vector<ResultRecord> predict_checkpoint(const std::filesystem::path& checkpoint, const DatasetManifest& manifest,
                                             const std::filesystem::path& manifest_dir, const InferConfig& infer,
                                             const ModelConfig* expected, std::ostream& log);

// ---- ablate ----

struct AblationCell {
  std::string name;
  std::vector<std::string> overrides;  // applied on top of the run config
};

// "sea=on|off", "scmb=on|off", "uniform=3..6", "sea_fusion=..",
// "scmb_fusion=.." or dotted keys, comma separated. Cells separated by ';'.
std::vector<AblationCell> parse_grid(const std::string& text);
// The 2x2 {SEA} x {SCMB} grid, optionally followed by uniform-scale and
// fusion-mode sweeps.
std::vector<AblationCell> default_grid(bool sweeps);

struct AblationRow {
  AblationCell cell;
  bool sea = false;
  bool scmb = false;
  std::string config_hash;
  EvalReport report;
  JointLossReport final_loss;
};

struct AblationData {
  std::filesystem::path train_manifest;
  std::filesystem::path val_manifest;
};

// Generates train and validation sets from cfg.synth (seeds `seed` and
// `seed + 1`) under out/data unless `data` is given, then trains and
// evaluates every cell. Writes ablation.md, ablation.json and run_config.json.
std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const std::vector<AblationCell>& cells,
                                    const std::optional<AblationData>& data, const std::filesystem::path& out,
                                    std::ostream& log);
std::string format_ablation(const std::vector<AblationRow>& rows);

// ---- viz ----

inline const std::vector<std::string> kVizPanels{"input", "semantic", "attention", "before", "after", "masks"};

// Renders the requested panels as image files and returns their paths in
// panel order.
std::vector<std::filesystem::path> cmd_viz(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                           const std::filesystem::path& image, const std::vector<std::string>& panels,
                                           const std::filesystem::path& out, std::ostream& log);

}  // namespace seaseg
