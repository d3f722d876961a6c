#include "seaseg/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace seaseg;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance segmentation with semantic attention and a scale-complementary mask branch"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Seed for data generation, initialization and sampling");
  app.add_option("--out", out, "Output directory");
  app.add_option("--set", sets, "Override a config key (key=value), repeatable");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");

  auto* tile_cmd = app.add_subcommand("tile", "Cut a dataset into overlapping patches");
  std::string tile_manifest;
  std::optional<int> patch, stride;
  tile_cmd->add_option("--manifest", tile_manifest, "Input manifest")->required();
  tile_cmd->add_option("--patch", patch, "Patch side in pixels");
  tile_cmd->add_option("--stride", stride, "Step between patch origins");

  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_data, ablate_grid, multiscale;
  std::optional<int> steps;
  train->add_option("--data", train_data, "Training manifest")->required();
  train->add_option("--steps", steps, "Number of SGD steps");
  train->add_option("--ablate", ablate_grid, "Module switches, e.g. sea=off,scmb=off");
  train->add_option("--multiscale", multiscale, "Comma separated short-side sizes for multi-scale training");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint or a results file");
  std::string eval_manifest, checkpoint, results_file;
  std::optional<int> max_dets;
  eval_cmd->add_option("--manifest", eval_manifest, "Ground-truth manifest")->required();
  eval_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint");
  eval_cmd->add_option("--results-file", results_file, "Score stored detections instead of running the model");
  eval_cmd->add_option("--max-dets", max_dets, "Detections kept per image");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate a grid of module settings");
  std::string grid, data_train, data_val;
  bool sweeps = false;
  ablate->add_option("--grid", grid, "Cells separated by ';', settings by ','");
  ablate->add_flag("--sweeps", sweeps, "Add uniform-scale and fusion-mode sweeps to the default grid");
  ablate->add_option("--train-data", data_train, "Training manifest (default: generated)");
  ablate->add_option("--val-data", data_val, "Validation manifest (default: generated)");

  auto* viz = app.add_subcommand("viz", "Render input, semantic prediction, attention, level maps and masks");
  std::string viz_ckpt, viz_image, panels;
  viz->add_option("--checkpoint", viz_ckpt, "Model checkpoint")->required();
  viz->add_option("--image", viz_image, "Input image (binary PPM)")->required();
  viz->add_option("--panels", panels, "Comma separated subset of input,semantic,attention,before,after,masks");

  CLI11_PARSE(app, argc, argv);
  tune_allocator();

  try {
    if (out.empty()) throw ConfigError("--out: an output directory is required");
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    for (const auto& s : sets) apply_run_override(cfg, s);
    if (seed) cfg.seed = *seed;

    if (synth->parsed()) {
      cmd_synth(cfg, out, std::cout);
    } else if (tile_cmd->parsed()) {
      if (patch) cfg.tile.patch = *patch;
      if (stride) cfg.tile.stride = *stride;
      cmd_tile(cfg, tile_manifest, out, std::cout);
    } else if (train->parsed()) {
      if (steps) cfg.model.train.steps = *steps;
      if (!ablate_grid.empty()) {
        const auto cells = parse_grid(ablate_grid);
        for (const auto& o : cells.front().overrides) apply_run_override(cfg, o);
      }
      if (!multiscale.empty()) apply_run_override(cfg, "train.multiscale_sizes=[" + multiscale + "]");
      const auto summary = cmd_train(cfg, train_data, out, std::cout);
      if (summary.aborted) return 3;
      std::cout << "checkpoint " << summary.checkpoint.string() << "\n";
    } else if (eval_cmd->parsed()) {
      if (max_dets) cfg.eval_max_dets = *max_dets;
      EvalOptions opt;
      if (!checkpoint.empty()) opt.checkpoint = checkpoint;
      if (!results_file.empty()) opt.results_file = results_file;
      if (!config_path.empty()) opt.expected = &cfg.model;
      cmd_eval(cfg, opt, eval_manifest, out, std::cout);
    } else if (ablate->parsed()) {
      std::optional<AblationData> data;
      if (!data_train.empty() || !data_val.empty()) {
        if (data_train.empty() || data_val.empty()) throw ConfigError("ablate: --train-data and --val-data go together");
        data = AblationData{data_train, data_val};
      }
      cmd_ablate(cfg, grid.empty() ? default_grid(sweeps) : parse_grid(grid), data, out, std::cout);
    } else if (viz->parsed()) {
      const auto list = panels.empty() ? kVizPanels : split_commas(panels);
      for (const auto& p : cmd_viz(cfg, viz_ckpt, viz_image, list, out, std::cout)) std::cout << p.string() << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const NonFiniteLoss& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
