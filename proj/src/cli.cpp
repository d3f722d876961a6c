#include "seaseg/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace seaseg {

namespace fs = std::filesystem;
using nlohmann::json;

void tune_allocator() {
#ifdef __GLIBC__
  // Keep freed tensor buffers in the heap instead of returning them to the
  // kernel after every graph.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

// ---- run configuration ----

EvalConfig RunConfig::eval_config() const {
  EvalConfig e;
  e.max_dets = eval_max_dets;
  return e;
}

namespace {

template <typename T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

void apply_tile(TileOptions& t, const std::string& key, const json& v) {
  const std::string path = "tile." + key;
  if (key == "patch") t.patch = get_as<int>(v, path);
  else if (key == "stride") t.stride = get_as<int>(v, path);
  else if (key == "keep_empty") t.keep_empty = get_as<bool>(v, path);
  else if (key == "pad") t.pad = get_as<bool>(v, path);
  else if (key == "min_area") t.min_area = get_as<std::uint64_t>(v, path);
  else throw ConfigError(path + ": unknown key");
}

void apply_section(RunConfig& cfg, const std::string& section, const std::string& key, const json& v) {
  if (section == "synth") {
    json merged = to_json(cfg.synth);
    if (!merged.contains(key)) throw ConfigError("synth." + key + ": unknown key");
    merged[key] = v;
    cfg.synth = synth_config_from_json(merged);
  } else if (section == "tile") {
    apply_tile(cfg.tile, key, v);
  } else if (section == "eval") {
    if (key != "max_dets") throw ConfigError("eval." + key + ": unknown key");
    cfg.eval_max_dets = get_as<int>(v, "eval.max_dets");
  } else if (section == "run") {
    if (key == "log_every") cfg.log_every = get_as<int>(v, "run.log_every");
    else if (key == "val_images") cfg.val_images = get_as<int>(v, "run.val_images");
    else throw ConfigError("run." + key + ": unknown key");
  } else {
    throw ConfigError(section + ": unknown section");
  }
}

void apply_model_key(ModelConfig& m, const std::string& key, const json& v) {
  // Inside a "model" section plain names refer to the model.* keys.
  const std::string full = key.find('.') == std::string::npos ? "model." + key : key;
  apply_overrides(m, json{{full, v}});
}

bool is_section(const std::string& s) { return s == "synth" || s == "tile" || s == "eval" || s == "run"; }

}  // namespace

void apply_run_json(RunConfig& cfg, const json& j) {
  if (!j.is_object()) throw ConfigError("run configuration must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "seed") {
      cfg.seed = get_as<std::uint64_t>(value, "seed");
    } else if (key == "model") {
      if (!value.is_object()) throw ConfigError("model: expected an object");
      for (const auto& [k, v] : value.items()) apply_model_key(cfg.model, k, v);
    } else if (is_section(key)) {
      if (!value.is_object()) throw ConfigError(key + ": expected an object");
      for (const auto& [k, v] : value.items()) apply_section(cfg, key, k, v);
    } else {
      apply_overrides(cfg.model, json{{key, value}});
    }
  }
}

void apply_run_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must be key=value");
  const std::string key = assignment.substr(0, eq);
  json value = json::parse(assignment.substr(eq + 1), nullptr, false);
  if (value.is_discarded()) value = assignment.substr(eq + 1);
  const auto dot = key.find('.');
  const std::string section = key.substr(0, dot);
  if (key == "seed") cfg.seed = get_as<std::uint64_t>(value, "seed");
  else if (dot != std::string::npos && is_section(section)) apply_section(cfg, section, key.substr(dot + 1), value);
  else apply_overrides(cfg.model, json{{key, value}});
}

json to_json(const RunConfig& cfg) {
  const auto& t = cfg.tile;
  return {{"seed", cfg.seed},
          {"model", to_json(cfg.model)},
          {"synth", to_json(cfg.synth)},
          {"tile", {{"patch", t.patch}, {"stride", t.stride}, {"keep_empty", t.keep_empty}, {"pad", t.pad}, {"min_area", t.min_area}}},
          {"eval", {{"max_dets", cfg.eval_max_dets}}},
          {"run", {{"log_every", cfg.log_every}, {"val_images", cfg.val_images}}},
          {"architecture_hash", hash_hex(architecture_hash(cfg.model))}};
}

RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  j.erase("architecture_hash");
  RunConfig cfg;
  apply_run_json(cfg, j);
  return cfg;
}

void write_snapshot(const fs::path& dir, const RunConfig& cfg) { atomic_write(dir / "run_config.json", to_json(cfg).dump(2) + "\n"); }

// ---- synth ----

SynthSummary cmd_synth(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  SynthConfig sc = cfg.synth;
  sc.seed = cfg.seed;
  const SynthDataset ds = synth_generate(sc);
  write_dataset(out, ds.manifest, ds.images);
  RunConfig snapshot = cfg;
  snapshot.synth = sc;
  write_snapshot(out, snapshot);

  SynthSummary s;
  s.images = static_cast<int>(ds.manifest.images.size());
  s.instances = static_cast<int>(ds.manifest.annotations.size());
  for (const auto& r : ds.manifest.images) s.dropped += r.dropped_instances;
  std::map<int, std::string> names;
  for (const auto& c : ds.manifest.categories) {
    names[c.id] = c.name;
    s.per_class[c.name] = 0;
  }
  const std::vector<int> edges{0, 16, 32, 64, 128, 256, 512};
  std::vector<int> counts(edges.size(), 0);
  for (const auto& a : ds.manifest.annotations) {
    ++s.per_class[names[a.class_id]];
    const double side = std::sqrt(static_cast<double>(a.area));
    std::size_t bin = 0;
    while (bin + 1 < edges.size() && side >= edges[bin + 1]) ++bin;
    ++counts[bin];
  }
  for (std::size_t b = 0; b < edges.size(); ++b) {
    const std::string label = b + 1 < edges.size() ? "[" + std::to_string(edges[b]) + "," + std::to_string(edges[b + 1]) + ")"
                                                   : "[" + std::to_string(edges[b]) + ",inf)";
    s.area_histogram.emplace_back(label, counts[b]);
  }

  log << "images " << s.images << "  instances " << s.instances << "  dropped " << s.dropped << "\n";
  for (const auto& [name, n] : s.per_class) log << "  class " << std::left << std::setw(10) << name << n << "\n";
  log << "sqrt(area) histogram (px)\n";
  for (const auto& [label, n] : s.area_histogram) log << "  " << std::left << std::setw(12) << label << n << "\n";
  return s;
}

// ---- tile ----

TileSummary cmd_tile(const RunConfig& cfg, const fs::path& manifest_path, const fs::path& out, std::ostream& log) {
  if (cfg.tile.stride <= 0) throw ConfigError("tile.stride: must be positive");
  if (cfg.tile.patch <= 0) throw ConfigError("tile.patch: must be positive");
  const DatasetManifest in = load_manifest(manifest_path);
  const fs::path dir = manifest_path.parent_path();
  DatasetManifest m;
  m.categories = in.categories;
  m.info = {{"tiled_from", manifest_path.string()}, {"patch", cfg.tile.patch}, {"stride", cfg.tile.stride}};
  std::vector<Image> images;
  TileSummary s;
  int next_ann = 1;
  for (const auto& rec : in.images) {
    const Image img = load_image(dir, rec);
    const auto anns = in.annotations_for(rec.id);
    s.instances_in += static_cast<int>(anns.size());
    ++s.images;
    for (auto& t : tile(img, anns, cfg.tile)) {
      const int id = static_cast<int>(m.images.size()) + 1;
      char name[64];
      std::snprintf(name, sizeof name, "images/%06d.ppm", id);
      m.images.push_back({id, name, cfg.tile.patch, cfg.tile.patch, 0});
      for (auto a : t.annotations) {
        a.id = next_ann++;
        a.image_id = id;
        m.annotations.push_back(std::move(a));
      }
      images.push_back(std::move(t.image));
      ++s.patches;
    }
  }
  s.instances_out = static_cast<int>(m.annotations.size());
  write_dataset(out, m, images);
  write_snapshot(out, cfg);
  log << "images " << s.images << "  patches " << s.patches << "  instances in " << s.instances_in << "  surviving clipped "
      << s.instances_out << "\n";
  return s;
}

// ---- train ----

std::vector<TrainSample> load_samples(const fs::path& manifest_path, DatasetManifest* manifest) {
  DatasetManifest m = load_manifest(manifest_path);
  std::vector<TrainSample> samples;
  for (const auto& rec : m.images)
    samples.push_back(TrainSample::make(load_image(manifest_path.parent_path(), rec), m.annotations_for(rec.id)));
  if (manifest) *manifest = std::move(m);
  return samples;
}

namespace {

void check_image_size(int h, int w, const std::string& what) {
  if (h % 64 != 0 || w % 64 != 0 || h < 64 || w < 64)
    throw std::invalid_argument(what + ": image size " + std::to_string(h) + "x" + std::to_string(w) +
                                " is not a positive multiple of 64");
}

std::string loss_row(long step, double lr, const JointLossReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%ld\t%.6g\t%.9g\t%.9g\t%.9g\t%.9g\n", step, lr, r.l_total, r.l_detection, r.l_segmentation,
                r.l_scmb);
  return buf;
}

template <typename Scalar>
TrainSummary train_typed(const RunConfig& cfg, const ModelConfig& model, const std::vector<TrainSample>& samples,
                         const fs::path& out, std::ostream& log) {
  if (samples.empty()) throw std::invalid_argument("train: no training images");
  ParamStore<Scalar> params = init_model<Scalar>(model, cfg.seed);
  SgdState<Scalar> state;
  Rng order_rng(cfg.seed * 7919 + 1), step_rng(cfg.seed * 104729 + 2);

  // Multi-scale training resizes every sample to each configured short side.
  std::vector<std::vector<TrainSample>> scaled;
  for (int side : model.train.multiscale_sizes) {
    std::vector<TrainSample> v;
    for (const auto& s : samples) {
      const auto [h, w] = scaled_size(s.image.height, s.image.width, side);
      v.push_back(resize_sample(s, h, w));
    }
    scaled.push_back(std::move(v));
  }

  std::ofstream loss(out / "loss_log.tsv", std::ios::trunc);
  if (!loss) throw IoError("cannot write " + (out / "loss_log.tsv").string());
  loss << "step\tlr\tl_total\tl_detection\tl_segmentation\tl_scmb\n";

  std::vector<std::size_t> order(samples.size());
  TrainSummary summary;
  for (long step = 0; step < model.train.steps; ++step) {
    const auto pos = static_cast<std::size_t>(step) % samples.size();
    if (pos == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), order_rng);
    }
    const TrainSample* sample = &samples[order[pos]];
    if (!scaled.empty()) sample = &scaled[std::uniform_int_distribution<std::size_t>(0, scaled.size() - 1)(order_rng)][order[pos]];
    const double lr = learning_rate(model.train, state.step);
    try {
      summary.last = train_step(params, state, model, *sample, step_rng);
    } catch (const NonFiniteLoss& e) {
      // train_step leaves the parameters untouched when it throws.
      summary.aborted = true;
      summary.checkpoint = out / "last_good.ckpt";
      checkpoint_save(summary.checkpoint, params, state, model);
      log << "step " << step << ": " << e.what() << "; parameters saved to " << summary.checkpoint.string() << "\n";
      return summary;
    }
    ++summary.steps;
    loss << loss_row(step, lr, summary.last);
    loss.flush();
    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == model.train.steps))
      log << "step " << std::setw(6) << step << "  lr " << std::setprecision(4) << lr << "  loss " << summary.last.l_total
          << "  det " << summary.last.l_detection << "  seg " << summary.last.l_segmentation << "  scmb " << summary.last.l_scmb
          << "\n";
    if (model.train.checkpoint_every > 0 && (step + 1) % model.train.checkpoint_every == 0)
      checkpoint_save(out / "checkpoint.ckpt", params, state, model);
  }
  summary.checkpoint = out / "model.ckpt";
  checkpoint_save(summary.checkpoint, params, state, model);
  return summary;
}

}  // namespace

TrainSummary train_on(const RunConfig& cfg, const std::vector<TrainSample>& samples, int num_classes, const fs::path& out,
                      std::ostream& log) {
  RunConfig run = cfg;
  if (run.model.num_classes != num_classes) {
    log << "model.num_classes set to " << num_classes << " from the dataset categories\n";
    run.model.num_classes = num_classes;
  }
  run.model.validate();
  for (const auto& s : samples) check_image_size(s.image.height, s.image.width, "train");
  for (int side : run.model.train.multiscale_sizes)
    if (side < 64) throw ConfigError("train.multiscale_sizes: sizes must be at least 64");
  fs::create_directories(out);
  write_snapshot(out, run);
  if (run.model.scalar == "double") return train_typed<double>(run, run.model, samples, out, log);
  return train_typed<float>(run, run.model, samples, out, log);
}

TrainSummary cmd_train(const RunConfig& cfg, const fs::path& manifest, const fs::path& out, std::ostream& log) {
  DatasetManifest m;
  const auto samples = load_samples(manifest, &m);
  log << "training on " << samples.size() << " images, " << m.annotations.size() << " instances\n";
  return train_on(cfg, samples, m.num_classes(), out, log);
}

// ---- eval ----

namespace {

template <typename Scalar>
std::vector<ResultRecord> predict_typed(Checkpoint<Scalar> ck, const DatasetManifest& manifest, const fs::path& dir,
                                        const InferConfig& infer_cfg, std::ostream& log) {
  ck.config.infer = infer_cfg;
  if (ck.config.num_classes != manifest.num_classes())
    throw std::invalid_argument("checkpoint has " + std::to_string(ck.config.num_classes) + " classes, manifest has " +
                                std::to_string(manifest.num_classes()));
  std::vector<ResultRecord> results;
  for (std::size_t i = 0; i < manifest.images.size(); ++i) {
    const auto& rec = manifest.images[i];
    const Image img = load_image(dir, rec);
    check_image_size(img.height, img.width, rec.file_name);
    for (auto& d : infer(ck.params, ck.config, img)) results.push_back({rec.id, std::move(d)});
    if ((i + 1) % 25 == 0) log << "  inferred " << (i + 1) << "/" << manifest.images.size() << " images\n";
  }
  return results;
}

}  // namespace

std::vector<ResultRecord> predict_checkpoint(const fs::path& checkpoint, const DatasetManifest& manifest, const fs::path& dir,
                                             const InferConfig& infer_cfg, const ModelConfig* expected, std::ostream& log) {
  try {
    return predict_typed(checkpoint_load<float>(checkpoint, expected), manifest, dir, infer_cfg, log);
  } catch (const CheckpointError& e) {
    if (e.kind != CheckpointError::Kind::Scalar) throw;
  }
  return predict_typed(checkpoint_load<double>(checkpoint, expected), manifest, dir, infer_cfg, log);
}

EvalReport cmd_eval(const RunConfig& cfg, const EvalOptions& opt, const fs::path& manifest_path, const fs::path& out,
                    std::ostream& log) {
  const DatasetManifest manifest = load_manifest(manifest_path);
  std::vector<ResultRecord> results;
  if (opt.results_file) {
    results = results_from_json(json::parse(read_file(*opt.results_file)));
    log << "read " << results.size() << " detections from " << opt.results_file->string() << "\n";
  } else {
    if (!opt.checkpoint) throw std::invalid_argument("eval: a checkpoint or a results file is required");
    // Training takes the class count from the data, so the expected
    // architecture does too.
    std::optional<ModelConfig> expected;
    if (opt.expected) {
      expected = *opt.expected;
      expected->num_classes = manifest.num_classes();
    }
    results = predict_checkpoint(*opt.checkpoint, manifest, manifest_path.parent_path(), cfg.model.infer,
                                 expected ? &*expected : nullptr, log);
  }
  const EvalReport report = evaluate(results, manifest, cfg.eval_config());
  fs::create_directories(out);
  atomic_write(out / "results.json", results_to_json(results).dump() + "\n");
  atomic_write(out / "report.json", to_json(report, manifest).dump(2) + "\n");
  const std::string text = format_report(report, manifest);
  atomic_write(out / "report.txt", text);
  write_snapshot(out, cfg);
  log << text;
  return report;
}

// ---- ablate ----

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t"), e = s.find_last_not_of(" \t");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

std::string expand_shorthand(const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos) throw ConfigError("grid: '" + item + "' must be key=value");
  const std::string key = trim(item.substr(0, eq)), value = trim(item.substr(eq + 1));
  auto on_off = [&](const std::string& k) {
    if (value != "on" && value != "off") throw ConfigError("grid: " + key + " expects on or off");
    return k + "=" + (value == "on" ? "true" : "false");
  };
  if (key == "sea") return on_off("sea.enabled");
  if (key == "scmb") return on_off("scmb.enabled");
  if (key == "uniform") return "sea.uniform_level=" + value;
  if (key == "sea_fusion") return "sea.fusion=" + value;
  if (key == "scmb_fusion") return "scmb.fusion=" + value;
  return key + "=" + value;
}

}  // namespace

std::vector<AblationCell> parse_grid(const std::string& text) {
  std::vector<AblationCell> cells;
  std::stringstream cs(text);
  std::string cell;
  while (std::getline(cs, cell, ';')) {
    cell = trim(cell);
    if (cell.empty()) continue;
    AblationCell c{cell, {}};
    std::stringstream is(cell);
    std::string item;
    while (std::getline(is, item, ','))
      if (!trim(item).empty()) c.overrides.push_back(expand_shorthand(item));
    cells.push_back(std::move(c));
  }
  if (cells.empty()) throw ConfigError("grid: no cells");
  return cells;
}

std::vector<AblationCell> default_grid(bool sweeps) {
  std::string text = "sea=off,scmb=off;sea=on,scmb=off;sea=off,scmb=on;sea=on,scmb=on";
  if (sweeps) {
    for (int u = 3; u <= 6; ++u) text += ";sea=on,scmb=on,uniform=" + std::to_string(u);
    text += ";sea=on,scmb=on,sea_fusion=CONCATE;sea=on,scmb=on,scmb_fusion=MULTIPLY";
  }
  return parse_grid(text);
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  auto pct = [](const Metric& m) {
    if (!m) return std::string("undef");
    char b[16];
    std::snprintf(b, sizeof b, "%.1f", 100 * *m);
    return std::string(b);
  };
  std::ostringstream ss;
  ss << "| # | cell | SEA | SCMB | AP^m | AP50^m | AP75^m | APs^m | APm^m | APl^m | AP^b | dAP^m | config hash |\n";
  ss << "|---|------|-----|------|------|--------|--------|-------|-------|-------|------|-------|-------------|\n";
  const Metric base = rows.empty() ? Metric{} : rows.front().report.mask.ap;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const auto& m = r.report.mask;
    std::string delta = "-";
    if (i > 0 && base && m.ap) {
      char b[16];
      std::snprintf(b, sizeof b, "%+.1f", 100 * (*m.ap - *base));
      delta = b;
    }
    ss << "| " << i + 1 << " | " << r.cell.name << " | " << (r.sea ? "yes" : "no") << " | " << (r.scmb ? "yes" : "no") << " | "
       << pct(m.ap) << " | " << pct(m.ap50) << " | " << pct(m.ap75) << " | " << pct(m.aps) << " | " << pct(m.apm) << " | "
       << pct(m.apl) << " | " << pct(r.report.box.ap) << " | " << delta << " | " << r.config_hash << " |\n";
  }
  return ss.str();
}

std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const std::vector<AblationCell>& cells,
                                    const std::optional<AblationData>& data, const fs::path& out, std::ostream& log) {
  fs::create_directories(out);
  write_snapshot(out, cfg);
  AblationData d;
  if (data) {
    d = *data;
  } else {
    SynthConfig train_cfg = cfg.synth, val_cfg = cfg.synth;
    train_cfg.seed = cfg.seed;
    val_cfg.seed = cfg.seed + 1;
    val_cfg.num_images = cfg.val_images > 0 ? cfg.val_images : std::max(1, cfg.synth.num_images / 4);
    for (auto [name, sc] : {std::pair{"train", train_cfg}, std::pair{"val", val_cfg}}) {
      const auto ds = synth_generate(sc);
      write_dataset(out / "data" / name, ds.manifest, ds.images);
    }
    d = {out / "data" / "train" / "manifest.json", out / "data" / "val" / "manifest.json"};
    log << "generated " << train_cfg.num_images << " training and " << val_cfg.num_images << " validation images\n";
  }
  DatasetManifest train_manifest;
  const auto samples = load_samples(d.train_manifest, &train_manifest);
  const DatasetManifest val = load_manifest(d.val_manifest);

  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    RunConfig run = cfg;
    for (const auto& o : cells[i].overrides) apply_run_override(run, o);
    run.model.num_classes = train_manifest.num_classes();
    run.model.validate();
    const fs::path cell_dir = out / "cells" / std::to_string(i + 1);
    log << "[" << i + 1 << "/" << cells.size() << "] " << cells[i].name << "\n";
    const TrainSummary ts = train_on(run, samples, train_manifest.num_classes(), cell_dir, log);
    if (ts.aborted) throw NonFiniteLoss("ablation cell '" + cells[i].name + "' diverged", ts.last);
    const auto results = predict_checkpoint(ts.checkpoint, val, d.val_manifest.parent_path(), run.model.infer, &run.model, log);
    AblationRow row{cells[i], run.model.sea.enabled, run.model.scmb.enabled, hash_hex(architecture_hash(run.model)),
                    evaluate(results, val, run.eval_config()), ts.last};
    atomic_write(cell_dir / "report.json", to_json(row.report, val).dump(2) + "\n");
    log << "  AP^m " << (row.report.mask.ap ? *row.report.mask.ap : 0.0) << "\n";
    rows.push_back(std::move(row));
  }

  json j = json::array();
  for (const auto& r : rows)
    j.push_back({{"cell", r.cell.name},
                 {"overrides", r.cell.overrides},
                 {"sea", r.sea},
                 {"scmb", r.scmb},
                 {"config_hash", r.config_hash},
                 {"report", to_json(r.report, val)}});
  atomic_write(out / "ablation.json", j.dump(2) + "\n");
  const std::string table = format_ablation(rows);
  atomic_write(out / "ablation.md", table);
  log << table;
  return rows;
}

// ---- viz ----

namespace {

using Plane = Eigen::MatrixXd;

Image gray_image(const Plane& p) {
  Image img(static_cast<int>(p.rows()), static_cast<int>(p.cols()));
  for (auto& c : img.planes) c = p.cast<float>();
  return img;
}

Plane nearest_resize(const Plane& p, int h, int w) {
  Plane out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out(y, x) = p(std::min<Eigen::Index>(p.rows() - 1, static_cast<Eigen::Index>((y + 0.5) * p.rows() / h)),
                    std::min<Eigen::Index>(p.cols() - 1, static_cast<Eigen::Index>((x + 0.5) * p.cols() / w)));
  return out;
}

template <typename Scalar>
Plane channel_mean(const Tensor<Scalar>& t) {
  Plane m = Plane::Zero(t.h, t.w);
  for (int c = 0; c < t.c; ++c) m += t.slice(0, c).template cast<double>();
  return m / std::max(1, t.c);
}

std::array<double, 3> palette(int k) {
  static const std::array<std::array<double, 3>, 8> colors{{{0.90, 0.10, 0.10},
                                                            {0.10, 0.60, 0.90},
                                                            {0.95, 0.80, 0.10},
                                                            {0.20, 0.80, 0.30},
                                                            {0.70, 0.30, 0.90},
                                                            {0.95, 0.50, 0.10},
                                                            {0.10, 0.90, 0.80},
                                                            {0.90, 0.40, 0.70}}};
  return colors[static_cast<std::size_t>(k) % colors.size()];
}

// Level montages share one normalization per level so equal maps render
// identically.
template <typename Scalar>
std::pair<Image, Image> level_montages(const VizMaps<Scalar>& maps, int h, int w) {
  Plane before = Plane::Zero(h, 5 * w), after = Plane::Zero(h, 5 * w);
  for (int l = 0; l < 5; ++l) {
    const Plane b = channel_mean(maps.before[l]), a = channel_mean(maps.after[l]);
    const double lo = std::min(b.minCoeff(), a.minCoeff()), hi = std::max(b.maxCoeff(), a.maxCoeff());
    const double span = hi > lo ? hi - lo : 1.0;
    before.middleCols(l * w, w) = nearest_resize(((b.array() - lo) / span).matrix(), h, w);
    after.middleCols(l * w, w) = nearest_resize(((a.array() - lo) / span).matrix(), h, w);
  }
  return {gray_image(before), gray_image(after)};
}

template <typename Scalar>
std::vector<fs::path> viz_typed(const Checkpoint<Scalar>& ck, const Image& image, const std::vector<std::string>& panels,
                                const fs::path& out, std::ostream& log) {
  const int H = image.height, W = image.width;
  const VizMaps<Scalar> maps = feature_maps(ck.params, ck.config, image);
  std::optional<std::pair<Image, Image>> montages;
  std::vector<fs::path> written;
  for (const auto& panel : panels) {
    Image img;
    if (panel == "input") {
      img = image;
    } else if (panel == "semantic") {
      img = Image(H, W);
      if (maps.probabilities) {
        const auto& p = *maps.probabilities;
        Eigen::MatrixXi label(p.h, p.w);
        for (int y = 0; y < p.h; ++y)
          for (int x = 0; x < p.w; ++x) {
            int best = 0;
            for (int c = 1; c < p.c; ++c)
              if (p.at(0, c, y, x) > p.at(0, best, y, x)) best = c;
            label(y, x) = best;
          }
        const Plane up = nearest_resize(label.cast<double>(), H, W);
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const int k = static_cast<int>(up(y, x));
            const auto col = k == 0 ? std::array<double, 3>{0, 0, 0} : palette(k - 1);
            for (int c = 0; c < 3; ++c) img.planes[c](y, x) = static_cast<float>(col[c]);
          }
      } else {
        log << "semantic: SEA disabled, panel left blank\n";
      }
    } else if (panel == "attention") {
      img = Image(H, W);
      if (maps.attention) {
        Plane m = channel_mean(*maps.attention);
        const double lo = m.minCoeff(), hi = m.maxCoeff();
        m = ((m.array() - lo) / (hi > lo ? hi - lo : 1.0)).matrix();
        img = gray_image(nearest_resize(m, H, W));
      } else {
        log << "attention: SEA disabled, panel left blank\n";
      }
    } else if (panel == "before" || panel == "after") {
      if (!montages) montages = level_montages(maps, H, W);
      img = panel == "before" ? montages->first : montages->second;
    } else if (panel == "masks") {
      img = image;
      int k = 0;
      for (const auto& d : infer(ck.params, ck.config, image)) {
        if (d.score < 0.5 || k >= 50) break;
        const BinaryMap m = rle_decode(d.mask);
        const auto col = palette(d.class_id - 1);
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x)
            if (m(y, x))
              for (int c = 0; c < 3; ++c) img.planes[c](y, x) = static_cast<float>(0.45 * img.planes[c](y, x) + 0.55 * col[c]);
        ++k;
      }
      log << "masks: " << k << " instances rendered\n";
    } else {
      throw std::invalid_argument("viz: unknown panel '" + panel + "'");
    }
    const fs::path path = out / (panel + ".ppm");
    write_ppm(path, img);
    written.push_back(path);
  }
  return written;
}

}  // namespace

std::vector<fs::path> cmd_viz(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& image_path,
                              const std::vector<std::string>& panels, const fs::path& out, std::ostream& log) {
  for (const auto& p : panels)
    if (std::find(kVizPanels.begin(), kVizPanels.end(), p) == kVizPanels.end())
      throw std::invalid_argument("viz: unknown panel '" + p + "'");
  const Image image = read_ppm(image_path);
  check_image_size(image.height, image.width, image_path.string());
  fs::create_directories(out);
  write_snapshot(out, cfg);
  try {
    return viz_typed(checkpoint_load<float>(checkpoint), image, panels, out, log);
  } catch (const CheckpointError& e) {
    if (e.kind != CheckpointError::Kind::Scalar) throw;
  }
  return viz_typed(checkpoint_load<double>(checkpoint), image, panels, out, log);
}

}  // namespace seaseg
