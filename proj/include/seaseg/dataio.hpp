#pragma once

// Persistence and dataset plumbing: PPM/PGM images, COCO-style manifests,
// sliding-window tiling, the synthetic shapes generator and checkpoints.

#include "seaseg/config.hpp"
#include "seaseg/detector.hpp"
#include "seaseg/supervision.hpp"
#include "seaseg/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace seaseg {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Writes `bytes` to a temporary sibling and renames it over `path`.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

// Binary 8-bit PPM (P6). Pixel values are clamped to [0,1] and rounded to k/255.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
// Binary 8-bit PGM (P5) of a [0,1] map.
void write_pgm(const std::filesystem::path& path, const Eigen::MatrixXd& gray);

// Rounds every pixel to the nearest k/255 so in-memory images match their
// on-disk form.
void quantize(Image& image);

struct ImageRecord {
  int id = 0;
  std::string file_name;
  int height = 0;
  int width = 0;
  int dropped_instances = 0;  // instances the generator failed to place
  bool operator==(const ImageRecord&) const = default;
};

struct Category {
  int id = 0;
  std::string name;
  bool operator==(const Category&) const = default;
};

struct DatasetManifest {
  std::vector<ImageRecord> images;
  std::vector<InstanceAnnotation> annotations;
  std::vector<Category> categories;
  nlohmann::json info = nlohmann::json::object();

  int num_classes() const { return static_cast<int>(categories.size()); }
  const ImageRecord& image(int id) const;
  std::vector<InstanceAnnotation> annotations_for(int image_id) const;
  // Checks referential integrity, RLE sizes, areas and category ids.
  void validate() const;
};

nlohmann::json rle_to_json(const RleMask& rle);
RleMask rle_from_json(const nlohmann::json& j);
nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::filesystem::path& path);

// Loads the image of `record` relative to the manifest directory.
Image load_image(const std::filesystem::path& manifest_dir, const ImageRecord& record);

// ---- tiling ----

struct TileOptions {
  int patch = 800;
  int stride = 200;
  bool keep_empty = false;
  bool pad = false;          // zero-pad images smaller than the patch
  std::uint64_t min_area = 10;
};

struct Tile {
  Image image;
  std::vector<InstanceAnnotation> annotations;  // clipped, original ids kept
  int x0 = 0;
  int y0 = 0;
};

// Patch origins along one axis: multiples of stride below dim - patch plus
// the final clamped origin dim - patch.
std::vector<int> tile_origins(int dim, int patch, int stride);

std::vector<Tile> tile(const Image& image, const std::vector<InstanceAnnotation>& annotations, const TileOptions& opt);

// Resizes an image bilinearly and its instance masks by nearest-neighbour
// sampling. Instances that vanish are dropped.
TrainSample resize_sample(const TrainSample& sample, int height, int width);

// Output size whose short side is `short_side` and whose long side keeps the
// aspect ratio, both rounded to positive multiples of `multiple`.
std::pair<int, int> scaled_size(int height, int width, int short_side, int multiple = 64);

// ---- synthetic data ----

enum class Archetype { Disc, Rectangle, Bar, Ring };
std::string to_string(Archetype a);
Archetype archetype_from_string(const std::string& s);

struct SynthConfig {
  int num_images = 8;
  int height = 256;
  int width = 256;
  std::vector<Archetype> classes{Archetype::Disc, Archetype::Rectangle, Archetype::Bar};
  double scale_min = 0.08;  // object side as a fraction of min(height, width)
  double scale_max = 0.7;
  int min_instances = 2;
  int max_instances = 5;
  double clutter_density = 1.0;   // distractors per 100x100 pixels
  double texture_amplitude = 0.15;
  int max_retries = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);

struct SynthDataset {
  DatasetManifest manifest;
  std::vector<Image> images;  // parallel to manifest.images
};

SynthDataset synth_generate(const SynthConfig& cfg);

// Writes images under `dir/images/` and the manifest to `dir/manifest.json`.
void write_dataset(const std::filesystem::path& dir, const DatasetManifest& manifest, const std::vector<Image>& images);

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  enum class Kind { Io, BadMagic, Version, ConfigHash, Scalar, Truncated, Corrupt };
  Kind kind;
  CheckpointError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
};

template <typename Scalar>
struct Checkpoint {
  ParamStore<Scalar> params;
  SgdState<Scalar> state;
  ModelConfig config;
};

template <typename Scalar>
void checkpoint_save(const std::filesystem::path& path, const ParamStore<Scalar>& params, const SgdState<Scalar>& state,
                     const ModelConfig& config);

// When `expected` is given its architecture hash must match the stored one.
template <typename Scalar>
Checkpoint<Scalar> checkpoint_load(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

}  // namespace seaseg
