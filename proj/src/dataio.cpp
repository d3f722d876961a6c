#include "seaseg/dataio.hpp"

#include "seaseg/resize.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace seaseg {

namespace fs = std::filesystem;
using nlohmann::json;

void atomic_write(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string header_token(const std::string& data, std::size_t& pos) {
  for (;;) {
    while (pos < data.size() && std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
    if (pos < data.size() && data[pos] == '#') {
      while (pos < data.size() && data[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
  return data.substr(start, pos - start);
}

}  // namespace

void quantize(Image& image) {
  for (auto& p : image.planes) p = p.unaryExpr([](float v) { return static_cast<float>(to_byte(v)) / 255.0f; });
}

void write_ppm(const fs::path& path, const Image& image) {
  std::string bytes = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  bytes.reserve(bytes.size() + static_cast<std::size_t>(image.height) * image.width * 3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) bytes.push_back(static_cast<char>(to_byte(image.planes[c](y, x))));
  atomic_write(path, bytes);
}

Image read_ppm(const fs::path& path) {
  const std::string data = read_file(path);
  std::size_t pos = 0;
  if (header_token(data, pos) != "P6") throw IoError(path.string() + ": not a binary PPM (P6)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(header_token(data, pos));
    h = std::stoi(header_token(data, pos));
    maxval = std::stoi(header_token(data, pos));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed PPM header");
  }
  if (maxval != 255 || w <= 0 || h <= 0) throw IoError(path.string() + ": unsupported PPM header");
  ++pos;
  if (data.size() < pos + static_cast<std::size_t>(w) * h * 3) throw IoError(path.string() + ": truncated PPM data");
  Image img(h, w);
  const auto* p = reinterpret_cast<const unsigned char*>(data.data() + pos);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.planes[c](y, x) = static_cast<float>(*p++) / 255.0f;
  return img;
}

void write_pgm(const fs::path& path, const Eigen::MatrixXd& gray) {
  std::string bytes = "P5\n" + std::to_string(gray.cols()) + " " + std::to_string(gray.rows()) + "\n255\n";
  for (Eigen::Index y = 0; y < gray.rows(); ++y)
    for (Eigen::Index x = 0; x < gray.cols(); ++x) bytes.push_back(static_cast<char>(to_byte(gray(y, x))));
  atomic_write(path, bytes);
}

// ---- manifest ----

const ImageRecord& DatasetManifest::image(int id) const {
  for (const auto& r : images)
    if (r.id == id) return r;
  throw std::out_of_range("manifest has no image with id " + std::to_string(id));
}

std::vector<InstanceAnnotation> DatasetManifest::annotations_for(int image_id) const {
  std::vector<InstanceAnnotation> out;
  for (const auto& a : annotations)
    if (a.image_id == image_id) out.push_back(a);
  return out;
}

void DatasetManifest::validate() const {
  std::set<int> image_ids, category_ids, annotation_ids;
  for (const auto& r : images)
    if (!image_ids.insert(r.id).second) throw IoError("manifest: duplicate image id " + std::to_string(r.id));
  for (const auto& c : categories)
    if (!category_ids.insert(c.id).second) throw IoError("manifest: duplicate category id " + std::to_string(c.id));
  for (const auto& a : annotations) {
    const std::string where = "manifest: annotation " + std::to_string(a.id);
    if (!annotation_ids.insert(a.id).second) throw IoError(where + " has a duplicate id");
    if (!image_ids.count(a.image_id)) throw IoError(where + " refers to unknown image " + std::to_string(a.image_id));
    if (!category_ids.count(a.class_id)) throw IoError(where + " has unknown category " + std::to_string(a.class_id));
    const ImageRecord& r = image(a.image_id);
    if (a.mask.height != r.height || a.mask.width != r.width) throw IoError(where + " mask size differs from its image");
    std::uint64_t total = 0;
    for (auto c : a.mask.counts) total += c;
    if (total != static_cast<std::uint64_t>(r.height) * r.width) throw IoError(where + " RLE does not cover the image");
    if (rle_area(a.mask) != a.area) throw IoError(where + " area differs from its mask");
    if (!(rle_bbox(a.mask) == a.bbox)) throw IoError(where + " bbox is not the tight box of its mask");
  }
}

json rle_to_json(const RleMask& rle) { return {{"size", {rle.height, rle.width}}, {"counts", rle.counts}}; }

RleMask rle_from_json(const json& j) {
  RleMask r;
  r.height = j.at("size").at(0).get<int>();
  r.width = j.at("size").at(1).get<int>();
  r.counts = j.at("counts").get<std::vector<std::uint32_t>>();
  return r;
}

json manifest_to_json(const DatasetManifest& m) {
  json images = json::array(), anns = json::array(), cats = json::array();
  for (const auto& r : m.images) {
    json j = {{"id", r.id}, {"file_name", r.file_name}, {"height", r.height}, {"width", r.width}};
    if (r.dropped_instances) j["dropped_instances"] = r.dropped_instances;
    images.push_back(j);
  }
  for (const auto& a : m.annotations)
    anns.push_back({{"id", a.id},
                    {"image_id", a.image_id},
                    {"category_id", a.class_id},
                    {"segmentation", rle_to_json(a.mask)},
                    {"bbox", {a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h}},
                    {"area", a.area},
                    {"iscrowd", 0}});
  for (const auto& c : m.categories) cats.push_back({{"id", c.id}, {"name", c.name}});
  return {{"info", m.info}, {"images", images}, {"annotations", anns}, {"categories", cats}};
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  try {
    if (j.contains("info")) m.info = j.at("info");
    for (const auto& r : j.at("images"))
      m.images.push_back({r.at("id").get<int>(), r.at("file_name").get<std::string>(), r.at("height").get<int>(),
                          r.at("width").get<int>(), r.value("dropped_instances", 0)});
    for (const auto& a : j.at("annotations")) {
      InstanceAnnotation x;
      x.id = a.at("id").get<int>();
      x.image_id = a.at("image_id").get<int>();
      x.class_id = a.at("category_id").get<int>();
      x.mask = rle_from_json(a.at("segmentation"));
      const auto& b = a.at("bbox");
      x.bbox = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
      x.area = a.at("area").get<std::uint64_t>();
      m.annotations.push_back(std::move(x));
    }
    for (const auto& c : j.at("categories")) m.categories.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
  } catch (const json::exception& e) {
    throw IoError(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& m) { atomic_write(path, manifest_to_json(m).dump(1) + "\n"); }

DatasetManifest load_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

Image load_image(const fs::path& manifest_dir, const ImageRecord& record) {
  Image img = read_ppm(manifest_dir / record.file_name);
  if (img.height != record.height || img.width != record.width)
    throw IoError(record.file_name + ": image size differs from the manifest record");
  return img;
}

// ---- tiling ----

std::vector<int> tile_origins(int dim, int patch, int stride) {
  if (stride <= 0) throw std::invalid_argument("tile: stride must be positive");
  if (patch <= 0) throw std::invalid_argument("tile: patch must be positive");
  std::vector<int> out;
  if (dim <= patch) return {0};
  for (int o = 0; o < dim - patch; o += stride) out.push_back(o);
  out.push_back(dim - patch);
  return out;
}

std::vector<Tile> tile(const Image& image, const std::vector<InstanceAnnotation>& annotations, const TileOptions& opt) {
  if (opt.stride <= 0) throw std::invalid_argument("tile: stride must be positive");
  if (!opt.pad && (image.height < opt.patch || image.width < opt.patch))
    throw std::invalid_argument("tile: image smaller than the patch and padding is disabled");
  std::vector<BinaryMap> masks;
  for (const auto& a : annotations) masks.push_back(rle_decode(a.mask));
  std::vector<Tile> out;
  for (int y0 : tile_origins(image.height, opt.patch, opt.stride))
    for (int x0 : tile_origins(image.width, opt.patch, opt.stride)) {
      const int h = std::min(opt.patch, image.height - y0);
      const int w = std::min(opt.patch, image.width - x0);
      Tile t;
      t.x0 = x0;
      t.y0 = y0;
      t.image = Image(opt.patch, opt.patch);
      for (int c = 0; c < 3; ++c) t.image.planes[c].topLeftCorner(h, w) = image.planes[c].block(y0, x0, h, w);
      for (std::size_t i = 0; i < annotations.size(); ++i) {
        BinaryMap m = BinaryMap::Zero(opt.patch, opt.patch);
        m.topLeftCorner(h, w) = masks[i].block(y0, x0, h, w);
        InstanceAnnotation a = InstanceAnnotation::from_mask(m, annotations[i].class_id, annotations[i].id, annotations[i].image_id);
        if (a.area >= opt.min_area) t.annotations.push_back(std::move(a));
      }
      if (opt.keep_empty || !t.annotations.empty()) out.push_back(std::move(t));
    }
  return out;
}

TrainSample resize_sample(const TrainSample& sample, int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("resize_sample: size must be positive");
  const Image& src = sample.image;
  const Mat<float> ry = bilinear_matrix<float>(src.height, height), rx = bilinear_matrix<float>(src.width, width);
  Image img(height, width);
  for (int c = 0; c < 3; ++c) img.planes[c] = ry * src.planes[c] * rx.transpose();
  auto nearest = [](int in, int out, int i) { return std::min(in - 1, static_cast<int>((i + 0.5) * in / out)); };
  std::vector<InstanceAnnotation> anns;
  for (std::size_t k = 0; k < sample.annotations.size(); ++k) {
    const BinaryMap& m = sample.masks[k];
    BinaryMap r(height, width);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) r(y, x) = m(nearest(src.height, height, y), nearest(src.width, width, x));
    const auto& a = sample.annotations[k];
    if (r.any()) anns.push_back(InstanceAnnotation::from_mask(r, a.class_id, a.id, a.image_id));
  }
  return TrainSample::make(std::move(img), std::move(anns));
}

std::pair<int, int> scaled_size(int height, int width, int short_side, int multiple) {
  if (short_side < 1 || multiple < 1) throw std::invalid_argument("scaled_size: sizes must be positive");
  auto round_to = [&](double v) { return std::max(multiple, static_cast<int>(std::lround(v / multiple)) * multiple); };
  const double scale = static_cast<double>(short_side) / std::min(height, width);
  return {round_to(height * scale), round_to(width * scale)};
}

// ---- synthetic data ----

std::string to_string(Archetype a) {
  switch (a) {
    case Archetype::Disc: return "disc";
    case Archetype::Rectangle: return "rectangle";
    case Archetype::Bar: return "bar";
    case Archetype::Ring: return "ring";
  }
  return "?";
}

Archetype archetype_from_string(const std::string& s) {
  if (s == "disc") return Archetype::Disc;
  if (s == "rectangle") return Archetype::Rectangle;
  if (s == "bar") return Archetype::Bar;
  if (s == "ring") return Archetype::Ring;
  throw ConfigError("synth.classes: unknown archetype '" + s + "'");
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("synth." + key + ": " + why); };
  if (num_images < 0) fail("num_images", "must be >= 0");
  if (height < 1 || width < 1) fail("height", "image size must be positive");
  if (classes.empty()) fail("classes", "at least one archetype required");
  if (!(scale_min > 0 && scale_min <= scale_max && scale_max <= 1)) fail("scale_range", "must satisfy 0 < min <= max <= 1");
  if (min_instances < 0 || max_instances < min_instances) fail("max_instances", "must satisfy 0 <= min <= max");
  if (clutter_density < 0) fail("clutter_density", "must be >= 0");
  if (texture_amplitude < 0) fail("texture_amplitude", "must be >= 0");
  if (max_retries < 1) fail("max_retries", "must be >= 1");
}

json to_json(const SynthConfig& cfg) {
  json classes = json::array();
  for (auto a : cfg.classes) classes.push_back(to_string(a));
  return {{"num_images", cfg.num_images},         {"height", cfg.height},
          {"width", cfg.width},                   {"classes", classes},
          {"scale_range", {cfg.scale_min, cfg.scale_max}},
          {"min_instances", cfg.min_instances},   {"max_instances", cfg.max_instances},
          {"clutter_density", cfg.clutter_density}, {"texture_amplitude", cfg.texture_amplitude},
          {"max_retries", cfg.max_retries},       {"seed", cfg.seed}};
}

SynthConfig synth_config_from_json(const json& j) {
  static const std::set<std::string> known{"num_images",    "height",        "width",           "classes",
                                           "scale_range",   "min_instances", "max_instances",   "clutter_density",
                                           "texture_amplitude", "max_retries", "seed"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("synth." + k + ": unknown key");
  SynthConfig c;
  try {
    c.num_images = j.value("num_images", c.num_images);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    if (j.contains("classes")) {
      c.classes.clear();
      for (const auto& s : j.at("classes")) c.classes.push_back(archetype_from_string(s.get<std::string>()));
    }
    if (j.contains("scale_range")) {
      c.scale_min = j.at("scale_range").at(0).get<double>();
      c.scale_max = j.at("scale_range").at(1).get<double>();
    }
    c.min_instances = j.value("min_instances", c.min_instances);
    c.max_instances = j.value("max_instances", c.max_instances);
    c.clutter_density = j.value("clutter_density", c.clutter_density);
    c.texture_amplitude = j.value("texture_amplitude", c.texture_amplitude);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synth: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

using Color = std::array<double, 3>;

Color class_color(Archetype a) {
  switch (a) {
    case Archetype::Disc: return {0.80, 0.35, 0.30};
    case Archetype::Rectangle: return {0.30, 0.45, 0.80};
    case Archetype::Bar: return {0.85, 0.75, 0.25};
    case Archetype::Ring: return {0.35, 0.75, 0.45};
  }
  return {0.5, 0.5, 0.5};
}

// Two-octave value noise in [-1, 1].
Eigen::MatrixXd value_noise(int h, int w, Rng& rng) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(h, w);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double weight_total = 0;
  for (auto [cell, weight] : {std::pair{32.0, 0.65}, std::pair{8.0, 0.35}}) {
    const int gh = static_cast<int>(std::ceil(h / cell)) + 2, gw = static_cast<int>(std::ceil(w / cell)) + 2;
    Eigen::MatrixXd lattice(gh, gw);
    for (int i = 0; i < gh; ++i)
      for (int j = 0; j < gw; ++j) lattice(i, j) = u(rng);
    for (int y = 0; y < h; ++y) {
      const double fy = (y + 0.5) / cell;
      const int iy = static_cast<int>(fy);
      const double ty = fy - iy;
      for (int x = 0; x < w; ++x) {
        const double fx = (x + 0.5) / cell;
        const int ix = static_cast<int>(fx);
        const double tx = fx - ix;
        const double v = (1 - ty) * ((1 - tx) * lattice(iy, ix) + tx * lattice(iy, ix + 1)) +
                         ty * ((1 - tx) * lattice(iy + 1, ix) + tx * lattice(iy + 1, ix + 1));
        out(y, x) += weight * v;
      }
    }
    weight_total += weight;
  }
  return out / weight_total;
}

// Rasterizes an inside-test evaluated at pixel centers within a bounding square.
template <typename Inside>
BinaryMap rasterize(int h, int w, double cx, double cy, double radius, Inside inside) {
  BinaryMap m = BinaryMap::Zero(h, w);
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + radius + 1)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + radius + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (inside(x + 0.5 - cx, y + 0.5 - cy)) m(y, x) = 1;
  return m;
}

// Shape of the given archetype with side `side` centred at (cx, cy); the
// shape always fits in a circle of radius side / sqrt(2) around the center.
BinaryMap draw_archetype(Archetype a, int h, int w, double cx, double cy, double side, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double radius = side / std::numbers::sqrt2;
  switch (a) {
    case Archetype::Disc: {
      const double r = side / 2;
      return rasterize(h, w, cx, cy, radius, [r](double dx, double dy) { return dx * dx + dy * dy <= r * r; });
    }
    case Archetype::Rectangle: {
      double hw = side / 2, hh = side / 2 * (0.5 + 0.5 * u01(rng));
      if (u01(rng) < 0.5) std::swap(hw, hh);
      return rasterize(h, w, cx, cy, radius, [hw, hh](double dx, double dy) { return std::abs(dx) <= hw && std::abs(dy) <= hh; });
    }
    case Archetype::Bar: {
      const double half_len = side / 2, half_thick = side * (0.06 + 0.06 * u01(rng));
      const double t = u01(rng) * std::numbers::pi, c = std::cos(t), s = std::sin(t);
      return rasterize(h, w, cx, cy, radius, [=](double dx, double dy) {
        return std::abs(dx * c + dy * s) <= half_len && std::abs(-dx * s + dy * c) <= half_thick;
      });
    }
    case Archetype::Ring: {
      const double r = side / 2, ri = r * (0.45 + 0.15 * u01(rng));
      return rasterize(h, w, cx, cy, radius, [r, ri](double dx, double dy) {
        const double d2 = dx * dx + dy * dy;
        return d2 <= r * r && d2 >= ri * ri;
      });
    }
  }
  return BinaryMap::Zero(h, w);
}

BinaryMap draw_distractor(int h, int w, double cx, double cy, double side, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double r = side / 2;
  if (u01(rng) < 0.5) {
    // Triangle with vertices on a circle of radius r.
    std::array<std::array<double, 2>, 3> v;
    const double t0 = u01(rng) * 2 * std::numbers::pi;
    for (int k = 0; k < 3; ++k) {
      const double t = t0 + k * 2 * std::numbers::pi / 3 + (u01(rng) - 0.5);
      v[k] = {r * std::cos(t), r * std::sin(t)};
    }
    return rasterize(h, w, cx, cy, r, [v](double x, double y) {
      auto edge = [&](int i, int j) { return (v[j][0] - v[i][0]) * (y - v[i][1]) - (v[j][1] - v[i][1]) * (x - v[i][0]); };
      const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    });
  }
  // Cross made of two thin strokes.
  const double t = r * 0.25;
  return rasterize(h, w, cx, cy, r * std::numbers::sqrt2, [r, t](double x, double y) {
    return (std::abs(x) <= r && std::abs(y) <= t) || (std::abs(y) <= r && std::abs(x) <= t);
  });
}

void paint(Image& img, const BinaryMap& m, const Color& color, double shade_noise, Rng& rng) {
  std::normal_distribution<double> n(0.0, shade_noise);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (m(y, x)) {
        const double s = shade_noise > 0 ? n(rng) : 0.0;
        for (int c = 0; c < 3; ++c) img.planes[c](y, x) = static_cast<float>(std::clamp(color[c] + s, 0.0, 1.0));
      }
}

}  // namespace

SynthDataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthDataset ds;
  ds.manifest.info = {{"generator", "synth"}, {"config", to_json(cfg)}};
  for (std::size_t k = 0; k < cfg.classes.size(); ++k)
    ds.manifest.categories.push_back({static_cast<int>(k) + 1, to_string(cfg.classes[k])});

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int H = cfg.height, W = cfg.width;
  const double min_dim = std::min(H, W);
  const Color background{0.45, 0.50, 0.42};
  int next_ann = 1;

  for (int i = 0; i < cfg.num_images; ++i) {
    // Each image draws from its own stream so image i does not depend on how
    // many retries earlier images needed.
    Rng img_rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(i) + 1);
    Image img(H, W);
    if (cfg.texture_amplitude > 0) {
      const Eigen::MatrixXd noise = value_noise(H, W, img_rng);
      for (int c = 0; c < 3; ++c)
        img.planes[c] = (background[c] + cfg.texture_amplitude * noise.array()).cwiseMax(0.0).cwiseMin(1.0).cast<float>().matrix();
    } else {
      for (int c = 0; c < 3; ++c) img.planes[c].setConstant(static_cast<float>(background[c]));
    }

    auto log_uniform = [&](double lo, double hi) { return std::exp(std::log(lo) + u01(img_rng) * (std::log(hi) - std::log(lo))); };

    const int distractors = static_cast<int>(std::floor(cfg.clutter_density * H * W / 1e4 + u01(img_rng)));
    for (int d = 0; d < distractors; ++d) {
      const double side = log_uniform(cfg.scale_min, std::max(cfg.scale_min, std::min(cfg.scale_max, 0.25))) * min_dim;
      const BinaryMap m = draw_distractor(H, W, u01(img_rng) * W, u01(img_rng) * H, side, img_rng);
      Color color = class_color(cfg.classes[static_cast<std::size_t>(u01(img_rng) * cfg.classes.size()) % cfg.classes.size()]);
      for (auto& c : color) c = std::clamp(c + 0.1 * (u01(img_rng) - 0.5), 0.0, 1.0);
      paint(img, m, color, 0.02, img_rng);
    }

    const int want = std::uniform_int_distribution<int>(cfg.min_instances, cfg.max_instances)(img_rng);
    BinaryMap occupied = BinaryMap::Zero(H, W);
    int dropped = 0;
    for (int k = 0; k < want; ++k) {
      const auto cls = static_cast<std::size_t>(u01(img_rng) * cfg.classes.size()) % cfg.classes.size();
      bool placed = false;
      for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
        const double side = log_uniform(cfg.scale_min, cfg.scale_max) * min_dim;
        const double margin = std::min(side / 2, min_dim / 2);
        const double cx = margin + u01(img_rng) * std::max(0.0, W - 2 * margin);
        const double cy = margin + u01(img_rng) * std::max(0.0, H - 2 * margin);
        const BinaryMap m = draw_archetype(cfg.classes[cls], H, W, cx, cy, side, img_rng);
        const auto area = m.cast<int>().sum();
        if (area < 10) continue;
        if ((m.array() * occupied.array()).cast<int>().sum() > 0) continue;
        Color color = class_color(cfg.classes[cls]);
        for (auto& c : color) c = std::clamp(c + 0.06 * (u01(img_rng) - 0.5), 0.0, 1.0);
        paint(img, m, color, 0.02, img_rng);
        occupied = (occupied.array() + m.array()).cwiseMin(std::uint8_t{1}).matrix();
        ds.manifest.annotations.push_back(InstanceAnnotation::from_mask(m, static_cast<int>(cls) + 1, next_ann++, i + 1));
        placed = true;
      }
      if (!placed) ++dropped;
    }
    quantize(img);
    char name[32];
    std::snprintf(name, sizeof name, "images/%06d.ppm", i + 1);
    ds.manifest.images.push_back({i + 1, name, H, W, dropped});
    ds.images.push_back(std::move(img));
  }
  return ds;
}

void write_dataset(const fs::path& dir, const DatasetManifest& manifest, const std::vector<Image>& images) {
  if (images.size() != manifest.images.size()) throw std::invalid_argument("write_dataset: image/record count mismatch");
  fs::create_directories(dir);
  for (std::size_t i = 0; i < images.size(); ++i) write_ppm(dir / manifest.images[i].file_name, images[i]);
  save_manifest(dir / "manifest.json", manifest);
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'S', 'E', 'A', 'S', 'E', 'G', 'C', 'K'};
constexpr char kEnd[4] = {'E', 'N', 'D', '!'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const std::string& s) {
    pod(static_cast<std::uint64_t>(s.size()));
    buf_.append(s);
  }
  template <typename Scalar>
  void matrices(const std::map<std::string, Mat<Scalar>>& m) {
    pod(static_cast<std::uint64_t>(m.size()));
    for (const auto& [name, mat] : m) {
      bytes(name);
      pod(static_cast<std::uint64_t>(mat.rows()));
      pod(static_cast<std::uint64_t>(mat.cols()));
      buf_.append(reinterpret_cast<const char*>(mat.data()), sizeof(Scalar) * static_cast<std::size_t>(mat.size()));
    }
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& data, std::size_t limit) : data_(data), limit_(limit) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename Scalar>
  std::map<std::string, Mat<Scalar>> matrices() {
    std::map<std::string, Mat<Scalar>> out;
    const auto count = pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
      std::string name = bytes();
      const auto rows = pod<std::uint64_t>(), cols = pod<std::uint64_t>();
      const std::uint64_t n = rows * cols * sizeof(Scalar);
      need(n);
      Mat<Scalar> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      std::memcpy(m.data(), data_.data() + pos_, n);
      pos_ += n;
      out.emplace(std::move(name), std::move(m));
    }
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::uint64_t n) const {
    if (pos_ + n > limit_) throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint: truncated file");
  }
  const std::string& data_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename Scalar>
void checkpoint_save(const fs::path& path, const ParamStore<Scalar>& params, const SgdState<Scalar>& state,
                     const ModelConfig& config) {
  Writer w;
  w.buffer().append(kMagic, sizeof kMagic);
  w.pod(kCheckpointVersion);
  w.pod(architecture_hash(config));
  w.pod(static_cast<std::uint32_t>(sizeof(Scalar)));
  w.pod(static_cast<std::int64_t>(state.step));
  w.bytes(to_json(config).dump());
  w.matrices(params.all());
  w.matrices(state.momentum);
  const std::uint64_t checksum = fnv1a(w.buffer().data(), w.buffer().size());
  w.pod(checksum);
  w.buffer().append(kEnd, sizeof kEnd);
  try {
    atomic_write(path, w.buffer());
  } catch (const IoError& e) {
    throw CheckpointError(CheckpointError::Kind::Io, e.what());
  }
}

template <typename Scalar>
Checkpoint<Scalar> checkpoint_load(const fs::path& path, const ModelConfig* expected) {
  using K = CheckpointError::Kind;
  std::string data;
  try {
    data = read_file(path);
  } catch (const IoError& e) {
    throw CheckpointError(K::Io, e.what());
  }
  if (data.size() < sizeof kMagic || std::memcmp(data.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError(K::BadMagic, path.string() + ": not a checkpoint file");
  constexpr std::size_t kTrailer = sizeof(std::uint64_t) + sizeof kEnd;
  if (data.size() < sizeof kMagic + kTrailer || std::memcmp(data.data() + data.size() - sizeof kEnd, kEnd, sizeof kEnd) != 0)
    throw CheckpointError(K::Truncated, path.string() + ": truncated checkpoint (end marker missing)");
  const std::size_t body = data.size() - kTrailer;

  Reader r(data, body);
  (void)r.pod<std::array<char, 8>>();
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError(K::Version, path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                                          std::to_string(kCheckpointVersion));
  std::uint64_t stored_checksum;
  std::memcpy(&stored_checksum, data.data() + body, sizeof stored_checksum);
  if (fnv1a(data.data(), body) != stored_checksum) throw CheckpointError(K::Corrupt, path.string() + ": checksum mismatch");

  const auto hash = r.pod<std::uint64_t>();
  if (expected && architecture_hash(*expected) != hash)
    throw CheckpointError(K::ConfigHash, path.string() + ": architecture config hash " + hash_hex(hash) +
                                             " does not match the requested config " + hash_hex(architecture_hash(*expected)));
  const auto scalar_size = r.pod<std::uint32_t>();
  if (scalar_size != sizeof(Scalar))
    throw CheckpointError(K::Scalar, path.string() + ": stored scalar size " + std::to_string(scalar_size) + " bytes");
  Checkpoint<Scalar> ck;
  ck.state.step = static_cast<long>(r.pod<std::int64_t>());
  ck.config = config_from_json(json::parse(r.bytes()));
  if (architecture_hash(ck.config) != hash) throw CheckpointError(K::Corrupt, path.string() + ": embedded config does not match its hash");
  for (auto& [name, m] : r.template matrices<Scalar>()) ck.params.add(name, std::move(m));
  ck.state.momentum = r.template matrices<Scalar>();
  if (r.pos() != body) throw CheckpointError(K::Corrupt, path.string() + ": trailing data after parameters");
  return ck;
}

template void checkpoint_save<float>(const fs::path&, const ParamStore<float>&, const SgdState<float>&, const ModelConfig&);
template void checkpoint_save<double>(const fs::path&, const ParamStore<double>&, const SgdState<double>&, const ModelConfig&);
template Checkpoint<float> checkpoint_load<float>(const fs::path&, const ModelConfig*);
template Checkpoint<double> checkpoint_load<double>(const fs::path&, const ModelConfig*);

}  // namespace seaseg
