#include "helpers.hpp"
#include "oracles.hpp"

#include "seaseg/dataio.hpp"

#include <doctest.h>

#include <fstream>
#include <random>

using namespace seaseg;
using testing::TempDir;

namespace {

BinaryMap rect(int h, int w, int x, int y, int bw, int bh) {
  BinaryMap m = BinaryMap::Zero(h, w);
  m.block(y, x, bh, bw).setOnes();
  return m;
}

Image gradient_image(int h, int w) {
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.planes[0](y, x) = static_cast<float>(x) / w;
      img.planes[1](y, x) = static_cast<float>(y) / h;
      img.planes[2](y, x) = static_cast<float>((x + y) % 7) / 7;
    }
  return img;
}

void write_bytes(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

}  // namespace

TEST_CASE("tile origins") {
  CHECK(tile_origins(800, 800, 200) == std::vector<int>{0});
  CHECK(tile_origins(1000, 800, 200) == std::vector<int>{0, 200});
  CHECK(tile_origins(1050, 800, 200) == std::vector<int>{0, 200, 250});
  CHECK(tile_origins(2000, 800, 600) == std::vector<int>{0, 600, 1200});
  CHECK_THROWS_AS(tile_origins(1000, 800, 0), std::invalid_argument);
  CHECK_THROWS_AS(tile_origins(1000, 800, -5), std::invalid_argument);
}

TEST_CASE("tiling a 1000x1000 image gives four covering patches") {
  const Image img(1000, 1000);
  TileOptions opt;
  opt.keep_empty = true;
  const auto tiles = tile(img, {}, opt);
  REQUIRE(tiles.size() == 4);
  Eigen::MatrixXi cover = Eigen::MatrixXi::Zero(1000, 1000);
  for (const auto& t : tiles) {
    CHECK((t.x0 == 0 || t.x0 == 200));
    CHECK((t.y0 == 0 || t.y0 == 200));
    CHECK(t.image.height == 800);
    cover.block(t.y0, t.x0, 800, 800).array() += 1;
  }
  CHECK(cover.minCoeff() >= 1);
  const auto single = tile(Image(800, 800), {}, opt);
  REQUIRE(single.size() == 1);
  CHECK(single[0].x0 == 0);
  CHECK(single[0].y0 == 0);
  opt.stride = 0;
  CHECK_THROWS_AS(tile(img, {}, opt), std::invalid_argument);
}

TEST_CASE("tiling coverage on random image sizes") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const int patch = std::uniform_int_distribution<int>(4, 40)(rng);
    // Coverage needs stride <= patch; larger strides leave gaps by construction.
    const int stride = std::uniform_int_distribution<int>(1, patch)(rng);
    const int h = std::uniform_int_distribution<int>(patch, 4 * patch)(rng);
    const int w = std::uniform_int_distribution<int>(patch, 4 * patch)(rng);
    const auto ys = tile_origins(h, patch, stride), xs = tile_origins(w, patch, stride);
    CHECK(ys == oracle::tile_origins(h, patch, stride));
    CHECK(xs == oracle::tile_origins(w, patch, stride));
    TileOptions opt;
    opt.patch = patch;
    opt.stride = stride;
    opt.keep_empty = true;
    const auto tiles = tile(Image(h, w), {}, opt);
    REQUIRE(tiles.size() == ys.size() * xs.size());
    Eigen::MatrixXi cover = Eigen::MatrixXi::Zero(h, w);
    for (const auto& t : tiles) {
      CHECK(t.x0 >= 0);
      CHECK(t.y0 >= 0);
      CHECK(t.x0 + patch <= w);
      CHECK(t.y0 + patch <= h);
      CHECK((t.x0 % stride == 0 || t.x0 == w - patch));
      cover.block(t.y0, t.x0, patch, patch).array() += 1;
    }
    CHECK(cover.minCoeff() >= 1);
  }
}

TEST_CASE("tiling clips annotations") {
  const int H = 60, W = 60;
  const Image img = gradient_image(H, W);
  std::vector<InstanceAnnotation> anns{
      InstanceAnnotation::from_mask(rect(H, W, 2, 3, 10, 8), 1, 11, 5),    // inside the first patch only
      InstanceAnnotation::from_mask(rect(H, W, 15, 15, 30, 30), 2, 12, 5),  // spans patches
      InstanceAnnotation::from_mask(rect(H, W, 38, 0, 3, 3), 1, 13, 5),     // 9 px, always dropped
  };
  TileOptions opt;
  opt.patch = 40;
  opt.stride = 20;
  const auto tiles = tile(img, anns, opt);
  REQUIRE(tiles.size() == 4);
  std::uint64_t spanning_total = 0, spanning_max = 0;
  for (const auto& t : tiles) {
    for (int c = 0; c < 3; ++c) CHECK(t.image.planes[c] == img.planes[c].block(t.y0, t.x0, 40, 40));
    for (const auto& a : t.annotations) {
      CHECK(a.id != 13);
      CHECK(a.image_id == 5);
      CHECK(a.mask.height == 40);
      CHECK(a.area >= 10);
      CHECK(a.bbox == rle_bbox(a.mask));
      CHECK(a.area == rle_area(a.mask));
      if (a.id == 11) {
        CHECK(t.x0 == 0);
        CHECK(a.area == 80);
        CHECK(a.bbox == Box{2, 3, 10, 8});
      }
      if (a.id == 12) {
        spanning_total += a.area;
        spanning_max = std::max(spanning_max, a.area);
        // Clipped mask equals the original restricted to the patch.
        const BinaryMap want = rect(H, W, 15, 15, 30, 30).block(t.y0, t.x0, 40, 40);
        CHECK(rle_decode(a.mask) == want);
      }
    }
  }
  CHECK(spanning_total >= spanning_max);
  CHECK(spanning_max == 25 * 25);
}

TEST_CASE("tiling small images needs padding") {
  const Image img = gradient_image(30, 50);
  TileOptions opt;
  opt.patch = 40;
  opt.stride = 20;
  opt.keep_empty = true;
  CHECK_THROWS_AS(tile(img, {}, opt), std::invalid_argument);
  opt.pad = true;
  const auto tiles = tile(img, {}, opt);
  REQUIRE(tiles.size() == 2);
  CHECK(tiles[0].image.height == 40);
  CHECK(tiles[0].image.planes[0].bottomRows(10).isZero());
  CHECK(tiles[1].x0 == 10);
}

TEST_CASE("PPM round trip of quantized images") {
  TempDir dir("ppm");
  Image img = gradient_image(13, 17);
  quantize(img);
  write_ppm(dir.path / "a.ppm", img);
  CHECK(read_ppm(dir.path / "a.ppm") == img);
  write_bytes(dir.path / "bad.ppm", "P3\n1 1\n255\n0 0 0\n");
  CHECK_THROWS_AS(read_ppm(dir.path / "bad.ppm"), IoError);
  const std::string data = read_file(dir.path / "a.ppm");
  write_bytes(dir.path / "short.ppm", data.substr(0, data.size() - 5));
  CHECK_THROWS_AS(read_ppm(dir.path / "short.ppm"), IoError);
  CHECK_THROWS_AS(read_ppm(dir.path / "missing.ppm"), IoError);
}

TEST_CASE("manifest round trip and validation") {
  SynthConfig sc;
  sc.num_images = 3;
  sc.height = sc.width = 64;
  sc.seed = 4;
  const auto ds = synth_generate(sc);
  ds.manifest.validate();
  TempDir dir("manifest");
  write_dataset(dir.path, ds.manifest, ds.images);
  const auto back = load_manifest(dir.path / "manifest.json");
  CHECK(manifest_to_json(back) == manifest_to_json(ds.manifest));
  for (std::size_t i = 0; i < back.images.size(); ++i) CHECK(load_image(dir.path, back.images[i]) == ds.images[i]);

  auto broken = ds.manifest;
  REQUIRE(!broken.annotations.empty());
  broken.annotations[0].image_id = 99;
  CHECK_THROWS_AS(broken.validate(), IoError);
  broken = ds.manifest;
  broken.annotations[0].area += 1;
  CHECK_THROWS_AS(broken.validate(), IoError);
  broken = ds.manifest;
  broken.annotations[0].class_id = 7;
  CHECK_THROWS_AS(broken.validate(), IoError);
  broken = ds.manifest;
  broken.annotations[0].mask.counts.back() += 1;
  CHECK_THROWS_AS(broken.validate(), IoError);
  CHECK_THROWS_AS(manifest_from_json(nlohmann::json::parse(R"({"images": 3})")), IoError);
  CHECK_THROWS_AS(load_image(dir.path, ImageRecord{1, "images/nope.ppm", 64, 64, 0}), IoError);
}

TEST_CASE("synthetic generation is deterministic") {
  SynthConfig sc;
  sc.num_images = 4;
  sc.height = sc.width = 96;
  sc.seed = 12;
  const auto a = synth_generate(sc), b = synth_generate(sc);
  CHECK(manifest_to_json(a.manifest).dump() == manifest_to_json(b.manifest).dump());
  for (std::size_t i = 0; i < a.images.size(); ++i) CHECK(a.images[i] == b.images[i]);
  sc.seed = 13;
  CHECK(manifest_to_json(synth_generate(sc).manifest).dump() != manifest_to_json(a.manifest).dump());
}

TEST_CASE("synthetic generation without clutter or texture") {
  SynthConfig sc;
  sc.num_images = 5;
  sc.height = sc.width = 64;
  sc.clutter_density = 0;
  sc.texture_amplitude = 0;
  sc.seed = 3;
  const auto ds = synth_generate(sc);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    BinaryMap covered = BinaryMap::Zero(64, 64);
    for (const auto& a : ds.manifest.annotations_for(ds.manifest.images[i].id))
      covered = (covered.array() + rle_decode(a.mask).array()).cwiseMin(std::uint8_t{1}).matrix();
    for (int c = 0; c < 3; ++c) {
      const float bg = ds.images[i].planes[c](0, 0);
      bool constant = true;
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
          if (!covered(y, x) && ds.images[i].planes[c](y, x) != bg) constant = false;
      CHECK(constant);
    }
  }
}

TEST_CASE("synthetic instance sizes span the scale range") {
  SynthConfig sc;
  sc.num_images = 100;
  sc.height = sc.width = 256;
  sc.scale_min = 0.05;
  sc.scale_max = 0.8;
  sc.seed = 21;
  const auto ds = synth_generate(sc);
  ds.manifest.validate();
  double lo = 1e9, hi = 0;
  std::map<int, int> per_class;
  for (const auto& a : ds.manifest.annotations) {
    lo = std::min(lo, std::sqrt(static_cast<double>(a.area)));
    hi = std::max(hi, std::sqrt(static_cast<double>(a.area)));
    ++per_class[a.class_id];
  }
  INFO("sqrt-area range " << lo << " .. " << hi);
  CHECK(hi / lo >= 8);
  CHECK(per_class.size() == 3);
  int instances = static_cast<int>(ds.manifest.annotations.size()), dropped = 0;
  for (const auto& r : ds.manifest.images) dropped += r.dropped_instances;
  CHECK(instances + dropped >= 100 * sc.min_instances);
  // Instances never overlap.
  for (const auto& r : ds.manifest.images) {
    const auto anns = ds.manifest.annotations_for(r.id);
    for (std::size_t i = 0; i < anns.size(); ++i)
      for (std::size_t j = i + 1; j < anns.size(); ++j) CHECK(rle_intersection(anns[i].mask, anns[j].mask) == 0);
  }
}

TEST_CASE("synthetic config validation and JSON") {
  SynthConfig sc;
  sc.scale_min = 0.5;
  sc.scale_max = 0.2;
  CHECK_THROWS_AS(synth_generate(sc), ConfigError);
  sc = SynthConfig{};
  sc.scale_max = 1.5;
  CHECK_THROWS_AS(sc.validate(), ConfigError);
  sc = SynthConfig{};
  sc.num_images = 0;
  const auto empty = synth_generate(sc);
  CHECK(empty.manifest.images.empty());
  CHECK(empty.manifest.categories.size() == 3);

  SynthConfig custom;
  custom.classes = {Archetype::Ring, Archetype::Bar};
  custom.seed = 77;
  custom.clutter_density = 2.5;
  const auto back = synth_config_from_json(to_json(custom));
  CHECK(to_json(back) == to_json(custom));
  CHECK_THROWS_AS(synth_config_from_json(nlohmann::json{{"colour", 1}}), ConfigError);
  CHECK_THROWS_AS(archetype_from_string("triangle"), ConfigError);
}

TEST_CASE("forced placement failures are recorded") {
  SynthConfig sc;
  sc.num_images = 2;
  sc.height = sc.width = 64;
  sc.scale_min = 0.9;
  sc.scale_max = 1.0;
  sc.min_instances = sc.max_instances = 4;
  sc.max_retries = 3;
  const auto ds = synth_generate(sc);
  for (const auto& r : ds.manifest.images)
    CHECK(static_cast<int>(ds.manifest.annotations_for(r.id).size()) + r.dropped_instances == 4);
  int dropped = 0;
  for (const auto& r : ds.manifest.images) dropped += r.dropped_instances;
  CHECK(dropped > 0);
}

TEST_CASE("checkpoint round trip is bit exact") {
  TempDir dir("ckpt");
  const auto cfg = ModelConfig::toy(3);
  const auto params = init_model<float>(cfg, 4);
  SgdState<float> state;
  state.step = 17;
  for (const auto& [name, w] : params.all()) state.momentum[name] = Mat<float>::Random(w.rows(), w.cols());
  checkpoint_save(dir.path / "a.ckpt", params, state, cfg);
  const auto ck = checkpoint_load<float>(dir.path / "a.ckpt", &cfg);
  CHECK(ck.state.step == 17);
  REQUIRE(ck.params.size() == params.size());
  for (const auto& [name, w] : params.all()) {
    const auto& got = ck.params.at(name);
    REQUIRE(got.rows() == w.rows());
    CHECK(std::memcmp(got.data(), w.data(), sizeof(float) * static_cast<std::size_t>(w.size())) == 0);
    CHECK(ck.state.momentum.at(name) == state.momentum.at(name));
  }
  CHECK(architecture_hash(ck.config) == architecture_hash(cfg));
  CHECK(to_json(ck.config) == to_json(cfg));
}

TEST_CASE("checkpoint errors") {
  using K = CheckpointError::Kind;
  TempDir dir("ckpt-err");
  const auto cfg = ModelConfig::toy(2);
  const auto params = init_model<double>(cfg, 1);
  const auto path = dir.path / "m.ckpt";
  checkpoint_save(path, params, SgdState<double>{}, cfg);
  const std::string good = read_file(path);
  auto kind_of = [&](const std::string& bytes, const ModelConfig* expected = nullptr) {
    write_bytes(path, bytes);
    try {
      (void)checkpoint_load<double>(path, expected);
    } catch (const CheckpointError& e) {
      return std::optional<K>(e.kind);
    }
    return std::optional<K>();
  };
  CHECK(!kind_of(good));
  CHECK(kind_of(good.substr(0, good.size() - 3)) == K::Truncated);
  CHECK(kind_of(good.substr(0, good.size() / 2)) == K::Truncated);
  std::string tail = good;
  tail[tail.size() - 1] ^= 0x5a;
  tail[tail.size() - 2] ^= 0x5a;
  CHECK(kind_of(tail) == K::Truncated);
  std::string flipped = good;
  flipped[good.size() / 2] ^= 0x01;
  CHECK(kind_of(flipped) == K::Corrupt);
  std::string magic = good;
  magic[0] = 'X';
  CHECK(kind_of(magic) == K::BadMagic);
  std::string version = good;
  version[8] = static_cast<char>(kCheckpointVersion + 1);
  CHECK(kind_of(version) == K::Version);

  auto other = cfg;
  other.fpn.channels += 8;
  CHECK(kind_of(good, &other) == K::ConfigHash);
  auto same_arch = cfg;
  same_arch.train.lr = 0.5;
  CHECK(!kind_of(good, &same_arch));

  write_bytes(path, good);
  CHECK_THROWS_AS(checkpoint_load<float>(path), CheckpointError);
  CHECK_THROWS_AS(checkpoint_load<double>(dir.path / "absent.ckpt"), CheckpointError);
}

TEST_CASE("atomic write replaces the target, creates parents and leaves no temporaries") {
  TempDir dir("atomic");
  atomic_write(dir.path / "f.txt", "one");
  atomic_write(dir.path / "f.txt", "two");
  CHECK(read_file(dir.path / "f.txt") == "two");
  int files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path)) ++files;
  CHECK(files == 1);
  atomic_write(dir.path / "a" / "b" / "g.txt", "x");
  CHECK(read_file(dir.path / "a" / "b" / "g.txt") == "x");
  // A regular file where a directory is needed.
  CHECK_THROWS_AS(atomic_write(dir.path / "f.txt" / "h.txt", "x"), IoError);
}
