// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/datapipe/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vfmseg/core/error.hpp"
#include "vfmseg/core/rng.hpp"
#include "vfmseg/datapipe/raster.hpp"

namespace vfmseg::datapipe {

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw DataError("unknown split name '" + name + "'");
}

std::size_t DatasetManifest::count(Split s) const {
  std::size_t n = 0;
  for (const auto& t : tiles) {
    if (t.split == s) ++n;
  }
  return n;
}

std::size_t DatasetManifest::labeled_train_count() const {
  std::size_t n = 0;
  for (const auto& t : tiles) {
    if (t.split == Split::kTrain && t.labeled) ++n;
  }
  return n;
}

std::string DatasetManifest::serialize() const {
  std::ostringstream os;
  nlohmann::ordered_json header;
  header["type"] = "header";
  header["dataset_name"] = dataset_name;
  header["class_names"] = class_names;
  header["ignore_value"] = ignore_value;
  header["tile_size"] = tile_size;
  header["split_ratios"] = split_ratios;
  header["seed"] = seed;
  header["label_ratio"] = label_ratio;
  os << header.dump() << "\n";
  for (const auto& t : tiles) {
    nlohmann::ordered_json rec;
    rec["source_image_id"] = t.source_image_id;
    rec["tile_row"] = t.tile_row;
    rec["tile_col"] = t.tile_col;
    rec["tile_size"] = t.tile_size;
    rec["split"] = split_name(t.split);
    rec["labeled"] = t.labeled;
    os << rec.dump() << "\n";
  }
  return os.str();
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write manifest " + path.string());
  os << serialize();
  if (!os) throw DataError("failed writing manifest " + path.string());
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(is, line)) {
    throw DataError("empty manifest " + path.string());
  }
  DatasetManifest m;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.value("type", "") != "header") {
      throw DataError("manifest " + path.string() + " missing header line");
    }
    m.dataset_name = header.at("dataset_name").get<std::string>();
    m.class_names = header.at("class_names").get<std::vector<std::string>>();
    m.ignore_value = header.at("ignore_value").get<std::int32_t>();
    m.tile_size = header.at("tile_size").get<int>();
    const auto ratios = header.at("split_ratios").get<std::vector<int>>();
    if (ratios.size() != 3) throw DataError("split_ratios must have 3 parts");
    std::copy(ratios.begin(), ratios.end(), m.split_ratios.begin());
    m.seed = header.at("seed").get<std::uint64_t>();
    m.label_ratio = header.at("label_ratio").get<double>();
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line);
      TileRecord t;
      t.source_image_id = rec.at("source_image_id").get<std::string>();
      t.tile_row = rec.at("tile_row").get<int>();
      t.tile_col = rec.at("tile_col").get<int>();
      t.tile_size = rec.at("tile_size").get<int>();
      t.split = split_from_name(rec.at("split").get<std::string>());
      t.labeled = rec.at("labeled").get<bool>();
      m.tiles.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad manifest " + path.string() + ": " + e.what());
  }
  return m;
}

namespace {

struct SourceInfo {
  std::string id;
  int tiles_y = 0;
  int tiles_x = 0;
  int tile_count() const { return tiles_y * tiles_x; }
};

}  // namespace

DatasetManifest build_manifest(const std::filesystem::path& dataset_root,
                               int tile_size,
                               const std::array<int, 3>& split_ratios,
                               std::uint64_t seed) {
  if (tile_size <= 0) throw ConfigError("tile_size must be positive");
  const int ratio_sum = split_ratios[0] + split_ratios[1] + split_ratios[2];
  if (ratio_sum <= 0 || split_ratios[0] <= 0) {
    throw ConfigError("split ratios need a positive train share");
  }
  const auto images_dir = dataset_root / "images";
  const auto labels_dir = dataset_root / "labels";
  if (!std::filesystem::is_directory(images_dir)) {
    throw DataError("missing images directory " + images_dir.string());
  }

  std::vector<SourceInfo> sources;
  std::set<std::filesystem::path> image_files;
  for (const auto& entry : std::filesystem::directory_iterator(images_dir)) {
    if (entry.path().extension() == ".ppm") image_files.insert(entry.path());
  }
  if (image_files.empty()) {
    throw DataError("no .ppm images under " + images_dir.string());
  }
  for (const auto& image_path : image_files) {
    const std::string stem = image_path.stem().string();
    const auto label_path = labels_dir / (stem + ".pgm");
    if (!std::filesystem::exists(label_path)) {
      throw DataError("missing label raster for image " + image_path.string() +
                      " (expected " + label_path.string() + ")");
    }
    const RasterHeader img = read_raster_header(image_path);
    const RasterHeader lbl = read_raster_header(label_path);
    if (img.channels != 3) {
      throw DataError("image raster is not RGB: " + image_path.string());
    }
    if (lbl.channels != 1) {
      throw DataError("label raster is not single-channel: " +
                      label_path.string());
    }
    if (img.width != lbl.width || img.height != lbl.height) {
      throw DataError("image/label size mismatch for " + image_path.string());
    }
    if (tile_size > img.width || tile_size > img.height) {
      throw ConfigError("tile_size " + std::to_string(tile_size) +
                        " exceeds image " + image_path.string());
    }
    sources.push_back(
        {stem, img.height / tile_size, img.width / tile_size});
  }

  // Seeded shuffle, then greedily hand each source image to the bucket with
  // the largest remaining tile deficit. Whole-image assignment prevents
  // spatial leakage across splits.
  Rng rng(Rng::derive({seed, Rng::hash_str("split-assign")}));
  rng.shuffle(sources);
  std::int64_t total_tiles = 0;
  for (const auto& s : sources) total_tiles += s.tile_count();
  std::array<double, 3> quota{};
  for (int b = 0; b < 3; ++b) {
    quota[static_cast<std::size_t>(b)] =
        static_cast<double>(total_tiles) * split_ratios[static_cast<std::size_t>(b)] / ratio_sum;
  }
  std::array<std::int64_t, 3> assigned{0, 0, 0};

  DatasetManifest m;
  m.dataset_name = dataset_root.filename().string();
  m.tile_size = tile_size;
  m.split_ratios = split_ratios;
  m.seed = seed;
  m.label_ratio = 1.0;  // unpartitioned: fully-supervised by default
  // Optional dataset metadata next to the rasters.
  const auto meta_path = dataset_root / "dataset.json";
  if (std::filesystem::exists(meta_path)) {
    std::ifstream is(meta_path);
    nlohmann::json j;
    try {
      is >> j;
      m.dataset_name = j.value("name", m.dataset_name);
      if (j.contains("class_names")) {
        m.class_names = j.at("class_names").get<std::vector<std::string>>();
      }
      m.ignore_value = j.value("ignore_value", m.ignore_value);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad dataset.json in " + dataset_root.string() + ": " +
                      e.what());
    }
  }

  for (const auto& s : sources) {
    int best = 0;
    double best_deficit = -1e300;
    for (int b = 0; b < 3; ++b) {
      const double deficit = quota[static_cast<std::size_t>(b)] -
                             static_cast<double>(assigned[static_cast<std::size_t>(b)]);
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = b;
      }
    }
    const Split split = static_cast<Split>(best);
    assigned[static_cast<std::size_t>(best)] += s.tile_count();
    for (int r = 0; r < s.tiles_y; ++r) {
      for (int c = 0; c < s.tiles_x; ++c) {
        TileRecord t;
        t.source_image_id = s.id;
        t.tile_row = r;
        t.tile_col = c;
        t.tile_size = tile_size;
        t.split = split;
        t.labeled = split == Split::kTrain;  // label_ratio 1.0
        m.tiles.push_back(std::move(t));
      }
    }
  }
  // Stable order independent of the shuffle: by id, then position.
  std::sort(m.tiles.begin(), m.tiles.end(),
            [](const TileRecord& a, const TileRecord& b) {
              return std::tie(a.source_image_id, a.tile_row, a.tile_col) <
                     std::tie(b.source_image_id, b.tile_row, b.tile_col);
            });
  return m;
}

DatasetManifest partition_labeled(const DatasetManifest& manifest,
                                  double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0) || ratio > 1.0) {
    throw ConfigError("label ratio must be in (0,1], got " +
                      std::to_string(ratio));
  }
  DatasetManifest out = manifest;
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < out.tiles.size(); ++i) {
    if (out.tiles[i].split == Split::kTrain) train_idx.push_back(i);
    out.tiles[i].labeled = false;
  }
  if (train_idx.empty()) {
    throw ConfigError("manifest has no train tiles to partition");
  }
  const auto k = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(train_idx.size())));
  if (k == 0) {
    throw ConfigError("label ratio " + std::to_string(ratio) +
                      " yields zero labeled tiles");
  }
  Rng rng(Rng::derive({seed, Rng::hash_str("label-partition")}));
  rng.shuffle(train_idx);
  for (std::size_t i = 0; i < k; ++i) {
    out.tiles[train_idx[i]].labeled = true;
  }
  out.label_ratio = ratio;
  out.seed = seed;
  return out;
}

std::vector<const TileRecord*> tiles_of(const DatasetManifest& manifest,
                                        Split split) {
  std::vector<const TileRecord*> out;
  for (const auto& t : manifest.tiles) {
    if (t.split == split) out.push_back(&t);
  }
  return out;
}

std::vector<const TileRecord*> train_tiles(const DatasetManifest& manifest,
                                           bool labeled) {
  std::vector<const TileRecord*> out;
  for (const auto& t : manifest.tiles) {
    if (t.split == Split::kTrain && t.labeled == labeled) out.push_back(&t);
  }
  return out;
}

}  // namespace vfmseg::datapipe
