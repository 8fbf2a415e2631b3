// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace vfmseg::datapipe {

enum class Split { kTrain, kVal, kTest };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

/// One non-overlapping tile of a source raster. Tile bounds always lie fully
/// inside the source extent (trailing remainders are dropped at tiling time).
struct TileRecord {
  std::string source_image_id;
  int tile_row = 0;
  int tile_col = 0;
  int tile_size = 0;
  Split split = Split::kTrain;
  bool labeled = false;

  std::string tile_id() const {
    return source_image_id + ":" + std::to_string(tile_row) + ":" +
           std::to_string(tile_col);
  }
};

struct DatasetManifest {
  std::string dataset_name;
  std::vector<std::string> class_names;
  std::int32_t ignore_value = 255;
  int tile_size = 0;
  std::array<int, 3> split_ratios{6, 2, 2};
  std::uint64_t seed = 0;
  double label_ratio = 1.0;
  std::vector<TileRecord> tiles;

  std::size_t count(Split s) const;
  std::size_t labeled_train_count() const;

  /// Line-delimited serialization: a header object on the first line, then
  /// one TileRecord object per line. Byte-identical for identical inputs.
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
};

/// Scans `dataset_root` (images/*.ppm with matching labels/*.pgm), tiles
/// every source image into a floor(H/tile)*floor(W/tile) grid and assigns
/// whole source images to train/val/test so that tile counts meet
/// `split_ratios` as closely as whole-image assignment allows. All tiles of
/// one source share a split. Deterministic in `seed`.
DatasetManifest build_manifest(const std::filesystem::path& dataset_root,
                               int tile_size,
                               const std::array<int, 3>& split_ratios,
                               std::uint64_t seed);

/// Returns a copy with round(ratio * train_count) train tiles flagged
/// labeled, chosen by seeded shuffle. Val/test tiles never carry the flag.
DatasetManifest partition_labeled(const DatasetManifest& manifest,
                                  double ratio, std::uint64_t seed);

std::vector<const TileRecord*> tiles_of(const DatasetManifest& manifest,
                                        Split split);
std::vector<const TileRecord*> train_tiles(const DatasetManifest& manifest,
                                           bool labeled);

}  // namespace vfmseg::datapipe
