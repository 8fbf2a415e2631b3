// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>

#include "vfmseg/datapipe/augment.hpp"
#include "vfmseg/datapipe/manifest.hpp"
#include "vfmseg/datapipe/raster.hpp"

namespace vfmseg::datapipe {

/// Cuts tiles out of the source rasters under `dataset_root`. Source rasters
/// are cached whole behind a byte-capped LRU; loading is guarded by a mutex
/// so evaluation workers can share one loader. Samples themselves are
/// immutable values.
class TileLoader {
 public:
  TileLoader(std::filesystem::path dataset_root, std::int32_t ignore_value,
             std::size_t cache_bytes = std::size_t(1) << 30);

  SegmentationSample load(const TileRecord& tile) const;

 private:
  struct SourcePair {
    Raster image;
    Raster label;
    std::size_t bytes() const {
      return image.pixels.size() + label.pixels.size();
    }
  };
  std::shared_ptr<const SourcePair> source(const std::string& id) const;

  std::filesystem::path root_;
  std::int32_t ignore_value_;
  std::size_t cache_cap_;
  mutable std::mutex mu_;
  mutable std::size_t cache_bytes_ = 0;
  mutable std::list<std::string> lru_;
  mutable std::map<std::string,
                   std::pair<std::shared_ptr<const SourcePair>,
                             std::list<std::string>::iterator>>
      cache_;
};

/// Seed for the augmentation stream of one tile occurrence; a pure function
/// of (global seed, tile id, pass index) so parallel and serial loading, and
/// interrupted and resumed runs, see identical streams.
std::uint64_t augment_stream_seed(std::uint64_t global_seed,
                                  const std::string& tile_id,
                                  std::uint64_t pass, std::string_view tag);

}  // namespace vfmseg::datapipe
