// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/datapipe/loader.hpp"

#include "vfmseg/core/error.hpp"

namespace vfmseg::datapipe {

TileLoader::TileLoader(std::filesystem::path dataset_root,
                       std::int32_t ignore_value, std::size_t cache_bytes)
    : root_(std::move(dataset_root)),
      ignore_value_(ignore_value),
      cache_cap_(cache_bytes) {}

std::shared_ptr<const TileLoader::SourcePair> TileLoader::source(
    const std::string& id) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = cache_.find(id);
  if (it != cache_.end()) {
    lru_.erase(it->second.second);
    lru_.push_front(id);
    it->second.second = lru_.begin();
    return it->second.first;
  }
  auto pair = std::make_shared<SourcePair>();
  pair->image = read_raster(root_ / "images" / (id + ".ppm"));
  pair->label = read_raster(root_ / "labels" / (id + ".pgm"));
  if (pair->image.channels != 3 || pair->label.channels != 1 ||
      pair->image.width != pair->label.width ||
      pair->image.height != pair->label.height) {
    throw DataError("image/label mismatch for source '" + id + "'");
  }
  cache_bytes_ += pair->bytes();
  lru_.push_front(id);
  cache_[id] = {pair, lru_.begin()};
  while (cache_bytes_ > cache_cap_ && lru_.size() > 1) {
    const std::string& victim = lru_.back();
    auto vit = cache_.find(victim);
    cache_bytes_ -= vit->second.first->bytes();
    cache_.erase(vit);
    lru_.pop_back();
  }
  return pair;
}

SegmentationSample TileLoader::load(const TileRecord& tile) const {
  const auto src = source(tile.source_image_id);
  const int ts = tile.tile_size;
  const int r0 = tile.tile_row * ts;
  const int c0 = tile.tile_col * ts;
  if (r0 + ts > src->image.height || c0 + ts > src->image.width) {
    throw DataError("tile " + tile.tile_id() + " exceeds source extent");
  }
  SegmentationSample s;
  s.height = ts;
  s.width = ts;
  s.ignore_value = ignore_value_;
  s.image.resize(static_cast<std::size_t>(3) * ts * ts);
  s.label.resize(static_cast<std::size_t>(ts) * ts);
  constexpr double kInv255 = 1.0 / 255.0;
  for (int i = 0; i < ts; ++i) {
    for (int j = 0; j < ts; ++j) {
      for (int ch = 0; ch < 3; ++ch) {
        s.image[(static_cast<std::size_t>(ch) * ts + i) * ts + j] =
            src->image.at(r0 + i, c0 + j, ch) * kInv255;
      }
      s.label[static_cast<std::size_t>(i) * ts + j] =
          src->label.at(r0 + i, c0 + j, 0);
    }
  }
  return s;
}

std::uint64_t augment_stream_seed(std::uint64_t global_seed,
                                  const std::string& tile_id,
                                  std::uint64_t pass, std::string_view tag) {
  return Rng::derive(
      {global_seed, Rng::hash_str(tile_id), pass, Rng::hash_str(tag)});
}

}  // namespace vfmseg::datapipe
