// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace vfmseg::datapipe {

/// 8-bit raster. RGB rasters interleave channels (r,g,b per pixel); label
/// rasters have one byte per pixel. Binary PPM (P6) carries images and
/// binary PGM (P5) carries class-id label maps; maxval must be 255.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int row, int col, int ch) const {
    return pixels[(static_cast<std::size_t>(row) * width + col) * channels +
                  ch];
  }
};

Raster read_raster(const std::filesystem::path& path);
void write_raster(const std::filesystem::path& path, const Raster& raster);

/// Parses only the header; cheap way to get dimensions for tiling.
struct RasterHeader {
  int width = 0;
  int height = 0;
  int channels = 0;
};
RasterHeader read_raster_header(const std::filesystem::path& path);

}  // namespace vfmseg::datapipe
