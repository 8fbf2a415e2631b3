// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>

namespace vfmseg::datapipe {

/// Bundled synthetic dataset: seeded geometric shapes (discs, rectangles,
/// triangles) on textured backgrounds. 3 foreground classes + background,
/// one tile per source image. Lets every command and the acceptance suite
/// run hermetically, with no licensed imagery or downloads.
struct SynthSpec {
  int num_images = 3334;
  int image_size = 64;
  std::uint64_t seed = 7;
};

/// Writes images/, labels/ and dataset.json under `out_dir`.
void generate_synthetic_dataset(const std::filesystem::path& out_dir,
                                const SynthSpec& spec);

}  // namespace vfmseg::datapipe
