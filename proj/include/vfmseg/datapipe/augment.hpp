// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "vfmseg/core/rng.hpp"

namespace vfmseg::datapipe {

/// One image tile with its class-id label map. Image is CHW double in [0,1];
/// labels may contain `ignore_value`. Immutable by convention after
/// construction; augmentations return new samples.
struct SegmentationSample {
  int height = 0;
  int width = 0;
  std::int32_t ignore_value = 255;
  std::vector<double> image;        // 3*H*W, CHW
  std::vector<std::int32_t> label;  // H*W

  double pixel(int ch, int r, int c) const {
    return image[(static_cast<std::size_t>(ch) * height + r) * width + c];
  }
  std::int32_t label_at(int r, int c) const {
    return label[static_cast<std::size_t>(r) * width + c];
  }
  bool valid_at(int r, int c) const { return label_at(r, c) != ignore_value; }
};

struct WeakAugmentSpec {
  double resize_min = 0.5;
  double resize_max = 2.0;
  int crop_size = 512;
  double hflip_prob = 0.5;
};

struct StrongAugmentSpec {
  double jitter_prob = 0.8;
  double brightness = 0.5;
  double contrast = 0.5;
  double saturation = 0.5;
  double hue = 0.25;  // fraction of the full hue circle
  double cutmix_prob = 0.5;
  double cutmix_area_min = 0.2;
  double cutmix_area_max = 0.5;
  double cutmix_aspect_min = 0.5;
  double cutmix_aspect_max = 2.0;
};

struct AugmentationSpec {
  WeakAugmentSpec weak;
  StrongAugmentSpec strong;
};

/// Half-open pixel rectangle [row0, row1) x [col0, col1).
struct Box {
  int row0 = 0, col0 = 0, row1 = 0, col1 = 0;
  int area() const { return (row1 - row0) * (col1 - col0); }
};

/// Random resize (bilinear image, nearest label), random crop to crop_size,
/// joint horizontal flip. The label never interpolates into new ids.
SegmentationSample weak_augment(const SegmentationSample& sample,
                                const WeakAugmentSpec& spec, Rng& rng);

/// Color jitter on the image channels only, then CutMix with `donor` with
/// probability cutmix_prob (labels and ignore masks are mixed jointly).
SegmentationSample strong_augment(const SegmentationSample& sample,
                                  const SegmentationSample& donor,
                                  const StrongAugmentSpec& spec, Rng& rng);

/// Pixels inside `box` come from the donor (image and label), the rest from
/// the recipient.
SegmentationSample cutmix(const SegmentationSample& recipient,
                          const SegmentationSample& donor, const Box& box);

// Building blocks, exposed for tests.
SegmentationSample resize_sample(const SegmentationSample& sample, int out_h,
                                 int out_w);
SegmentationSample crop_sample(const SegmentationSample& sample, int row0,
                               int col0, int size);
SegmentationSample hflip_sample(const SegmentationSample& sample);
Box sample_cutmix_box(int height, int width, const StrongAugmentSpec& spec,
                      Rng& rng);

}  // namespace vfmseg::datapipe
