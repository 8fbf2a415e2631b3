// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/datapipe/augment.hpp"

#include <algorithm>
#include <cmath>

#include "vfmseg/core/error.hpp"

namespace vfmseg::datapipe {
namespace {

void check_same_extent(const SegmentationSample& a,
                       const SegmentationSample& b, const char* op) {
  if (a.height != b.height || a.width != b.width) {
    throw ContractViolation(std::string(op) + ": samples differ in extent");
  }
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// RGB <-> HSV for hue rotation. h in [0,1).
void rgb_to_hsv(double r, double g, double b, double& h, double& s,
                double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  v = mx;
  const double d = mx - mn;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r) {
    h = (g - b) / d;
  } else if (mx == g) {
    h = 2.0 + (b - r) / d;
  } else {
    h = 4.0 + (r - g) / d;
  }
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g,
                double& b) {
  if (s <= 0.0) {
    r = g = b = v;
    return;
  }
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

}  // namespace

SegmentationSample resize_sample(const SegmentationSample& sample, int out_h,
                                 int out_w) {
  SegmentationSample out;
  out.height = out_h;
  out.width = out_w;
  out.ignore_value = sample.ignore_value;
  out.image.resize(static_cast<std::size_t>(3) * out_h * out_w);
  out.label.resize(static_cast<std::size_t>(out_h) * out_w);
  // Image: bilinear with half-pixel centers. Label: nearest neighbour so
  // ignore pixels and class ids survive untouched.
  for (int i = 0; i < out_h; ++i) {
    double sy = (i + 0.5) * sample.height / out_h - 0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(sample.height - 1));
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, sample.height - 1);
    const double wy = sy - y0;
    const int ny = std::min(static_cast<int>(std::floor(
                                (i + 0.5) * sample.height / out_h)),
                            sample.height - 1);
    for (int j = 0; j < out_w; ++j) {
      double sx = (j + 0.5) * sample.width / out_w - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(sample.width - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, sample.width - 1);
      const double wx = sx - x0;
      for (int ch = 0; ch < 3; ++ch) {
        const double top = sample.pixel(ch, y0, x0) * (1.0 - wx) +
                           sample.pixel(ch, y0, x1) * wx;
        const double bot = sample.pixel(ch, y1, x0) * (1.0 - wx) +
                           sample.pixel(ch, y1, x1) * wx;
        out.image[(static_cast<std::size_t>(ch) * out_h + i) * out_w + j] =
            top * (1.0 - wy) + bot * wy;
      }
      const int nx = std::min(static_cast<int>(std::floor(
                                  (j + 0.5) * sample.width / out_w)),
                              sample.width - 1);
      out.label[static_cast<std::size_t>(i) * out_w + j] =
          sample.label_at(ny, nx);
    }
  }
  return out;
}

SegmentationSample crop_sample(const SegmentationSample& sample, int row0,
                               int col0, int size) {
  if (row0 < 0 || col0 < 0 || row0 + size > sample.height ||
      col0 + size > sample.width) {
    throw ContractViolation("crop out of bounds");
  }
  SegmentationSample out;
  out.height = size;
  out.width = size;
  out.ignore_value = sample.ignore_value;
  out.image.resize(static_cast<std::size_t>(3) * size * size);
  out.label.resize(static_cast<std::size_t>(size) * size);
  for (int ch = 0; ch < 3; ++ch) {
    for (int i = 0; i < size; ++i) {
      const double* src =
          sample.image.data() +
          (static_cast<std::size_t>(ch) * sample.height + row0 + i) *
              sample.width +
          col0;
      std::copy(src, src + size,
                out.image.begin() +
                    (static_cast<std::size_t>(ch) * size + i) * size);
    }
  }
  for (int i = 0; i < size; ++i) {
    const std::int32_t* src =
        sample.label.data() +
        static_cast<std::size_t>(row0 + i) * sample.width + col0;
    std::copy(src, src + size,
              out.label.begin() + static_cast<std::size_t>(i) * size);
  }
  return out;
}

SegmentationSample hflip_sample(const SegmentationSample& sample) {
  SegmentationSample out = sample;
  for (int ch = 0; ch < 3; ++ch) {
    for (int i = 0; i < sample.height; ++i) {
      for (int j = 0; j < sample.width; ++j) {
        out.image[(static_cast<std::size_t>(ch) * sample.height + i) *
                      sample.width +
                  j] = sample.pixel(ch, i, sample.width - 1 - j);
      }
    }
  }
  for (int i = 0; i < sample.height; ++i) {
    for (int j = 0; j < sample.width; ++j) {
      out.label[static_cast<std::size_t>(i) * sample.width + j] =
          sample.label_at(i, sample.width - 1 - j);
    }
  }
  return out;
}

SegmentationSample weak_augment(const SegmentationSample& sample,
                                const WeakAugmentSpec& spec, Rng& rng) {
  const double scale = rng.uniform(spec.resize_min, spec.resize_max);
  const int new_h = std::max(1, static_cast<int>(std::lround(sample.height * scale)));
  const int new_w = std::max(1, static_cast<int>(std::lround(sample.width * scale)));
  SegmentationSample resized =
      (new_h == sample.height && new_w == sample.width)
          ? sample
          : resize_sample(sample, new_h, new_w);
  if (spec.crop_size > resized.height || spec.crop_size > resized.width) {
    throw ConfigError("crop_size " + std::to_string(spec.crop_size) +
                      " exceeds resized sample " +
                      std::to_string(resized.height) + "x" +
                      std::to_string(resized.width));
  }
  const int max_r = resized.height - spec.crop_size;
  const int max_c = resized.width - spec.crop_size;
  const int r0 = max_r > 0 ? static_cast<int>(rng.uniform_int(
                                 static_cast<std::uint64_t>(max_r) + 1))
                           : 0;
  const int c0 = max_c > 0 ? static_cast<int>(rng.uniform_int(
                                 static_cast<std::uint64_t>(max_c) + 1))
                           : 0;
  SegmentationSample cropped = crop_sample(resized, r0, c0, spec.crop_size);
  if (rng.uniform() < spec.hflip_prob) {
    return hflip_sample(cropped);
  }
  return cropped;
}

Box sample_cutmix_box(int height, int width, const StrongAugmentSpec& spec,
                      Rng& rng) {
  const double a = rng.uniform(spec.cutmix_area_min, spec.cutmix_area_max);
  const double r = rng.uniform(spec.cutmix_aspect_min, spec.cutmix_aspect_max);
  int cut_h = static_cast<int>(std::lround(height * std::sqrt(a / r)));
  int cut_w = static_cast<int>(std::lround(width * std::sqrt(a * r)));
  cut_h = std::clamp(cut_h, 1, height);
  cut_w = std::clamp(cut_w, 1, width);
  const int r0 = static_cast<int>(
      rng.uniform_int(static_cast<std::uint64_t>(height - cut_h) + 1));
  const int c0 = static_cast<int>(
      rng.uniform_int(static_cast<std::uint64_t>(width - cut_w) + 1));
  return {r0, c0, r0 + cut_h, c0 + cut_w};
}

SegmentationSample cutmix(const SegmentationSample& recipient,
                          const SegmentationSample& donor, const Box& box) {
  check_same_extent(recipient, donor, "cutmix");
  if (box.row0 < 0 || box.col0 < 0 || box.row1 > recipient.height ||
      box.col1 > recipient.width || box.row0 > box.row1 ||
      box.col0 > box.col1) {
    throw ContractViolation("cutmix box out of bounds");
  }
  SegmentationSample out = recipient;
  for (int ch = 0; ch < 3; ++ch) {
    for (int i = box.row0; i < box.row1; ++i) {
      for (int j = box.col0; j < box.col1; ++j) {
        out.image[(static_cast<std::size_t>(ch) * out.height + i) * out.width +
                  j] = donor.pixel(ch, i, j);
      }
    }
  }
  for (int i = box.row0; i < box.row1; ++i) {
    for (int j = box.col0; j < box.col1; ++j) {
      out.label[static_cast<std::size_t>(i) * out.width + j] =
          donor.label_at(i, j);
    }
  }
  return out;
}

SegmentationSample strong_augment(const SegmentationSample& sample,
                                  const SegmentationSample& donor,
                                  const StrongAugmentSpec& spec, Rng& rng) {
  check_same_extent(sample, donor, "strong_augment");
  SegmentationSample out = sample;
  if (rng.uniform() < spec.jitter_prob) {
    const double fb = std::max(0.0, rng.uniform(1.0 - spec.brightness,
                                                1.0 + spec.brightness));
    const double fc = std::max(0.0, rng.uniform(1.0 - spec.contrast,
                                                1.0 + spec.contrast));
    const double fs = std::max(0.0, rng.uniform(1.0 - spec.saturation,
                                                1.0 + spec.saturation));
    const double hue_shift = rng.uniform(-spec.hue, spec.hue);
    const std::size_t plane =
        static_cast<std::size_t>(out.height) * out.width;
    double* red = out.image.data();
    double* green = out.image.data() + plane;
    double* blue = out.image.data() + 2 * plane;
    // Brightness.
    for (std::size_t i = 0; i < plane; ++i) {
      red[i] = clamp01(red[i] * fb);
      green[i] = clamp01(green[i] * fb);
      blue[i] = clamp01(blue[i] * fb);
    }
    // Contrast around the mean luma of the brightened image.
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      mean += 0.299 * red[i] + 0.587 * green[i] + 0.114 * blue[i];
    }
    mean /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      red[i] = clamp01((red[i] - mean) * fc + mean);
      green[i] = clamp01((green[i] - mean) * fc + mean);
      blue[i] = clamp01((blue[i] - mean) * fc + mean);
    }
    // Saturation towards per-pixel luma.
    for (std::size_t i = 0; i < plane; ++i) {
      const double luma = 0.299 * red[i] + 0.587 * green[i] + 0.114 * blue[i];
      red[i] = clamp01((red[i] - luma) * fs + luma);
      green[i] = clamp01((green[i] - luma) * fs + luma);
      blue[i] = clamp01((blue[i] - luma) * fs + luma);
    }
    // Hue rotation.
    if (hue_shift != 0.0) {
      for (std::size_t i = 0; i < plane; ++i) {
        double h, s, v;
        rgb_to_hsv(red[i], green[i], blue[i], h, s, v);
        hsv_to_rgb(h + hue_shift, s, v, red[i], green[i], blue[i]);
      }
    }
  }
  if (rng.uniform() < spec.cutmix_prob) {
    const Box box = sample_cutmix_box(out.height, out.width, spec, rng);
    out = cutmix(out, donor, box);
  }
  return out;
}

}  // namespace vfmseg::datapipe
