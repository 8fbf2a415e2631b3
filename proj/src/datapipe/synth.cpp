// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/datapipe/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "vfmseg/core/error.hpp"
#include "vfmseg/core/rng.hpp"
#include "vfmseg/datapipe/raster.hpp"

namespace vfmseg::datapipe {
namespace {

struct Rgb {
  double r, g, b;
};

// Class palettes with deliberate channel overlap so color alone does not
// solve the task; shape context carries the rest.
constexpr Rgb kBackgroundBase{0.42, 0.38, 0.30};
constexpr std::array<Rgb, 3> kClassBase{{
    {0.70, 0.30, 0.25},  // disc
    {0.30, 0.62, 0.30},  // rectangle
    {0.28, 0.38, 0.68},  // triangle
}};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Smooth value noise: a coarse random lattice upsampled bilinearly.
std::vector<double> value_noise(int size, int lattice, double amp, Rng& rng) {
  const int lat = std::max(2, lattice);
  std::vector<double> grid(static_cast<std::size_t>(lat) * lat);
  for (auto& v : grid) v = rng.uniform(-amp, amp);
  std::vector<double> out(static_cast<std::size_t>(size) * size);
  for (int i = 0; i < size; ++i) {
    const double fy = static_cast<double>(i) * (lat - 1) / (size - 1);
    const int y0 = std::min(static_cast<int>(fy), lat - 2);
    const double wy = fy - y0;
    for (int j = 0; j < size; ++j) {
      const double fx = static_cast<double>(j) * (lat - 1) / (size - 1);
      const int x0 = std::min(static_cast<int>(fx), lat - 2);
      const double wx = fx - x0;
      const double top = grid[static_cast<std::size_t>(y0) * lat + x0] * (1 - wx) +
                         grid[static_cast<std::size_t>(y0) * lat + x0 + 1] * wx;
      const double bot =
          grid[static_cast<std::size_t>(y0 + 1) * lat + x0] * (1 - wx) +
          grid[static_cast<std::size_t>(y0 + 1) * lat + x0 + 1] * wx;
      out[static_cast<std::size_t>(i) * size + j] = top * (1 - wy) + bot * wy;
    }
  }
  return out;
}

bool in_triangle(double px, double py, double x0, double y0, double x1,
                 double y1, double x2, double y2) {
  const auto sign = [](double ax, double ay, double bx, double by, double cx,
                       double cy) {
    return (ax - cx) * (by - cy) - (bx - cx) * (ay - cy);
  };
  const double d1 = sign(px, py, x0, y0, x1, y1);
  const double d2 = sign(px, py, x1, y1, x2, y2);
  const double d3 = sign(px, py, x2, y2, x0, y0);
  const bool has_neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
  const bool has_pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
  return !(has_neg && has_pos);
}

}  // namespace

void generate_synthetic_dataset(const std::filesystem::path& out_dir,
                                const SynthSpec& spec) {
  if (spec.num_images <= 0 || spec.image_size < 16) {
    throw ConfigError("synthetic dataset needs >=1 image of size >=16");
  }
  std::filesystem::create_directories(out_dir / "images");
  std::filesystem::create_directories(out_dir / "labels");

  const int n = spec.image_size;
  for (int idx = 0; idx < spec.num_images; ++idx) {
    Rng rng(Rng::derive({spec.seed, static_cast<std::uint64_t>(idx),
                         Rng::hash_str("synth-tile")}));
    std::vector<double> img(static_cast<std::size_t>(3) * n * n);
    std::vector<std::int32_t> lbl(static_cast<std::size_t>(n) * n, 0);

    const auto noise_r = value_noise(n, 5, 0.10, rng);
    const auto noise_g = value_noise(n, 5, 0.10, rng);
    const auto noise_b = value_noise(n, 5, 0.10, rng);
    const double tint = rng.uniform(-0.08, 0.08);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const std::size_t p = static_cast<std::size_t>(i) * n + j;
        img[p] = clamp01(kBackgroundBase.r + tint + noise_r[p]);
        img[static_cast<std::size_t>(n) * n + p] =
            clamp01(kBackgroundBase.g + tint + noise_g[p]);
        img[2 * static_cast<std::size_t>(n) * n + p] =
            clamp01(kBackgroundBase.b + tint + noise_b[p]);
      }
    }

    const int shapes = 1 + static_cast<int>(rng.uniform_int(3));
    for (int s = 0; s < shapes; ++s) {
      const int cls = 1 + static_cast<int>(rng.uniform_int(3));
      const Rgb base = kClassBase[static_cast<std::size_t>(cls - 1)];
      const double jr = rng.uniform(-0.10, 0.10);
      const double jg = rng.uniform(-0.10, 0.10);
      const double jb = rng.uniform(-0.10, 0.10);
      const double cx = rng.uniform(0.2 * n, 0.8 * n);
      const double cy = rng.uniform(0.2 * n, 0.8 * n);
      const double radius = rng.uniform(0.10 * n, 0.28 * n);
      // Triangle vertices (only used for cls 3).
      const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979);
      std::array<double, 3> vx{}, vy{};
      for (int v = 0; v < 3; ++v) {
        const double a = ang + v * 2.0943951023931953;  // 2*pi/3
        vx[static_cast<std::size_t>(v)] = cx + radius * std::cos(a);
        vy[static_cast<std::size_t>(v)] = cy + radius * std::sin(a);
      }
      const double half_w = radius;
      const double half_h = radius * rng.uniform(0.5, 1.0);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          bool inside = false;
          if (cls == 1) {
            const double dx = j - cx, dy = i - cy;
            inside = dx * dx + dy * dy <= radius * radius;
          } else if (cls == 2) {
            inside = std::abs(j - cx) <= half_w && std::abs(i - cy) <= half_h;
          } else {
            inside = in_triangle(j, i, vx[0], vy[0], vx[1], vy[1], vx[2], vy[2]);
          }
          if (!inside) continue;
          const std::size_t p = static_cast<std::size_t>(i) * n + j;
          const double speck = rng.uniform(-0.06, 0.06);
          img[p] = clamp01(base.r + jr + speck);
          img[static_cast<std::size_t>(n) * n + p] =
              clamp01(base.g + jg + speck);
          img[2 * static_cast<std::size_t>(n) * n + p] =
              clamp01(base.b + jb + speck);
          lbl[p] = cls;
        }
      }
    }

    Raster img_raster;
    img_raster.width = n;
    img_raster.height = n;
    img_raster.channels = 3;
    img_raster.pixels.resize(static_cast<std::size_t>(3) * n * n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const std::size_t p = static_cast<std::size_t>(i) * n + j;
        for (int ch = 0; ch < 3; ++ch) {
          img_raster.pixels[p * 3 + static_cast<std::size_t>(ch)] =
              static_cast<std::uint8_t>(std::lround(
                  img[static_cast<std::size_t>(ch) * n * n + p] * 255.0));
        }
      }
    }
    Raster lbl_raster;
    lbl_raster.width = n;
    lbl_raster.height = n;
    lbl_raster.channels = 1;
    lbl_raster.pixels.resize(static_cast<std::size_t>(n) * n);
    for (std::size_t p = 0; p < lbl.size(); ++p) {
      lbl_raster.pixels[p] = static_cast<std::uint8_t>(lbl[p]);
    }

    char name[32];
    std::snprintf(name, sizeof(name), "tile_%05d", idx);
    write_raster(out_dir / "images" / (std::string(name) + ".ppm"),
                 img_raster);
    write_raster(out_dir / "labels" / (std::string(name) + ".pgm"),
                 lbl_raster);
  }

  nlohmann::ordered_json meta;
  meta["name"] = "synthetic-shapes";
  meta["class_names"] = {"background", "disc", "rectangle", "triangle"};
  meta["ignore_value"] = 255;
  meta["num_images"] = spec.num_images;
  meta["image_size"] = spec.image_size;
  meta["seed"] = spec.seed;
  std::ofstream os(out_dir / "dataset.json", std::ios::trunc);
  os << meta.dump(2) << "\n";
  if (!os) throw DataError("failed writing dataset.json");
}

}  // namespace vfmseg::datapipe
