// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "vfmseg/core/tensor.hpp"

namespace vfmseg::teachers {

enum class TeacherKind { kDinov2, kClip, kSam, kMock };

TeacherKind kind_from_name(const std::string& name);
std::string kind_name(TeacherKind kind);

struct TeacherSpec {
  TeacherKind kind = TeacherKind::kMock;
  int embed_dim = 0;
  int patch_size = 16;
  /// Local archive path or registry identifier. Required for non-mock kinds.
  std::string weights_ref;
  /// Mock only: parameter seed.
  std::uint64_t seed = 0;
  /// Informational variant tag ("base", "vit-l-14", ...).
  std::string variant;
};

/// Batch of patch-token features: data is [B, N, d] with N = rows*cols.
struct TokenFeatureMap {
  Tensor data;
  int rows = 0;
  int cols = 0;
  std::string source;  // "student" or "teacher:<kind>"

  std::int64_t tokens() const { return static_cast<std::int64_t>(rows) * cols; }
};

/// A frozen encoder. Parameters are immutable after load; extraction never
/// records gradients and is safe to call concurrently.
class TeacherHandle {
 public:
  virtual ~TeacherHandle() = default;

  /// Final-encoder-layer patch tokens for `images` ([B, 3, H, W], values in
  /// [0,1]). Class/global tokens are excluded. Inputs whose size is not a
  /// patch multiple are internally resized (bilinear) to the nearest
  /// compatible size.
  virtual TokenFeatureMap extract(const Tensor& images) const = 0;

  /// Bit-level checksum over every parameter; constant for the lifetime of
  /// the handle.
  virtual std::uint64_t param_checksum() const = 0;

  virtual int embed_dim() const = 0;
  virtual int patch_size() const = 0;
  virtual TeacherKind kind() const = 0;
};

using TeacherPtr = std::shared_ptr<const TeacherHandle>;

/// Loads a frozen teacher. Mock teachers are generated from the spec seed;
/// other kinds read a weight archive from spec.weights_ref and verify that
/// the declared embed_dim matches the stored weights.
TeacherPtr load_teacher(const TeacherSpec& spec);

/// Bilinear resample over the token grid to `target` (rows, cols). Identity
/// inputs are returned value-identical. Grid corners are aligned so constant
/// maps stay constant and linear ramps stay linear.
TokenFeatureMap align_token_grid(const TokenFeatureMap& features,
                                 int target_rows, int target_cols);

/// Architecture metadata stored in a ViT weight archive.
struct VitArchConfig {
  int embed_dim = 0;
  int patch_size = 14;
  int depth = 2;
  int heads = 4;
  double mlp_ratio = 4.0;
  bool class_token = true;
  int pos_grid = 16;  // token grid the positional table was stored for
  std::array<double, 3> img_mean{0.485, 0.456, 0.406};
  std::array<double, 3> img_std{0.229, 0.224, 0.225};
};

/// Writes a randomly initialized ViT weight archive; used by tests and by
/// downstream tooling that converts published checkpoints into this layout.
void write_vit_archive(const std::filesystem::path& path,
                       const VitArchConfig& config, TeacherKind kind,
                       std::uint64_t seed);

/// FNV-1a over the raw bytes of a parameter list.
std::uint64_t checksum_tensors(const std::vector<Tensor>& params);

}  // namespace vfmseg::teachers
