// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "vfmseg/core/tensor.hpp"

namespace vfmseg {

/// Single-file container for named float64 arrays plus a JSON metadata
/// object. Little-endian, layout (all integers little-endian):
///
///   magic   "VFSA"            4 bytes
///   version u32               currently 1
///   meta    u64 length + UTF-8 JSON bytes
///   count   u64
///   entry*  u32 name length, name bytes,
///           u32 rank, i64 dims[rank],
///           f64 data[prod(dims)]
///
/// Used for checkpoints, teacher weight bundles and golden feature vectors.
struct Archive {
  nlohmann::ordered_json meta;
  std::map<std::string, Tensor> tensors;

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);
};

}  // namespace vfmseg
