// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace vfmseg::teachers {

/// Registry of downloadable weight bundles: name -> (url, sha256). The
/// registry file is user-supplied JSON: {"entries": [{"name", "url",
/// "sha256"}, ...]}.
struct RegistryEntry {
  std::string name;
  std::string url;
  std::string sha256;
};

std::vector<RegistryEntry> load_registry(const std::filesystem::path& path);

/// Lowercase hex SHA-256 of a file.
std::string sha256_file(const std::filesystem::path& path);

/// Downloads `url` into the cache directory (env VFMSEG_WEIGHTS_CACHE or
/// `cache_dir`), verifies the checksum and returns the cached path. A cached
/// file with a matching checksum short-circuits the download. file:// and
/// http(s):// URLs are supported.
std::filesystem::path fetch_weights(const std::string& url,
                                    const std::string& sha256_hex,
                                    const std::filesystem::path& cache_dir);

/// Cache directory: $VFMSEG_WEIGHTS_CACHE if set, else fallback.
std::filesystem::path weights_cache_dir(
    const std::filesystem::path& fallback = ".vfmseg-weights");

}  // namespace vfmseg::teachers
