// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/core/archive.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "vfmseg/core/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "archive reader/writer assumes a little-endian host");

namespace vfmseg {
namespace {

constexpr char kMagic[4] = {'V', 'F', 'S', 'A'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& is, const std::string& what) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw DataError("archive: truncated while reading " + what);
  return value;
}

}  // namespace

void Archive::save(const std::filesystem::path& path) const {
  // Write to a temp file and rename so a crash never leaves a torn archive.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("archive: cannot open " + tmp.string());
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kVersion);
    const std::string meta_str = meta.dump();
    put<std::uint64_t>(os, meta_str.size());
    os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    put<std::uint64_t>(os, tensors.size());
    for (const auto& [name, tensor] : tensors) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.ndim()));
      for (std::int64_t d : tensor.shape()) put<std::int64_t>(os, d);
      os.write(reinterpret_cast<const char*>(tensor.data()),
               static_cast<std::streamsize>(tensor.numel() *
                                            static_cast<std::int64_t>(
                                                sizeof(double))));
    }
    if (!os) throw DataError("archive: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("archive: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("archive: bad magic in " + path.string());
  }
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kVersion) {
    throw DataError("archive: unsupported version " + std::to_string(version));
  }
  Archive out;
  const auto meta_len = get<std::uint64_t>(is, "meta length");
  std::string meta_str(meta_len, '\0');
  is.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  if (!is) throw DataError("archive: truncated metadata");
  out.meta = nlohmann::ordered_json::parse(meta_str, nullptr, false);
  if (out.meta.is_discarded()) {
    throw DataError("archive: metadata is not valid JSON");
  }
  const auto count = get<std::uint64_t>(is, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(is, "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = get<std::uint32_t>(is, "rank");
    Shape shape(rank);
    for (auto& d : shape) d = get<std::int64_t>(is, "dim");
    const std::int64_t numel = shape_numel(shape);
    std::vector<double> data(static_cast<std::size_t>(numel));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * static_cast<std::int64_t>(
                                                     sizeof(double))));
    if (!is) throw DataError("archive: truncated tensor " + name);
    out.tensors.emplace(std::move(name),
                        Tensor::from_data(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace vfmseg
