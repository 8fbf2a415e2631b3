// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/datapipe/raster.hpp"

#include <fstream>

#include "vfmseg/core/error.hpp"

namespace vfmseg::datapipe {
namespace {

// Reads one whitespace-delimited token, skipping '#' comment lines.
std::string next_token(std::istream& is) {
  std::string tok;
  for (;;) {
    const int c = is.get();
    if (c == EOF) break;
    if (c == '#') {
      std::string line;
      std::getline(is, line);
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

struct Header {
  int width, height, channels;
  std::streampos data_start;
};

Header parse_header(std::ifstream& is, const std::filesystem::path& path) {
  const std::string magic = next_token(is);
  int channels = 0;
  if (magic == "P6") {
    channels = 3;
  } else if (magic == "P5") {
    channels = 1;
  } else {
    throw DataError("unsupported raster format in " + path.string() +
                    " (need binary PPM/PGM)");
  }
  const std::string w = next_token(is);
  const std::string h = next_token(is);
  const std::string maxval = next_token(is);
  if (w.empty() || h.empty() || maxval.empty()) {
    throw DataError("truncated raster header in " + path.string());
  }
  int width = 0, height = 0, mv = 0;
  try {
    width = std::stoi(w);
    height = std::stoi(h);
    mv = std::stoi(maxval);
  } catch (const std::exception&) {
    throw DataError("bad raster header in " + path.string());
  }
  if (width <= 0 || height <= 0) {
    throw DataError("non-positive raster size in " + path.string());
  }
  if (mv != 255) {
    throw DataError("raster " + path.string() + " is not 8-bit (maxval " +
                    std::to_string(mv) + ")");
  }
  return {width, height, channels, is.tellg()};
}

}  // namespace

Raster read_raster(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open raster " + path.string());
  const Header h = parse_header(is, path);
  Raster r;
  r.width = h.width;
  r.height = h.height;
  r.channels = h.channels;
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height *
                        static_cast<std::size_t>(h.channels);
  r.pixels.resize(n);
  is.read(reinterpret_cast<char*>(r.pixels.data()),
          static_cast<std::streamsize>(n));
  if (!is) throw DataError("truncated raster data in " + path.string());
  return r;
}

RasterHeader read_raster_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open raster " + path.string());
  const Header h = parse_header(is, path);
  return {h.width, h.height, h.channels};
}

void write_raster(const std::filesystem::path& path, const Raster& raster) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write raster " + path.string());
  os << (raster.channels == 3 ? "P6" : "P5") << "\n"
     << raster.width << " " << raster.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(raster.pixels.data()),
           static_cast<std::streamsize>(raster.pixels.size()));
  if (!os) throw DataError("failed writing raster " + path.string());
}

}  // namespace vfmseg::datapipe
