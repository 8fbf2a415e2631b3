// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/teachers/fetch.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include <curl/curl.h>
#include <openssl/evp.h>

#include <nlohmann/json.hpp>

#include "vfmseg/core/error.hpp"

namespace vfmseg::teachers {

std::vector<RegistryEntry> load_registry(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open registry " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad registry " + path.string() + ": " + e.what());
  }
  std::vector<RegistryEntry> entries;
  try {
    for (const auto& e : j.at("entries")) {
      entries.push_back({e.at("name").get<std::string>(),
                         e.at("url").get<std::string>(),
                         e.at("sha256").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("registry " + path.string() +
                    " missing fields: " + e.what());
  }
  return entries;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string() + " for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw DataError("sha256 init failed");
  }
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const std::streamsize got = is.gcount();
    if (got > 0) {
      EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(got));
    }
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::filesystem::path weights_cache_dir(
    const std::filesystem::path& fallback) {
  const char* env = std::getenv("VFMSEG_WEIGHTS_CACHE");
  return env != nullptr && env[0] != '\0' ? std::filesystem::path(env)
                                          : fallback;
}

namespace {

std::size_t write_to_file(char* ptr, std::size_t size, std::size_t nmemb,
                          void* userdata) {
  auto* os = static_cast<std::ofstream*>(userdata);
  os->write(ptr, static_cast<std::streamsize>(size * nmemb));
  return os->good() ? size * nmemb : 0;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

std::filesystem::path fetch_weights(const std::string& url,
                                    const std::string& sha256_hex,
                                    const std::filesystem::path& cache_dir) {
  if (sha256_hex.size() != 64) {
    throw ConfigError("sha256 must be 64 hex chars");
  }
  const std::string want = lower(sha256_hex);
  std::filesystem::create_directories(cache_dir);
  const std::filesystem::path target = cache_dir / (want + ".vfsa");
  if (std::filesystem::exists(target) && sha256_file(target) == want) {
    return target;
  }
  const std::filesystem::path tmp = target.string() + ".part";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + tmp.string());
    CURL* curl = curl_easy_init();
    if (curl == nullptr) throw DataError("curl init failed");
    curl_easy_setopt(curl, CURLOPT_URL, url.c_str());
    curl_easy_setopt(curl, CURLOPT_FOLLOWLOCATION, 1L);
    curl_easy_setopt(curl, CURLOPT_WRITEFUNCTION, write_to_file);
    curl_easy_setopt(curl, CURLOPT_WRITEDATA, &os);
    curl_easy_setopt(curl, CURLOPT_FAILONERROR, 1L);
    const CURLcode rc = curl_easy_perform(curl);
    curl_easy_cleanup(curl);
    if (rc != CURLE_OK) {
      os.close();
      std::filesystem::remove(tmp);
      throw DataError("download failed for " + url + ": " +
                      curl_easy_strerror(rc));
    }
  }
  const std::string got = sha256_file(tmp);
  if (got != want) {
    std::filesystem::remove(tmp);
    throw DataError("checksum mismatch for " + url + " (got " + got +
                    ", want " + want + ")");
  }
  std::filesystem::rename(tmp, target);
  return target;
}

}  // namespace vfmseg::teachers
