// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace moelab {

// FNV-1a 64-bit checksum; used as the trailing integrity word in checkpoint
// containers.
inline uint64_t fnv1a64(std::span<const uint8_t> data, uint64_t seed = 0xcbf29ce484222325ull) {
  uint64_t h = seed;
  for (uint8_t b : data) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

// SHA-256 digest, used to compare training states without shipping the full
// serialization around.
struct Sha256 {
  std::array<uint8_t, 32> bytes{};

  bool operator==(const Sha256&) const = default;

  std::string hex() const {
    static const char* k = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (uint8_t b : bytes) {
      s.push_back(k[b >> 4]);
      s.push_back(k[b & 0xf]);
    }
    return s;
  }
};

inline Sha256 sha256(std::span<const uint8_t> data) {
  Sha256 out;
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw std::runtime_error("sha256: EVP_MD_CTX_new failed");
  if (EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data.data(), data.size()) != 1 ||
      EVP_DigestFinal_ex(ctx, out.bytes.data(), &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256: digest failed");
  }
  EVP_MD_CTX_free(ctx);
  return out;
}

// Byte-buffer writer/reader for the binary checkpoint containers.
struct ByteWriter {
  std::vector<uint8_t> buf;

  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  template <typename T>
  void value(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    raw(&v, sizeof(T));
  }
  void floats(const std::vector<float>& v) {
    raw(v.data(), v.size() * sizeof(float));
  }
};

struct ByteReader {
  std::span<const uint8_t> buf;
  size_t pos = 0;

  void raw(void* p, size_t n) {
    if (pos + n > buf.size()) throw std::runtime_error("container truncated");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  template <typename T>
  T value() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  void floats(std::vector<float>& v, size_t count) {
    v.resize(count);
    raw(v.data(), count * sizeof(float));
  }
};

}  // namespace moelab
