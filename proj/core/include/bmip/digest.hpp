#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

namespace bmip {

/// Incremental 64-bit FNV-1a. Used for config and parameter digests; not a
/// cryptographic hash.
class Fnv1a {
 public:
  Fnv1a& bytes(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& text(std::string_view s) {
    const std::uint64_t n = s.size();
    bytes(&n, sizeof n);
    return bytes(s.data(), s.size());
  }
  Fnv1a& values(std::span<const double> v) { return bytes(v.data(), v.size_bytes()); }
  Fnv1a& u64(std::uint64_t v) { return bytes(&v, sizeof v); }

  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string digest_hex(std::uint64_t digest);

}  // namespace bmip
