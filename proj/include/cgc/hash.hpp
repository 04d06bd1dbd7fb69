#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace cgc {

// 64-bit FNV-1a. Used for corpus and config fingerprints, not security.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const std::byte> bytes) {
    for (auto b : bytes) {
      hash_ ^= static_cast<std::uint64_t>(b);
      hash_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(std::string_view s) { return update(std::as_bytes(std::span(s.data(), s.size()))); }
  template <typename T>
  Fnv1a& update_pod(const T& value) {
    return update(std::as_bytes(std::span(&value, 1)));
  }
  std::uint64_t digest() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace cgc
