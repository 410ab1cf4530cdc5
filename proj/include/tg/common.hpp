#pragma once

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tg {

// Reserved token ids shared by the tokenizer, the data pipeline and the model.
inline constexpr std::uint32_t kPad = 0;
inline constexpr std::uint32_t kBos = 1;
inline constexpr std::uint32_t kEos = 2;
inline constexpr std::uint32_t kEod = 3;
inline constexpr std::uint32_t kNumReserved = 4;
inline constexpr std::uint32_t kByteBase = kNumReserved;
inline constexpr std::uint32_t kMinVocabSize = kByteBase + 256;

inline constexpr bool is_special(std::uint32_t id) { return id < kNumReserved; }

/// Additive attention bias for a blocked (query, key) pair.  Finite on purpose
/// so that masked rows never produce inf - inf.
inline constexpr double kMaskSentinel = -1e9;

template <class T>
constexpr bool is_masked_bias(T bias) {
  return bias <= static_cast<T>(kMaskSentinel / 2);
}

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double x) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

[[noreturn]] inline void reject(const std::string& what) { throw std::invalid_argument(what); }

inline void require(bool ok, const std::string& what) {
  if (!ok) reject(what);
}

// splitmix64 finalizer; used to derive independent sub-seeds.
inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Named sub-seed: "data", "init", "dropout", "probe", ...
inline constexpr std::uint64_t sub_seed(std::uint64_t seed, std::string_view tag) {
  return mix64(seed ^ fnv1a(tag));
}

}  // namespace tg
