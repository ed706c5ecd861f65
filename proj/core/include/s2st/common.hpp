#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace s2st {

// Error categories used across the library. The CLI maps ConfigError /
// UsageError to exit code 2 and everything else to exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VocabError : DataError {
  using DataError::DataError;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// FNV-1a based seed mixing. Used to derive independent, order-stable RNG
// streams (per utterance, per step, per task) from one top-level seed.
constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr uint64_t kFnvPrime = 0x100000001b3ULL;

inline uint64_t hash_mix(uint64_t h, uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffu;
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t hash_mix(uint64_t h, std::string_view s) {
  for (unsigned char c : s) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
  return hash_mix(hash_mix(kFnvOffset, base), tag);
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t n) {
  return hash_mix(derive_seed(base, tag), n);
}

}  // namespace s2st
