#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace bnas {

inline constexpr const char* kVersion = "0.1.0";

// Malformed tensor geometry (dimension mismatch, zero-size output).
class shape_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad argument outside of shape problems (out-of-range label, epoch, ...).
class value_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values where the contract requires finite ones.
class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration, genotype, or CLI usage. CLI exit code 2.
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Broken or inconsistent dataset input. CLI exit code 3.
class data_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Derives independent sub-seeds from (seed, stream, index) so that the
// various RNG consumers (init, masks, shuffles, data) never share state.
inline uint32_t mix_seed(uint32_t seed, uint32_t stream, uint32_t index = 0) {
  uint64_t z = (static_cast<uint64_t>(seed) << 32) ^ (static_cast<uint64_t>(stream) * 0x9E3779B97F4A7C15ull) ^
               (static_cast<uint64_t>(index) + 1);
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return static_cast<uint32_t>(z ^ (z >> 32));
}

namespace seed_stream {
inline constexpr uint32_t kInit = 1;
inline constexpr uint32_t kMask = 2;
inline constexpr uint32_t kSplit = 3;
inline constexpr uint32_t kTrainShuffle = 4;
inline constexpr uint32_t kValShuffle = 5;
inline constexpr uint32_t kData = 6;
inline constexpr uint32_t kEval = 7;
}  // namespace seed_stream

}  // namespace bnas
