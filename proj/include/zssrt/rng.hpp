#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace zssrt {

// Deterministic random source with its own floating-point conversions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via Box-Muller (no cached second value).
  double normal();

  // Digest of the engine state, recorded in checkpoints.
  std::uint64_t digest() const;

  // Independent stream derived from (seed, key), used for per-ray jitter.
  static Rng keyed(std::uint64_t seed, std::uint64_t key);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

// FNV-1a over raw bytes.
std::uint64_t fnv1a(const void* data, std::size_t size,
                    std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t v);

}  // namespace zssrt
