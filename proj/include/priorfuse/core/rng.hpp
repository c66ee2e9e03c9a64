#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace priorfuse {

// Root of every random stream in the toolkit.
struct RandomSeed {
  std::uint64_t value{0};
  friend bool operator==(const RandomSeed&, const RandomSeed&) = default;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// FNV-1a, used to turn stream labels into stream ids.
inline std::uint64_t label_hash(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t derive_stream(RandomSeed seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed.value) ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
}

inline std::uint64_t derive_stream(RandomSeed seed, std::string_view label, std::uint64_t index = 0) {
  return derive_stream(RandomSeed{derive_stream(seed, label_hash(label))}, index);
}

// mt19937_64 has a standardized output sequence; the distributions below are
// written out so that streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t state) : engine_(state) {}
  Rng(RandomSeed seed, std::string_view label, std::uint64_t index = 0)
      : engine_(derive_stream(seed, label, index)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
  double spare_{0.0};
  bool has_spare_{false};
};

}  // namespace priorfuse
