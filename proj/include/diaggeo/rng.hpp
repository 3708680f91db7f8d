#pragma once

#include <cstdint>
#include <random>

namespace diaggeo {

/// Named purposes for independent random streams derived from one seed.
enum class StreamTag : std::uint32_t { init = 1, data = 2, noise = 3, subsample = 4, oracle = 5, dataset = 6 };

/// Seeded 64-bit Mersenne Twister; two streams with different tags never share state.
class RngStream {
 public:
  RngStream(std::uint64_t seed, StreamTag tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag)};
    engine_.seed(seq);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (stddev == 0.0) return mean;
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  double uniform(double lo, double hi) {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  std::uint64_t next_u64() { return engine_(); }

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace diaggeo
