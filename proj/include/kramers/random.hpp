#pragma once

#include <cstdint>
#include <random>

#include "kramers/fields.hpp"

namespace kramers {

// Independent normal stream per (seed, stream, path). Replaying the same triple
// reproduces the same increments regardless of how paths are scheduled.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream, std::uint64_t path) : seed_(seed), stream_(stream), path_(path) {
    reset();
  }

  void reset() {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32),
                      static_cast<std::uint32_t>(path_), static_cast<std::uint32_t>(path_ >> 32)};
    engine_.seed(seq);
    normal_.reset();
    counter_ = 0;
  }

  double normal() {
    ++counter_;
    return normal_(engine_);
  }

  Vec normal_vector(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t path() const { return path_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t path_;
  std::uint64_t counter_ = 0;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

}  // namespace kramers
