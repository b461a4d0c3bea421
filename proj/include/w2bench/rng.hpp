#pragma once

// Counter-based random stream.
//
// Output i of a stream with key k is splitmix64(k + (i + 1) * 0x9E3779B97F4A7C15),
// so a stream is fully described by (key, counter). fork(id) derives an
// independent child key by hashing (key, id); forking never advances the
// parent. Every consumer that must be reproducible on its own (mixture
// generation, sampling, network initialization, training batches,
// evaluation) gets its own fork.

#include <cstdint>
#include <limits>
#include <random>

namespace w2bench {

namespace streams {
inline constexpr std::uint64_t kMixture = 0x6d69780000000001ULL;
inline constexpr std::uint64_t kSampling = 0x736d700000000002ULL;
inline constexpr std::uint64_t kInit = 0x696e690000000003ULL;
inline constexpr std::uint64_t kTraining = 0x74726e0000000004ULL;
inline constexpr std::uint64_t kEvaluation = 0x65766c0000000005ULL;
inline constexpr std::uint64_t kConstruction = 0x636f6e0000000006ULL;
}  // namespace streams

constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) : key_(splitmix64(seed ^ 0xA0761D6478BD642FULL)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    ++counter_;
    return splitmix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  Rng fork(std::uint64_t stream_id) const {
    Rng child;
    child.key_ = splitmix64(key_ ^ splitmix64(stream_id + 0x632BE59BD9B4E019ULL));
    return child;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double normal() { return normal_(*this); }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  std::normal_distribution<double> normal_;
};

}  // namespace w2bench
