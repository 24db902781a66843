#pragma once

// Counter-based random streams.
//
// Every random draw in the library comes from a stream identified by
// (master seed, phase, iteration, entity, sub). The tuple is hashed into a
// Philox4x32-10 key/counter pair, so two streams never share state and the
// samples of one stream do not depend on the order in which other streams
// were consumed. This is what lets per-item noise be drawn from parallel
// workers while staying bit-reproducible.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace dpals {

enum class Phase : std::uint32_t {
  kGeneric = 0,
  kSyntheticFactors,
  kSyntheticMask,
  kSplit,
  kUserHoldout,
  kItemSample,      // per-user cap of k ratings feeding the item step
  kUserSubsample,   // optional 1/T subsample inside the user step
  kCounts,          // noisy item counts
  kGlobalMean,
  kGramian,         // per-item G_j
  kRhsNoise,        // per-item g_j
  kGlobalGramian,   // shared noisy lambda0 * sum U_i U_i^T
  kRandomInit,
  kPowerIteration,
  kPowerIterationStart,
  kPreprocessSample,
};

struct StreamKey {
  Phase phase = Phase::kGeneric;
  std::uint32_t iteration = 0;
  std::uint32_t entity = 0;
  std::uint32_t sub = 0;  // retry attempt or release index

  friend bool operator==(const StreamKey&, const StreamKey&) = default;
};

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

using PhiloxBlock = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

constexpr PhiloxBlock philox4x32_10(PhiloxBlock ctr, PhiloxKey key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = std::uint64_t{kM0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kM1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

}  // namespace detail

/// Stateful generator over one stream. Cheap to construct; copy to fork.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  CounterRng(std::uint64_t key, std::uint32_t entity, std::uint32_t iteration)
      : key_{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)},
        entity_(entity),
        iteration_(iteration) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    if (lane_ == 2) refill();
    const std::uint64_t lo = buffer_[2 * lane_], hi = buffer_[2 * lane_ + 1];
    ++lane_;
    return (hi << 32) | lo;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, bound) by Lemire's multiply-and-reject.
  std::uint64_t bounded(std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const unsigned __int128 product = static_cast<unsigned __int128>((*this)()) * bound;
      if (static_cast<std::uint64_t>(product) >= threshold) {
        return static_cast<std::uint64_t>(product >> 64);
      }
    }
  }

  /// Standard normal via Box-Muller; the second variate of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = (static_cast<double>((*this)() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  void refill() {
    buffer_ = detail::philox4x32_10(
        {static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32), entity_, iteration_},
        key_);
    ++block_;
    lane_ = 0;
  }

  detail::PhiloxKey key_;
  std::uint32_t entity_;
  std::uint32_t iteration_;
  std::uint64_t block_ = 0;
  detail::PhiloxBlock buffer_{};
  int lane_ = 2;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Immutable descriptor of a random stream. Sampling state lives in the
/// CounterRng returned by generator(), never in the descriptor.
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(std::uint64_t master_seed, StreamKey key = {}) : seed_(master_seed), key_(key) {}

  std::uint64_t master_seed() const { return seed_; }
  const StreamKey& key() const { return key_; }

  RngStream with(Phase phase, std::uint32_t iteration = 0, std::uint32_t entity = 0, std::uint32_t sub = 0) const {
    return RngStream(seed_, StreamKey{phase, iteration, entity, sub});
  }
  RngStream with_entity(std::uint32_t entity) const {
    StreamKey k = key_;
    k.entity = entity;
    return RngStream(seed_, k);
  }

  CounterRng generator() const {
    std::uint64_t h = detail::splitmix64(seed_);
    h = detail::splitmix64(h ^ static_cast<std::uint64_t>(key_.phase));
    h = detail::splitmix64(h ^ (std::uint64_t{key_.sub} << 17));
    return CounterRng(h, key_.entity, key_.iteration);
  }

 private:
  std::uint64_t seed_ = 0;
  StreamKey key_{};
};

}  // namespace dpals
