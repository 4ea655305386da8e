#pragma once

#include <cstdint>
#include <random>

namespace metastep {

// Purpose tags used to split a master stream into independent substreams.
enum class Purpose : std::uint64_t {
  Episode = 1,
  Context,
  InitialPolicy,
  StepSize,
  Rollout,
  Trajectory,
  Validation,
  Test,
  Tree,
  Forest,
  Pair,
};

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Reproducible random stream keyed by (seed, stream_id).
///
/// Streams are never shared between workers: a parent hands out children
/// through derive(), whose ids are a hash of the parent id, a purpose tag and
/// an index. Identical keys replay identical draws.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id = 0)
      : seed_(seed), stream_id_(stream_id), engine_(make_engine(seed, stream_id)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  RngStream derive(Purpose tag, std::uint64_t index = 0) const {
    return derive(static_cast<std::uint64_t>(tag), index);
  }

  RngStream derive(std::uint64_t tag, std::uint64_t index) const {
    std::uint64_t id = detail::splitmix64(stream_id_ ^ detail::splitmix64(tag));
    id = detail::splitmix64(id ^ detail::splitmix64(index + 0x632be59bd9b4e019ULL));
    return RngStream(seed_, id);
  }

  double normal() { return normal_(engine_); }
  double normal(double mean, double stddev) { return mean + stddev * normal_(engine_); }

  /// Uniform on [lo, hi).
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * std::generate_canonical<double, 53>(engine_);
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  static std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream_id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream_id),
                      static_cast<std::uint32_t>(stream_id >> 32)};
    return std::mt19937_64(seq);
  }

  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace metastep
