#ifndef QCD_RNG_HPP
#define QCD_RNG_HPP

#include <array>
#include <cstdint>
#include <random>

#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>

namespace qcd {

/// Identity of an independent random substream.
///
/// Every (seed, replication, lane) triple maps to its own generator state;
/// lanes below `kFirstReservedLane` are sensor indices, reserved lanes carry
/// auxiliary randomness (bridge sampling, calibration batches).
struct StreamId {
  std::uint64_t seed = 0;
  std::uint64_t replication = 0;
  std::uint64_t lane = 0;
};

inline constexpr std::uint64_t kFirstReservedLane = 1ULL << 32;
inline constexpr std::uint64_t kFusionLane = kFirstReservedLane + 1;
inline constexpr std::uint64_t kExitPostLane = kFirstReservedLane + 2;
inline constexpr std::uint64_t kExitPreLane = kFirstReservedLane + 3;
inline constexpr std::uint64_t kBlockPostLane = kFirstReservedLane + 4;
inline constexpr std::uint64_t kBlockPreLane = kFirstReservedLane + 5;
inline constexpr std::uint64_t kSprtLane = kFirstReservedLane + 6;
/// Per-sensor bridge randomness lives at kSensorBridgeLane + k.
inline constexpr std::uint64_t kSensorBridgeLane = kFirstReservedLane + 1024;

/// A 64-bit Mersenne Twister seeded through std::seed_seq from the full
/// StreamId, with Gaussian (ziggurat) and uniform draws.
class Substream {
 public:
  explicit Substream(const StreamId& id) : engine_(seed_state(id)) {}

  double normal() { return normal_(engine_); }

  /// Uniform on (0, 1]; safe as a log argument.
  double uniform_open() { return 1.0 - uniform_(engine_); }

  std::mt19937_64& engine() { return engine_; }

 private:
  static std::mt19937_64 seed_state(const StreamId& id) {
    auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v); };
    auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
    std::seed_seq seq{lo(id.seed),        hi(id.seed), lo(id.replication),
                      hi(id.replication), lo(id.lane), hi(id.lane),
                      0x51ed2701u};
    return std::mt19937_64(seq);
  }

  std::mt19937_64 engine_;
  boost::random::normal_distribution<double> normal_;
  boost::random::uniform_01<double> uniform_;
};

}  // namespace qcd

#endif  // QCD_RNG_HPP
