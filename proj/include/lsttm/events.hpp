#pragma once

#include <cstdint>
#include <string_view>

namespace lsttm {

using Timestamp = std::int64_t;
using NodeId = std::int64_t;

inline constexpr Timestamp kSecondsPerHour = 3600;
inline constexpr Timestamp kSecondsPerDay = 24 * kSecondsPerHour;

enum class Source : std::uint8_t { kInternal, kExternal };

std::string_view source_name(Source s);

// Items live in one id space: internal items first, external items after.
struct EventRecord {
  NodeId user = 0;
  NodeId item = 0;
  Timestamp ts = 0;
  Source source = Source::kInternal;
  bool clicked = false;
  int hour = 0;
  int position = 0;
  double dwell = 0.0;

  bool operator==(const EventRecord&) const = default;
};

inline Timestamp day_of(Timestamp ts) { return ts / kSecondsPerDay; }
inline Timestamp global_hour_of(Timestamp ts) { return ts / kSecondsPerHour; }
inline Timestamp hour_start(Timestamp global_hour) { return global_hour * kSecondsPerHour; }

// Deterministic 64-bit mixing (splitmix64 finalizer) for deriving seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) { return mix64(seed ^ mix64(salt)); }

}  // namespace lsttm
