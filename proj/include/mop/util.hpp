#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>

namespace mop {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; mixes a seed with stream coordinates.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> coords) {
  std::uint64_t s = mix_seed(seed);
  for (auto c : coords) s = mix_seed(s ^ (c + 0x632be59bd9b4e019ULL));
  return s;
}

/// Uniform integer in [0, n). Uses std::uniform_int_distribution, which is
/// deterministic for a given standard library.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

/// Runs body(i) for i in [0, n) on up to `threads` workers. Each index is
/// handled by exactly one worker, so per-index outputs are deterministic.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& body);

}  // namespace mop
