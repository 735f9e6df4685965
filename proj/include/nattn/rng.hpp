#pragma once

#include <cmath>
#include <cstdint>

namespace nattn {

/// splitmix64 finalizer. Also used as a mixing step when deriving
/// sub-stream seeds from (seed, role, frame, ...) key tuples.
inline uint64_t splitmix64_mix(uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Deterministic counter-based PRNG (splitmix64). Every random quantity in
/// the library is drawn from a stream whose seed is derived from explicit
/// keys, so replays are bit-identical.
class SplitMix64 {
  public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). n = 0 returns 0. The modulo bias is
    /// below 2^-50 for the bounds used here (reservoir indices < 2^13).
    uint64_t next_below(uint64_t n) { return n == 0 ? 0 : next() % n; }

    /// Standard normal via Box-Muller (cosine branch, one sample per pair
    /// of uniforms; no cached second value, so streams replay exactly).
    double next_normal() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

  private:
    uint64_t state_;
};

/// Derive a stream seed from a base seed plus key values by chaining the
/// splitmix64 finalizer: h <- mix(h ^ mix(k)) per key.
inline uint64_t derive_seed(uint64_t seed) { return splitmix64_mix(seed); }

template <typename... Keys>
uint64_t derive_seed(uint64_t seed, uint64_t key, Keys... rest) {
    return derive_seed(splitmix64_mix(seed ^ splitmix64_mix(key)), rest...);
}

}  // namespace nattn
