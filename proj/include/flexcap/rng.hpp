#pragma once

#include <cmath>
#include <cstdint>

namespace flexcap {

// Deterministic generator used everywhere in place of <random>: identical
// streams on every platform/compiler, cheap to seed per-domain, trivially
// serializable (one u64 of state). Core is splitmix64.
struct Rng {
    uint64_t state = 0;

    explicit Rng(uint64_t seed = 0) : state(seed) {}

    uint64_t next_u64() {
        state += 0x9E3779B97F4A7C15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform double in [0, 1), 53 random bits
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform double in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased-enough uniform integer in [0, n); n > 0
    uint64_t uniform_int(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // standard normal via Box-Muller (one value per call; no cached spare so
    // the stream position stays a pure function of call count)
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]: keeps log() finite
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // rejection-sampled normal confined to [lo, hi] (in units of sigma=1)
    double truncated_normal(double lo = -2.0, double hi = 2.0) {
        for (;;) {
            double z = normal();
            if (z >= lo && z <= hi) return z;
        }
    }
};

// Stateless stream splitter: derive an independent seed from (seed, tag).
inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
    uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace flexcap
