#pragma once

#include <cmath>
#include <cstdint>

namespace bdlm {

// Mixes a base seed with a stream id so that derived generators are
// statistically independent of each other and of the base sequence.
inline uint64_t split_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic generator with hand-rolled distributions. The standard
// library distributions are implementation-defined, which would make
// golden values and cross-build reproducibility fragile.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(split_seed(seed, 0)) {}

    uint64_t next_u64() {
        // xorshift* variant; period 2^64-1 on nonzero states.
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x ? x : 0x2545f4914f6cdd1dull;
        return x * 0x2545f4914f6cdd1dull;
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive bounds.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + int64_t(next_u64() % uint64_t(hi - lo + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        // Basic Box-Muller; draws two uniforms per sample, no caching.
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    uint64_t state_;
};

}  // namespace bdlm
