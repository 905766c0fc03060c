#pragma once

#include <cmath>
#include <cstdint>

namespace kcap {

// Counter-derived random streams.
//
// Every consumer of randomness gets its own stream derived from (master seed,
// stream label, index). Deriving a stream is a pure hash of those values, so
// draw i of worker k never depends on scheduling: parallel runs give
// bit-identical results for a fixed seed regardless of worker count.
//
// Stream state is xoshiro256**; seeding and derivation use splitmix64 (the
// recommended seeder for the xoshiro family). Gaussians come from an explicit
// Box-Muller so results do not depend on the standard library's
// normal_distribution implementation.

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Collapse (seed, a, b) into a single well-mixed 64-bit value.
inline uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
    uint64_t s = seed;
    (void)splitmix64(s);
    s ^= a;
    (void)splitmix64(s);
    s ^= b;
    return splitmix64(s);
}

class Rng {
  public:
    explicit Rng(uint64_t seed) : seed0_(seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    // Child stream: a pure function of this stream's construction seed and the
    // label, independent of how many draws the parent has made.
    Rng derive(uint64_t label, uint64_t index = 0) const { return Rng(mix_seed(seed0_, label, index)); }

    uint64_t next_u64() {
        uint64_t result = rotl(s_[1] * 5, 7) * 9;
        uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1]; safe as a log() argument.
    double uniform_pos() { return ((next_u64() >> 11) + 1) * 0x1.0p-53; }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u = uniform_pos();
        double v = uniform();
        double r = std::sqrt(-2.0 * std::log(u));
        double a = 6.283185307179586476925286766559 * v;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n). Unbiased via rejection.
    uint64_t below(uint64_t n) {
        uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Uniform integer in [lo, hi] inclusive.
    int64_t range(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo + 1)));
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4];
    uint64_t seed0_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace kcap
