#pragma once

#include <cmath>
#include <cstdint>

namespace segnet {

// PCG32 (Melissa O'Neill's pcg32_random_r, minimal version). Seeding follows
// pcg32_srandom_r: state = 0, then advance/seed/advance so different (seed, seq)
// pairs yield decorrelated streams. The `seq` argument selects the stream; the
// generator stays byte-for-byte reproducible across platforms.
class Pcg32 {
public:
    explicit Pcg32(uint64_t seed = 0x853c49e6748fea9bULL, uint64_t seq = 0xda3e39cb94b95bdbULL) {
        state_ = 0u;
        inc_ = (seq << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    // Uniform in [0,1) with 32 bits of entropy.
    double next_double() { return next_u32() * (1.0 / 4294967296.0); }

    // Uniform in [lo,hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [lo,hi] inclusive; hi >= lo.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1u;
        return lo + static_cast<int64_t>((static_cast<uint64_t>(next_u32()) * span) >> 32u);
    }

    // Standard normal via Box-Muller; the pair's second value is cached.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        double u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

private:
    uint64_t state_ = 0;
    uint64_t inc_ = 0;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

// Fisher-Yates shuffle driven by a Pcg32 stream.
template <class Vec>
void shuffle(Vec& v, Pcg32& rng) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
        int64_t j = rng.uniform_int(0, i);
        std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
}

}  // namespace segnet
