#pragma once

#include <cmath>
#include <cstdint>

namespace gevit {

// splitmix64; also used to derive independent seed streams.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t s = base;
    uint64_t h = splitmix64(s);
    s ^= a * 0x9E3779B97F4A7C15ull;
    h ^= splitmix64(s);
    s ^= b * 0xC2B2AE3D27D4EB4Full;
    h ^= splitmix64(s);
    s ^= c * 0x165667B19E3779F9ull;
    h ^= splitmix64(s);
    return h;
}

// xoshiro256** with splitmix64 seeding. Self-contained so that streams are
// bit-identical across standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
        have_gauss_ = false;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0,1) with 53 random bits
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // unbiased integer in [0, n)
    uint64_t bounded(uint64_t n) {
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    int bounded_int(int n) { return static_cast<int>(bounded(static_cast<uint64_t>(n))); }

    // Box-Muller with cached spare
    double normal(double mu = 0.0, double sigma = 1.0) {
        if (have_gauss_) {
            have_gauss_ = false;
            return mu + sigma * gauss_spare_;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        gauss_spare_ = r * std::sin(a);
        have_gauss_ = true;
        return mu + sigma * r * std::cos(a);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4]{};
    bool have_gauss_{false};
    double gauss_spare_{0.0};
};

}  // namespace gevit
