#pragma once

// Portable seeded generator.
//
// Stream definition (reproducible from this comment alone):
//   * splitmix64(x): x += 0x9E3779B97F4A7C15; z = x;
//                    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//                    z = (z ^ (z >> 27)) * 0x94D049BB133111EB;
//                    return z ^ (z >> 31);
//   * state s[0..3] of xoshiro256** is filled by four successive splitmix64
//     calls starting from the user seed.
//   * next(): result = rotl(s[1] * 5, 7) * 9; t = s[1] << 17;
//             s[2] ^= s[0]; s[3] ^= s[1]; s[1] ^= s[2]; s[0] ^= s[3];
//             s[2] ^= t; s[3] = rotl(s[3], 45).
//   * uniform(): (next() >> 11) * 2^-53, in [0, 1).
//   * normal(): Box-Muller on (u1, u2) = (1 - uniform(), uniform());
//               returns r*cos(2*pi*u2) and caches r*sin(2*pi*u2) for the
//               following call.
// The integer stream is bit-identical on every platform. Normal draws go
// through libm log/cos/sin and are identical wherever libm is.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dcf {

constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Advances `state` and returns the next splitmix64 output.
constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept {
    state += 0x9E3779B97F4A7C15ULL;
    return splitmix64_mix(state);
}

/// Derives an independent sub-seed for item `index` of a stream seeded by `seed`.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
    std::uint64_t s = seed ^ splitmix64_mix(index + 0x9E3779B97F4A7C15ULL);
    return splitmix64(s);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept : seed_(seed) {
        std::uint64_t sm = seed;
        for (auto& word : s_) {
            word = splitmix64(sm);
        }
    }

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next() noexcept {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    double uniform() noexcept {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
    std::uint64_t below(std::uint64_t n) noexcept {
        if (n <= 1) {
            return 0;
        }
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t r = next();
        while (r >= limit) {
            r = next();
        }
        return r % n;
    }

    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Normal draw truncated to [-2, 2] standard deviations by resampling.
    double truncated_normal() noexcept {
        double z = normal();
        while (std::fabs(z) > 2.0) {
            z = normal();
        }
        return z;
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t seed_;
    std::uint64_t s_[4]{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace dcf
