#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace divseg {

namespace detail {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

// xoshiro256++ with hand-rolled Box-Muller normals so that streams are
// bit-identical across platforms and standard libraries.
class Rng {
  public:
    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = detail::splitmix64(sm);
    }

    uint64_t next_u64() {
        uint64_t result = detail::rotl(s_[0] + s_[3], 23) + s_[0];
        uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = detail::rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        // Rejection sampling to avoid modulo bias.
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller; generates pairs, caches the second.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        // Guard against log(0).
        while (u1 <= 0.0) u1 = uniform();
        double mag = std::sqrt(-2.0 * std::log(u1));
        double two_pi_u2 = 2.0 * 3.14159265358979323846 * u2;
        spare_ = mag * std::sin(two_pi_u2);
        has_spare_ = true;
        return mag * std::cos(two_pi_u2);
    }

  private:
    std::array<uint64_t, 4> s_{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Stream labels keep unrelated random decisions statistically independent even
// when their counters collide.
enum class StreamKind : uint64_t {
    init_noise = 1,   // per-particle initial latents
    churn = 2,        // stochastic churn noise
    dataset = 3,      // dataset generators
    training = 4,     // MLP init, noise draws, batch order
    conditioning = 5, // conditioning perturbation (CADS)
    clustering = 6,   // k-medoids seeding
};

// Derives the seed of a substream from the root seed and up to three counters
// (typically input, batch, particle). Pure mixing, independent of call order.
inline uint64_t substream_seed(uint64_t root, StreamKind kind, uint64_t a = 0, uint64_t b = 0,
                               uint64_t c = 0) {
    uint64_t state = root;
    uint64_t h = detail::splitmix64(state);
    state = h ^ (static_cast<uint64_t>(kind) * 0x9e3779b97f4a7c15ull);
    h = detail::splitmix64(state);
    state = h ^ (a + 0x165667b19e3779f9ull);
    h = detail::splitmix64(state);
    state = h ^ (b + 0xd6e8feb86659fd93ull);
    h = detail::splitmix64(state);
    state = h ^ (c + 0xa5a5a5a5a5a5a5a5ull);
    return detail::splitmix64(state);
}

inline Rng substream(uint64_t root, StreamKind kind, uint64_t a = 0, uint64_t b = 0,
                     uint64_t c = 0) {
    return Rng(substream_seed(root, kind, a, b, c));
}

}  // namespace divseg
