#pragma once

// Counter-based 64-bit generator. Every draw is a pure function of
// (key, counter), where the key is derived from (seed, stream ids), so
// corpora and worlds are reproducible without sharing generator state.
//
//   mix(z):  z += 0x9E3779B97F4A7C15
//            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//            z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//            z ^ (z >> 31)
//   key(seed, a, b, ...) = mix(... mix(mix(seed) ^ a) ^ b ...)
//   draw(counter)        = mix(key ^ (counter * 0xD1B54A32D192ED03))
//
// Uniform doubles take the top 53 bits. Gaussians use Box-Muller on two
// consecutive uniforms.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

namespace dila {

constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t derive_key(std::uint64_t seed, std::initializer_list<std::uint64_t> streams) {
    std::uint64_t k = mix64(seed);
    for (auto s : streams) k = mix64(k ^ s);
    return k;
}

// FNV-1a, used to turn string ids into stream ids.
constexpr std::uint64_t hash_string(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed, std::initializer_list<std::uint64_t> streams = {})
        : key_(derive_key(seed, streams)) {}

    std::uint64_t next_u64() { return mix64(key_ ^ (counter_++ * 0xD1B54A32D192ED03ULL)); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n) by rejection, unbiased.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    double gaussian() {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace dila
