#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>

namespace softmol {

// SplitMix64 finalizer. Used both as a stream generator and as the mixing
// step of the keyed (counter-based) draws below.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Hash of an ordered key tuple. The same tuple gives the same value on every
// platform, which is what makes batched decoding independent of batch layout.
inline std::uint64_t key_hash(std::initializer_list<std::uint64_t> key) noexcept {
    std::uint64_t h = 0x243f6a8885a308d3ULL;
    for (std::uint64_t k : key) {
        h = mix64(h ^ mix64(k));
    }
    return h;
}

// Uniform double in the open interval (0, 1) from 53 random bits.
constexpr double to_open_unit(std::uint64_t bits) noexcept {
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

inline double keyed_uniform(std::initializer_list<std::uint64_t> key) noexcept {
    return to_open_unit(key_hash(key));
}

// Small sequential generator satisfying UniformRandomBitGenerator.
class SplitMix64 {
public:
    using result_type = std::uint64_t;

    explicit SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    double uniform() noexcept { return to_open_unit((*this)()); }

    // Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept {
        if (n <= 1) {
            return 0;
        }
        const std::uint64_t limit = max() - max() % n;
        std::uint64_t r;
        do {
            r = (*this)();
        } while (r >= limit);
        return r % n;
    }

private:
    std::uint64_t state_;
};

}  // namespace softmol
