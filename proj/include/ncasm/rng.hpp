#pragma once

/// @file rng.hpp
/// Random source used throughout the library.
///
/// Algorithm: std::mt19937_64 (the 64-bit Mersenne Twister fixed by the C++
/// standard) seeded with a SplitMix64-mixed seed. Uniforms take the top 53 bits
/// of one draw; normals use the Box-Muller transform on two uniforms. Streams
/// for independent purposes are derived with derive_seed(), so changing one
/// consumer never shifts the draws of another.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>

namespace ncasm {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    /// Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double phi = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(phi);
        has_spare_ = true;
        return r * std::cos(phi);
    }

    /// Index drawn from an (unnormalized, non-negative) weight vector.
    int categorical(std::span<const double> p) {
        double total = 0.0;
        for (double v : p) total += v;
        const double u = uniform() * total;
        double acc = 0.0;
        int last_positive = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (p[i] <= 0.0) continue;
            last_positive = static_cast<int>(i);
            acc += p[i];
            if (u < acc) return static_cast<int>(i);
        }
        return last_positive;
    }

    std::uint64_t next_u64() { return engine_(); }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ncasm
