#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string_view>

namespace vblora {

/// Seeded random stream. The engine is mt19937_64, whose output sequence is
/// fixed by the standard; the conversions to real distributions are done here
/// instead of through <random> distributions so that draws are identical
/// across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1).
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform on the open interval (0, 1); never returns 0 or 1.
    double uniform_open01() {
        return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Uniform on [lo, hi].
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() {
        if (cached_) {
            const double z = *cached_;
            cached_.reset();
            return z;
        }
        const double u1 = uniform_open01();
        const double u2 = uniform01();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        cached_ = radius * std::sin(angle);
        return radius * std::cos(angle);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Standard Gumbel: -log(-log(U)), U on (0, 1).
    double gumbel() { return -std::log(-std::log(uniform_open01())); }

    /// Uniform integer on [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection sampling to avoid modulo bias.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    /// Derive an independent child stream.
    Rng fork() { return Rng(engine_() ^ 0x9E3779B97F4A7C15ull); }

private:
    std::mt19937_64 engine_;
    std::optional<double> cached_;
};

/// Seed of a named sub-stream, so that one user seed can drive several
/// independent consumers (model init, task, training noise).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
    std::uint64_t hash = 0xcbf29ce484222325ull;
    for (unsigned char c : stream) hash = (hash ^ c) * 0x100000001b3ull;
    // splitmix64 finalizer
    std::uint64_t z = seed + hash + 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace vblora
