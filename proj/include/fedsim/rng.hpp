// Deterministic random number generation for fedsim.
//
// Everything random in this project (weight init, shuffles, Dirichlet draws,
// client sampling) goes through SplitMix64 so that seeded results are
// bit-identical across platforms and standard-library versions. The std
// <random> distributions are deliberately not used: their output is not
// pinned by the standard.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace fedsim {

// Bump when any sampling scheme below changes; recorded in checkpoints so
// stale golden files are detectable.
inline constexpr std::uint32_t kRngSchemeVersion = 1;

// SplitMix64 finalizer (Steele, Lea, Flood 2014). Public-domain constants.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Folds a stream id into a seed. Used to derive independent, reproducible
// substreams, e.g. derive_seed(master, party_id, round, epoch).
inline std::uint64_t derive_seed(std::uint64_t seed) { return seed; }

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t part, Rest... rest) {
    return derive_seed(mix64(seed ^ mix64(part)), rest...);
}

class SplitMix64 {
  public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, bound) by rejection, bias-free.
    std::uint64_t next_below(std::uint64_t bound) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % bound;
    }

    // Standard normal via Box-Muller. Consumes exactly two uniforms per call;
    // no caching, so the stream position stays easy to reason about.
    double next_normal() {
        const double u1 = 1.0 - next_double();  // (0, 1]
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2);
    }

    // Gamma(alpha, 1) via Marsaglia-Tsang squeeze; alpha < 1 handled with the
    // usual boost Gamma(alpha+1) * U^(1/alpha).
    double next_gamma(double alpha) {
        if (alpha < 1.0) {
            const double u = 1.0 - next_double();
            return next_gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            const double x = next_normal();
            const double t = 1.0 + c * x;
            if (t <= 0.0) continue;
            const double v = t * t * t;
            const double u = next_double();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // In-place Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

  private:
    std::uint64_t state_;
};

}  // namespace fedsim
