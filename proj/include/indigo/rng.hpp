#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace indigo {

/// splitmix64 mix step; used to derive independent seed streams so that
/// (seed, purpose, index) triples never collide between runs.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fold_seed(std::uint64_t base, std::uint64_t salt) {
    return mix_seed(base ^ mix_seed(salt));
}

inline std::uint64_t fold_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
    return fold_seed(fold_seed(base, a), b);
}

/// Deterministic RNG. mt19937_64 output is pinned by the standard; the
/// distributions are hand-rolled because std::*_distribution is
/// implementation-defined and would break byte-identical reruns across
/// toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Lemire multiply-shift; negligible bias is irrelevant here and the
        // mapping is fully deterministic.
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(gen_()) * n) >> 64);
    }

    int range_int(int lo, int hi_exclusive) {
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_exclusive - lo)));
    }

    /// Standard normal via Box-Muller (no cached spare, keeps call
    /// sequence trivially reproducible).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Normal(0, std) truncated to +-2 std by rejection.
    double trunc_normal(double std_dev) {
        for (;;) {
            const double v = normal();
            if (v >= -2.0 && v <= 2.0) return v * std_dev;
        }
    }

    template <typename V>
    void shuffle(V& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::mt19937_64& raw() { return gen_; }

private:
    std::mt19937_64 gen_;
};

} // namespace indigo
