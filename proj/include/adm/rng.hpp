#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "adm/tensor.hpp"

namespace adm {

/// Deterministic random source. The engine is std::mt19937_64 (its sequence
/// is pinned by the standard) and all conversions to reals are done here
/// rather than through std:: distributions, whose outputs are
/// implementation-defined. Identical seeds therefore produce bitwise
/// identical streams on any platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; the second deviate is cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void fill_normal(Tensor<T>& t, double mean, double stddev) {
        for (auto& v : t.data) v = static_cast<T>(normal(mean, stddev));
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo, double hi) {
        for (auto& v : t.data) v = static_cast<T>(uniform(lo, hi));
    }

    /// Deterministic Fisher-Yates shuffle.
    template <typename V>
    void shuffle(std::vector<V>& xs) {
        for (std::size_t i = xs.size(); i > 1; --i) {
            std::swap(xs[i - 1], xs[index(i)]);
        }
    }

    /// Derive an independent stream for a sub-task; keyed so that streams for
    /// distinct (purpose, index) pairs never coincide with the parent.
    Rng fork(std::uint64_t key) { return Rng(mix(engine_(), key)); }

    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return x;
    }

private:
    std::mt19937_64 engine_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace adm
