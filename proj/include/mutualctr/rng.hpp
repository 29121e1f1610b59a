#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace mutualctr {

/// Deterministic RNG: mt19937_64 raw stream with hand-rolled mappings.
/// std::*_distribution sequences are implementation-defined, so every
/// mapping (uniform double, bounded int, gaussian, shuffle) is spelled
/// out here; a seed yields the same stream on any platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t bounded(std::uint64_t n);

    /// Standard normal via Box-Muller (caches the second variate).
    double normal();

    double normal(double mean, double stdev) { return mean + stdev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    /// In-place Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

/// splitmix64 step; used to derive independent stream seeds.
std::uint64_t splitmix64(std::uint64_t& state);

/// Combine a base seed with a salt into a new stream seed.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt);

} // namespace mutualctr
