#include "mutualctr/rng.hpp"

#include <cmath>

namespace mutualctr {

std::uint64_t Rng::bounded(std::uint64_t n) {
    if (n == 0) return 0;
    // reject the tail that would bias the modulo
    std::uint64_t threshold = (0 - n) % n;
    for (;;) {
        std::uint64_t r = gen_();
        if (r >= threshold) return r % n;
    }
}

double Rng::normal() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
}

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
    std::uint64_t state = base ^ (0x9e3779b97f4a7c15ULL + (salt << 6) + (salt >> 2));
    std::uint64_t a = splitmix64(state);
    std::uint64_t b = splitmix64(state);
    return a ^ (b >> 1) ^ salt;
}

} // namespace mutualctr
