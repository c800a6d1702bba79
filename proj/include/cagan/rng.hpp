#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace cagan {

// Counter-based pseudo-random generator. Every draw is a pure integer
// function of (seed, counter), so the stream is identical across platforms
// and the full state round-trips through checkpoints as a handful of words.
class Rng {
public:
    Rng() : Rng(0) {}
    explicit Rng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53 mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; the pair's second sample is cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0,1]
        const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(t);
        has_cached_ = true;
        return r * std::cos(t);
    }

    // Uniform integer in [0, n). Fixed-point multiply keeps the counter
    // advance independent of n (no rejection loop).
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent substream; forks of the same (seed, stream) coincide.
    Rng fork(std::uint64_t stream) const {
        std::uint64_t z = seed_ ^ (stream * 0xD1342543DE82EF95ull + 0x2545F4914F6CDD1Dull);
        z = (z ^ (z >> 33)) * 0xFF51AFD7ED558CCDull;
        z = (z ^ (z >> 33)) * 0xC4CEB9FE1A85EC53ull;
        return Rng(z ^ (z >> 33));
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }
    bool has_cached() const { return has_cached_; }
    double cached_value() const { return cached_; }

    void restore(std::uint64_t counter, bool has_cached, double cached) {
        counter_ = counter;
        has_cached_ = has_cached;
        cached_ = cached;
    }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t counter_ = 0;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace cagan
