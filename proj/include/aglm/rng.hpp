// Counter-based pseudo-random generator (splitmix64 finalizer over a keyed
// counter). Streams derived with split() are independent, and every draw is a
// pure function of (key, counter), so runs replay bit-for-bit on any platform.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

namespace aglm {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(finalize(seed + kGolden)) {}

    // Independent stream; children with distinct ids never collide with the
    // parent or with each other.
    Rng split(std::uint64_t stream) const {
        Rng child(0);
        child.key_ = finalize(key_ ^ finalize(stream * kGolden + 0x5851f42d4c957f2dULL));
        child.counter_ = 0;
        child.has_spare_ = false;
        return child;
    }

    std::uint64_t next_u64() { return finalize(key_ + ++counter_ * kGolden); }

    // Uniform in [0, 1), 53 bits of precision.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [0, n); n must be nonzero.
    std::size_t next_below(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

    // Standard normal via Box-Muller; draws are cached pairwise.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - next_double();  // (0, 1], keeps log() finite
        double u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_normal(std::span<T> out, double mean, double stddev) {
        for (T& x : out) {
            x = static_cast<T>(mean + stddev * next_normal());
        }
    }

    // Fisher-Yates; unlike std::shuffle the result depends only on this stream.
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = next_below(i);
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

    static std::uint64_t finalize(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace aglm
