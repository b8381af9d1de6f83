#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace sphere {

// xoshiro256++ seeded through splitmix64. Self-contained so that streams are
// reproducible across compilers and standard libraries; std::normal_distribution
// is implementation-defined and unusable for byte-stable checkpoints.
class Rng {
  public:
    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& word : s_) word = splitmix64(x);
        has_spare_ = false;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        // Rejection to avoid modulo bias.
        const uint64_t limit = n * (UINT64_MAX / n);
        uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        const double ang = 2.0 * std::numbers::pi * u2;
        spare_ = mag * std::sin(ang);
        has_spare_ = true;
        return mag * std::cos(ang);
    }

    // Standard normal rejected outside [-bound, bound].
    double truncated_normal(double bound) {
        double x = normal();
        while (std::abs(x) > bound) x = normal();
        return x;
    }

    template <typename T>
    void fill_normal(std::vector<T>& out) {
        for (auto& v : out) v = static_cast<T>(normal());
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent child stream; (tag, index) name the purpose and step/epoch,
    // so streams can be re-derived when resuming from a checkpoint.
    Rng fork(std::string_view tag, uint64_t index = 0) const {
        uint64_t h = 0x9e3779b97f4a7c15ULL;
        for (const char c : tag) h = (h ^ static_cast<uint64_t>(c)) * 0x100000001b3ULL;
        uint64_t mix = s_[0];
        mix = splitmix64(mix) ^ h;
        mix = splitmix64(mix) ^ index;
        const uint64_t child_seed = splitmix64(mix);
        return Rng(child_seed);
    }

    static uint64_t splitmix64(uint64_t& state) {
        uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

  private:
    static constexpr uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4]{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace sphere
