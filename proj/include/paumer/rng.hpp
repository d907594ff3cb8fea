#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace paumer {

// xoshiro256++ with splitmix64 seeding. Self-contained so that streams are
// reproducible across standard libraries and serializable into checkpoints.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& s : state_) {
            // splitmix64
            x += 0x9e3779b97f4a7c15ULL;
            std::uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            s = z ^ (z >> 31);
        }
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_index(std::uint64_t n) {
        // Lemire-style rejection to avoid modulo bias.
        std::uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            const std::uint64_t threshold = (0ULL - n) % n;
            while (lo < threshold) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    // Standard normal via Marsaglia polar method.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return u * f;
    }

    // Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by rejection.
    double truncated_normal(double sigma) {
        double z;
        do {
            z = normal();
        } while (z < -2.0 || z > 2.0);
        return z * sigma;
    }

    // Sample k distinct indices from [0, n), returned sorted ascending.
    std::vector<std::int64_t> sample_without_replacement(std::int64_t n, std::int64_t k);

    // Raw engine state, for checkpointing. The polar-method spare is dropped:
    // save/load only at step boundaries, and draws resume identically as long
    // as the stream is re-synchronised from raw state.
    std::array<std::uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<std::uint64_t, 4>& s) {
        state_ = s;
        have_spare_ = false;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::array<std::uint64_t, 4> state_{};
    double spare_ = 0.0;
    bool have_spare_ = false;
};

inline std::vector<std::int64_t> Rng::sample_without_replacement(std::int64_t n,
                                                                 std::int64_t k) {
    // Floyd's algorithm would avoid the O(n) pool, but n is a token count
    // here (hundreds at most), so a partial Fisher-Yates is fine.
    std::vector<std::int64_t> pool(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = 0; i < k; ++i) {
        const auto j = i + static_cast<std::int64_t>(uniform_index(
                               static_cast<std::uint64_t>(n - i)));
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    pool.resize(static_cast<std::size_t>(k));
    std::sort(pool.begin(), pool.end());
    return pool;
}

}  // namespace paumer
