#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>

namespace curemark {

// splitmix64 finalizer; used to whiten seeds and derive child-stream keys.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic random stream. The mt19937_64 engine output is pinned by the
// standard; all variate mappings are implemented here rather than through
// std::*_distribution (whose algorithms are implementation-defined), so a
// given (seed, call sequence) produces identical draws on every platform.
class RngStream {
  public:
    explicit RngStream(std::uint64_t seed) : key_(mix64(seed)), engine_(key_) {}

    // Child stream addressed by a tag list; depends only on the parent key,
    // not on how many draws the parent has consumed.
    RngStream child(std::initializer_list<std::uint64_t> tags) const {
        std::uint64_t s = key_;
        for (auto t : tags) s = mix64(s ^ t);
        return RngStream(s, from_key_tag{});
    }

    // uniform on [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // uniform on (0, 1]
    double uniform_pos() { return 1.0 - uniform(); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_pos();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double exponential(double rate) { return -std::log(uniform_pos()) / rate; }

    // integer in [lo, hi] inclusive
    int uniform_int(int lo, int hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<int>(static_cast<std::uint64_t>(uniform() * static_cast<double>(span)) % span);
    }

  private:
    struct from_key_tag {};
    RngStream(std::uint64_t key, from_key_tag) : key_(key), engine_(key) {}

    std::uint64_t key_;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace curemark
