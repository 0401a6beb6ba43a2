// SPDX-License-Identifier: Apache-2.0
//
// Counter-based pseudo-random numbers (splitmix64 over a hashed key).
// Each draw is a pure function of (seed, stream name, counter), so
// parameter initialisation is independent of evaluation order and
// bit-reproducible across runs and thread schedules.

#pragma once

#include <cstdint>
#include <string>

namespace attncalc {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

// A keyed counter stream. Successive draws advance the counter only.
class CounterRng {
public:
    CounterRng(uint64_t seed, const std::string& stream)
        : key_(splitmix64(seed ^ splitmix64(fnv1a(stream)))) {}

    uint64_t next_u64() { return splitmix64(key_ + 0x632BE59BD9B4E019ull * ++counter_); }

    // uniform in [0, 1)
    double next_unit() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }
    // uniform in [lo, hi)
    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }
    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

private:
    uint64_t key_;
    uint64_t counter_ = 0;
};

}  // namespace attncalc
