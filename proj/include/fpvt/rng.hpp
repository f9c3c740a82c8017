#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace fpvt {

// Seeded generator used for every random draw in the project. Wraps
// std::mt19937_64 (fully specified by the standard) and derives uniform and
// normal variates itself so sequences are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    double normal();
    // Normal(0, std) redrawn until inside [-bound*std, bound*std].
    double truncated_normal(double std, double bound = 2.0);

    std::string state() const;
    void set_state(const std::string& text);

    // Stateless mixing of several integers into a seed.
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace fpvt
