#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <string>

namespace voxdiff {

// Deterministic RNG used for every stochastic draw in the project.
// Wraps mt19937_64 but implements the distributions itself (Box-Muller
// normal, bit-shift uniform) so results are reproducible independent of
// the standard library's distribution implementations. State round-trips
// through a string so training can be checkpointed and resumed exactly.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(gen_() % span);
    }

    // Standard normal via Box-Muller; caches the second variate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    std::string state() const {
        std::ostringstream os;
        os << gen_ << ' ' << (has_spare_ ? 1 : 0);
        if (has_spare_) {
            os << ' ';
            uint64_t bits;
            static_assert(sizeof(bits) == sizeof(spare_));
            std::memcpy(&bits, &spare_, sizeof(bits));
            os << bits;
        }
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
        int flag = 0;
        is >> flag;
        has_spare_ = flag != 0;
        if (has_spare_) {
            uint64_t bits = 0;
            is >> bits;
            std::memcpy(&spare_, &bits, sizeof(bits));
        }
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64 finalizer; combines a base seed with stream indices so that
// parallel work items (patch x timestep draws, per-phantom seeds) get
// independent deterministic streams regardless of evaluation order.
inline uint64_t mix_seed(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t h = mix_seed(base);
    h = mix_seed(h ^ a);
    h = mix_seed(h ^ b);
    h = mix_seed(h ^ c);
    return h;
}

}  // namespace voxdiff
