// Deterministic random number helpers. The standard distributions are
// implementation-defined, so we build uniform/normal draws from raw
// mt19937_64 bits to keep runs reproducible across toolchains.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace cbench {

class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    // Derives an independent stream, e.g. one per weight tensor.
    static Rng child(uint64_t seed, const std::string& tag) {
        uint64_t h = 1469598103934665603ull;  // FNV-1a
        for (unsigned char c : tag) {
            h ^= c;
            h *= 1099511628211ull;
        }
        h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        return Rng(h);
    }

    uint64_t bits() { return engine_(); }

    // Uniform in [0,1) with 53-bit resolution.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one value per call (the spare is kept).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Integer in [0, n).
    size_t index(size_t n) {
        return static_cast<size_t>(uniform() * static_cast<double>(n)) % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace cbench
