#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace vaenar {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension violations (e.g. matmul inner-dim mismatch).
struct ShapeError : Error {
    using Error::Error;
};

// Invalid static configuration (even conv kernel, odd latent width, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Runtime numeric failures: singular matrices, fully-masked softmax rows,
// non-finite gradients.
struct NumericError : Error {
    using Error::Error;
};

// Characters outside the symbol table.
struct VocabError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// splitmix64; used to derive independent seeds from (master seed, salt).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Deterministic RNG. Gaussian draws go through Box-Muller on explicit
// uniforms so streams are reproducible independent of the standard
// library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive range
    int uniform_int(int lo, int hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(eng_() % span);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    Rng fork(std::uint64_t salt) { return Rng(mix_seed(eng_(), salt)); }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace vaenar
