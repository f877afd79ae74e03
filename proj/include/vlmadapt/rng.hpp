#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace vlmadapt {

// Deterministic random source. mt19937_64 is fully specified by the
// standard; the distributions are hand-rolled here because the standard
// library's are not, and seed-identical results across toolchains are a
// hard requirement.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    // uniform in [0, 1)
    double uniform();
    double uniform(double lo, double hi);

    // Box-Muller; the spare value is cached
    double normal(double mean, double stddev);

    // uniform integer in [0, n), n >= 1, rejection sampled (no modulo bias)
    std::size_t index(std::size_t n);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = index(i + 1);
            std::swap(v[i], v[j]);
        }
    }

    // independent generator derived from this one's seed and a stream tag;
    // used for per-record generation that must not depend on iteration order
    Rng fork(std::uint64_t stream) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// stable 64-bit FNV-1a, used for stream tags and config fingerprints
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ull);
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace vlmadapt
