#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace flowcast {

// Deterministic sampler built on mt19937_64 with hand-rolled distributions,
// so generated datasets are bit-reproducible across standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }
    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal(); // Box-Muller, cached pair

    // Marsaglia-Tsang for shape >= 1, boosted below 1; unit scale.
    double gamma(double shape);

    std::vector<double> dirichlet(const std::vector<double>& alpha);

    // Index draw from unnormalized non-negative weights.
    int categorical(const double* w, int n);

    // n independent categorical draws, tallied.
    std::vector<long long> multinomial(long long n, const double* w, int k);

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Stateless mixer for deriving independent sub-seeds (per zone, per station).
std::uint64_t splitmix64(std::uint64_t x);

} // namespace flowcast
