#include "flowcast/rng.hpp"

#include <cmath>

#include "flowcast/errors.hpp"

namespace flowcast {

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
}

double Rng::gamma(double shape) {
    if (!(shape > 0.0)) throw InvalidSpec("gamma shape must be positive");
    if (shape < 1.0) {
        // boost: X ~ Gamma(shape+1), X * U^(1/shape) ~ Gamma(shape)
        double u = uniform();
        while (u <= 0.0) u = uniform();
        return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = normal();
        double t = 1.0 + c * x;
        if (t <= 0.0) continue;
        double v = t * t * t;
        double u = uniform();
        double x2 = x * x;
        if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
    }
}

std::vector<double> Rng::dirichlet(const std::vector<double>& alpha) {
    if (alpha.empty()) throw InvalidSpec("dirichlet needs at least one concentration");
    std::vector<double> g(alpha.size());
    double total = 0.0;
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        if (!(alpha[i] > 0.0)) throw InvalidSpec("dirichlet concentrations must be positive");
        g[i] = gamma(alpha[i]);
        total += g[i];
    }
    if (total <= 0.0) {
        // all gamma draws underflowed; fall back to the mean direction
        double asum = 0.0;
        for (double a : alpha) asum += a;
        for (std::size_t i = 0; i < alpha.size(); ++i) g[i] = alpha[i] / asum;
        return g;
    }
    for (double& x : g) x /= total;
    return g;
}

int Rng::categorical(const double* w, int n) {
    if (n <= 0) throw InvalidSpec("categorical needs at least one weight");
    double total = 0.0;
    int last_positive = -1;
    for (int i = 0; i < n; ++i) {
        if (w[i] < 0.0) throw InvalidSpec("categorical weights must be non-negative");
        total += w[i];
        if (w[i] > 0.0) last_positive = i;
    }
    if (last_positive < 0) throw InvalidSpec("categorical weights sum to zero");
    double x = uniform() * total;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        acc += w[i];
        if (x < acc) return i;
    }
    return last_positive; // x == total after fp accumulation
}

std::vector<long long> Rng::multinomial(long long n, const double* w, int k) {
    std::vector<long long> out(static_cast<std::size_t>(k), 0);
    for (long long t = 0; t < n; ++t) out[static_cast<std::size_t>(categorical(w, k))]++;
    return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace flowcast
