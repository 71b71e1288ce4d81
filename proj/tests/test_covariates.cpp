#include <doctest.h>

#include <random>

#include "flowcast/covariates.hpp"
#include "flowcast/errors.hpp"

using namespace flowcast;
using Eigen::VectorXd;

namespace {

VectorXd randn(unsigned seed, int n, double mu = 0, double sd = 1) {
    std::mt19937 gen(seed);
    std::normal_distribution<double> d(mu, sd);
    VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = d(gen);
    return v;
}

double pop_mean(const VectorXd& v) { return v.mean(); }
double pop_var(const VectorXd& v) {
    return (v.array() - v.mean()).square().sum() / v.size();
}

} // namespace

TEST_SUITE("covariates") {

TEST_CASE("standardize gives mean 0, variance 1, and known scores") {
    VectorXd x = randn(1, 40, 5.0, 3.0);
    VectorXd z = standardize(x);
    CHECK(std::abs(pop_mean(z)) < 1e-10);
    CHECK(pop_var(z) == doctest::Approx(1.0).epsilon(1e-8));

    // a vector with mean 60, population sd 23.9, containing the value 93
    double b = std::sqrt(2.0 * 571.21 - 33.0 * 33.0);
    VectorXd v(4);
    v << 27.0, 93.0, 60.0 - b, 60.0 + b;
    CHECK(pop_mean(v) == doctest::Approx(60.0).epsilon(1e-12));
    CHECK(std::sqrt(pop_var(v)) == doctest::Approx(23.9).epsilon(1e-12));
    CHECK(standardize(v)[1] == doctest::Approx(1.381).epsilon(5e-4));
}

TEST_CASE("constant columns are rejected") {
    VectorXd c = VectorXd::Constant(10, 3.5);
    CHECK_THROWS_AS(standardize(c), ZeroVariance);
    CHECK_THROWS_AS(composite({c}), ZeroVariance);
}

TEST_CASE("inversion flips sign exactly") {
    VectorXd x = randn(2, 25);
    VectorXd z = standardize(x);
    VectorXd zi = standardize(x, true);
    CHECK((z + zi).cwiseAbs().maxCoeff() == 0.0);
    CHECK(pop_var(zi) == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("standardize is idempotent") {
    VectorXd x = randn(3, 30, -4.0, 7.0);
    VectorXd once = standardize(x);
    VectorXd twice = standardize(once);
    CHECK((once - twice).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("composite basics") {
    VectorXd x = randn(4, 20, 2.0, 5.0);

    // single component reduces to standardize
    CHECK((composite({x}) - standardize(x)).cwiseAbs().maxCoeff() < 1e-12);

    // a perfectly correlated pair adds nothing
    VectorXd y = 3.0 * x.array() + 5.0;
    CHECK((composite({x, y}) - standardize(x)).cwiseAbs().maxCoeff() < 1e-10);

    // order of components is immaterial
    VectorXd w = randn(5, 20);
    CHECK((composite({x, w}) - composite({w, x})).cwiseAbs().maxCoeff() < 1e-12);

    // inversion flags apply per component
    CHECK((composite({x, w}, {true, false}) -
           composite({VectorXd(-x), w}, {false, false}))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
}

TEST_CASE("composite of four indicators matches longhand recomputation") {
    std::vector<VectorXd> xs;
    for (unsigned k = 0; k < 4; ++k) xs.push_back(randn(10 + k, 19, k * 2.0, 1.0 + k));
    std::vector<bool> inv = {false, true, false, true};
    VectorXd got = composite(xs, inv);

    // independent arithmetic: explicit loops, no library transforms
    int n = 19;
    std::vector<double> avg(n, 0.0);
    for (int k = 0; k < 4; ++k) {
        double m = 0;
        for (int i = 0; i < n; ++i) m += xs[k][i];
        m /= n;
        double ss = 0;
        for (int i = 0; i < n; ++i) ss += (xs[k][i] - m) * (xs[k][i] - m);
        double sd = std::sqrt(ss / n);
        double sign = inv[k] ? -1.0 : 1.0;
        for (int i = 0; i < n; ++i) avg[i] += sign * (xs[k][i] - m) / sd / 4.0;
    }
    double m = 0;
    for (int i = 0; i < n; ++i) m += avg[i];
    m /= n;
    double ss = 0;
    for (int i = 0; i < n; ++i) ss += (avg[i] - m) * (avg[i] - m);
    double sd = std::sqrt(ss / n);
    for (int i = 0; i < n; ++i)
        CHECK(got[i] == doctest::Approx((avg[i] - m) / sd).epsilon(1e-10));
}

TEST_CASE("residualize removes the conditioning column") {
    VectorXd g = standardize(randn(21, 50));
    for (unsigned rep = 0; rep < 5; ++rep) {
        VectorXd y = standardize(0.8 * g + randn(30 + rep, 50, 0, 0.6));
        VectorXd r = residualize(y, g);
        CHECK(std::abs(pearson(r, g)) < 1e-10);
        CHECK(std::abs(pop_mean(r)) < 1e-10);
        CHECK(pop_var(r) == doctest::Approx(1.0).epsilon(1e-8));
    }
}

TEST_CASE("residualize leaves an uncorrelated column alone") {
    VectorXd on(4), y(4);
    on << 1, -1, 1, -1;
    y << 1, 1, -1, -1; // exactly orthogonal to `on`
    VectorXd ys = standardize(y);
    CHECK((residualize(ys, standardize(on)) - ys).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("residualize ignores affine changes of the conditioning column") {
    VectorXd g = randn(40, 30);
    VectorXd y = standardize(0.5 * g + randn(41, 30));
    VectorXd g2 = -3.0 * g.array() + 11.0;
    CHECK((residualize(y, standardize(g)) - residualize(y, g2)).cwiseAbs().maxCoeff() <
          1e-10);
}

TEST_CASE("collinear inputs raise PerfectCollinearity") {
    VectorXd g = standardize(randn(50, 20));
    VectorXd y = 2.0 * g.array() + 1.0;
    CHECK_THROWS_AS(residualize(standardize(y), g), PerfectCollinearity);
}

TEST_CASE("residualization weakens pairwise correlation driven by geography") {
    VectorXd g = standardize(randn(60, 200));
    VectorXd x1 = standardize(0.8 * g + 0.25 * randn(61, 200));
    VectorXd x2 = standardize(0.8 * g + 0.25 * randn(62, 200));
    double before = pearson(x1, x2);
    double after = pearson(residualize(x1, g), residualize(x2, g));
    CHECK(before > 0.7);
    CHECK(after < before);
    CHECK(std::abs(after) < 0.45);
}

TEST_CASE("tradition coding uses a strict cutover") {
    VectorXd a(3), bvotes(3);
    a << 160, 150, 80;
    bvotes << 100, 100, 100;
    VectorXd d = dichotomize_tradition(a, bvotes, 1.5);
    CHECK(d[0] == 1.0);
    CHECK(d[1] == 0.0); // 150 is not strictly more than 1.5 * 100
    CHECK(d[2] == 0.0);

    bvotes[1] = 0.0;
    CHECK_THROWS_AS(dichotomize_tradition(a, bvotes), ZeroDenominator);
}

TEST_CASE("tradition coding matches hand arithmetic on random shares") {
    std::mt19937 gen(7);
    std::uniform_real_distribution<double> u(10.0, 500.0);
    VectorXd pci(19), dc(19);
    for (int i = 0; i < 19; ++i) {
        pci[i] = std::floor(u(gen));
        dc[i] = std::floor(u(gen));
    }
    VectorXd d = dichotomize_tradition(pci, dc, 1.5);
    for (int i = 0; i < 19; ++i)
        CHECK(d[i] == ((pci[i] > 1.5 * dc[i]) ? 1.0 : 0.0));
}

TEST_CASE("correlation report flags strong pairs") {
    CovariateMatrix M;
    for (int i = 0; i < 25; ++i) M.zone_ids.push_back("Z" + std::to_string(i));
    VectorXd g = standardize(randn(70, 25));
    VectorXd near = standardize(0.9 * g + 0.2 * randn(71, 25));
    VectorXd indep = standardize(randn(72, 25));
    M.append("g", g, {});
    M.append("near", near, {});
    M.append("indep", indep, {});
    M.append("orth", residualize(near, g), {});

    CorrelationReport rep = correlation_report(M);
    CHECK(rep.R.rows() == 4);
    for (int i = 0; i < 4; ++i) CHECK(rep.R(i, i) == 1.0);
    CHECK(rep.R == rep.R.transpose().eval());
    CHECK(rep.R(0, 3) == doctest::Approx(0.0).epsilon(1e-9)); // orthogonalized vs g
    CHECK(rep.R(0, 1) > 0.7);
    REQUIRE(rep.flagged.size() >= 1);
    bool found = false;
    for (auto& pr : rep.flagged)
        if (pr.first == 0 && pr.second == 1) found = true;
    CHECK(found);

    // a stricter threshold flags more
    CHECK(correlation_report(M, 0.2).flagged.size() >= rep.flagged.size());
}

TEST_CASE("pearson hits the affine extremes") {
    VectorXd x = randn(80, 15);
    CHECK(pearson(x, 4.0 * x.array() + 2.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(pearson(x, -0.5 * x.array() + 9.0) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("zone dummies are unit indicators") {
    CovariateMatrix M;
    M.zone_ids = {"A", "B", "C"};
    M.append("x", standardize(randn(90, 3)), {});
    CovariateMatrix M2 = add_zone_dummies(M, {"B"});
    REQUIRE(M2.cols() == 2);
    CHECK(M2.names[1] == "dummy_B");
    CHECK(M2.X(0, 1) == 0.0);
    CHECK(M2.X(1, 1) == 1.0);
    CHECK(M2.X(2, 1) == 0.0);
    CHECK_THROWS_AS(add_zone_dummies(M, {"Q"}), UnknownZone);
}

TEST_CASE("append rejects mismatched column lengths") {
    CovariateMatrix M;
    M.zone_ids = {"A", "B", "C"};
    CHECK_THROWS_AS(M.append("bad", VectorXd::Zero(4), {}), DimensionMismatch);
}

} // TEST_SUITE
