#include "flowcast/covariates.hpp"

#include <algorithm>
#include <cmath>

#include "flowcast/errors.hpp"

namespace flowcast {

namespace {

double mean_of(const Eigen::VectorXd& x) { return x.mean(); }

// population variance (divide by n)
double var_of(const Eigen::VectorXd& x) {
    double m = x.mean();
    return (x.array() - m).square().sum() / static_cast<double>(x.size());
}

} // namespace

std::string Transform::describe() const {
    std::string s = op + "(";
    for (size_t i = 0; i < inputs.size(); ++i) {
        if (i) s += ",";
        s += inputs[i];
    }
    if (inverted) s += ";inverted";
    if (!conditioned_on.empty()) s += "|" + conditioned_on;
    if (ratio > 0) s += ";ratio=" + std::to_string(ratio);
    return s + ")";
}

int CovariateMatrix::find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    return -1;
}

void CovariateMatrix::append(const std::string& name, const Eigen::VectorXd& col,
                             Transform t) {
    if (!zone_ids.empty() && col.size() != static_cast<long>(zone_ids.size()))
        throw DimensionMismatch("column " + name + " has " + std::to_string(col.size()) +
                                " rows, design has " + std::to_string(zone_ids.size()));
    Eigen::MatrixXd grown(col.size(), X.cols() + 1);
    if (X.cols() > 0) grown.leftCols(X.cols()) = X;
    grown.col(X.cols()) = col;
    X = std::move(grown);
    names.push_back(name);
    transforms.push_back(std::move(t));
}

Eigen::VectorXd standardize(const Eigen::VectorXd& x, bool invert) {
    double v = var_of(x);
    if (!(v > 0))
        throw ZeroVariance("cannot standardize a constant column");
    Eigen::VectorXd z = (x.array() - mean_of(x)) / std::sqrt(v);
    return invert ? Eigen::VectorXd(-z) : z;
}

Eigen::VectorXd composite(const std::vector<Eigen::VectorXd>& xs,
                          const std::vector<bool>& invert_flags) {
    if (xs.empty()) throw DimensionMismatch("composite needs at least one component");
    if (!invert_flags.empty() && invert_flags.size() != xs.size())
        throw DimensionMismatch("composite: one inversion flag per component");
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(xs[0].size());
    for (size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].size() != acc.size())
            throw DimensionMismatch("composite components differ in length");
        acc += standardize(xs[i], invert_flags.empty() ? false : bool(invert_flags[i]));
    }
    acc /= static_cast<double>(xs.size());
    return standardize(acc);
}

Eigen::VectorXd residualize(const Eigen::VectorXd& y, const Eigen::VectorXd& on) {
    if (y.size() != on.size())
        throw DimensionMismatch("residualize: length mismatch");
    double von = var_of(on);
    if (!(von > 0)) throw ZeroVariance("conditioning column is constant");
    double vy = var_of(y);
    if (!(vy > 0)) throw ZeroVariance("column to residualize is constant");
    double cov = ((y.array() - y.mean()) * (on.array() - on.mean())).sum() /
                 static_cast<double>(y.size());
    double slope = cov / von;
    double r2 = cov * cov / (vy * von);
    if (r2 > 1.0 - 1e-10)
        throw PerfectCollinearity("residualize: columns are collinear (|r| = 1)");
    Eigen::VectorXd resid =
        (y.array() - y.mean()) - slope * (on.array() - on.mean());
    return standardize(resid);
}

Eigen::VectorXd dichotomize_tradition(const Eigen::VectorXd& votes_a,
                                      const Eigen::VectorXd& votes_b, double ratio) {
    if (votes_a.size() != votes_b.size())
        throw DimensionMismatch("dichotomize: length mismatch");
    Eigen::VectorXd out(votes_a.size());
    for (long i = 0; i < votes_a.size(); ++i) {
        if (!(votes_b[i] > 0))
            throw ZeroDenominator("dichotomize: nonpositive denominator at row " +
                                  std::to_string(i));
        out[i] = votes_a[i] > ratio * votes_b[i] ? 1.0 : 0.0;
    }
    return out;
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size()) throw DimensionMismatch("pearson: length mismatch");
    double va = var_of(a), vb = var_of(b);
    if (!(va > 0) || !(vb > 0)) return 0.0; // constant column: report 0, flag nothing
    double cov = ((a.array() - a.mean()) * (b.array() - b.mean())).sum() /
                 static_cast<double>(a.size());
    return cov / std::sqrt(va * vb);
}

CorrelationReport correlation_report(const CovariateMatrix& M, double threshold) {
    const int V = M.cols();
    if (V < 2) throw DimensionMismatch("correlation report needs at least two columns");
    CorrelationReport rep;
    rep.threshold = threshold;
    rep.R = Eigen::MatrixXd::Identity(V, V);
    for (int i = 0; i < V; ++i)
        for (int j = i + 1; j < V; ++j) {
            double r = pearson(M.X.col(i), M.X.col(j));
            rep.R(i, j) = rep.R(j, i) = r;
            if (std::abs(r) > threshold) rep.flagged.emplace_back(i, j);
        }
    return rep;
}

CovariateMatrix add_zone_dummies(const CovariateMatrix& X,
                                 const std::vector<std::string>& zones) {
    CovariateMatrix out = X;
    for (const auto& zid : zones) {
        auto it = std::find(out.zone_ids.begin(), out.zone_ids.end(), zid);
        if (it == out.zone_ids.end())
            throw UnknownZone("dummy for unknown zone " + zid);
        Eigen::VectorXd d = Eigen::VectorXd::Zero(out.rows());
        d[it - out.zone_ids.begin()] = 1.0;
        Transform t;
        t.op = "dummy";
        t.inputs = {zid};
        out.append("dummy_" + zid, d, std::move(t));
    }
    return out;
}

} // namespace flowcast
