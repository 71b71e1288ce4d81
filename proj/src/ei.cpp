#include "flowcast/ei.hpp"

#include <cmath>

#include "flowcast/errors.hpp"
#include "flowcast/raking.hpp"

namespace flowcast {

Eigen::MatrixXd theta_to_p(const Eigen::MatrixXd& theta) {
    const int I = static_cast<int>(theta.rows());
    const int Jm1 = static_cast<int>(theta.cols());
    Eigen::MatrixXd P(I, Jm1 + 1);
    for (int i = 0; i < I; ++i) {
        double m = 0.0; // implicit reference logit
        for (int b = 0; b < Jm1; ++b) m = std::max(m, theta(i, b));
        double denom = std::exp(-m);
        for (int b = 0; b < Jm1; ++b) denom += std::exp(theta(i, b) - m);
        for (int b = 0; b < Jm1; ++b) P(i, b) = std::exp(theta(i, b) - m) / denom;
        P(i, Jm1) = std::exp(-m) / denom;
    }
    return P;
}

Eigen::MatrixXd p_to_theta(const Eigen::MatrixXd& P) {
    const int I = static_cast<int>(P.rows());
    const int J = static_cast<int>(P.cols());
    Eigen::MatrixXd theta(I, J - 1);
    for (int i = 0; i < I; ++i)
        for (int b = 0; b < J - 1; ++b) theta(i, b) = std::log(P(i, b) / P(i, J - 1));
    return theta;
}

namespace {

struct ZoneArrays {
    int S = 0, I = 0, J = 0;
    Eigen::MatrixXd N; // S x I origin counts
    Eigen::MatrixXd Y; // S x (J-1) destination counts, reference dropped
    double total = 0;  // all destination votes
};

ZoneArrays make_arrays(const ZoneTable& z) {
    ZoneArrays a;
    a.S = static_cast<int>(z.stations.size());
    a.I = z.options1.size();
    a.J = z.options2.size();
    a.N.resize(a.S, a.I);
    a.Y.resize(a.S, a.J - 1);
    for (int s = 0; s < a.S; ++s) {
        const auto& st = z.stations[s];
        if (static_cast<int>(st.counts1.size()) != a.I ||
            static_cast<int>(st.counts2.size()) != a.J)
            throw DimensionMismatch("station " + st.station_id +
                                    " does not match the zone option sets");
        for (int i = 0; i < a.I; ++i) a.N(s, i) = static_cast<double>(st.counts1[i]);
        for (int j = 0; j < a.J - 1; ++j) a.Y(s, j) = static_cast<double>(st.counts2[j]);
        a.total += static_cast<double>(st.total2());
    }
    return a;
}

void check_fittable(const ZoneTable& z, const ZoneArrays& a) {
    if (a.S < 2) throw DataError("zone " + z.zone_id + ": needs at least 2 stations");
    if (a.I < 1 || a.J < 2)
        throw DataError("zone " + z.zone_id + ": needs >= 1 origin and >= 2 destinations");
    for (int i = 0; i < a.I; ++i)
        if (a.N.col(i).sum() == 0)
            throw DegenerateOption("zone " + z.zone_id + ": origin '" +
                                   z.options1.labels[i] +
                                   "' has zero votes everywhere; collapse it first");
    Eigen::VectorXd col2 = Eigen::VectorXd::Zero(a.J);
    for (const auto& st : z.stations)
        for (int j = 0; j < a.J; ++j) col2[j] += static_cast<double>(st.counts2[j]);
    for (int j = 0; j < a.J; ++j)
        if (col2[j] == 0)
            throw DegenerateOption("zone " + z.zone_id + ": destination '" +
                                   z.options2.labels[j] +
                                   "' has zero votes everywhere; collapse it first");
    // the expected information is identified only when the origin margins
    // vary independently across stations
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a.N);
    if (a.S < a.I ||
        svd.singularValues()(a.I - 1) <= 1e-10 * svd.singularValues()(0))
        throw SingularInformation("zone " + z.zone_id +
                                  ": collinear origin margins across stations");
}

// Multinomial covariance of row p restricted to the first J-1 coordinates.
Eigen::MatrixXd sigma_block(const Eigen::MatrixXd& P, int i) {
    const int Jm1 = static_cast<int>(P.cols()) - 1;
    Eigen::VectorXd p = P.row(i).head(Jm1);
    Eigen::MatrixXd S = -p * p.transpose();
    S.diagonal() += p;
    return S;
}

struct Working {
    std::vector<Eigen::MatrixXd> Sigma; // per origin, (J-1)^2
    std::vector<Eigen::MatrixXd> W;     // per station inverse working covariance
    Eigen::MatrixXd R;                  // S x (J-1) residuals
    double quad = 0.0;                  // sum_s r' W r
    double logdet = 0.0;                // sum_s log det V_s
};

// Builds residuals at `theta` with the covariance frozen at `theta_V`.
Working build_working(const ZoneArrays& a, const Eigen::MatrixXd& theta,
                      const Eigen::MatrixXd& theta_V) {
    const int Jm1 = a.J - 1;
    Working w;
    Eigen::MatrixXd P = theta_to_p(theta);
    bool same = &theta == &theta_V || theta == theta_V;
    Eigen::MatrixXd Pv = same ? P : theta_to_p(theta_V);
    // derivative blocks at the evaluation point; covariance blocks at the freeze point
    w.Sigma.reserve(a.I);
    std::vector<Eigen::MatrixXd> Vblk;
    Vblk.reserve(a.I);
    for (int i = 0; i < a.I; ++i) {
        w.Sigma.push_back(sigma_block(P, i));
        Vblk.push_back(same ? w.Sigma.back() : sigma_block(Pv, i));
    }

    Eigen::MatrixXd Pt = P.leftCols(Jm1); // I x (J-1)
    w.R = a.Y - a.N * Pt;                 // mean mu_s = N_s' P~
    w.W.resize(a.S);
    for (int s = 0; s < a.S; ++s) {
        Eigen::MatrixXd V = Eigen::MatrixXd::Zero(Jm1, Jm1);
        for (int i = 0; i < a.I; ++i) V.noalias() += a.N(s, i) * Vblk[i];
        V.diagonal().array() += 1e-9 * std::max(1.0, V.trace());
        Eigen::LDLT<Eigen::MatrixXd> ldlt(V);
        if (ldlt.info() != Eigen::Success)
            throw SingularInformation("working covariance failed to factor");
        w.W[s] = ldlt.solve(Eigen::MatrixXd::Identity(Jm1, Jm1));
        w.logdet += ldlt.vectorD().array().log().sum();
        Eigen::VectorXd r = w.R.row(s).transpose();
        w.quad += r.dot(w.W[s] * r);
    }
    return w;
}

double working_loglik(const ZoneArrays& a, const Working& w) {
    return -0.5 * (w.quad + w.logdet + a.S * (a.J - 1) * std::log(2.0 * M_PI));
}

Eigen::VectorXd score_from(const ZoneArrays& a, const Working& w) {
    const int Jm1 = a.J - 1;
    Eigen::VectorXd U = Eigen::VectorXd::Zero(a.I * Jm1);
    for (int s = 0; s < a.S; ++s) {
        Eigen::VectorXd wr = w.W[s] * w.R.row(s).transpose();
        for (int i = 0; i < a.I; ++i) {
            if (a.N(s, i) == 0) continue;
            U.segment(i * Jm1, Jm1).noalias() += a.N(s, i) * (w.Sigma[i] * wr);
        }
    }
    return U;
}

Eigen::MatrixXd info_from(const ZoneArrays& a, const Working& w) {
    const int Jm1 = a.J - 1;
    const int dim = a.I * Jm1;
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(dim, dim);
    std::vector<Eigen::MatrixXd> WS(a.I);
    for (int s = 0; s < a.S; ++s) {
        for (int i = 0; i < a.I; ++i) WS[i].noalias() = w.W[s] * w.Sigma[i];
        for (int i = 0; i < a.I; ++i) {
            if (a.N(s, i) == 0) continue;
            for (int c = i; c < a.I; ++c) {
                if (a.N(s, c) == 0) continue;
                G.block(i * Jm1, c * Jm1, Jm1, Jm1).noalias() +=
                    a.N(s, i) * a.N(s, c) * (w.Sigma[i] * WS[c]);
            }
        }
    }
    for (int i = 0; i < dim; ++i)
        for (int c = 0; c < i; ++c) G(i, c) = G(c, i);
    return G;
}

Eigen::MatrixXd initial_theta(const ZoneTable& z) {
    const int I = z.options1.size();
    const int J = z.options2.size();
    Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(I, J - 1);
    for (int i = 0; i < I; ++i) {
        int match = z.options2.index_of(z.options1.labels[i]);
        if (match < 0) continue;
        if (match == J - 1)
            theta.row(i).array() -= 1.0; // persistence into the reference option
        else
            theta(i, match) += 1.0;
    }
    return theta;
}

} // namespace

double asymptotic_loglik(const ZoneTable& z, const Eigen::MatrixXd& theta,
                         const Eigen::MatrixXd& theta_V) {
    ZoneArrays a = make_arrays(z);
    Working w = build_working(a, theta, theta_V);
    return working_loglik(a, w);
}

Eigen::VectorXd asymptotic_score(const ZoneTable& z, const Eigen::MatrixXd& theta,
                                 const Eigen::MatrixXd& theta_V) {
    ZoneArrays a = make_arrays(z);
    Working w = build_working(a, theta, theta_V);
    return score_from(a, w);
}

TransitionEstimate fit_zone(const ZoneTable& z, const EiConfig& cfg) {
    ZoneArrays a = make_arrays(z);
    check_fittable(z, a);
    const int Jm1 = a.J - 1;
    const int dim = a.I * Jm1;

    Eigen::MatrixXd theta = initial_theta(z);
    Eigen::MatrixXd G;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig;
    double ll = 0.0, prev_ll = 0.0, grad_scaled = 0.0, quad = 0.0;
    bool converged = false;
    int iter = 0;

    while (iter < cfg.max_iter) {
        ++iter;
        Working w = build_working(a, theta, theta);
        Eigen::VectorXd U = score_from(a, w);
        G = info_from(a, w);
        ll = working_loglik(a, w);
        quad = w.quad;
        grad_scaled = U.cwiseAbs().maxCoeff() / std::max(1.0, std::abs(ll));
        double rel_dll = std::abs(ll - prev_ll) / std::max(1.0, std::abs(ll));
        if (iter > 1 && grad_scaled < cfg.tol_grad && rel_dll < cfg.tol_loglik) {
            converged = true;
            break;
        }
        prev_ll = ll;

        eig.compute(G);
        double lmax = eig.eigenvalues().cwiseAbs().maxCoeff();
        if (!(lmax > 0))
            throw SingularInformation("zone " + z.zone_id +
                                      ": information matrix vanished");
        // Cells drifting to a boundary (p_ij -> 0) lose curvature as p^2 but
        // gradient only as p, so a raw Newton step explodes.  Flooring the
        // eigenvalues and capping the step keeps the march finite; the score
        // in such directions decays to zero and the usual test converges.
        Eigen::VectorXd lam =
            eig.eigenvalues().cwiseMax(1e-12 * lmax);
        Eigen::VectorXd delta =
            eig.eigenvectors() *
            (eig.eigenvectors().transpose() * U).cwiseQuotient(lam);
        double dmax = delta.cwiseAbs().maxCoeff();
        if (dmax > 6.0) delta *= 6.0 / dmax;

        // step-halving on the frozen-covariance quadratic form
        double step = 1.0;
        bool improved = false;
        Eigen::MatrixXd theta_try = theta;
        for (int h = 0; h < 30; ++h) {
            for (int i = 0; i < a.I; ++i)
                for (int b = 0; b < Jm1; ++b)
                    theta_try(i, b) = theta(i, b) + step * delta[i * Jm1 + b];
            Eigen::MatrixXd Pt = theta_to_p(theta_try).leftCols(Jm1);
            Eigen::MatrixXd R = a.Y - a.N * Pt;
            double q = 0.0;
            for (int s = 0; s < a.S; ++s) {
                Eigen::VectorXd r = R.row(s).transpose();
                q += r.dot(w.W[s] * r);
            }
            if (q < w.quad) {
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if (!improved) {
            // the frozen objective can only be resolved to fp noise; a stall
            // with a tiny gradient is the numerical optimum, not a failure
            if (grad_scaled < std::max(cfg.tol_grad, 1e-7)) {
                converged = true;
                break;
            }
            throw NotConverged("zone " + z.zone_id + ": line search stalled at iteration " +
                               std::to_string(iter));
        }
        theta = theta_try;
    }
    if (!converged)
        throw NotConverged("zone " + z.zone_id + ": no convergence in " +
                           std::to_string(cfg.max_iter) + " iterations");

    TransitionEstimate est;
    est.zone_id = z.zone_id;
    est.options1 = z.options1;
    est.options2 = z.options2;
    est.theta = theta;
    est.P = theta_to_p(theta);
    est.loglik = ll;
    est.grad_norm = grad_scaled;
    est.iterations = iter;
    est.converged = true;

    // Pearson moment estimator of the overdispersion, floored
    int df = (a.S - a.I) * Jm1;
    est.phi = df > 0 ? std::max(cfg.phi_floor, quad / df) : cfg.phi_floor;

    eig.compute(G);
    double lmax = eig.eigenvalues().cwiseAbs().maxCoeff();
    if (!(lmax > 0))
        throw SingularInformation("zone " + z.zone_id +
                                  ": information matrix is singular at the estimate");
    // boundary cells keep the floored curvature: large but finite variance
    Eigen::VectorXd inv =
        eig.eigenvalues().cwiseMax(1e-12 * lmax).cwiseInverse() * est.phi;
    est.cov_theta =
        eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
    est.cov_theta = 0.5 * (est.cov_theta + est.cov_theta.transpose());
    (void)dim;

    est.se_P = standard_errors(est);
    return est;
}

Eigen::VectorXd predict_station(const TransitionEstimate& est, const StationRecord& s) {
    const int I = est.options1.size();
    const int J = est.options2.size();
    if (static_cast<int>(s.counts1.size()) != I)
        throw DimensionMismatch("station " + s.station_id +
                                " does not match the estimate's origin options");
    Eigen::VectorXd n(I);
    for (int i = 0; i < I; ++i) n[i] = static_cast<double>(s.counts1[i]);
    Eigen::VectorXd yhat = est.P.transpose() * n;
    (void)J;
    return yhat;
}

FitReport goodness_of_fit(const TransitionEstimate& est, const ZoneTable& z) {
    ZoneArrays a = make_arrays(z);
    const int Jm1 = a.J - 1;
    Working w = build_working(a, est.theta, est.theta);

    FitReport rep;
    rep.zone_id = z.zone_id;
    rep.df = (a.S - a.I) * Jm1;
    double sse = 0.0, sst = 0.0;

    // column means of the full destination counts
    Eigen::VectorXd ybar = Eigen::VectorXd::Zero(a.J);
    for (const auto& st : z.stations)
        for (int j = 0; j < a.J; ++j) ybar[j] += static_cast<double>(st.counts2[j]);
    ybar /= a.S;

    rep.stations.reserve(a.S);
    for (int s = 0; s < a.S; ++s) {
        const auto& st = z.stations[s];
        Eigen::VectorXd yhat = predict_station(est, st);
        StationFit sf;
        sf.station_id = st.station_id;
        sf.df = Jm1;
        Eigen::VectorXd r = w.R.row(s).transpose();
        sf.chi_square = r.dot(w.W[s] * r) / est.phi;
        rep.pearson_stat += sf.chi_square;

        // full-dimension variance diagonal for per-destination residuals
        Eigen::VectorXd vdiag = Eigen::VectorXd::Zero(a.J);
        for (int i = 0; i < a.I; ++i) {
            double n = a.N(s, i);
            if (n == 0) continue;
            for (int j = 0; j < a.J; ++j)
                vdiag[j] += n * est.P(i, j) * (1.0 - est.P(i, j));
        }
        sf.pearson.resize(a.J);
        for (int j = 0; j < a.J; ++j) {
            double y = static_cast<double>(st.counts2[j]);
            double e = y - yhat[j];
            sf.pearson[j] = vdiag[j] > 0 ? e / std::sqrt(est.phi * vdiag[j]) : 0.0;
            sse += e * e;
            double c = y - ybar[j];
            sst += c * c;
        }
        rep.stations.push_back(std::move(sf));
    }
    rep.pseudo_r2 = sst > 0 ? 1.0 - sse / sst : 1.0;
    return rep;
}

FlowTable flow_counts(const TransitionEstimate& est, const ZoneTable& z,
                      const EiConfig& cfg) {
    const int I = est.options1.size();
    const int J = est.options2.size();
    FlowTable t;
    t.zone_id = z.zone_id;
    t.options1 = est.options1;
    t.options2 = est.options2;
    t.row_margins.resize(I);
    t.col_margins.resize(J);
    for (int i = 0; i < I; ++i) t.row_margins[i] = static_cast<double>(z.margins1[i]);
    for (int j = 0; j < J; ++j) t.col_margins[j] = static_cast<double>(z.margins2[j]);
    Eigen::MatrixXd F = t.row_margins.asDiagonal() * est.P;
    t.F = rake_to_margins(F, t.row_margins, t.col_margins, cfg.rake_tol,
                          cfg.rake_max_sweeps);
    return t;
}

Eigen::MatrixXd standard_errors(const TransitionEstimate& est) {
    const int I = est.options1.size();
    const int J = est.options2.size();
    const int Jm1 = J - 1;
    if (est.cov_theta.rows() != I * Jm1 || est.cov_theta.cols() != I * Jm1)
        throw DimensionMismatch("cov_theta has the wrong shape");
    if ((est.cov_theta - est.cov_theta.transpose()).cwiseAbs().maxCoeff() >
        1e-8 * std::max(1.0, est.cov_theta.cwiseAbs().maxCoeff()))
        throw NonPSDCovariance("cov_theta is not symmetric");

    Eigen::MatrixXd se(I, J);
    for (int i = 0; i < I; ++i) {
        Eigen::MatrixXd C = est.cov_theta.block(i * Jm1, i * Jm1, Jm1, Jm1);
        for (int j = 0; j < J; ++j) {
            Eigen::VectorXd g(Jm1);
            for (int b = 0; b < Jm1; ++b)
                g[b] = est.P(i, j) * ((j == b ? 1.0 : 0.0) - est.P(i, b));
            double v = g.dot(C * g);
            if (v < -1e-8 * std::max(1.0, C.cwiseAbs().maxCoeff()))
                throw NonPSDCovariance("negative delta-method variance");
            se(i, j) = std::sqrt(std::max(0.0, v));
        }
    }
    return se;
}

Eigen::MatrixXd flow_count_se(const TransitionEstimate& est, const ZoneTable& z) {
    const int I = est.options1.size();
    Eigen::MatrixXd se = est.se_P;
    for (int i = 0; i < I; ++i)
        se.row(i) *= static_cast<double>(z.margins1[i]);
    return se;
}

} // namespace flowcast
