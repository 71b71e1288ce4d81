#include "flowcast/mnl.hpp"

#include <cmath>

#include "flowcast/errors.hpp"

namespace flowcast {

namespace {

// log-probabilities per zone via a stable softmax over all K options
Eigen::MatrixXd log_probs(const Eigen::MatrixXd& eta) {
    Eigen::MatrixXd lp = eta;
    for (int z = 0; z < eta.rows(); ++z) {
        double m = eta.row(z).maxCoeff();
        double lse = std::log((eta.row(z).array() - m).exp().sum()) + m;
        lp.row(z).array() -= lse;
    }
    return lp;
}

struct Layout {
    std::vector<std::pair<int, int>> free_params; // (option, covariate or -1)
    std::vector<int> slot; // (j * (V+1) + v+1) -> parameter index or -1
    int K = 0, V = 0, P = 0;

    Layout(int K_, int V_, const Mask& mask, int ref) : K(K_), V(V_) {
        slot.assign(K * (V + 1), -1);
        for (int j = 0; j < K; ++j) {
            if (j == ref) continue;
            slot[j * (V + 1)] = P;
            free_params.emplace_back(j, -1);
            ++P;
            for (int v = 0; v < V; ++v)
                if (mask(j, v)) {
                    slot[j * (V + 1) + v + 1] = P;
                    free_params.emplace_back(j, v);
                    ++P;
                }
        }
    }
    int at(int j, int v) const { return slot[j * (V + 1) + v + 1]; }
    int intercept(int j) const { return slot[j * (V + 1)]; }
};

Eigen::MatrixXd make_eta(const Eigen::MatrixXd& Xc, const Eigen::VectorXd& phi,
                         const Layout& L) {
    Eigen::MatrixXd eta = Eigen::MatrixXd::Zero(Xc.rows(), L.K);
    for (int j = 0; j < L.K; ++j) {
        int s0 = L.intercept(j);
        if (s0 < 0) continue;
        eta.col(j).array() += phi[s0];
        for (int v = 0; v < L.V; ++v) {
            int s = L.at(j, v);
            if (s >= 0) eta.col(j) += phi[s] * Xc.col(v);
        }
    }
    return eta;
}

double loglik_at(const Eigen::MatrixXd& counts, const Eigen::MatrixXd& lp) {
    double ll = 0;
    for (int z = 0; z < counts.rows(); ++z)
        for (int j = 0; j < counts.cols(); ++j)
            if (counts(z, j) > 0) ll += counts(z, j) * lp(z, j);
    return ll;
}

double saturated_loglik(const Eigen::MatrixXd& counts, const Eigen::VectorXd& totals) {
    double ll = 0;
    for (int z = 0; z < counts.rows(); ++z)
        for (int j = 0; j < counts.cols(); ++j)
            if (counts(z, j) > 0)
                ll += counts(z, j) * std::log(counts(z, j) / totals[z]);
    return ll;
}

double null_loglik(const Eigen::MatrixXd& counts) {
    double grand = counts.sum();
    double ll = 0;
    for (int j = 0; j < counts.cols(); ++j) {
        double cj = counts.col(j).sum();
        if (cj > 0) ll += cj * std::log(cj / grand);
    }
    return ll;
}

} // namespace

std::string direction_name(Direction d) {
    return d == Direction::outgoing ? "outgoing" : "incoming";
}

TransitionCountPanel build_panel(const std::vector<FlowTable>& flows,
                                 const std::string& anchor, Direction direction,
                                 const std::vector<Eigen::MatrixXd>* flow_se) {
    if (flows.empty()) throw DataError("no flow tables to build a panel from");
    if (flow_se && flow_se->size() != flows.size())
        throw DimensionMismatch("one SE matrix per flow table expected");
    const FlowTable& first = flows.front();
    TransitionCountPanel panel;
    panel.direction = direction;
    panel.anchor = anchor;
    panel.options = direction == Direction::outgoing ? first.options2 : first.options1;
    const int K = panel.options.size();
    const int Z = static_cast<int>(flows.size());
    panel.counts.resize(Z, K);
    panel.count_se = Eigen::MatrixXd::Zero(Z, K);
    panel.totals.resize(Z);

    for (int z = 0; z < Z; ++z) {
        const FlowTable& t = flows[z];
        if (t.options1.labels != first.options1.labels ||
            t.options2.labels != first.options2.labels)
            throw OptionMismatch("zone " + t.zone_id +
                                 ": option labels differ across flow tables");
        panel.zone_ids.push_back(t.zone_id);
        if (direction == Direction::outgoing) {
            int i = t.options1.index_of(anchor);
            if (i < 0)
                throw MissingAnchor("origin option " + anchor + " not found");
            panel.counts.row(z) = t.F.row(i);
            if (flow_se) panel.count_se.row(z) = (*flow_se)[z].row(i);
        } else {
            int j = t.options2.index_of(anchor);
            if (j < 0)
                throw MissingAnchor("destination option " + anchor + " not found");
            panel.counts.row(z) = t.F.col(j).transpose();
            if (flow_se) panel.count_se.row(z) = (*flow_se)[z].col(j).transpose();
        }
        panel.totals[z] = panel.counts.row(z).sum();
        if (panel.totals[z] <= 0)
            throw ZeroRowTotal("zone " + t.zone_id + ": anchor " + anchor +
                               " has no flow");
    }
    return panel;
}

Mask full_mask(int options, int covariates) {
    return Mask::Ones(options, covariates);
}

Eigen::MatrixXd MnlModel::predict(const Eigen::MatrixXd& X) const {
    if (X.cols() != beta.cols())
        throw DimensionMismatch("design has " + std::to_string(X.cols()) +
                                " covariates, model expects " +
                                std::to_string(beta.cols()));
    Eigen::MatrixXd Xc = X;
    for (int v = 0; v < X.cols(); ++v) Xc.col(v).array() -= x_center[v];
    Eigen::MatrixXd eta = Xc * beta.transpose();
    eta.rowwise() += beta0.transpose();
    return log_probs(eta).array().exp();
}

MnlModel fit(const TransitionCountPanel& panel, const CovariateMatrix& X,
             const MnlConfig& cfg) {
    return fit(panel, X, full_mask(panel.options.size(), X.cols()), cfg);
}

MnlModel fit(const TransitionCountPanel& panel, const CovariateMatrix& X,
             const Mask& mask, const MnlConfig& cfg) {
    const int Z = panel.zones();
    const int K = panel.options.size();
    const int V = X.cols();
    if (X.rows() != Z) throw DimensionMismatch("panel and design row counts differ");
    for (int z = 0; z < Z; ++z)
        if (X.zone_ids[z] != panel.zone_ids[z])
            throw UnknownZone("zone order mismatch at row " + std::to_string(z) +
                              ": " + X.zone_ids[z] + " vs " + panel.zone_ids[z]);
    if (mask.rows() != K || mask.cols() != V)
        throw DimensionMismatch("mask must be options x covariates");
    if (panel.counts.minCoeff() < 0)
        throw InvalidCount("negative count in transition panel");
    for (int z = 0; z < Z; ++z) {
        double s = panel.counts.row(z).sum();
        if (std::abs(s - panel.totals[z]) > 0.5 + 1e-9 * s)
            throw InvalidCount("zone " + panel.zone_ids[z] +
                               ": counts do not sum to the stated total");
        if (!(panel.totals[z] > 0))
            throw ZeroRowTotal("zone " + panel.zone_ids[z] + ": empty row");
    }

    const int ref = panel.options.reference_index;
    // covariates enter as deviations from their means
    Eigen::VectorXd center(V);
    Eigen::MatrixXd Xc = X.X;
    for (int v = 0; v < V; ++v) {
        center[v] = X.X.col(v).mean();
        Xc.col(v).array() -= center[v];
    }

    Layout L(K, V, mask, ref);
    Eigen::VectorXd phi = Eigen::VectorXd::Zero(L.P);

    Eigen::MatrixXd lp = log_probs(make_eta(Xc, phi, L));
    double ll = loglik_at(panel.counts, lp);
    double gnorm = 0;
    bool converged = false;
    int iter = 0;
    Eigen::MatrixXd H;

    while (iter < cfg.max_iter) {
        ++iter;
        Eigen::MatrixXd P = lp.array().exp();

        Eigen::VectorXd g = Eigen::VectorXd::Zero(L.P);
        H = Eigen::MatrixXd::Zero(L.P, L.P);
        for (int z = 0; z < Z; ++z) {
            double nz = panel.totals[z];
            for (size_t a = 0; a < L.free_params.size(); ++a) {
                auto [j, v] = L.free_params[a];
                double xa = v < 0 ? 1.0 : Xc(z, v);
                g[a] += (panel.counts(z, j) - nz * P(z, j)) * xa;
                for (size_t b = a; b < L.free_params.size(); ++b) {
                    auto [m, w] = L.free_params[b];
                    double xb = w < 0 ? 1.0 : Xc(z, w);
                    double curv = nz * P(z, j) * ((j == m ? 1.0 : 0.0) - P(z, m));
                    H(a, b) += curv * xa * xb;
                }
            }
        }
        for (int a = 0; a < L.P; ++a)
            for (int b = 0; b < a; ++b) H(a, b) = H(b, a);

        gnorm = g.norm();
        if (gnorm < cfg.tol_grad) {
            converged = true;
            break;
        }

        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(H);
        double lmax = eig.eigenvalues().cwiseAbs().maxCoeff();
        // divergence shrinks curvature and gradient together, so only an
        // fp-level eigenvalue means the design itself is deficient
        if (!(lmax > 0) || eig.eigenvalues().minCoeff() <= 1e-14 * lmax) {
            if (phi.cwiseAbs().maxCoeff() > 10.0)
                throw Separation("an option is perfectly predicted "
                                 "(coefficients diverged)");
            throw RankDeficientDesign("information matrix is singular; check for "
                                      "collinear covariates");
        }
        Eigen::VectorXd delta =
            eig.eigenvectors() *
            (eig.eigenvectors().transpose() * g).cwiseQuotient(eig.eigenvalues());

        // near the optimum the likelihood is flat to fp noise; take plain
        // Newton steps there and let the gradient drive convergence instead
        double predicted = 0.5 * g.dot(delta);
        if (predicted < 1e-12 * std::max(1.0, std::abs(ll)) &&
            delta.cwiseAbs().maxCoeff() < 1.0) {
            phi += delta;
            lp = log_probs(make_eta(Xc, phi, L));
            ll = loglik_at(panel.counts, lp);
            if (phi.cwiseAbs().maxCoeff() > cfg.separation_beta)
                throw Separation("a coefficient diverged past " +
                                 std::to_string(cfg.separation_beta) +
                                 "; an option is perfectly predicted");
            continue;
        }

        double step = 1.0;
        bool improved = false;
        for (int h = 0; h < 40; ++h) {
            Eigen::VectorXd cand = phi + step * delta;
            Eigen::MatrixXd lpc = log_probs(make_eta(Xc, cand, L));
            double llc = loglik_at(panel.counts, lpc);
            if (llc > ll) {
                phi = cand;
                lp = lpc;
                ll = llc;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if (!improved) {
            // improvements below fp noise: accept if the gradient is small
            // relative to the count scale
            if (gnorm < 1e-6 * std::max(1.0, panel.totals.sum())) {
                converged = true;
                break;
            }
            throw NotConverged("mnl line search stalled at iteration " +
                               std::to_string(iter));
        }
        if (phi.cwiseAbs().maxCoeff() > cfg.separation_beta)
            throw Separation("a coefficient diverged past " +
                             std::to_string(cfg.separation_beta) +
                             "; an option is perfectly predicted");
    }
    if (!converged)
        throw NotConverged("mnl did not converge in " + std::to_string(cfg.max_iter) +
                           " iterations (gradient norm " + std::to_string(gnorm) + ")");

    MnlModel m;
    m.zone_ids = panel.zone_ids;
    m.options = panel.options;
    m.covariates = X.names;
    m.x_center = center;
    m.beta0 = Eigen::VectorXd::Zero(K);
    m.beta = Eigen::MatrixXd::Zero(K, V);
    m.mask = mask;
    for (int j = 0; j < K; ++j)
        if (j == ref) m.mask.row(j).setZero();
    for (size_t a = 0; a < L.free_params.size(); ++a) {
        auto [j, v] = L.free_params[a];
        if (v < 0)
            m.beta0[j] = phi[a];
        else
            m.beta(j, v) = phi[a];
    }
    m.free_params = L.free_params;

    Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    m.cov_beta = ldlt.solve(Eigen::MatrixXd::Identity(L.P, L.P));
    m.se_beta = Eigen::MatrixXd::Zero(K, V);
    m.z_ratios = Eigen::MatrixXd::Zero(K, V);
    m.z_beta0 = Eigen::VectorXd::Zero(K);
    for (size_t a = 0; a < L.free_params.size(); ++a) {
        auto [j, v] = L.free_params[a];
        double se = std::sqrt(std::max(0.0, m.cov_beta(a, a)));
        if (v < 0) {
            m.z_beta0[j] = se > 0 ? m.beta0[j] / se : 0.0;
        } else {
            m.se_beta(j, v) = se;
            m.z_ratios(j, v) = se > 0 ? m.beta(j, v) / se : 0.0;
        }
    }

    m.loglik = ll;
    m.saturated_loglik = saturated_loglik(panel.counts, panel.totals);
    m.null_loglik = null_loglik(panel.counts);
    m.deviance = 2.0 * (m.saturated_loglik - m.loglik);
    m.null_deviance = 2.0 * (m.saturated_loglik - m.null_loglik);
    m.iterations = iter;
    m.grad_norm = gnorm;
    return m;
}

double deviance_explained(const MnlModel& m) {
    if (m.null_deviance <= 0) return 0.0;
    return 100.0 * (1.0 - m.deviance / m.null_deviance);
}

double mnl_loglik(const TransitionCountPanel& panel, const Eigen::MatrixXd& Xc,
                  const Eigen::VectorXd& beta0, const Eigen::MatrixXd& beta) {
    Eigen::MatrixXd eta = Xc * beta.transpose();
    eta.rowwise() += beta0.transpose();
    return loglik_at(panel.counts, log_probs(eta));
}

Eigen::MatrixXd mnl_gradient(const TransitionCountPanel& panel,
                             const Eigen::MatrixXd& Xc, const Eigen::VectorXd& beta0,
                             const Eigen::MatrixXd& beta) {
    const int K = static_cast<int>(beta0.size());
    const int V = static_cast<int>(beta.cols());
    const int ref = panel.options.reference_index;
    Eigen::MatrixXd eta = Xc * beta.transpose();
    eta.rowwise() += beta0.transpose();
    Eigen::MatrixXd P = log_probs(eta).array().exp();
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(K, V + 1);
    for (int z = 0; z < panel.zones(); ++z) {
        double nz = panel.totals[z];
        for (int j = 0; j < K; ++j) {
            if (j == ref) continue;
            double w = panel.counts(z, j) - nz * P(z, j);
            g(j, 0) += w;
            for (int v = 0; v < V; ++v) g(j, v + 1) += w * Xc(z, v);
        }
    }
    return g;
}

MnlModel stepwise_select(const TransitionCountPanel& panel, const CovariateMatrix& X,
                         const std::vector<double>& schedule, const MnlConfig& cfg) {
    for (size_t i = 1; i < schedule.size(); ++i)
        if (!(schedule[i] > schedule[i - 1]))
            throw InvalidSpec("stepwise schedule must be strictly increasing");
    Mask mask = full_mask(panel.options.size(), X.cols());
    MnlModel m = fit(panel, X, mask, cfg);
    for (double threshold : schedule) {
        bool changed = false;
        for (int j = 0; j < mask.rows(); ++j) {
            if (j == panel.options.reference_index) continue;
            for (int v = 0; v < mask.cols(); ++v)
                if (mask(j, v) && std::abs(m.z_ratios(j, v)) < threshold) {
                    mask(j, v) = 0;
                    changed = true;
                }
        }
        if (changed) m = fit(panel, X, mask, cfg);
    }
    return m;
}

Eigen::MatrixXd marginal_effects(const MnlModel& m, double t) {
    if (!(t > 0)) throw InvalidSpec("marginal-effect step must be positive");
    const int K = m.options.size();
    const int V = static_cast<int>(m.covariates.size());
    auto probs_at = [&](int v, double x) {
        Eigen::VectorXd eta = m.beta0;
        if (v >= 0) eta += x * m.beta.col(v);
        double mx = eta.maxCoeff();
        Eigen::VectorXd e = (eta.array() - mx).exp();
        return Eigen::VectorXd(e / e.sum());
    };
    Eigen::VectorXd base = probs_at(-1, 0.0);
    Eigen::MatrixXd me(K, V);
    for (int v = 0; v < V; ++v) me.col(v) = (probs_at(v, t) - base) / t;
    return me;
}

double z_pvalue(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

SignificanceFlags significance_flags(const MnlModel& m, double strong, double weak) {
    const int K = m.options.size();
    const int V = static_cast<int>(m.covariates.size());
    SignificanceFlags out;
    out.strong_threshold = strong;
    out.weak_threshold = weak;
    out.p_values.resize(K, V);
    out.flags.assign(K, std::vector<Flag>(V, Flag::none));
    for (int j = 0; j < K; ++j)
        for (int v = 0; v < V; ++v) {
            if (!m.mask(j, v)) {
                out.p_values(j, v) = 1.0;
                continue;
            }
            double p = z_pvalue(m.z_ratios(j, v));
            out.p_values(j, v) = p;
            if (p < strong)
                out.flags[j][v] = Flag::strong;
            else if (p < weak)
                out.flags[j][v] = Flag::weak;
        }
    return out;
}

ResidualDiagnostics residual_diagnostics(const MnlModel& m,
                                         const TransitionCountPanel& panel,
                                         const CovariateMatrix& X, double cutoff) {
    const int Z = panel.zones();
    const int K = panel.options.size();
    Eigen::MatrixXd P = m.predict(X.X);
    Eigen::MatrixXd Xc = X.X;
    for (int v = 0; v < X.cols(); ++v) Xc.col(v).array() -= m.x_center[v];

    ResidualDiagnostics d;
    d.cutoff = cutoff;
    d.raw.resize(Z, K);
    d.standardized.resize(Z, K);
    const int nfree = static_cast<int>(m.free_params.size());
    for (int z = 0; z < Z; ++z) {
        double nz = panel.totals[z];
        for (int j = 0; j < K; ++j) {
            double obs = panel.counts(z, j) / nz;
            double r = obs - P(z, j);
            d.raw(z, j) = r;
            // delta method through the logit map, free parameters only
            Eigen::VectorXd g(nfree);
            for (int a = 0; a < nfree; ++a) {
                auto [mm, v] = m.free_params[a];
                double xa = v < 0 ? 1.0 : Xc(z, v);
                g[a] = P(z, j) * ((j == mm ? 1.0 : 0.0) - P(z, mm)) * xa;
            }
            double var_model = g.dot(m.cov_beta * g);
            double var_ei = std::pow(panel.count_se(z, j) / nz, 2.0);
            double se = std::sqrt(std::max(0.0, var_model + var_ei));
            d.standardized(z, j) = r / std::max(se, 1e-12);
            if (std::abs(d.standardized(z, j)) > cutoff)
                d.outliers.push_back({panel.zone_ids[z], panel.options.labels[j],
                                      d.standardized(z, j)});
        }
    }
    return d;
}

} // namespace flowcast
