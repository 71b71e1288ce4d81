#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "flowcast/data_model.hpp"

namespace flowcast {

struct EiConfig {
    int max_iter = 200;
    double tol_loglik = 1e-8; // relative log-likelihood change
    double tol_grad = 1e-6;   // scaled sup-norm of the score
    double phi_floor = 1.0;
    double rake_tol = 1e-6;
    int rake_max_sweeps = 1000;
};

// Per-zone transition estimate.  Rows of P are origin options, columns
// destinations; theta holds row logits against the last destination,
// theta(i,b) = log(p_ib / p_iJ).  cov_theta covers vec(theta) in row-major
// order (origin-major) and is already scaled by the overdispersion phi.
struct TransitionEstimate {
    std::string zone_id;
    OptionSet options1;
    OptionSet options2;
    Eigen::MatrixXd P;         // I x J
    Eigen::MatrixXd theta;     // I x (J-1)
    Eigen::MatrixXd cov_theta; // I(J-1) x I(J-1)
    Eigen::MatrixXd se_P;      // I x J, delta method
    double phi = 1.0;
    double loglik = 0.0; // working asymptotic log-likelihood at the estimate
    double grad_norm = 0.0;
    int iterations = 0;
    bool converged = false;
};

// Expected origin x destination vote counts with observed margins.
struct FlowTable {
    std::string zone_id; // or "REGION"
    OptionSet options1;
    OptionSet options2;
    Eigen::MatrixXd F;
    Eigen::VectorXd row_margins;
    Eigen::VectorXd col_margins;
};

struct StationFit {
    std::string station_id;
    double chi_square = 0.0;
    int df = 0;
    Eigen::VectorXd pearson; // per destination, phi-scaled
};

struct FitReport {
    std::string zone_id;
    double pearson_stat = 0.0; // phi-scaled zone total
    int df = 0;
    double pseudo_r2 = 0.0;
    std::vector<StationFit> stations;
};

// Fits the zone by quasi-likelihood Fisher scoring of the multivariate-normal
// asymptotic approximation: station destination counts have mean
// mu_sj = sum_i n_si p_ij and working covariance
// V_s = phi * sum_i n_si (diag(p_i) - p_i p_i^T).
TransitionEstimate fit_zone(const ZoneTable& z, const EiConfig& cfg = {});

// Expected destination vector for one station: yhat_j = sum_i n_si phat_ij.
Eigen::VectorXd predict_station(const TransitionEstimate& est, const StationRecord& s);

FitReport goodness_of_fit(const TransitionEstimate& est, const ZoneTable& z);

// F_ij = (sum_s n_si) * phat_ij, raked so both margins match the observed
// zone totals.
FlowTable flow_counts(const TransitionEstimate& est, const ZoneTable& z,
                      const EiConfig& cfg = {});

// Delta-method standard errors of P from cov_theta.
Eigen::MatrixXd standard_errors(const TransitionEstimate& est);

// Count-scale standard errors aligned with flow_counts: row_margin_i * se(p_ij).
Eigen::MatrixXd flow_count_se(const TransitionEstimate& est, const ZoneTable& z);

// The working objective and its analytic score at arbitrary theta, with the
// covariance frozen at theta_V (phi = 1).  Exposed for gradient checks; the
// score returned by the fitter is the same object evaluated at theta = theta_V.
double asymptotic_loglik(const ZoneTable& z, const Eigen::MatrixXd& theta,
                         const Eigen::MatrixXd& theta_V);
Eigen::VectorXd asymptotic_score(const ZoneTable& z, const Eigen::MatrixXd& theta,
                                 const Eigen::MatrixXd& theta_V);

// Row-wise inverse-logit: theta (I x (J-1)) -> row-stochastic P (I x J).
Eigen::MatrixXd theta_to_p(const Eigen::MatrixXd& theta);
Eigen::MatrixXd p_to_theta(const Eigen::MatrixXd& P);

} // namespace flowcast
