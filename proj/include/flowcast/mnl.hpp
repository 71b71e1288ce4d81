#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "flowcast/covariates.hpp"
#include "flowcast/data_model.hpp"
#include "flowcast/ei.hpp"

namespace flowcast {

enum class Direction { outgoing, incoming };

std::string direction_name(Direction d);

// Zone-level counts for one anchor option: where an origin's voters went
// (outgoing) or where a destination's voters came from (incoming).
struct TransitionCountPanel {
    Direction direction = Direction::outgoing;
    std::string anchor;
    std::vector<std::string> zone_ids;
    OptionSet options;       // the varying side
    Eigen::MatrixXd counts;  // Z x K, real-valued EI counts
    Eigen::VectorXd totals;  // per-zone n_z (row sums)
    Eigen::MatrixXd count_se; // Z x K, inherited from the EI step

    int zones() const { return static_cast<int>(zone_ids.size()); }
};

// Extracts the anchor row (outgoing) or column (incoming) of each zone's
// FlowTable.  flow_se, when given, is aligned with `flows` and holds
// count-scale standard errors (see flow_count_se); otherwise count_se is 0.
TransitionCountPanel build_panel(const std::vector<FlowTable>& flows,
                                 const std::string& anchor,
                                 Direction direction,
                                 const std::vector<Eigen::MatrixXd>* flow_se = nullptr);

struct MnlConfig {
    int max_iter = 200;
    double tol_grad = 1e-8;        // gradient norm at convergence
    double separation_beta = 30.0; // |beta| beyond this on standardized scale
};

// Multinomial logit over zone counts: log(p_zj / p_zk) = b0_j + sum_v x_zv b_jv.
// Coefficient rows follow panel options; the reference row is all zero, and
// masked-out cells are exactly zero with no covariance entry.
struct MnlModel {
    std::vector<std::string> zone_ids;
    OptionSet options;                   // K options, reference_index = k
    std::vector<std::string> covariates; // V names
    Eigen::VectorXd x_center;            // column means removed before fitting
    Eigen::VectorXd beta0;               // K intercepts (reference 0)
    Eigen::MatrixXd beta;                // K x V
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> mask; // K x V inclusion
    Eigen::VectorXd z_beta0;             // K
    Eigen::MatrixXd z_ratios;            // K x V (0 where excluded)
    Eigen::MatrixXd se_beta;             // K x V (0 where excluded)
    Eigen::MatrixXd cov_beta;            // free parameters, see free_params
    std::vector<std::pair<int, int>> free_params; // (option, covariate), covariate -1 = intercept
    double loglik = 0.0;
    double saturated_loglik = 0.0;
    double null_loglik = 0.0;
    double deviance = 0.0;
    double null_deviance = 0.0;
    int iterations = 0;
    double grad_norm = 0.0;

    int reference_index() const { return options.reference_index; }
    // Fitted Z x K probability matrix for a design X (Z x V).
    Eigen::MatrixXd predict(const Eigen::MatrixXd& X) const;
};

using Mask = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;

Mask full_mask(int options, int covariates);

MnlModel fit(const TransitionCountPanel& panel, const CovariateMatrix& X,
             const Mask& mask, const MnlConfig& cfg = {});
MnlModel fit(const TransitionCountPanel& panel, const CovariateMatrix& X,
             const MnlConfig& cfg = {});

double deviance_explained(const MnlModel& m); // percent

// Log-likelihood and analytic gradient at arbitrary coefficients, on an
// already-centered design.  The gradient comes back as a K x (V+1) matrix
// (intercept in column 0, reference row zero) for numerical comparisons.
double mnl_loglik(const TransitionCountPanel& panel, const Eigen::MatrixXd& Xc,
                  const Eigen::VectorXd& beta0, const Eigen::MatrixXd& beta);
Eigen::MatrixXd mnl_gradient(const TransitionCountPanel& panel,
                             const Eigen::MatrixXd& Xc, const Eigen::VectorXd& beta0,
                             const Eigen::MatrixXd& beta);

// Removes (option, covariate) cells whose |z| falls below each threshold of
// the ascending schedule in turn, refitting between stages.
MnlModel stepwise_select(const TransitionCountPanel& panel, const CovariateMatrix& X,
                         const std::vector<double>& schedule = {0.5, 1.0},
                         const MnlConfig& cfg = {});

// Numerical marginal effects: [p_j(x_v = t, rest 0) - p_j(0)] / t.  K x V.
Eigen::MatrixXd marginal_effects(const MnlModel& m, double t = 1e-5);

enum class Flag { none = 0, weak = 1, strong = 2 };

struct SignificanceFlags {
    Eigen::MatrixXd p_values; // K x V, two-sided normal
    std::vector<std::vector<Flag>> flags;
    double strong_threshold = 0.01;
    double weak_threshold = 0.08;
};

SignificanceFlags significance_flags(const MnlModel& m, double strong = 0.01,
                                     double weak = 0.08);

// Two-sided normal p-value for a z ratio.
double z_pvalue(double z);

struct ResidualDiagnostics {
    Eigen::MatrixXd raw;          // Z x K share residuals
    Eigen::MatrixXd standardized; // Z x K
    struct Outlier {
        std::string zone_id;
        std::string option;
        double residual; // standardized
    };
    std::vector<Outlier> outliers; // |standardized| > cutoff
    double cutoff = 2.0;
};

// Share residuals standardized by sqrt(model variance + EI variance), the
// EI part being (count_se / n_z)^2.
ResidualDiagnostics residual_diagnostics(const MnlModel& m,
                                         const TransitionCountPanel& panel,
                                         const CovariateMatrix& X,
                                         double cutoff = 2.0);

} // namespace flowcast
