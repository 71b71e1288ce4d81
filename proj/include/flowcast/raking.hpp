#pragma once

#include <Eigen/Dense>

namespace flowcast {

// Iterative proportional fitting: alternately rescales rows and columns of a
// non-negative seed table until both margins match the targets.  Preserves
// zeros and all cross-product ratios of F.
//
// Throws InfeasibleMargins when sum(rows) != sum(cols) (1e-9 relative) or a
// zero row/column faces a positive target, NoConvergence after max_sweeps.
Eigen::MatrixXd rake_to_margins(const Eigen::MatrixXd& F,
                                const Eigen::VectorXd& rows,
                                const Eigen::VectorXd& cols,
                                double tol = 1e-6,
                                int max_sweeps = 1000,
                                int* sweeps_out = nullptr);

} // namespace flowcast
