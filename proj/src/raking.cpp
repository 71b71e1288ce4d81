#include "flowcast/raking.hpp"

#include <cmath>

#include "flowcast/errors.hpp"

namespace flowcast {

namespace {

// Largest relative margin violation of M against the targets.
double margin_error(const Eigen::MatrixXd& M, const Eigen::VectorXd& rows,
                    const Eigen::VectorXd& cols) {
    double err = 0.0;
    Eigen::VectorXd rs = M.rowwise().sum();
    Eigen::VectorXd cs = M.colwise().sum();
    for (int i = 0; i < rows.size(); ++i)
        err = std::max(err, std::abs(rs[i] - rows[i]) / std::max(1.0, std::abs(rows[i])));
    for (int j = 0; j < cols.size(); ++j)
        err = std::max(err, std::abs(cs[j] - cols[j]) / std::max(1.0, std::abs(cols[j])));
    return err;
}

} // namespace

Eigen::MatrixXd rake_to_margins(const Eigen::MatrixXd& F, const Eigen::VectorXd& rows,
                                const Eigen::VectorXd& cols, double tol, int max_sweeps,
                                int* sweeps_out) {
    if (F.rows() != rows.size() || F.cols() != cols.size())
        throw DimensionMismatch("rake_to_margins: margin lengths do not match F");
    if ((F.array() < 0).any())
        throw InfeasibleMargins("rake_to_margins: negative entry in seed table");
    if ((rows.array() < 0).any() || (cols.array() < 0).any())
        throw InfeasibleMargins("rake_to_margins: negative margin target");

    double rsum = rows.sum(), csum = cols.sum();
    if (std::abs(rsum - csum) > 1e-9 * std::max({1.0, std::abs(rsum), std::abs(csum)}))
        throw InfeasibleMargins("rake_to_margins: row and column totals disagree");

    for (int i = 0; i < rows.size(); ++i)
        if (rows[i] > 0 && F.row(i).sum() == 0)
            throw InfeasibleMargins("rake_to_margins: zero row with positive target");
    for (int j = 0; j < cols.size(); ++j)
        if (cols[j] > 0 && F.col(j).sum() == 0)
            throw InfeasibleMargins("rake_to_margins: zero column with positive target");

    Eigen::MatrixXd M = F;
    if (sweeps_out) *sweeps_out = 0;
    if (margin_error(M, rows, cols) <= tol) return M;

    for (int sweep = 1; sweep <= max_sweeps; ++sweep) {
        for (int i = 0; i < M.rows(); ++i) {
            double s = M.row(i).sum();
            if (s > 0) M.row(i) *= rows[i] / s;
            else if (rows[i] > 0)
                throw InfeasibleMargins("rake_to_margins: row collapsed to zero");
        }
        for (int j = 0; j < M.cols(); ++j) {
            double s = M.col(j).sum();
            if (s > 0) M.col(j) *= cols[j] / s;
            else if (cols[j] > 0)
                throw InfeasibleMargins("rake_to_margins: column collapsed to zero");
        }
        if (sweeps_out) *sweeps_out = sweep;
        if (margin_error(M, rows, cols) <= tol) return M;
    }
    throw NoConvergence("rake_to_margins: margins not matched after " +
                        std::to_string(max_sweeps) + " sweeps");
}

} // namespace flowcast
