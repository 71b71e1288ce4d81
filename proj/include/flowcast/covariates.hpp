#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace flowcast {

// Provenance of one design-matrix column.
struct Transform {
    std::string op;                  // standardize | composite | residualize | dichotomize | dummy | raw
    std::vector<std::string> inputs; // source column names
    bool inverted = false;
    std::string conditioned_on;      // for residualize
    double ratio = 0.0;              // for dichotomize
    std::string describe() const;
};

// Zone x covariate design matrix.  Standardized columns have mean 0 and
// population variance 1; dichotomous and dummy columns stay on the 0/1 scale.
struct CovariateMatrix {
    std::vector<std::string> zone_ids;
    std::vector<std::string> names;
    Eigen::MatrixXd X; // Z x V
    std::vector<Transform> transforms;

    int cols() const { return static_cast<int>(names.size()); }
    int rows() const { return static_cast<int>(zone_ids.size()); }
    int find(const std::string& name) const; // -1 when absent
    void append(const std::string& name, const Eigen::VectorXd& col, Transform t);
};

// (x - mean)/sd with the population sd (divide by n); negated when invert is
// set so that higher always means greater disadvantage.
Eigen::VectorXd standardize(const Eigen::VectorXd& x, bool invert = false);

// Standardizes each component (with its inversion flag), averages them
// elementwise, then re-standardizes the average.
Eigen::VectorXd composite(const std::vector<Eigen::VectorXd>& xs,
                          const std::vector<bool>& invert_flags = {});

// Residuals of the simple regression of y on `on` (with intercept),
// re-standardized.  Both inputs must already be standardized.
Eigen::VectorXd residualize(const Eigen::VectorXd& y, const Eigen::VectorXd& on);

// 1 where votes_a > ratio * votes_b, else 0.
Eigen::VectorXd dichotomize_tradition(const Eigen::VectorXd& votes_a,
                                      const Eigen::VectorXd& votes_b,
                                      double ratio = 1.5);

struct CorrelationReport {
    Eigen::MatrixXd R;
    std::vector<std::pair<int, int>> flagged; // |r| above threshold
    double threshold = 0.7;
};

CorrelationReport correlation_report(const CovariateMatrix& M, double threshold = 0.7);

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// Appends unstandardized 0/1 indicators for the named zones.
CovariateMatrix add_zone_dummies(const CovariateMatrix& X,
                                 const std::vector<std::string>& zones);

} // namespace flowcast
