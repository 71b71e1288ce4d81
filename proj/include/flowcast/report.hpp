#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowcast/covariates.hpp"
#include "flowcast/csv.hpp"
#include "flowcast/ei.hpp"
#include "flowcast/mnl.hpp"
#include "flowcast/volatility.hpp"

namespace flowcast {

// Origin x destination counts, optionally rescaled (e.g. 1e-3 for thousands).
CsvTable flow_counts_csv(const FlowTable& F, double scale = 1.0, int decimals = 1);
// Row percentages, one decimal.
CsvTable flow_percent_csv(const FlowTable& F);

// One fitted covariate model plus everything the reports need.
struct ModelReport {
    std::string anchor;
    Direction direction = Direction::outgoing;
    MnlModel model;
    Eigen::MatrixXd marginal; // K x V
    SignificanceFlags flags;
    ResidualDiagnostics residuals;
    // optional re-estimation with dummies for flagged zones
    bool refit_with_dummies = false;
    std::vector<std::string> dummy_zones;
    MnlModel dummy_model;
    ResidualDiagnostics dummy_residuals;
};

// Marginal effects (x100) with significance marks, one block per model:
// ** strong (p < 0.01), * weak (p < 0.08), unflagged cells print 0.
std::string render_table3(const std::vector<ModelReport>& models);
// Coefficient blocks: a b-row and a z-row per destination option.
std::string render_tableC1(const std::vector<ModelReport>& models);

nlohmann::json estimate_json(const TransitionEstimate& est, const FitReport& fit);
nlohmann::json model_report_json(const ModelReport& r);
nlohmann::json transforms_json(const CovariateMatrix& M);

std::string svg_heatmap(const FlowTable& F, const std::string& title);
std::string svg_volatility(const std::vector<VolatilityRecord>& records);

} // namespace flowcast
