#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "flowcast/config.hpp"
#include "flowcast/report.hpp"

namespace flowcast {

// Ingestion + validation, shared by `validate` and `estimate`.
struct LoadedData {
    StationData raw;
    StationData aggregated;
    std::vector<ZoneTable> zones; // reconciled, ordered by first appearance
    PartyAggregation aggregation;
    std::vector<std::string> warnings;
};

LoadedData load_and_validate(const RunConfig& cfg);

struct ZoneOutputs {
    TransitionEstimate est;
    FitReport fit;
    FlowTable flows;
    Eigen::MatrixXd flow_se;
};

struct EstimateOutputs {
    std::vector<ZoneOutputs> zones; // converged zones, input order
    std::map<std::string, std::string> failures; // zone -> error message
    FlowTable region;
    std::vector<VolatilityRecord> volatility; // zones then REGION
    double volatility_r = 0.0;
    std::map<std::string, std::string> loyalty_map;
};

EstimateOutputs run_estimates(const LoadedData& data, const RunConfig& cfg, int jobs);

// Applies the configured recipe to the raw covariates file.
CovariateMatrix build_design(const CsvTable& raw, const nlohmann::json& recipe);

struct ModelOutputs {
    std::vector<ModelReport> reports;
    std::map<std::string, std::string> failures; // anchor -> error message
};

// Fits the configured anchor models from the estimate-stage artifacts.
ModelOutputs run_models(const RunConfig& cfg, int jobs, std::ostream& log);

// Subcommand driver: validate | estimate | covariates | model | report |
// simulate | pipeline.  Returns the process exit code (0 ok, 2 validation,
// 3 numeric failure); artifacts and a manifest land in cfg.out_dir.
int run_subcommand(const std::string& sub, const RunConfig& cfg, int jobs,
                   std::ostream& log);

} // namespace flowcast
