#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowcast/data_model.hpp"
#include "flowcast/ei.hpp"
#include "flowcast/mnl.hpp"
#include "flowcast/synth.hpp"

namespace flowcast {

struct AnchorSpec {
    std::string option;
    Direction direction = Direction::outgoing;
};

// One JSON config drives every subcommand.  Paths are resolved against the
// config file's directory; unknown keys are rejected.
struct RunConfig {
    std::string config_dir;

    // inputs
    std::string stations_path;
    std::string covariates_path;
    std::string aggregation_path;
    StationFormat format = StationFormat::wide;

    // data
    int min_stations = 10;
    ReconcileMode reconcile = ReconcileMode::proportional_scale;
    std::string abstention_label = "No vote";

    EiConfig ei;

    nlohmann::json covariate_recipe = nlohmann::json::array();

    // models
    std::vector<AnchorSpec> anchors;
    std::vector<double> stepwise_schedule{0.5, 1.0};
    double strong_p = 0.01;
    double weak_p = 0.08;
    double marginal_step = 1e-5;
    MnlConfig mnl;
    bool auto_dummies = true;
    int max_dummy_zones = 3; // cap on automatic dummy re-estimation
    double outlier_cutoff = 2.0;

    std::string out_dir = "out";
    int jobs = 0;

    // simulate
    bool has_simulate = false;
    SynthSpec synth;
    std::string sim_stations_out;
    std::string sim_covariates_out;
    std::string sim_truth_out;
};

RunConfig load_config(const std::string& path);
RunConfig parse_config(const nlohmann::json& doc, const std::string& config_dir);

// Precedence: --jobs flag, then FLOWCAST_JOBS, then the config value, then
// hardware concurrency.
int resolve_jobs(int cli_jobs, const RunConfig& cfg);

} // namespace flowcast
