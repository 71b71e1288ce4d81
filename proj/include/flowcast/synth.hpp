#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowcast/covariates.hpp"
#include "flowcast/data_model.hpp"
#include "flowcast/mnl.hpp"

namespace flowcast {

struct OutlierSpec {
    std::string zone_id;
    std::string origin;
    std::string destination;
    double bump = 0.0;
};

// Ground-truth generator for two-election station data.  Zone transition
// logits are beta0 plus driver effects (or explicit true_P); stations draw
// origin counts from a Dirichlet-multinomial around the zone origin shares
// and every origin voter transitions by the zone's true row, so behavior is
// homogeneous within each zone.
struct SynthSpec {
    std::uint64_t seed = 20220612;
    int zones = 19;
    int stations_per_zone = 53;
    double voters_per_station = 700.0;
    double electorate_spread = 0.2; // lognormal sigma of station sizes

    OptionSet options1; // aggregated analysis options; defaults applied when empty
    OptionSet options2;
    std::string abstention_label = "No vote";

    // Zone-level origin distribution and its spread.
    Eigen::VectorXd origin_shares;       // length I; default is a persistence-heavy mix
    double origin_jitter_sd = 0.12;      // zone-level logit jitter
    double dirichlet_concentration = 12; // station-level Dirichlet-multinomial spread

    // Transition ground truth: explicit P (size 1 = shared, size zones = per
    // zone) wins over the logit model below.
    std::vector<Eigen::MatrixXd> true_P;
    Eigen::MatrixXd beta0; // I x (J-1) baseline logits
    std::vector<std::pair<std::string, Eigen::MatrixXd>> effects; // driver -> I x (J-1)

    // Hidden volatility drivers: zone propensities to switch party vs to
    // abstain, planted with this correlation.
    double switch_abst_r = -0.42;
    double switch_scale = 0.35;
    double abst_scale = 0.35;

    // Planted covariate structure.
    double geog_recovery_r = -0.75;
    double rural_periph_r = 0.55;

    std::vector<OutlierSpec> outliers;

    // Correlates station loyalty with prior strength to demonstrate the
    // ecological-fallacy bias; excluded from acceptance checks.
    bool heterogeneity_stress = false;
    double stress_scale = 0.0;

    // When set, station counts are written under raw pre-aggregation labels
    // split per zone, and this mapping reconstructs the analysis options.
    bool raw_labels = false;
    PartyAggregation aggregation;

    // Fully configured Umbria-like default (raw labels, covariate recipe
    // drivers, planted correlations).
    static SynthSpec defaults(std::uint64_t seed = 20220612);

    void validate() const; // throws InvalidSpec
};

struct SynthOutput {
    StationData stations;   // as written to stations.csv
    CovariateMatrix raw_covariates; // raw-scale columns, zone rows
    nlohmann::json truth;
    std::vector<Eigen::MatrixXd> zone_P; // resolved per-zone truth
    std::vector<std::string> zone_ids;
};

SynthOutput generate(const SynthSpec& spec);

SynthSpec plant_outlier(SynthSpec spec, const std::string& zone,
                        const std::string& origin, const std::string& destination,
                        double bump);

void write_synth(const SynthOutput& out, const std::string& stations_path,
                 const std::string& covariates_path, const std::string& truth_path);

// Direct zone-level panel generator for the covariate-model tests: counts are
// multinomial draws from the logit model itself, no stations involved.
struct PanelSpec {
    std::uint64_t seed = 1;
    int zones = 19;
    int options = 4;     // reference is the last
    int covariates = 3;
    double total_mean = 20000; // per-zone counts
    Eigen::VectorXd beta0;     // K, reference 0; default mild spread
    Eigen::MatrixXd beta;      // K x V true coefficients (exact zeros allowed)
};

struct PanelTruth {
    TransitionCountPanel panel;
    CovariateMatrix X;
    Eigen::VectorXd beta0;
    Eigen::MatrixXd beta;
    Mask mask; // nonzero pattern of true beta
};

PanelTruth generate_panel(const PanelSpec& spec);

} // namespace flowcast
