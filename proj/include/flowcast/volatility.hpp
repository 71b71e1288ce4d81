#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

#include "flowcast/ei.hpp"

namespace flowcast {

struct VolatilityRecord {
    std::string zone_id; // or "REGION"
    double party_switch_pct = 0.0;  // moved to a different party
    double to_abstention_pct = 0.0; // moved to "No vote"
    std::vector<std::pair<std::string, double>> loyalty_pct; // per party origin
};

// 100 * F_ij / row_total_i, unrounded.
Eigen::MatrixXd row_percentages(const FlowTable& F);

// Resolves which destination counts as "staying put" for each non-abstention
// origin: an explicit override wins, then an exact label match, then the
// positional diagonal.  Origins with no candidate are dropped (reported in
// the returned map by absence).
std::map<std::string, std::string> resolve_loyalty(
    const OptionSet& origins, const OptionSet& destinations,
    const std::string& abstention_label,
    const std::map<std::string, std::string>& overrides = {});

// Splits first-election party votes into loyal / switched-party / abstained.
// Denominators are all votes cast for parties in election 1 (abstention
// origins excluded).
VolatilityRecord volatility_indexes(
    const FlowTable& F, const std::string& abstention_label,
    const std::map<std::string, std::string>& loyalty_overrides = {});

// Elementwise sum of zone tables sharing the same option sets.
FlowTable aggregate_region(const std::vector<FlowTable>& tables);

// Pearson correlation of party_switch_pct vs to_abstention_pct across zones.
double volatility_correlation(const std::vector<VolatilityRecord>& records);

} // namespace flowcast
