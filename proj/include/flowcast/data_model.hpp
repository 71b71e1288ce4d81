#pragma once

#include <map>
#include <string>
#include <vector>

namespace flowcast {

// Ordered set of voting options for one election.  "No vote" pools
// abstention with blank and invalid ballots.
struct OptionSet {
    std::vector<std::string> labels;
    int reference_index = -1; // reference option for logits

    OptionSet() = default;
    explicit OptionSet(std::vector<std::string> labels_, int ref = -1);

    int size() const { return static_cast<int>(labels.size()); }
    int index_of(const std::string& label) const; // -1 when absent
    bool has(const std::string& label) const { return index_of(label) >= 0; }
    void validate() const; // unique, non-empty, length >= 2, ref in range
    bool operator==(const OptionSet& o) const {
        return labels == o.labels && reference_index == o.reference_index;
    }
};

// Raw party label -> aggregated option label, one map per election.
// `loyalty` optionally overrides which destination counts as staying put
// for a given aggregated origin (used by the volatility module).
struct PartyAggregation {
    std::map<std::string, std::string> election1;
    std::map<std::string, std::string> election2;
    std::vector<std::string> order1; // optional output ordering
    std::vector<std::string> order2;
    std::map<std::string, std::string> loyalty;
};

PartyAggregation load_aggregation(const std::string& path);

// One polling station, both elections.
struct StationRecord {
    std::string station_id;
    std::string zone_id;
    long long electorate1 = 0;
    long long electorate2 = 0;
    std::vector<long long> counts1; // over origin options (n_si)
    std::vector<long long> counts2; // over destination options (y_sj)

    long long total1() const;
    long long total2() const;
};

// A full station file: the two option sets plus all records.
struct StationData {
    OptionSet options1;
    OptionSet options2;
    std::vector<StationRecord> records;
};

// All stations of one zone with exact margin totals.
struct ZoneTable {
    std::string zone_id;
    OptionSet options1;
    OptionSet options2;
    std::vector<StationRecord> stations;
    std::vector<long long> margins1; // station-wise origin sums (n_z per origin)
    std::vector<long long> margins2; // station-wise destination sums

    void recompute_margins();
};

enum class StationFormat { wide, long_form };

// Wide format is canonical: station_id,zone_id,electorate1,electorate2,
// then one `<label>_e1` column per origin option and one `<label>_e2`
// column per destination option.  Long format (behind the flag) is
// station_id,zone_id,election,electorate,option,count.
StationData load_stations(const std::string& path,
                          StationFormat format = StationFormat::wide);
void write_stations(const std::string& path, const StationData& data);

StationData aggregate_parties(const StationData& data, const PartyAggregation& agg);

// Groups records into zones ordered by first appearance.  Stations with a
// zero vote total in either election are dropped with a warning; zones
// below min_stations are rejected.
std::vector<ZoneTable> group_zones(const StationData& data,
                                   int min_stations = 10,
                                   std::vector<std::string>* warnings = nullptr);

enum class ReconcileMode { proportional_scale, reject };

// Scales each station's counts1 by electorate2/electorate1 (largest-remainder
// rounding keeps the scaled rows integer).  Stations whose electorates differ
// by more than 10% are flagged in `warnings`.
ZoneTable reconcile_electorates(const ZoneTable& z,
                                ReconcileMode mode = ReconcileMode::proportional_scale,
                                std::vector<std::string>* warnings = nullptr);

// Rounds x to integers summing to `target`, minimizing total absolute
// deviation from the exact values (largest-remainder method).
std::vector<long long> largest_remainder_round(const std::vector<double>& x,
                                               long long target);

} // namespace flowcast
