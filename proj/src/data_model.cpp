#include "flowcast/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "flowcast/csv.hpp"
#include "flowcast/errors.hpp"

namespace flowcast {

namespace {

int default_reference(const std::vector<std::string>& labels) {
    for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == "No vote") return static_cast<int>(i);
    return static_cast<int>(labels.size()) - 1;
}

} // namespace

OptionSet::OptionSet(std::vector<std::string> labels_, int ref)
    : labels(std::move(labels_)), reference_index(ref) {
    if (reference_index < 0 && !labels.empty())
        reference_index = default_reference(labels);
}

int OptionSet::index_of(const std::string& label) const {
    for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == label) return static_cast<int>(i);
    return -1;
}

void OptionSet::validate() const {
    if (labels.size() < 2) throw DataError("option set needs at least 2 labels");
    std::set<std::string> seen;
    for (const auto& l : labels) {
        if (l.empty()) throw DataError("empty option label");
        if (!seen.insert(l).second) throw DataError("duplicate option label '" + l + "'");
    }
    if (reference_index < 0 || reference_index >= size())
        throw DataError("reference index out of range");
}

long long StationRecord::total1() const {
    return std::accumulate(counts1.begin(), counts1.end(), 0LL);
}

long long StationRecord::total2() const {
    return std::accumulate(counts2.begin(), counts2.end(), 0LL);
}

void ZoneTable::recompute_margins() {
    margins1.assign(options1.size(), 0);
    margins2.assign(options2.size(), 0);
    for (const auto& s : stations) {
        for (size_t i = 0; i < s.counts1.size(); ++i) margins1[i] += s.counts1[i];
        for (size_t j = 0; j < s.counts2.size(); ++j) margins2[j] += s.counts2[j];
    }
}

PartyAggregation load_aggregation(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
    if (!doc.is_object()) throw DataError(path + ": expected a JSON object");

    PartyAggregation agg;
    for (const auto& [key, value] : doc.items()) {
        if (key == "election1" || key == "election2") {
            auto& map = key == "election1" ? agg.election1 : agg.election2;
            if (!value.is_object()) throw DataError(path + ": '" + key + "' must be an object");
            for (const auto& [raw, target] : value.items())
                map[raw] = target.get<std::string>();
        } else if (key == "order1" || key == "order2") {
            auto& order = key == "order1" ? agg.order1 : agg.order2;
            for (const auto& v : value) order.push_back(v.get<std::string>());
        } else if (key == "loyalty") {
            for (const auto& [origin, dest] : value.items())
                agg.loyalty[origin] = dest.get<std::string>();
        } else {
            throw DataError(path + ": unknown key '" + key + "'");
        }
    }
    if (agg.election1.empty() || agg.election2.empty())
        throw DataError(path + ": election1 and election2 maps are required");
    return agg;
}

namespace {

constexpr const char* kSuffix1 = "_e1";
constexpr const char* kSuffix2 = "_e2";

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() > suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void validate_record(const StationRecord& r, int row) {
    std::string ctx = "row " + std::to_string(row) + " (station " + r.station_id + ")";
    if (r.total1() > r.electorate1)
        throw InvalidCount(ctx + ": election-1 counts exceed electorate");
    if (r.total2() > r.electorate2)
        throw InvalidCount(ctx + ": election-2 counts exceed electorate");
}

StationData load_wide(const CsvTable& t) {
    StationData data;
    int c_station = t.require("station_id");
    int c_zone = t.require("zone_id");
    int c_e1 = t.require("electorate1");
    int c_e2 = t.require("electorate2");

    std::vector<int> cols1, cols2;
    std::vector<std::string> labels1, labels2;
    for (size_t c = 0; c < t.header.size(); ++c) {
        const std::string& h = t.header[c];
        if (ends_with(h, kSuffix1)) {
            labels1.push_back(h.substr(0, h.size() - 3));
            cols1.push_back(static_cast<int>(c));
        } else if (ends_with(h, kSuffix2)) {
            labels2.push_back(h.substr(0, h.size() - 3));
            cols2.push_back(static_cast<int>(c));
        }
    }
    if (cols1.empty()) throw MissingColumn("no '*_e1' option columns");
    if (cols2.empty()) throw MissingColumn("no '*_e2' option columns");
    data.options1 = OptionSet(labels1);
    data.options2 = OptionSet(labels2);

    std::set<std::string> seen;
    int row = 0;
    for (const auto& r : t.rows) {
        ++row;
        if (r.size() != t.header.size())
            throw DataError("row " + std::to_string(row) + ": wrong field count");
        StationRecord rec;
        rec.station_id = r[c_station];
        rec.zone_id = r[c_zone];
        if (!seen.insert(rec.station_id).second)
            throw DuplicateStation("row " + std::to_string(row) + ": duplicate station '" +
                                   rec.station_id + "'");
        std::string ctx = "row " + std::to_string(row);
        rec.electorate1 = parse_count(r[c_e1], ctx + " electorate1");
        rec.electorate2 = parse_count(r[c_e2], ctx + " electorate2");
        for (int c : cols1) rec.counts1.push_back(parse_count(r[c], ctx));
        for (int c : cols2) rec.counts2.push_back(parse_count(r[c], ctx));
        validate_record(rec, row);
        data.records.push_back(std::move(rec));
    }
    return data;
}

StationData load_long(const CsvTable& t) {
    int c_station = t.require("station_id");
    int c_zone = t.require("zone_id");
    int c_election = t.require("election");
    int c_electorate = t.require("electorate");
    int c_option = t.require("option");
    int c_count = t.require("count");

    std::vector<std::string> labels1, labels2;
    std::vector<std::string> order; // station first appearance
    struct Cell { long long count; int row; };
    std::map<std::string, std::map<std::pair<int, std::string>, Cell>> cells;
    std::map<std::string, std::string> zones;
    std::map<std::pair<std::string, int>, long long> electorates;

    int row = 0;
    for (const auto& r : t.rows) {
        ++row;
        if (r.size() != t.header.size())
            throw DataError("row " + std::to_string(row) + ": wrong field count");
        std::string ctx = "row " + std::to_string(row);
        const std::string& sid = r[c_station];
        int election = static_cast<int>(parse_count(r[c_election], ctx + " election"));
        if (election != 1 && election != 2)
            throw DataError(ctx + ": election must be 1 or 2");
        const std::string& label = r[c_option];
        auto& bank = election == 1 ? labels1 : labels2;
        if (std::find(bank.begin(), bank.end(), label) == bank.end()) bank.push_back(label);
        if (!cells.count(sid)) order.push_back(sid);
        auto key = std::make_pair(election, label);
        if (cells[sid].count(key))
            throw DuplicateStation(ctx + ": duplicate cell for station '" + sid + "'");
        cells[sid][key] = {parse_count(r[c_count], ctx), row};
        auto it = zones.find(sid);
        if (it == zones.end()) zones[sid] = r[c_zone];
        else if (it->second != r[c_zone])
            throw DataError(ctx + ": station '" + sid + "' listed in two zones");
        long long e = parse_count(r[c_electorate], ctx + " electorate");
        auto ekey = std::make_pair(sid, election);
        auto eit = electorates.find(ekey);
        if (eit == electorates.end()) electorates[ekey] = e;
        else if (eit->second != e)
            throw DataError(ctx + ": inconsistent electorate for station '" + sid + "'");
    }
    if (labels1.empty() || labels2.empty())
        throw MissingColumn("long input lacks rows for one of the elections");

    StationData data;
    data.options1 = OptionSet(labels1);
    data.options2 = OptionSet(labels2);
    int out_row = 0;
    for (const auto& sid : order) {
        ++out_row;
        StationRecord rec;
        rec.station_id = sid;
        rec.zone_id = zones[sid];
        rec.electorate1 = electorates.count({sid, 1}) ? electorates[{sid, 1}] : 0;
        rec.electorate2 = electorates.count({sid, 2}) ? electorates[{sid, 2}] : 0;
        const auto& c = cells[sid];
        for (const auto& l : labels1) {
            auto it = c.find({1, l});
            rec.counts1.push_back(it == c.end() ? 0 : it->second.count);
        }
        for (const auto& l : labels2) {
            auto it = c.find({2, l});
            rec.counts2.push_back(it == c.end() ? 0 : it->second.count);
        }
        validate_record(rec, out_row);
        data.records.push_back(std::move(rec));
    }
    return data;
}

} // namespace

StationData load_stations(const std::string& path, StationFormat format) {
    CsvTable t = read_csv_file(path);
    if (t.header.empty()) throw DataError(path + ": empty file");
    try {
        return format == StationFormat::wide ? load_wide(t) : load_long(t);
    } catch (DataError& e) {
        throw; // already carries row context
    }
}

void write_stations(const std::string& path, const StationData& data) {
    CsvTable t;
    t.header = {"station_id", "zone_id", "electorate1", "electorate2"};
    for (const auto& l : data.options1.labels) t.header.push_back(l + kSuffix1);
    for (const auto& l : data.options2.labels) t.header.push_back(l + kSuffix2);
    for (const auto& r : data.records) {
        std::vector<std::string> row = {r.station_id, r.zone_id,
                                        std::to_string(r.electorate1),
                                        std::to_string(r.electorate2)};
        for (long long c : r.counts1) row.push_back(std::to_string(c));
        for (long long c : r.counts2) row.push_back(std::to_string(c));
        t.rows.push_back(std::move(row));
    }
    write_csv_file(path, t);
}

namespace {

// Maps a raw option set through one election's label map; returns the merged
// set and per-raw-index target indexes.
std::pair<OptionSet, std::vector<int>> map_options(
    const OptionSet& raw, const std::map<std::string, std::string>& map,
    const std::vector<std::string>& order, const std::string& which) {
    std::vector<std::string> labels;
    for (const auto& l : raw.labels) {
        auto it = map.find(l);
        if (it == map.end())
            throw UnmappedLabel(which + ": raw label '" + l + "' has no mapping");
        if (std::find(labels.begin(), labels.end(), it->second) == labels.end())
            labels.push_back(it->second);
    }
    if (!order.empty()) {
        std::set<std::string> have(labels.begin(), labels.end());
        std::set<std::string> want(order.begin(), order.end());
        if (have != want)
            throw DataError(which + ": explicit order does not match mapped labels");
        labels = order;
    }
    OptionSet merged(labels);
    std::vector<int> target(raw.size());
    for (int i = 0; i < raw.size(); ++i)
        target[i] = merged.index_of(map.at(raw.labels[i]));
    return {merged, target};
}

} // namespace

StationData aggregate_parties(const StationData& data, const PartyAggregation& agg) {
    auto [opts1, t1] = map_options(data.options1, agg.election1, agg.order1, "election1");
    auto [opts2, t2] = map_options(data.options2, agg.election2, agg.order2, "election2");
    StationData out;
    out.options1 = opts1;
    out.options2 = opts2;
    out.records.reserve(data.records.size());
    for (const auto& r : data.records) {
        StationRecord rec;
        rec.station_id = r.station_id;
        rec.zone_id = r.zone_id;
        rec.electorate1 = r.electorate1;
        rec.electorate2 = r.electorate2;
        rec.counts1.assign(opts1.size(), 0);
        rec.counts2.assign(opts2.size(), 0);
        for (size_t i = 0; i < r.counts1.size(); ++i) rec.counts1[t1[i]] += r.counts1[i];
        for (size_t j = 0; j < r.counts2.size(); ++j) rec.counts2[t2[j]] += r.counts2[j];
        out.records.push_back(std::move(rec));
    }
    return out;
}

std::vector<ZoneTable> group_zones(const StationData& data, int min_stations,
                                   std::vector<std::string>* warnings) {
    std::vector<std::string> order;
    std::map<std::string, ZoneTable> zones;
    for (const auto& r : data.records) {
        if (r.total1() == 0 || r.total2() == 0) {
            if (warnings)
                warnings->push_back("station " + r.station_id +
                                    " dropped: zero votes in one election");
            continue;
        }
        auto it = zones.find(r.zone_id);
        if (it == zones.end()) {
            order.push_back(r.zone_id);
            ZoneTable z;
            z.zone_id = r.zone_id;
            z.options1 = data.options1;
            z.options2 = data.options2;
            it = zones.emplace(r.zone_id, std::move(z)).first;
        }
        it->second.stations.push_back(r);
    }
    std::vector<ZoneTable> out;
    out.reserve(order.size());
    for (const auto& id : order) {
        ZoneTable& z = zones[id];
        if (static_cast<int>(z.stations.size()) < min_stations)
            throw MinStations("zone " + id + " has " + std::to_string(z.stations.size()) +
                              " usable stations, minimum is " + std::to_string(min_stations));
        z.recompute_margins();
        out.push_back(std::move(z));
    }
    return out;
}

std::vector<long long> largest_remainder_round(const std::vector<double>& x,
                                               long long target) {
    size_t n = x.size();
    std::vector<long long> base(n);
    std::vector<double> rem(n);
    long long sum = 0;
    for (size_t i = 0; i < n; ++i) {
        if (!(x[i] >= 0) || !std::isfinite(x[i]))
            throw InvalidCount("largest_remainder_round: bad value");
        base[i] = static_cast<long long>(std::floor(x[i]));
        rem[i] = x[i] - static_cast<double>(base[i]);
        sum += base[i];
    }
    long long deficit = target - sum;
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (deficit >= 0) {
        std::stable_sort(idx.begin(), idx.end(),
                         [&rem](size_t a, size_t b) { return rem[a] > rem[b]; });
        for (long long k = 0; k < deficit; ++k) base[idx[k % n]] += 1;
    } else {
        std::stable_sort(idx.begin(), idx.end(),
                         [&rem](size_t a, size_t b) { return rem[a] < rem[b]; });
        long long need = -deficit;
        while (need > 0) {
            bool any = false;
            for (size_t k = 0; k < n && need > 0; ++k) {
                if (base[idx[k]] > 0) {
                    base[idx[k]] -= 1;
                    --need;
                    any = true;
                }
            }
            if (!any) throw InvalidCount("largest_remainder_round: target unreachable");
        }
    }
    return base;
}

ZoneTable reconcile_electorates(const ZoneTable& z, ReconcileMode mode,
                                std::vector<std::string>* warnings) {
    ZoneTable out = z;
    bool changed = false;
    for (auto& s : out.stations) {
        if (s.electorate1 == s.electorate2) continue;
        if (mode == ReconcileMode::reject)
            throw DataError("station " + s.station_id + ": electorates differ (" +
                            std::to_string(s.electorate1) + " vs " +
                            std::to_string(s.electorate2) + ")");
        if (s.electorate1 == 0)
            throw ZeroElectorate("station " + s.station_id + ": electorate1 is zero");
        if (s.electorate2 == 0)
            throw ZeroElectorate("station " + s.station_id + ": electorate2 is zero");
        double scale = static_cast<double>(s.electorate2) / static_cast<double>(s.electorate1);
        if (warnings && 10 * std::llabs(s.electorate2 - s.electorate1) > s.electorate1)
            warnings->push_back("station " + s.station_id + ": electorate changed by " +
                                format_double(100.0 * (scale - 1.0), 3) + "%");
        std::vector<double> exact(s.counts1.size());
        for (size_t i = 0; i < s.counts1.size(); ++i)
            exact[i] = static_cast<double>(s.counts1[i]) * scale;
        long long tgt = std::llround(static_cast<double>(s.total1()) * scale);
        s.counts1 = largest_remainder_round(exact, tgt);
        s.electorate1 = s.electorate2;
        changed = true;
    }
    if (changed) out.recompute_margins();
    return out;
}

} // namespace flowcast
