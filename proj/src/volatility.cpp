#include "flowcast/volatility.hpp"

#include <cmath>

#include "flowcast/errors.hpp"

namespace flowcast {

Eigen::MatrixXd row_percentages(const FlowTable& F) {
    Eigen::MatrixXd out(F.F.rows(), F.F.cols());
    for (int i = 0; i < F.F.rows(); ++i) {
        double total = F.F.row(i).sum();
        if (!(total > 0))
            throw ZeroRowTotal("row " + F.options1.labels[i] + " has no votes");
        out.row(i) = 100.0 * F.F.row(i) / total;
    }
    return out;
}

std::map<std::string, std::string> resolve_loyalty(
    const OptionSet& origins, const OptionSet& destinations,
    const std::string& abstention_label,
    const std::map<std::string, std::string>& overrides) {
    for (const auto& [from, to] : overrides) {
        if (origins.index_of(from) < 0)
            throw UnmappedLabel("loyalty override for unknown origin " + from);
        if (destinations.index_of(to) < 0)
            throw UnmappedLabel("loyalty override to unknown destination " + to);
    }
    std::map<std::string, std::string> loyal;
    for (int i = 0; i < origins.size(); ++i) {
        const std::string& label = origins.labels[i];
        if (label == abstention_label) continue;
        auto ov = overrides.find(label);
        if (ov != overrides.end()) {
            loyal[label] = ov->second;
            continue;
        }
        if (destinations.index_of(label) >= 0) {
            loyal[label] = label;
            continue;
        }
        if (i < destinations.size() && destinations.labels[i] != abstention_label)
            loyal[label] = destinations.labels[i];
        // otherwise the origin has no staying-put cell and is left out
    }
    return loyal;
}

VolatilityRecord volatility_indexes(
    const FlowTable& F, const std::string& abstention_label,
    const std::map<std::string, std::string>& loyalty_overrides) {
    int abst_row = F.options1.index_of(abstention_label);
    int abst_col = F.options2.index_of(abstention_label);
    if (abst_row < 0 || abst_col < 0)
        throw MissingAbstention("abstention option \"" + abstention_label +
                                "\" must appear in both elections");
    auto loyal =
        resolve_loyalty(F.options1, F.options2, abstention_label, loyalty_overrides);

    VolatilityRecord rec;
    rec.zone_id = F.zone_id;
    double party_votes = 0, switched = 0, abstained = 0;
    for (int i = 0; i < F.options1.size(); ++i) {
        if (i == abst_row) continue;
        double row_total = F.F.row(i).sum();
        if (!(row_total > 0))
            throw ZeroRowTotal("origin " + F.options1.labels[i] + " has no votes");
        double to_abst = F.F(i, abst_col);
        double stayed = 0;
        auto it = loyal.find(F.options1.labels[i]);
        if (it != loyal.end()) stayed = F.F(i, F.options2.index_of(it->second));
        party_votes += row_total;
        abstained += to_abst;
        switched += row_total - stayed - to_abst;
        rec.loyalty_pct.emplace_back(F.options1.labels[i], 100.0 * stayed / row_total);
    }
    if (!(party_votes > 0)) throw ZeroDenominator("no party votes in election 1");
    rec.party_switch_pct = 100.0 * switched / party_votes;
    rec.to_abstention_pct = 100.0 * abstained / party_votes;
    return rec;
}

FlowTable aggregate_region(const std::vector<FlowTable>& tables) {
    if (tables.empty()) throw DataError("nothing to aggregate");
    FlowTable out;
    out.zone_id = "REGION";
    out.options1 = tables.front().options1;
    out.options2 = tables.front().options2;
    out.F = Eigen::MatrixXd::Zero(out.options1.size(), out.options2.size());
    for (const auto& t : tables) {
        if (t.options1.labels != out.options1.labels ||
            t.options2.labels != out.options2.labels)
            throw OptionMismatch("zone " + t.zone_id +
                                 ": option sets differ across zones");
        if (t.F.rows() != out.F.rows() || t.F.cols() != out.F.cols())
            throw DimensionMismatch("zone " + t.zone_id + ": flow table shape");
        out.F += t.F;
    }
    out.row_margins = out.F.rowwise().sum();
    out.col_margins = out.F.colwise().sum().transpose();
    return out;
}

double volatility_correlation(const std::vector<VolatilityRecord>& records) {
    const int n = static_cast<int>(records.size());
    if (n < 3) throw DataError("volatility correlation needs at least 3 zones");
    Eigen::VectorXd a(n), b(n);
    for (int i = 0; i < n; ++i) {
        a[i] = records[i].party_switch_pct;
        b[i] = records[i].to_abstention_pct;
    }
    double va = (a.array() - a.mean()).square().sum();
    double vb = (b.array() - b.mean()).square().sum();
    if (!(va > 0)) throw ZeroVariance("party_switch_pct is constant across zones");
    if (!(vb > 0)) throw ZeroVariance("to_abstention_pct is constant across zones");
    double cov = ((a.array() - a.mean()) * (b.array() - b.mean())).sum();
    return cov / std::sqrt(va * vb);
}

} // namespace flowcast
