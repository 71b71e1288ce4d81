#include "flowcast/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <utility>

#include "flowcast/csv.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/volatility.hpp"

namespace flowcast {

namespace {

std::string zone_name(int z) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "Z%02d", z + 1);
    return buf;
}

std::string station_name(const std::string& zone, int s) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "-S%02d", s + 1);
    return zone + buf;
}

// Mutually orthogonal columns with zero mean and unit population variance.
// Exact orthogonality is what lets the planted correlations come out exact
// rather than approximate.
Eigen::MatrixXd orthonormal_latents(Rng& rng, int Z, int count) {
    if (count + 1 > Z)
        throw InvalidSpec("zone count too small for the planted covariate structure");
    Eigen::MatrixXd E(Z, count);
    for (int c = 0; c < count; ++c) {
        for (int attempt = 0;; ++attempt) {
            if (attempt > 200)
                throw InvalidSpec("failed to draw independent zone latents");
            Eigen::VectorXd v(Z);
            for (int z = 0; z < Z; ++z) v(z) = rng.normal();
            v.array() -= v.mean();
            for (int p = 0; p < c; ++p)
                v -= (E.col(p).dot(v) / E.col(p).squaredNorm()) * E.col(p);
            double n2 = v.squaredNorm();
            if (n2 < 1e-8 * Z) continue;
            E.col(c) = v * std::sqrt(static_cast<double>(Z) / n2);
            break;
        }
    }
    return E;
}

// Engineered zone covariates: the raw columns written to covariates.csv plus
// the standardized driver columns the transition logits actually use.  The
// raw columns are affine images of the drivers, so re-running the covariate
// recipe (standardize / composite / dichotomize) reproduces the drivers
// exactly and the planted correlations survive untouched.
struct DriverBank {
    std::vector<std::string> names; // driver names usable in SynthSpec::effects
    Eigen::MatrixXd D;              // Z x names, standardized (lefttrad stays 0/1)
    CovariateMatrix raw;
};

DriverBank build_drivers(const SynthSpec& s, const std::vector<std::string>& zone_ids,
                         Rng& rng) {
    const int Z = s.zones;
    Eigen::MatrixXd E = orthonormal_latents(rng, Z, 15);
    auto rmix = [](double r) { return std::sqrt(1.0 - r * r); };

    const Eigen::VectorXd g = E.col(0);
    double ar = std::sqrt((1.0 + s.rural_periph_r) / 2.0);
    double br = std::sqrt((1.0 - s.rural_periph_r) / 2.0);
    Eigen::VectorXd rural = ar * g + br * E.col(1);
    Eigen::VectorXd periph = ar * g - br * E.col(1);

    Eigen::VectorXd recovery = s.geog_recovery_r * g + rmix(s.geog_recovery_r) * E.col(2);
    Eigen::VectorXd unemp = 0.55 * g + rmix(0.55) * E.col(3);
    Eigen::VectorXd lowincome = 0.50 * g + rmix(0.50) * E.col(4);
    Eigen::VectorXd loweduc = 0.45 * g + rmix(0.45) * E.col(5);
    Eigen::VectorXd lowskill = 0.40 * g + rmix(0.40) * E.col(6);
    Eigen::VectorXd ksoc = 0.60 * g + 0.80 * E.col(7);
    // mirrored indicator pairs so the inverted composite equals ksoc exactly
    double ck = std::sqrt(0.72), dk = std::sqrt(0.28);
    Eigen::VectorXd k1 = ck * ksoc + dk * E.col(8);
    Eigen::VectorXd k2 = ck * ksoc - dk * E.col(8);
    Eigen::VectorXd k3 = ck * ksoc + dk * E.col(9);
    Eigen::VectorXd k4 = ck * ksoc - dk * E.col(9);
    Eigen::VectorXd euro = 0.35 * g + rmix(0.35) * E.col(10);
    Eigen::VectorXd leftlat = -0.40 * g + rmix(-0.40) * E.col(11);

    CovariateMatrix raw;
    raw.zone_ids = zone_ids;
    auto add_raw = [&raw](const std::string& name, const Eigen::VectorXd& col) {
        Transform t;
        t.op = "raw";
        t.inputs = {name};
        raw.append(name, col, t);
    };
    add_raw("rural_share", (41.0 + 17.0 * rural.array()).matrix());
    add_raw("periph_index", (55.0 + 15.0 * periph.array()).matrix());
    add_raw("recovery_idx", (100.0 + 12.0 * recovery.array()).matrix());
    add_raw("unemp_rate", (9.5 + 2.8 * unemp.array()).matrix());
    add_raw("income_mean", (21500.0 - 2400.0 * lowincome.array()).matrix());
    add_raw("educ_diploma", (54.0 - 8.0 * loweduc.array()).matrix());
    add_raw("skill_share", (31.0 - 6.0 * lowskill.array()).matrix());
    add_raw("assoc_density", (8.5 - 2.1 * k1.array()).matrix());
    add_raw("volunteer_rate", (12.0 - 3.0 * k2.array()).matrix());
    add_raw("turnout_local", (62.0 - 7.0 * k3.array()).matrix());
    add_raw("library_loans", (3.4 - 1.1 * k4.array()).matrix());
    add_raw("antieu_share", (24.0 + 6.0 * euro.array()).matrix());
    add_raw("pci1987", (3700.0 + 1000.0 * leftlat.array()).matrix());
    add_raw("dc1987", (2450.0 + 160.0 * E.col(12).array()).matrix());

    Eigen::VectorXd lefttrad = dichotomize_tradition(
        raw.X.col(raw.find("pci1987")), raw.X.col(raw.find("dc1987")), 1.5);

    DriverBank bank;
    bank.raw = std::move(raw);
    bank.names = {"geog",     "recovery", "unemp", "lowincome", "loweduc",
                  "lowskill", "ksoc",     "euro",  "lefttrad",  "switch",
                  "abstain"};
    bank.D.resize(Z, static_cast<int>(bank.names.size()));
    bank.D.col(0) = g;
    bank.D.col(1) = recovery;
    bank.D.col(2) = unemp;
    bank.D.col(3) = lowincome;
    bank.D.col(4) = loweduc;
    bank.D.col(5) = lowskill;
    bank.D.col(6) = ksoc;
    bank.D.col(7) = euro;
    bank.D.col(8) = lefttrad;
    bank.D.col(9) = E.col(13);
    bank.D.col(10) = s.switch_abst_r * E.col(13) + rmix(s.switch_abst_r) * E.col(14);
    return bank;
}

// Baseline destination shares per origin for the default spec; rows are the
// five default origins, columns the six default destinations.
const double kBaseShares[5][6] = {
    {0.385, 0.044, 0.028, 0.127, 0.123, 0.293},
    {0.047, 0.581, 0.083, 0.057, 0.033, 0.199},
    {0.004, 0.004, 0.159, 0.303, 0.394, 0.136},
    {0.007, 0.002, 0.005, 0.603, 0.222, 0.161},
    {0.062, 0.029, 0.034, 0.076, 0.044, 0.755},
};

Eigen::MatrixXd default_beta0() {
    Eigen::MatrixXd b(5, 5);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j)
            b(i, j) = std::log(kBaseShares[i][j] / kBaseShares[i][5]);
    return b;
}

std::vector<std::pair<std::string, Eigen::MatrixXd>> default_effects() {
    auto zero = [] { return Eigen::MatrixXd::Zero(5, 5).eval(); };
    std::vector<std::pair<std::string, Eigen::MatrixXd>> fx;

    Eigen::MatrixXd m = zero(); // recovery: protects Lega, slows the FdI drift
    m.row(3).array() += 0.30;
    m(3, 3) -= 0.45;
    m(0, 3) = -0.20;
    m(4, 3) = -0.30;
    fx.emplace_back("recovery", m);

    m = zero(); // geog: rural PD electorate drifts to abstention
    m.row(1).array() -= 0.25;
    fx.emplace_back("geog", m);

    m = zero();
    m(4, 3) = -0.20;
    fx.emplace_back("unemp", m);

    m = zero();
    m(3, 3) = 0.30;
    fx.emplace_back("lowincome", m);

    m = zero(); // low education: shields Lega from FdI, pushes FI to abstain
    m(3, 3) = -0.35;
    m.row(2).array() -= 0.30;
    fx.emplace_back("loweduc", m);

    m = zero();
    m(2, 2) = 0.15;
    fx.emplace_back("lowskill", m);

    m = zero(); // weak social capital feeds the M5S/FI -> FdI flow
    m(0, 3) = 0.35;
    m(2, 3) = 0.20;
    fx.emplace_back("ksoc", m);

    m = zero();
    m(0, 3) = 0.40;
    fx.emplace_back("euro", m);

    m = zero(); // left tradition holds PD turnout and blocks M5S -> FdI
    m(0, 3) = -0.50;
    m.row(1).array() += 0.30;
    fx.emplace_back("lefttrad", m);

    return fx;
}

PartyAggregation default_aggregation() {
    PartyAggregation agg;
    // order1/order2 are the aggregated output orders used by aggregate_parties
    agg.order1 = {"M5S", "PD", "FI", "Lega", "No vote"};
    agg.election1 = {{"M5S", "M5S"},   {"PD", "PD"},     {"LeU", "PD"},
                     {"FI", "FI"},     {"Lega", "Lega"}, {"No vote", "No vote"}};
    agg.order2 = {"M5S-OL", "PD", "OCL", "FdI", "Lega-FI-OCR", "No vote"};
    agg.election2 = {{"M5S", "M5S-OL"},        {"OL", "M5S-OL"},
                     {"PD", "PD"},             {"Az-IV", "OCL"},
                     {"EV-SI", "OCL"},         {"FdI", "FdI"},
                     {"Lega", "Lega-FI-OCR"},  {"FI", "Lega-FI-OCR"},
                     {"NM", "Lega-FI-OCR"},    {"No vote", "No vote"}};
    return agg;
}

// Fills in every defaulted field so generate() works from a fully explicit
// spec.  Custom option sets keep user-provided truth untouched.
SynthSpec resolved(const SynthSpec& in) {
    SynthSpec s = in;
    bool e1 = s.options1.labels.empty(), e2 = s.options2.labels.empty();
    if (e1 != e2)
        throw InvalidSpec("options1 and options2 must be given together");
    bool default_labels = false;
    if (e1) {
        s.options1 = OptionSet({"M5S", "PD", "FI", "Lega", "No vote"}, 4);
        s.options2 = OptionSet(
            {"M5S-OL", "PD", "OCL", "FdI", "Lega-FI-OCR", "No vote"}, 5);
        default_labels = true;
    }
    if (s.options1.reference_index < 0)
        s.options1.reference_index = s.options1.index_of(s.abstention_label);
    if (s.options2.reference_index < 0)
        s.options2.reference_index = s.options2.index_of(s.abstention_label);
    const int I = s.options1.size(), J = s.options2.size();
    if (s.origin_shares.size() == 0) {
        if (default_labels) {
            s.origin_shares.resize(5);
            s.origin_shares << 0.224, 0.206, 0.098, 0.169, 0.303;
        } else {
            s.origin_shares = Eigen::VectorXd::Constant(I, 1.0 / I);
        }
    }
    if (s.true_P.empty() && s.beta0.size() == 0) {
        if (default_labels) {
            s.beta0 = default_beta0();
            if (s.effects.empty()) s.effects = default_effects();
        } else {
            s.beta0 = Eigen::MatrixXd::Zero(I, J - 1);
        }
    }
    if (s.raw_labels && s.aggregation.election1.empty() && default_labels)
        s.aggregation = default_aggregation();
    return s;
}

void validate_resolved(const SynthSpec& s) {
    if (s.zones < 16 || s.zones > 400)
        throw InvalidSpec("zones must be between 16 and 400");
    if (s.stations_per_zone < 2)
        throw InvalidSpec("need at least 2 stations per zone");
    if (!(s.voters_per_station >= 50.0))
        throw InvalidSpec("voters_per_station must be at least 50");
    if (!(s.electorate_spread >= 0.0 && s.electorate_spread <= 1.0))
        throw InvalidSpec("electorate_spread must lie in [0, 1]");
    if (!(s.dirichlet_concentration > 0.0))
        throw InvalidSpec("dirichlet_concentration must be positive");
    if (!(s.origin_jitter_sd >= 0.0))
        throw InvalidSpec("origin_jitter_sd must be non-negative");
    for (double r : {s.switch_abst_r, s.geog_recovery_r, s.rural_periph_r})
        if (!(r > -1.0 && r < 1.0))
            throw InvalidSpec("planted correlations must lie in (-1, 1)");
    s.options1.validate();
    s.options2.validate();
    if (!s.options1.has(s.abstention_label) || !s.options2.has(s.abstention_label))
        throw InvalidSpec("abstention label missing from an option set");
    const int I = s.options1.size(), J = s.options2.size();
    if (s.origin_shares.size() != I)
        throw InvalidSpec("origin_shares length does not match options1");
    for (int i = 0; i < I; ++i)
        if (!(s.origin_shares(i) > 0.0))
            throw InvalidSpec("origin shares must be positive");
    if (!s.true_P.empty()) {
        if (s.true_P.size() != 1 && static_cast<int>(s.true_P.size()) != s.zones)
            throw InvalidSpec("true_P must hold one shared matrix or one per zone");
        for (const auto& P : s.true_P) {
            if (P.rows() != I || P.cols() != J)
                throw InvalidSpec("true_P matrices must be I x J");
            for (int i = 0; i < I; ++i) {
                double row = P.row(i).sum();
                if (std::abs(row - 1.0) > 1e-8)
                    throw InvalidSpec("true_P rows must sum to 1");
                for (int j = 0; j < J; ++j)
                    if (P(i, j) < 0.0 || P(i, j) > 1.0)
                        throw InvalidSpec("true_P entries must lie in [0, 1]");
            }
        }
    } else {
        if (s.beta0.rows() != I || s.beta0.cols() != J - 1)
            throw InvalidSpec("beta0 must be I x (J-1)");
        for (const auto& [name, m] : s.effects)
            if (m.rows() != I || m.cols() != J - 1)
                throw InvalidSpec("effect matrix for '" + name + "' must be I x (J-1)");
    }
    for (const auto& o : s.outliers) {
        if (!std::isfinite(o.bump)) throw InvalidSpec("outlier bump must be finite");
        if (!s.options1.has(o.origin) || !s.options2.has(o.destination))
            throw UnknownCell("outlier cell " + o.origin + " -> " + o.destination +
                              " not in the option sets");
    }
    if (s.raw_labels) {
        if (s.aggregation.election1.empty() || s.aggregation.election2.empty())
            throw InvalidSpec("raw_labels needs aggregation maps");
        for (const auto& [raw, agg] : s.aggregation.election1)
            if (!s.options1.has(agg))
                throw InvalidSpec("raw label '" + raw + "' maps to unknown option '" +
                                  agg + "'");
        for (const auto& [raw, agg] : s.aggregation.election2)
            if (!s.options2.has(agg))
                throw InvalidSpec("raw label '" + raw + "' maps to unknown option '" +
                                  agg + "'");
    }
}

// destination column j -> logit coordinate (skipping the reference), or -1
std::vector<int> coord_of(const OptionSet& opts) {
    std::vector<int> c(static_cast<std::size_t>(opts.size()), -1);
    int k = 0;
    for (int j = 0; j < opts.size(); ++j)
        if (j != opts.reference_index) c[static_cast<std::size_t>(j)] = k++;
    return c;
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logw) {
    Eigen::MatrixXd P(logw.rows(), logw.cols());
    for (int i = 0; i < logw.rows(); ++i) {
        Eigen::ArrayXd row = logw.row(i).array() - logw.row(i).maxCoeff();
        Eigen::ArrayXd w = row.exp();
        P.row(i) = (w / w.sum()).matrix();
    }
    return P;
}

// raw members of each aggregated label, alphabetical within the aggregate
std::map<std::string, std::vector<std::string>> member_lists(
    const std::map<std::string, std::string>& mapping) {
    std::map<std::string, std::vector<std::string>> members;
    for (const auto& [raw, agg] : mapping) members[agg].push_back(raw);
    return members;
}

// station-file column order: raw labels grouped under their aggregate
OptionSet raw_option_order(const OptionSet& agg_opts,
                           const std::map<std::string, std::vector<std::string>>& members,
                           const std::string& abstention) {
    std::vector<std::string> labels;
    for (const auto& opt : agg_opts.labels) {
        auto it = members.find(opt);
        if (it == members.end())
            throw InvalidSpec("aggregated option '" + opt + "' has no raw members");
        labels.insert(labels.end(), it->second.begin(), it->second.end());
    }
    OptionSet raw(labels);
    raw.reference_index = std::max(0, raw.index_of(abstention));
    return raw;
}

} // namespace

SynthSpec SynthSpec::defaults(std::uint64_t seed) {
    SynthSpec s;
    s.seed = seed;
    s.raw_labels = true;
    return resolved(s);
}

void SynthSpec::validate() const { validate_resolved(resolved(*this)); }

SynthSpec plant_outlier(SynthSpec spec, const std::string& zone,
                        const std::string& origin, const std::string& destination,
                        double bump) {
    if (!std::isfinite(bump)) throw InvalidSpec("outlier bump must be finite");
    if (bump == 0.0) return spec;
    SynthSpec full = resolved(spec);
    bool zone_ok = false;
    for (int z = 0; z < full.zones; ++z)
        if (zone_name(z) == zone) zone_ok = true;
    if (!zone_ok) throw UnknownCell("unknown zone '" + zone + "'");
    if (!full.options1.has(origin))
        throw UnknownCell("unknown origin '" + origin + "'");
    if (!full.options2.has(destination))
        throw UnknownCell("unknown destination '" + destination + "'");
    spec.outliers.push_back({zone, origin, destination, bump});
    return spec;
}

SynthOutput generate(const SynthSpec& raw_spec) {
    const SynthSpec s = resolved(raw_spec);
    validate_resolved(s);

    const int Z = s.zones, S = s.stations_per_zone;
    const int I = s.options1.size(), J = s.options2.size();
    const int a1 = s.options1.index_of(s.abstention_label);
    const int a2 = s.options2.index_of(s.abstention_label);

    std::vector<std::string> zone_ids;
    zone_ids.reserve(static_cast<std::size_t>(Z));
    for (int z = 0; z < Z; ++z) zone_ids.push_back(zone_name(z));

    const std::uint64_t base = splitmix64(s.seed ^ 0x666c6f77636173ULL);
    Rng latent_rng(splitmix64(base + 1));
    DriverBank bank = build_drivers(s, zone_ids, latent_rng);

    // resolve effect driver columns up front
    std::vector<std::pair<Eigen::VectorXd, Eigen::MatrixXd>> fx;
    if (s.true_P.empty()) {
        for (const auto& [name, m] : s.effects) {
            auto it = std::find(bank.names.begin(), bank.names.end(), name);
            if (it == bank.names.end())
                throw InvalidSpec("unknown effect driver '" + name + "'");
            fx.emplace_back(
                bank.D.col(static_cast<int>(it - bank.names.begin())), m);
        }
    }

    const Eigen::VectorXd sw = bank.D.col(static_cast<int>(bank.names.size()) - 2);
    const Eigen::VectorXd ab = bank.D.col(static_cast<int>(bank.names.size()) - 1);
    const std::vector<int> coord = coord_of(s.options2);

    // loyal destination column per origin, -1 when unmapped
    auto loyal_map = resolve_loyalty(s.options1, s.options2, s.abstention_label,
                                     s.aggregation.loyalty);
    std::vector<int> loyal(static_cast<std::size_t>(I), -1);
    for (int i = 0; i < I; ++i) {
        auto it = loyal_map.find(s.options1.labels[static_cast<std::size_t>(i)]);
        if (it != loyal_map.end()) loyal[static_cast<std::size_t>(i)] = s.options2.index_of(it->second);
    }

    // raw-label bookkeeping
    std::map<std::string, std::vector<std::string>> members1, members2;
    OptionSet raw1 = s.options1, raw2 = s.options2;
    if (s.raw_labels) {
        members1 = member_lists(s.aggregation.election1);
        members2 = member_lists(s.aggregation.election2);
        raw1 = raw_option_order(s.options1, members1, s.abstention_label);
        raw2 = raw_option_order(s.options2, members2, s.abstention_label);
    }

    SynthOutput out;
    out.zone_ids = zone_ids;
    out.raw_covariates = bank.raw;
    out.stations.options1 = s.raw_labels ? raw1 : s.options1;
    out.stations.options2 = s.raw_labels ? raw2 : s.options2;

    nlohmann::json jzone_shares = nlohmann::json::array();
    nlohmann::json jzone_P = nlohmann::json::array();
    nlohmann::json jflows = nlohmann::json::array();

    for (int z = 0; z < Z; ++z) {
        Rng zr(splitmix64(base + 0x10000 + static_cast<std::uint64_t>(z)));

        // zone origin shares: logit jitter around the global mix
        Eigen::VectorXd zshare(I);
        for (int i = 0; i < I; ++i)
            zshare(i) = std::log(s.origin_shares(i)) + s.origin_jitter_sd * zr.normal();
        zshare = (zshare.array() - zshare.maxCoeff()).exp().matrix();
        zshare /= zshare.sum();

        // zone truth
        Eigen::MatrixXd P;
        if (!s.true_P.empty()) {
            P = s.true_P.size() == 1 ? s.true_P[0] : s.true_P[static_cast<std::size_t>(z)];
        } else {
            Eigen::MatrixXd logw = Eigen::MatrixXd::Zero(I, J);
            for (int i = 0; i < I; ++i)
                for (int j = 0; j < J; ++j)
                    if (j != s.options2.reference_index)
                        logw(i, j) = s.beta0(i, coord[static_cast<std::size_t>(j)]);
            for (const auto& [col, m] : fx)
                for (int i = 0; i < I; ++i)
                    for (int j = 0; j < J; ++j)
                        if (j != s.options2.reference_index)
                            logw(i, j) += m(i, coord[static_cast<std::size_t>(j)]) * col(z);
            for (int i = 0; i < I; ++i) {
                if (i == a1) {
                    logw(i, a2) += s.abst_scale * ab(z);
                    continue;
                }
                for (int j = 0; j < J; ++j) {
                    if (j == a2)
                        logw(i, j) += s.abst_scale * ab(z);
                    else if (j != loyal[static_cast<std::size_t>(i)])
                        logw(i, j) += s.switch_scale * sw(z);
                }
            }
            for (const auto& o : s.outliers)
                if (o.zone_id == zone_ids[static_cast<std::size_t>(z)])
                    logw(s.options1.index_of(o.origin),
                         s.options2.index_of(o.destination)) += o.bump;
            P = softmax_rows(logw);
        }
        out.zone_P.push_back(P);

        std::vector<std::vector<double>> prow(static_cast<std::size_t>(I),
                                              std::vector<double>(static_cast<std::size_t>(J)));
        for (int i = 0; i < I; ++i)
            for (int j = 0; j < J; ++j) prow[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = P(i, j);

        // per-zone sub-shares for splitting aggregated counts into raw labels
        std::map<std::string, std::vector<double>> split1, split2;
        if (s.raw_labels) {
            auto draw_split = [&zr](const std::vector<std::string>& members) {
                std::vector<double> alpha(members.size(), 2.0);
                alpha[0] = 8.0; // lead party dominates its aggregate
                return zr.dirichlet(alpha);
            };
            for (int i = 0; i < I; ++i) {
                const auto& label = s.options1.labels[static_cast<std::size_t>(i)];
                split1[label] = draw_split(members1.at(label));
            }
            for (int j = 0; j < J; ++j) {
                const auto& label = s.options2.labels[static_cast<std::size_t>(j)];
                split2[label] = draw_split(members2.at(label));
            }
        }

        std::vector<double> alpha(static_cast<std::size_t>(I));
        for (int i = 0; i < I; ++i)
            alpha[static_cast<std::size_t>(i)] = s.dirichlet_concentration * zshare(i);

        Eigen::MatrixXd realized = Eigen::MatrixXd::Zero(I, J);
        const std::uint64_t zbase = splitmix64(base + 0x20000 + static_cast<std::uint64_t>(z));
        for (int st = 0; st < S; ++st) {
            Rng sr(splitmix64(zbase + static_cast<std::uint64_t>(st)));
            double size = s.voters_per_station *
                          std::exp(s.electorate_spread * sr.normal() -
                                   0.5 * s.electorate_spread * s.electorate_spread);
            long long N = std::max<long long>(60, std::llround(size));

            std::vector<double> w = sr.dirichlet(alpha);
            std::vector<long long> c1 = sr.multinomial(N, w.data(), I);

            // optional station-level loyalty tilt (breaks zone homogeneity)
            const std::vector<std::vector<double>>* rows = &prow;
            std::vector<std::vector<double>> tilted;
            if (s.heterogeneity_stress && s.stress_scale != 0.0) {
                tilted = prow;
                for (int i = 0; i < I; ++i) {
                    int lcol = i == a1 ? a2 : loyal[static_cast<std::size_t>(i)];
                    if (lcol < 0) continue;
                    double bump = s.stress_scale *
                                  (w[static_cast<std::size_t>(i)] - zshare(i)) /
                                  std::max(zshare(i), 0.02);
                    auto& row = tilted[static_cast<std::size_t>(i)];
                    row[static_cast<std::size_t>(lcol)] *= std::exp(bump);
                    double tot = 0.0;
                    for (double v : row) tot += v;
                    for (double& v : row) v /= tot;
                }
                rows = &tilted;
            }

            std::vector<long long> c2(static_cast<std::size_t>(J), 0);
            for (int i = 0; i < I; ++i) {
                if (c1[static_cast<std::size_t>(i)] == 0) continue;
                std::vector<long long> flow = sr.multinomial(
                    c1[static_cast<std::size_t>(i)], (*rows)[static_cast<std::size_t>(i)].data(), J);
                for (int j = 0; j < J; ++j) {
                    c2[static_cast<std::size_t>(j)] += flow[static_cast<std::size_t>(j)];
                    realized(i, j) += static_cast<double>(flow[static_cast<std::size_t>(j)]);
                }
            }

            StationRecord rec;
            rec.zone_id = zone_ids[static_cast<std::size_t>(z)];
            rec.station_id = station_name(rec.zone_id, st);
            rec.electorate1 = rec.electorate2 = N;
            if (!s.raw_labels) {
                rec.counts1 = c1;
                rec.counts2 = c2;
            } else {
                auto split = [&sr](const std::vector<long long>& counts,
                                   const OptionSet& agg_opts, const OptionSet& raw_opts,
                                   const std::map<std::string, std::vector<std::string>>& members,
                                   const std::map<std::string, std::vector<double>>& shares) {
                    std::vector<long long> rawc(static_cast<std::size_t>(raw_opts.size()), 0);
                    for (int k = 0; k < agg_opts.size(); ++k) {
                        const auto& label = agg_opts.labels[static_cast<std::size_t>(k)];
                        const auto& mem = members.at(label);
                        if (mem.size() == 1) {
                            rawc[static_cast<std::size_t>(raw_opts.index_of(mem[0]))] =
                                counts[static_cast<std::size_t>(k)];
                            continue;
                        }
                        const auto& sh = shares.at(label);
                        std::vector<long long> part = sr.multinomial(
                            counts[static_cast<std::size_t>(k)], sh.data(),
                            static_cast<int>(mem.size()));
                        for (std::size_t m = 0; m < mem.size(); ++m)
                            rawc[static_cast<std::size_t>(raw_opts.index_of(mem[m]))] =
                                part[m];
                    }
                    return rawc;
                };
                rec.counts1 = split(c1, s.options1, raw1, members1, split1);
                rec.counts2 = split(c2, s.options2, raw2, members2, split2);
            }
            out.stations.records.push_back(std::move(rec));
        }

        nlohmann::json jP = nlohmann::json::array(), jF = nlohmann::json::array();
        for (int i = 0; i < I; ++i) {
            jP.push_back(std::vector<double>(P.row(i).begin(), P.row(i).end()));
            jF.push_back(std::vector<double>(realized.row(i).begin(), realized.row(i).end()));
        }
        jzone_P.push_back(jP);
        jflows.push_back(jF);
        jzone_shares.push_back(std::vector<double>(zshare.begin(), zshare.end()));
    }

    nlohmann::json truth;
    truth["seed"] = s.seed;
    truth["zones"] = Z;
    truth["stations_per_zone"] = S;
    truth["voters_per_station"] = s.voters_per_station;
    truth["options1"] = s.options1.labels;
    truth["options2"] = s.options2.labels;
    truth["reference1"] = s.options1.reference_index;
    truth["reference2"] = s.options2.reference_index;
    truth["abstention"] = s.abstention_label;
    truth["raw_labels"] = s.raw_labels;
    truth["mode"] = s.true_P.empty() ? "logit" : "true_P";
    truth["zone_ids"] = zone_ids;
    truth["origin_shares"] = jzone_shares;
    truth["zone_P"] = jzone_P;
    truth["realized_flows"] = jflows;
    truth["planted"] = {{"geog_recovery_r", s.geog_recovery_r},
                        {"rural_periph_r", s.rural_periph_r},
                        {"switch_abst_r", s.switch_abst_r}};
    nlohmann::json jdrivers;
    for (std::size_t d = 0; d < bank.names.size(); ++d)
        jdrivers[bank.names[d]] = std::vector<double>(
            bank.D.col(static_cast<int>(d)).begin(), bank.D.col(static_cast<int>(d)).end());
    truth["drivers"] = jdrivers;
    nlohmann::json jfx = nlohmann::json::array();
    for (const auto& [name, m] : s.effects) {
        nlohmann::json rows = nlohmann::json::array();
        for (int i = 0; i < m.rows(); ++i)
            rows.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
        jfx.push_back({{"driver", name}, {"matrix", rows}});
    }
    truth["effects"] = jfx;
    nlohmann::json jout = nlohmann::json::array();
    for (const auto& o : s.outliers)
        jout.push_back({{"zone", o.zone_id},
                        {"origin", o.origin},
                        {"destination", o.destination},
                        {"bump", o.bump}});
    truth["outliers"] = jout;
    out.truth = std::move(truth);
    return out;
}

void write_synth(const SynthOutput& out, const std::string& stations_path,
                 const std::string& covariates_path, const std::string& truth_path) {
    write_stations(stations_path, out.stations);

    CsvTable cov;
    cov.header.push_back("zone_id");
    for (const auto& name : out.raw_covariates.names) cov.header.push_back(name);
    for (int z = 0; z < out.raw_covariates.rows(); ++z) {
        std::vector<std::string> row;
        row.push_back(out.raw_covariates.zone_ids[static_cast<std::size_t>(z)]);
        for (int c = 0; c < out.raw_covariates.cols(); ++c)
            row.push_back(format_double(out.raw_covariates.X(z, c), 17));
        cov.rows.push_back(std::move(row));
    }
    write_csv_file(covariates_path, cov);

    std::ofstream f(truth_path, std::ios::binary);
    if (!f) throw DataError("cannot write " + truth_path);
    f << out.truth.dump(2) << "\n";
}

PanelTruth generate_panel(const PanelSpec& spec) {
    const int Z = spec.zones, K = spec.options, V = spec.covariates;
    if (Z < 3) throw InvalidSpec("panel needs at least 3 zones");
    if (K < 2) throw InvalidSpec("panel needs at least 2 options");
    if (V < 0) throw InvalidSpec("covariate count must be non-negative");
    if (!(spec.total_mean >= 10.0)) throw InvalidSpec("total_mean must be at least 10");

    Eigen::VectorXd beta0 = spec.beta0;
    if (beta0.size() == 0) {
        beta0.resize(K);
        for (int k = 0; k < K; ++k)
            beta0(k) = 0.4 - 0.8 * k / std::max(1, K - 1);
    }
    if (beta0.size() != K) throw InvalidSpec("beta0 must have one entry per option");
    Eigen::MatrixXd beta = spec.beta;
    if (beta.size() == 0) beta = Eigen::MatrixXd::Zero(K, V);
    if (beta.rows() != K || beta.cols() != V)
        throw InvalidSpec("beta must be options x covariates");
    beta0(K - 1) = 0.0;
    beta.row(K - 1).setZero();

    Rng rng(splitmix64(spec.seed ^ 0x70616e656cULL));

    PanelTruth t;
    t.beta0 = beta0;
    t.beta = beta;
    t.mask = Mask::Zero(K, V);
    for (int k = 0; k + 1 < K; ++k)
        for (int v = 0; v < V; ++v) t.mask(k, v) = beta(k, v) != 0.0 ? 1 : 0;

    t.X.zone_ids.reserve(static_cast<std::size_t>(Z));
    for (int z = 0; z < Z; ++z) t.X.zone_ids.push_back(zone_name(z));
    for (int v = 0; v < V; ++v) {
        Eigen::VectorXd col(Z);
        for (int z = 0; z < Z; ++z) col(z) = rng.normal();
        Transform tr;
        tr.op = "standardize";
        tr.inputs = {"x" + std::to_string(v + 1)};
        t.X.append("x" + std::to_string(v + 1), standardize(col), tr);
    }

    std::vector<std::string> labels;
    for (int k = 0; k < K; ++k) labels.push_back("opt" + std::to_string(k + 1));
    t.panel.direction = Direction::outgoing;
    t.panel.anchor = "synthetic";
    t.panel.zone_ids = t.X.zone_ids;
    t.panel.options = OptionSet(labels, K - 1);
    t.panel.counts.resize(Z, K);
    t.panel.totals.resize(Z);
    t.panel.count_se = Eigen::MatrixXd::Zero(Z, K);

    for (int z = 0; z < Z; ++z) {
        long long n = std::max<long long>(
            50, std::llround(spec.total_mean * std::exp(0.2 * rng.normal() - 0.02)));
        Eigen::VectorXd eta = beta0;
        if (V > 0) eta += beta * t.X.X.row(z).transpose();
        Eigen::ArrayXd w = (eta.array() - eta.maxCoeff()).exp();
        std::vector<double> p(static_cast<std::size_t>(K));
        double tot = w.sum();
        for (int k = 0; k < K; ++k) p[static_cast<std::size_t>(k)] = w(k) / tot;
        std::vector<long long> c = rng.multinomial(n, p.data(), K);
        for (int k = 0; k < K; ++k)
            t.panel.counts(z, k) = static_cast<double>(c[static_cast<std::size_t>(k)]);
        t.panel.totals(z) = static_cast<double>(n);
    }
    return t;
}

} // namespace flowcast
