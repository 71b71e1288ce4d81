#include "flowcast/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "flowcast/errors.hpp"
#include "flowcast/sha256.hpp"
#include "flowcast/synth.hpp"

namespace flowcast {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Flagged in output metadata: the loyalty containment rule and the origin
// subset entering the volatility denominators.
const char* kLoyaltyNote =
    "note: loyalty destinations are resolved per origin by explicit override, "
    "then exact label match, then table position; configure loyalty overrides "
    "in the aggregation file when an aggregated destination should absorb its "
    "member origins.";
const char* kSubsetNote =
    "note: party_switch and to_abstention cover only the origin parties "
    "present in the flow table; headline volatility figures that also count "
    "minor origin categories omitted from the table will differ.";

std::string fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    std::string s(buf);
    if (s.find_first_not_of("-0.") == std::string::npos && s[0] == '-')
        s.erase(0, 1);
    return s;
}

json vec_json(const Eigen::VectorXd& v) {
    json a = json::array();
    for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

json mat_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (int i = 0; i < m.rows(); ++i) {
        json r = json::array();
        for (int j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
        rows.push_back(r);
    }
    return rows;
}

Eigen::VectorXd to_vector(const json& a) {
    Eigen::VectorXd v(static_cast<int>(a.size()));
    for (int i = 0; i < v.size(); ++i) v(i) = a[i].get<double>();
    return v;
}

Eigen::MatrixXd to_matrix(const json& a) {
    const int rows = static_cast<int>(a.size());
    const int cols = rows ? static_cast<int>(a[0].size()) : 0;
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = a[i][j].get<double>();
    return m;
}

void write_text(const std::string& path, const std::string& content) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    f << content;
}

std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

std::string csv_string(const CsvTable& t) {
    std::ostringstream s;
    write_csv(s, t);
    return s.str();
}

json read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
}

std::string file_label(std::string s) {
    for (char& c : s)
        if (c == ' ' || c == '/' || c == '\\') c = '_';
    return s;
}

// Collects everything the manifest needs; written last.
struct RunState {
    std::string out_dir;
    std::vector<std::pair<std::string, std::string>> artifacts; // relative, absolute
    json inputs = json::object();
    json failures = json::object();
    std::vector<std::string> warnings;
    int zone_estimates = 0;
    int anchor_models = 0;
    int volatility_reports = 0;

    void emit(const std::string& rel, const std::string& content) {
        std::string abs = (fs::path(out_dir) / rel).string();
        write_text(abs, content);
        for (const auto& [r, a] : artifacts)
            if (r == rel) return; // re-render of an identical stage artifact
        artifacts.emplace_back(rel, abs);
    }
    void external(const std::string& path) {
        artifacts.emplace_back(fs::path(path).filename().string(), path);
    }
    void input(const std::string& role, const std::string& path) {
        if (!path.empty() && fs::exists(path)) inputs[role] = sha256_file(path);
    }
};

void write_manifest(const RunState& st, const std::string& command,
                    const std::string& error = "") {
    json m;
    m["command"] = command;
    m["inputs"] = st.inputs;
    json arts = json::object();
    for (const auto& [rel, abs] : st.artifacts) arts[rel] = sha256_file(abs);
    m["artifacts"] = arts;
    m["counts"] = {{"zone_estimates", st.zone_estimates},
                   {"anchor_models", st.anchor_models},
                   {"volatility_reports", st.volatility_reports}};
    m["failures"] = st.failures;
    m["warnings"] = st.warnings;
    if (!error.empty()) m["error"] = error;
    write_text((fs::path(st.out_dir) / "manifest.json").string(), dump_json(m));
}

CovariateMatrix subset_rows(const CovariateMatrix& M,
                            const std::vector<std::string>& zone_ids) {
    CovariateMatrix out;
    out.names = M.names;
    out.transforms = M.transforms;
    out.zone_ids = zone_ids;
    out.X.resize(static_cast<int>(zone_ids.size()), M.cols());
    for (int z = 0; z < static_cast<int>(zone_ids.size()); ++z) {
        auto it = std::find(M.zone_ids.begin(), M.zone_ids.end(), zone_ids[z]);
        if (it == M.zone_ids.end())
            throw UnknownZone("zone " + zone_ids[z] + " missing from covariates");
        out.X.row(z) = M.X.row(static_cast<int>(it - M.zone_ids.begin()));
    }
    return out;
}

// The anchor models mirror the published layout: the reference destination of
// an outgoing model is the anchor's loyal destination (staying put carries no
// coefficients), and symmetrically for incoming models.
void pick_reference(TransitionCountPanel& panel, const AnchorSpec& a,
                    const std::map<std::string, std::string>& loyalty,
                    const std::string& abstention) {
    std::string ref;
    if (a.direction == Direction::outgoing) {
        if (a.option == abstention && panel.options.has(abstention))
            ref = abstention;
        auto it = loyalty.find(a.option);
        if (ref.empty() && it != loyalty.end() && panel.options.has(it->second))
            ref = it->second;
    } else {
        if (a.option == abstention && panel.options.has(abstention)) ref = abstention;
        for (const auto& [origin, dest] : loyalty)
            if (ref.empty() && dest == a.option && panel.options.has(origin))
                ref = origin;
    }
    if (!ref.empty()) panel.options.reference_index = panel.options.index_of(ref);
}

struct ModelInputs {
    std::vector<std::string> zone_ids;
    std::vector<FlowTable> flows;
    std::vector<Eigen::MatrixXd> flow_se;
    std::map<std::string, std::string> loyalty;
};

ModelInputs read_estimate_artifacts(const RunConfig& cfg) {
    fs::path sum = fs::path(cfg.out_dir) / "estimate_summary.json";
    if (!fs::exists(sum))
        throw ConfigError("estimate artifacts not found in " + cfg.out_dir +
                          "; run the estimate stage first");
    json s = read_json_file(sum.string());
    ModelInputs in;
    in.zone_ids = s.at("zones").get<std::vector<std::string>>();
    if (s.contains("loyalty"))
        in.loyalty = s.at("loyalty").get<std::map<std::string, std::string>>();
    for (const auto& id : in.zone_ids) {
        json j = read_json_file(
            (fs::path(cfg.out_dir) / "estimates" / (id + ".json")).string());
        FlowTable t;
        t.zone_id = id;
        t.options1 = OptionSet(j.at("options1").get<std::vector<std::string>>());
        t.options2 = OptionSet(j.at("options2").get<std::vector<std::string>>());
        t.F = to_matrix(j.at("flows").at("F"));
        t.row_margins = to_vector(j.at("flows").at("row_margins"));
        t.col_margins = to_vector(j.at("flows").at("col_margins"));
        in.flows.push_back(std::move(t));
        in.flow_se.push_back(to_matrix(j.at("flow_se")));
    }
    return in;
}

ModelOutputs fit_models(const ModelInputs& in, const RunConfig& cfg, int jobs,
                        std::ostream& log) {
    if (in.flows.empty()) throw DataError("no zone estimates available");
    if (cfg.covariates_path.empty())
        throw ConfigError("no covariates file configured");
    CovariateMatrix design =
        build_design(read_csv_file(cfg.covariates_path), cfg.covariate_recipe);
    CovariateMatrix X = subset_rows(design, in.zone_ids);

    const int A = static_cast<int>(cfg.anchors.size());
    std::vector<std::unique_ptr<ModelReport>> slots(static_cast<std::size_t>(A));
    std::vector<std::string> errors(static_cast<std::size_t>(A));
    std::vector<std::string> notes(static_cast<std::size_t>(A));
    std::atomic<int> next{0};

    auto worker = [&]() {
        for (;;) {
            int i = next.fetch_add(1);
            if (i >= A) break;
            const AnchorSpec& a = cfg.anchors[static_cast<std::size_t>(i)];
            try {
                TransitionCountPanel panel =
                    build_panel(in.flows, a.option, a.direction, &in.flow_se);
                pick_reference(panel, a, in.loyalty, cfg.abstention_label);
                auto r = std::make_unique<ModelReport>();
                r->anchor = a.option;
                r->direction = a.direction;
                r->model = stepwise_select(panel, X, cfg.stepwise_schedule, cfg.mnl);
                r->marginal = marginal_effects(r->model, cfg.marginal_step);
                r->flags = significance_flags(r->model, cfg.strong_p, cfg.weak_p);
                r->residuals =
                    residual_diagnostics(r->model, panel, X, cfg.outlier_cutoff);
                if (cfg.auto_dummies && !r->residuals.outliers.empty()) {
                    // worst zones first, capped so the augmented design keeps
                    // spare degrees of freedom
                    std::vector<std::pair<double, std::string>> worst;
                    for (const auto& o : r->residuals.outliers) {
                        bool seen = false;
                        for (auto& [mag, zid] : worst)
                            if (zid == o.zone_id) {
                                mag = std::max(mag, std::abs(o.residual));
                                seen = true;
                            }
                        if (!seen) worst.emplace_back(std::abs(o.residual), o.zone_id);
                    }
                    std::stable_sort(worst.begin(), worst.end(),
                                     [](const auto& a, const auto& b) {
                                         return a.first > b.first;
                                     });
                    int cap = std::min(cfg.max_dummy_zones,
                                       static_cast<int>(in.zone_ids.size()) -
                                           X.cols() - 2);
                    for (const auto& [mag, zid] : worst) {
                        if (static_cast<int>(r->dummy_zones.size()) >= cap) break;
                        r->dummy_zones.push_back(zid);
                    }
                    if (!r->dummy_zones.empty()) {
                        try {
                            CovariateMatrix Xd = add_zone_dummies(X, r->dummy_zones);
                            r->dummy_model = stepwise_select(panel, Xd,
                                                             cfg.stepwise_schedule,
                                                             cfg.mnl);
                            r->dummy_residuals = residual_diagnostics(
                                r->dummy_model, panel, Xd, cfg.outlier_cutoff);
                            r->refit_with_dummies = true;
                        } catch (const Error& e) {
                            // keep the primary model when the augmented fit
                            // degenerates
                            r->dummy_zones.clear();
                            notes[static_cast<std::size_t>(i)] =
                                std::string("dummy refit skipped: ") + e.what();
                        }
                    }
                }
                slots[static_cast<std::size_t>(i)] = std::move(r);
            } catch (const Error& e) {
                errors[static_cast<std::size_t>(i)] = e.what();
            }
        }
    };
    int nthreads = std::max(1, std::min(jobs, std::max(A, 1)));
    std::vector<std::thread> pool;
    for (int t = 1; t < nthreads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();

    ModelOutputs out;
    for (int i = 0; i < A; ++i) {
        const AnchorSpec& a = cfg.anchors[static_cast<std::size_t>(i)];
        std::string key = a.option + " (" + direction_name(a.direction) + ")";
        if (slots[static_cast<std::size_t>(i)]) {
            const ModelReport& r = *slots[static_cast<std::size_t>(i)];
            if (!notes[static_cast<std::size_t>(i)].empty())
                log << "model: " << key << ": "
                    << notes[static_cast<std::size_t>(i)] << "\n";
            log << "model: " << key << ": % dev. "
                << fixed(deviance_explained(r.model), 1) << ", "
                << r.residuals.outliers.size() << " outlier cells";
            if (r.refit_with_dummies) {
                log << ", refit with dummies:";
                for (const auto& z : r.dummy_zones) log << " " << z;
            }
            log << "\n";
            out.reports.push_back(std::move(*slots[static_cast<std::size_t>(i)]));
        } else {
            log << "model: " << key << " failed: "
                << errors[static_cast<std::size_t>(i)] << "\n";
            out.failures[key] = errors[static_cast<std::size_t>(i)];
        }
    }
    return out;
}

// ---------------------------------------------------------------- stages --

void stage_simulate(RunState& st, const RunConfig& cfg, std::ostream& log) {
    if (!cfg.has_simulate) throw ConfigError("no simulate block in config");
    SynthSpec spec = cfg.synth;
    spec.validate();
    SynthOutput so = generate(spec);
    write_synth(so, cfg.sim_stations_out, cfg.sim_covariates_out, cfg.sim_truth_out);
    st.external(cfg.sim_stations_out);
    st.external(cfg.sim_covariates_out);
    st.external(cfg.sim_truth_out);
    log << "simulate: " << so.zone_ids.size() << " zones, "
        << so.stations.records.size() << " stations -> " << cfg.sim_stations_out
        << "\n";
}

void stage_validate(RunState& st, const LoadedData& data, const RunConfig& cfg,
                    std::ostream& log) {
    if (!cfg.covariates_path.empty()) {
        if (!fs::exists(cfg.covariates_path))
            throw DataError("covariates file not found: " + cfg.covariates_path);
        build_design(read_csv_file(cfg.covariates_path), cfg.covariate_recipe);
    }
    if (cfg.has_simulate) cfg.synth.validate();

    json v;
    v["options1"] = data.aggregated.options1.labels;
    v["options2"] = data.aggregated.options2.labels;
    json zones = json::array();
    for (const auto& z : data.zones) {
        long long e2 = 0;
        for (const auto& s : z.stations) e2 += s.electorate2;
        zones.push_back({{"zone_id", z.zone_id},
                         {"stations", z.stations.size()},
                         {"electorate2", e2}});
    }
    v["zones"] = zones;
    v["warnings"] = data.warnings;
    st.emit("validation.json", dump_json(v));
    log << "validate: " << data.aggregated.records.size() << " stations in "
        << data.zones.size() << " zones, options "
        << data.aggregated.options1.size() << " x "
        << data.aggregated.options2.size() << "\n";
    for (const auto& w : data.warnings) log << "warning: " << w << "\n";
}

json volatility_json(const VolatilityRecord& r) {
    json loy = json::object();
    for (const auto& [party, pct] : r.loyalty_pct) loy[party] = pct;
    return {{"zone_id", r.zone_id},
            {"party_switch_pct", r.party_switch_pct},
            {"to_abstention_pct", r.to_abstention_pct},
            {"loyalty_pct", loy}};
}

int stage_estimate(RunState& st, const LoadedData& data, const RunConfig& cfg,
                   int jobs, std::ostream& log, EstimateOutputs& eo) {
    eo = run_estimates(data, cfg, jobs);
    st.zone_estimates = static_cast<int>(eo.zones.size());

    std::vector<std::string> zone_ids;
    for (const auto& z : eo.zones) {
        zone_ids.push_back(z.est.zone_id);
        json j = estimate_json(z.est, z.fit);
        j["flows"] = {{"F", mat_json(z.flows.F)},
                      {"row_margins", vec_json(z.flows.row_margins)},
                      {"col_margins", vec_json(z.flows.col_margins)}};
        j["flow_se"] = mat_json(z.flow_se);
        st.emit("estimates/" + z.est.zone_id + ".json", dump_json(j));
    }

    // one flows.csv over all zones plus the regional aggregate
    if (!eo.zones.empty()) {
        CsvTable t;
        t.header = {"zone_id", "origin"};
        for (const auto& l : eo.region.options2.labels) t.header.push_back(l);
        t.header.push_back("total");
        auto add_rows = [&t](const FlowTable& f) {
            for (int i = 0; i < f.F.rows(); ++i) {
                std::vector<std::string> row{f.zone_id, f.options1.labels.at(i)};
                for (int j = 0; j < f.F.cols(); ++j) row.push_back(fixed(f.F(i, j), 3));
                row.push_back(fixed(f.row_margins(i), 3));
                t.rows.push_back(std::move(row));
            }
        };
        for (const auto& z : eo.zones) add_rows(z.flows);
        add_rows(eo.region);
        st.emit("flows.csv", csv_string(t));
    }

    if (!eo.volatility.empty()) {
        CsvTable t;
        t.header = {"zone_id", "party_switch_pct", "to_abstention_pct"};
        for (const auto& [party, _] : eo.volatility.front().loyalty_pct)
            t.header.push_back("loyalty_" + party);
        for (const auto& r : eo.volatility) {
            std::vector<std::string> row{r.zone_id, fixed(r.party_switch_pct, 3),
                                         fixed(r.to_abstention_pct, 3)};
            for (const auto& [_, pct] : r.loyalty_pct) row.push_back(fixed(pct, 3));
            t.rows.push_back(std::move(row));
        }
        t.rows.push_back({"# correlation(party_switch, to_abstention)",
                          std::isfinite(eo.volatility_r) ? fixed(eo.volatility_r, 4)
                                                         : "n/a"});
        t.rows.push_back({"# note", kLoyaltyNote});
        t.rows.push_back({"# note", kSubsetNote});
        st.emit("volatility.csv", csv_string(t));
        st.volatility_reports = 1;
    }

    json s;
    s["zones"] = zone_ids;
    json fails = json::object();
    for (const auto& [z, msg] : eo.failures) fails[z] = msg;
    s["failures"] = fails;
    json vol = json::array();
    for (const auto& r : eo.volatility) vol.push_back(volatility_json(r));
    s["volatility"] = vol;
    s["volatility_correlation"] = eo.volatility_r; // null when not computable
    json loy = json::object();
    for (const auto& [o, d] : eo.loyalty_map) loy[o] = d;
    s["loyalty"] = loy;
    if (!eo.zones.empty())
        s["region"] = {{"options1", eo.region.options1.labels},
                       {"options2", eo.region.options2.labels},
                       {"F", mat_json(eo.region.F)},
                       {"row_margins", vec_json(eo.region.row_margins)},
                       {"col_margins", vec_json(eo.region.col_margins)}};
    s["notes"] = {kLoyaltyNote, kSubsetNote};
    s["warnings"] = data.warnings;
    st.emit("estimate_summary.json", dump_json(s));

    log << "estimate: " << eo.zones.size() << "/" << data.zones.size()
        << " zones converged\n";
    if (!eo.failures.empty()) {
        st.failures["zones"] = fails;
        for (const auto& [z, msg] : eo.failures)
            log << "estimate: zone " << z << " failed: " << msg << "\n";
        return 3;
    }
    return 0;
}

void stage_covariates(RunState& st, const RunConfig& cfg, std::ostream& log) {
    if (cfg.covariates_path.empty())
        throw ConfigError("no covariates file configured");
    CovariateMatrix M =
        build_design(read_csv_file(cfg.covariates_path), cfg.covariate_recipe);

    CsvTable t;
    t.header.push_back("zone_id");
    for (const auto& n : M.names) t.header.push_back(n);
    for (int z = 0; z < M.rows(); ++z) {
        std::vector<std::string> row{M.zone_ids[static_cast<std::size_t>(z)]};
        for (int v = 0; v < M.cols(); ++v)
            row.push_back(format_double(M.X(z, v), 17));
        t.rows.push_back(std::move(row));
    }
    st.emit("design.csv", csv_string(t));
    st.emit("transforms.json", dump_json(transforms_json(M)));

    CorrelationReport cr = correlation_report(M);
    json c;
    c["names"] = M.names;
    c["R"] = mat_json(cr.R);
    c["threshold"] = cr.threshold;
    json fl = json::array();
    for (const auto& [i, j] : cr.flagged)
        fl.push_back({{"a", M.names[static_cast<std::size_t>(i)]},
                      {"b", M.names[static_cast<std::size_t>(j)]},
                      {"r", cr.R(i, j)}});
    c["flagged"] = fl;
    st.emit("correlations.json", dump_json(c));
    log << "covariates: " << M.cols() << " design columns over " << M.rows()
        << " zones\n";
}

CsvTable table3_csv(const std::vector<ModelReport>& models) {
    CsvTable t;
    t.header = {"destination", "origin"};
    if (models.empty()) return t;
    const std::vector<std::string>& covs = models.front().model.covariates;
    for (const auto& c : covs) t.header.push_back(c);
    std::vector<std::string> panel_options;
    for (const auto& r : models)
        for (const auto& l : r.model.options.labels)
            if (std::find(panel_options.begin(), panel_options.end(), l) ==
                panel_options.end())
                panel_options.push_back(l);
    for (const auto& opt : panel_options) {
        for (const auto& r : models) {
            int k = r.model.options.index_of(opt);
            if (k < 0) continue;
            std::vector<std::string> row{opt, r.anchor};
            for (int v = 0; v < static_cast<int>(covs.size()); ++v) {
                Flag f = r.flags.flags.at(static_cast<std::size_t>(k))
                             .at(static_cast<std::size_t>(v));
                if (f == Flag::strong)
                    row.push_back(fixed(r.marginal(k, v), 3) + "**");
                else if (f == Flag::weak)
                    row.push_back(fixed(r.marginal(k, v), 3) + "*");
                else
                    row.push_back("0");
            }
            t.rows.push_back(std::move(row));
        }
    }
    return t;
}

CsvTable tableC1_csv(const std::vector<ModelReport>& models) {
    CsvTable t;
    t.header = {"model", "pct_dev", "option", "row"};
    if (models.empty()) return t;
    for (const auto& c : models.front().model.covariates) t.header.push_back(c);
    for (const auto& r : models) {
        const MnlModel& m = r.model;
        std::string label =
            (r.direction == Direction::outgoing ? "out of " : "into ") + r.anchor;
        std::string dev = fixed(deviance_explained(m), 1);
        for (int k = 0; k < m.options.size(); ++k) {
            if (k == m.reference_index()) continue;
            std::vector<std::string> b{label, dev, m.options.labels[static_cast<std::size_t>(k)], "b"};
            std::vector<std::string> z{label, dev, m.options.labels[static_cast<std::size_t>(k)], "z"};
            for (int v = 0; v < static_cast<int>(m.covariates.size()); ++v) {
                b.push_back(m.mask(k, v) ? fixed(m.beta(k, v), 2) : "0");
                z.push_back(m.mask(k, v) ? fixed(m.z_ratios(k, v), 2) : "");
            }
            t.rows.push_back(std::move(b));
            t.rows.push_back(std::move(z));
        }
    }
    return t;
}

void emit_model_tables(RunState& st, const std::vector<ModelReport>& reports) {
    st.emit("table3.txt", render_table3(reports));
    st.emit("tableC1.txt", render_tableC1(reports));
    st.emit("table3.csv", csv_string(table3_csv(reports)));
    st.emit("tableC1.csv", csv_string(tableC1_csv(reports)));
}

int stage_model(RunState& st, const ModelOutputs& mo, const RunConfig& cfg,
                std::ostream& log) {
    st.anchor_models = static_cast<int>(mo.reports.size());
    for (const auto& r : mo.reports) {
        std::string name = "models/" + file_label(r.anchor) + "_" +
                           direction_name(r.direction) + ".json";
        st.emit(name, dump_json(model_report_json(r)));
    }
    emit_model_tables(st, mo.reports);
    if (!mo.failures.empty()) {
        json fails = json::object();
        for (const auto& [a, msg] : mo.failures) fails[a] = msg;
        st.failures["anchors"] = fails;
        return 3;
    }
    (void)log;
    return 0;
}

void stage_report(RunState& st, const EstimateOutputs& eo,
                  const std::vector<ModelReport>& reports, std::ostream& log) {
    int n = 0;
    if (!eo.zones.empty()) {
        // Table-1 style renders of the regional aggregate: counts in
        // thousands to one decimal, then row percentages.
        st.emit("report/table1_counts.csv",
                csv_string(flow_counts_csv(eo.region, 1e-3, 1)));
        st.emit("report/table1_percent.csv", csv_string(flow_percent_csv(eo.region)));
        FlowTable scaled = eo.region;
        scaled.F *= 1e-3;
        st.emit("report/heatmap_REGION.svg",
                svg_heatmap(scaled, "expected flows, thousands (REGION)"));
        n += 3;
        for (const auto& z : eo.zones) {
            st.emit("report/heatmap_" + z.flows.zone_id + ".svg",
                    svg_heatmap(z.flows, "expected flows (" + z.flows.zone_id + ")"));
            ++n;
        }
    }
    if (!eo.volatility.empty()) {
        st.emit("report/volatility.svg", svg_volatility(eo.volatility));
        ++n;
    }
    if (!reports.empty()) {
        emit_model_tables(st, reports);
        n += 4;
    }
    log << "report: " << n << " artifacts rendered\n";
}

// Rebuilds EstimateOutputs from the artifacts a previous estimate run wrote,
// so `report` works stagewise without refitting zones.
EstimateOutputs load_estimate_outputs(const RunConfig& cfg) {
    ModelInputs in = read_estimate_artifacts(cfg);
    json s = read_json_file(
        (fs::path(cfg.out_dir) / "estimate_summary.json").string());
    EstimateOutputs eo;
    for (std::size_t i = 0; i < in.flows.size(); ++i) {
        ZoneOutputs z;
        z.flows = in.flows[i];
        z.flow_se = in.flow_se[i];
        eo.zones.push_back(std::move(z));
    }
    if (s.contains("region")) {
        const json& r = s.at("region");
        eo.region.zone_id = "REGION";
        eo.region.options1 = OptionSet(r.at("options1").get<std::vector<std::string>>());
        eo.region.options2 = OptionSet(r.at("options2").get<std::vector<std::string>>());
        eo.region.F = to_matrix(r.at("F"));
        eo.region.row_margins = to_vector(r.at("row_margins"));
        eo.region.col_margins = to_vector(r.at("col_margins"));
    }
    for (const auto& v : s.at("volatility")) {
        VolatilityRecord rec;
        rec.zone_id = v.at("zone_id").get<std::string>();
        rec.party_switch_pct = v.at("party_switch_pct").get<double>();
        rec.to_abstention_pct = v.at("to_abstention_pct").get<double>();
        for (const auto& [party, pct] : v.at("loyalty_pct").items())
            rec.loyalty_pct.emplace_back(party, pct.get<double>());
        eo.volatility.push_back(std::move(rec));
    }
    eo.loyalty_map = in.loyalty;
    if (s.at("volatility_correlation").is_number())
        eo.volatility_r = s.at("volatility_correlation").get<double>();
    else
        eo.volatility_r = std::nan("");
    return eo;
}

} // namespace

LoadedData load_and_validate(const RunConfig& cfg) {
    if (cfg.stations_path.empty()) throw ConfigError("no stations file configured");
    if (!fs::exists(cfg.stations_path))
        throw DataError("stations file not found: " + cfg.stations_path);
    LoadedData d;
    d.raw = load_stations(cfg.stations_path, cfg.format);
    if (!cfg.aggregation_path.empty()) {
        if (!fs::exists(cfg.aggregation_path))
            throw DataError("aggregation file not found: " + cfg.aggregation_path);
        d.aggregation = load_aggregation(cfg.aggregation_path);
        d.aggregated = aggregate_parties(d.raw, d.aggregation);
    } else {
        d.aggregated = d.raw;
    }
    std::vector<ZoneTable> zones =
        group_zones(d.aggregated, cfg.min_stations, &d.warnings);
    d.zones.reserve(zones.size());
    for (const auto& z : zones)
        d.zones.push_back(reconcile_electorates(z, cfg.reconcile, &d.warnings));
    if (!d.aggregated.options1.has(cfg.abstention_label) ||
        !d.aggregated.options2.has(cfg.abstention_label))
        d.warnings.push_back("abstention option '" + cfg.abstention_label +
                             "' not present in both elections; volatility "
                             "indexes unavailable");
    return d;
}

EstimateOutputs run_estimates(const LoadedData& data, const RunConfig& cfg,
                              int jobs) {
    EstimateOutputs out;
    const int Z = static_cast<int>(data.zones.size());
    std::vector<std::unique_ptr<ZoneOutputs>> slots(static_cast<std::size_t>(Z));
    std::vector<std::string> errors(static_cast<std::size_t>(Z));
    std::atomic<int> next{0};

    auto worker = [&]() {
        for (;;) {
            int i = next.fetch_add(1);
            if (i >= Z) break;
            const ZoneTable& z = data.zones[static_cast<std::size_t>(i)];
            try {
                auto zo = std::make_unique<ZoneOutputs>();
                zo->est = fit_zone(z, cfg.ei);
                zo->fit = goodness_of_fit(zo->est, z);
                zo->flows = flow_counts(zo->est, z, cfg.ei);
                zo->flow_se = flow_count_se(zo->est, z);
                slots[static_cast<std::size_t>(i)] = std::move(zo);
            } catch (const Error& e) {
                errors[static_cast<std::size_t>(i)] = e.what();
            }
        }
    };
    int nthreads = std::max(1, std::min(jobs, std::max(Z, 1)));
    std::vector<std::thread> pool;
    for (int t = 1; t < nthreads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();

    for (int i = 0; i < Z; ++i) {
        if (slots[static_cast<std::size_t>(i)])
            out.zones.push_back(std::move(*slots[static_cast<std::size_t>(i)]));
        else
            out.failures[data.zones[static_cast<std::size_t>(i)].zone_id] =
                errors[static_cast<std::size_t>(i)];
    }
    out.volatility_r = std::nan("");
    if (out.zones.empty()) return out;

    std::vector<FlowTable> tables;
    for (const auto& z : out.zones) tables.push_back(z.flows);
    out.region = aggregate_region(tables);

    const bool have_abst = out.region.options1.has(cfg.abstention_label) &&
                           out.region.options2.has(cfg.abstention_label);
    out.loyalty_map =
        resolve_loyalty(out.region.options1, out.region.options2,
                        cfg.abstention_label, data.aggregation.loyalty);
    if (have_abst) {
        for (const auto& z : out.zones)
            out.volatility.push_back(volatility_indexes(
                z.flows, cfg.abstention_label, data.aggregation.loyalty));
        std::vector<VolatilityRecord> zone_records = out.volatility;
        out.volatility.push_back(volatility_indexes(
            out.region, cfg.abstention_label, data.aggregation.loyalty));
        if (zone_records.size() >= 3) {
            try {
                out.volatility_r = volatility_correlation(zone_records);
            } catch (const Error&) {
                // constant indexes across zones; leave the correlation unset
            }
        }
    }
    return out;
}

CovariateMatrix build_design(const CsvTable& raw, const nlohmann::json& recipe) {
    if (!recipe.is_array())
        throw ConfigError("covariate_recipe must be a list of steps");
    int zc = raw.require("zone_id");
    CovariateMatrix M;
    for (const auto& row : raw.rows)
        M.zone_ids.push_back(row.at(static_cast<std::size_t>(zc)));

    std::map<std::string, Eigen::VectorXd> cols;
    for (std::size_t c = 0; c < raw.header.size(); ++c) {
        if (static_cast<int>(c) == zc) continue;
        Eigen::VectorXd v(static_cast<int>(raw.rows.size()));
        for (std::size_t r = 0; r < raw.rows.size(); ++r)
            v(static_cast<int>(r)) = parse_double(
                raw.rows[r].at(c), "covariate " + raw.header[c] + " row " +
                                       std::to_string(r + 2));
        cols.emplace(raw.header[c], std::move(v));
    }
    auto raw_col = [&cols](const std::string& name) -> const Eigen::VectorXd& {
        auto it = cols.find(name);
        if (it == cols.end())
            throw MissingColumn("covariate column '" + name + "' not found");
        return it->second;
    };
    auto check_keys = [](const json& step, const std::set<std::string>& allowed) {
        for (auto it = step.begin(); it != step.end(); ++it)
            if (!allowed.count(it.key()))
                throw ConfigError("unknown key '" + it.key() + "' in recipe step");
    };

    for (const auto& step : recipe) {
        if (!step.is_object() || !step.contains("op") || !step.contains("name"))
            throw ConfigError("recipe steps need 'op' and 'name'");
        std::string op = step.at("op").get<std::string>();
        std::string name = step.at("name").get<std::string>();
        if (name.empty() || name == "zone_id" || M.find(name) >= 0)
            throw ConfigError("bad or duplicate design column name '" + name + "'");
        Transform t;
        t.op = op;
        if (op == "standardize") {
            check_keys(step, {"op", "name", "input", "invert"});
            std::string in = step.at("input").get<std::string>();
            t.inputs = {in};
            t.inverted = step.value("invert", false);
            M.append(name, standardize(raw_col(in), t.inverted), std::move(t));
        } else if (op == "composite") {
            check_keys(step, {"op", "name", "inputs", "invert"});
            auto names = step.at("inputs").get<std::vector<std::string>>();
            if (names.empty()) throw ConfigError("composite needs inputs");
            std::vector<bool> flags(names.size(), false);
            if (step.contains("invert")) {
                if (step.at("invert").is_boolean()) {
                    flags.assign(names.size(), step.at("invert").get<bool>());
                } else {
                    auto fl = step.at("invert").get<std::vector<bool>>();
                    if (fl.size() != names.size())
                        throw ConfigError("composite invert flags must match inputs");
                    flags = fl;
                }
            }
            std::vector<Eigen::VectorXd> xs;
            for (const auto& n : names) xs.push_back(raw_col(n));
            t.inputs = names;
            t.inverted = std::all_of(flags.begin(), flags.end(),
                                     [](bool b) { return b; });
            M.append(name, composite(xs, flags), std::move(t));
        } else if (op == "residualize") {
            check_keys(step, {"op", "name", "input", "on"});
            std::string in = step.at("input").get<std::string>();
            std::string on = step.at("on").get<std::string>();
            int yi = M.find(in), oi = M.find(on);
            if (yi < 0 || oi < 0)
                throw ConfigError("residualize operands must be design columns "
                                  "built by earlier steps");
            t.inputs = {in};
            t.conditioned_on = on;
            M.append(name, residualize(M.X.col(yi), M.X.col(oi)), std::move(t));
        } else if (op == "dichotomize") {
            check_keys(step, {"op", "name", "inputs", "ratio"});
            auto names = step.at("inputs").get<std::vector<std::string>>();
            if (names.size() != 2)
                throw ConfigError("dichotomize needs exactly two inputs");
            t.inputs = names;
            t.ratio = step.value("ratio", 1.5);
            M.append(name,
                     dichotomize_tradition(raw_col(names[0]), raw_col(names[1]),
                                           t.ratio),
                     std::move(t));
        } else {
            throw ConfigError("unknown recipe op '" + op + "'");
        }
    }
    return M;
}

ModelOutputs run_models(const RunConfig& cfg, int jobs, std::ostream& log) {
    ModelInputs in = read_estimate_artifacts(cfg);
    return fit_models(in, cfg, jobs, log);
}

int run_subcommand(const std::string& sub, const RunConfig& cfg, int jobs,
                   std::ostream& log) {
    static const std::set<std::string> known = {
        "validate", "estimate", "covariates", "model",
        "report",   "simulate", "pipeline"};
    RunState st;
    st.out_dir = cfg.out_dir;
    int code = 0;
    try {
        if (!known.count(sub)) throw ConfigError("unknown subcommand '" + sub + "'");
        const bool pipeline = sub == "pipeline";

        if (sub == "simulate" || (pipeline && cfg.has_simulate))
            stage_simulate(st, cfg, log);

        std::optional<LoadedData> data;
        auto ensure_data = [&]() -> const LoadedData& {
            if (!data) {
                data = load_and_validate(cfg);
                st.warnings = data->warnings;
            }
            return *data;
        };

        if (sub == "validate" || pipeline)
            stage_validate(st, ensure_data(), cfg, log);

        EstimateOutputs eo;
        bool have_eo = false;
        if (sub == "estimate" || pipeline) {
            code = std::max(code, stage_estimate(st, ensure_data(), cfg, jobs, log, eo));
            have_eo = true;
        }

        if (sub == "covariates" || (pipeline && !cfg.covariates_path.empty()))
            stage_covariates(st, cfg, log);

        ModelOutputs mo;
        bool have_mo = false;
        if (sub == "model" || (pipeline && !cfg.anchors.empty())) {
            if (have_eo && !eo.zones.empty()) {
                ModelInputs in;
                for (const auto& z : eo.zones) {
                    in.zone_ids.push_back(z.flows.zone_id);
                    in.flows.push_back(z.flows);
                    in.flow_se.push_back(z.flow_se);
                }
                in.loyalty = eo.loyalty_map;
                mo = fit_models(in, cfg, jobs, log);
            } else {
                mo = run_models(cfg, jobs, log);
            }
            have_mo = true;
            code = std::max(code, stage_model(st, mo, cfg, log));
        }

        if (sub == "report" || pipeline) {
            if (!have_eo) {
                eo = load_estimate_outputs(cfg);
                have_eo = true;
            }
            if (!have_mo && !cfg.anchors.empty() && !eo.zones.empty()) {
                ModelInputs in;
                for (const auto& z : eo.zones) {
                    in.zone_ids.push_back(z.flows.zone_id);
                    in.flows.push_back(z.flows);
                    in.flow_se.push_back(z.flow_se);
                }
                in.loyalty = eo.loyalty_map;
                mo = fit_models(in, cfg, jobs, log);
                have_mo = true;
            }
            stage_report(st, eo, mo.reports, log);
        }

        st.input("stations", cfg.stations_path);
        st.input("covariates", cfg.covariates_path);
        st.input("aggregation", cfg.aggregation_path);
        write_manifest(st, sub);
        log << "manifest: " << (fs::path(cfg.out_dir) / "manifest.json").string()
            << "\n";
        return code;
    } catch (const NumericError& e) {
        log << "error: " << e.what() << "\n";
        try { write_manifest(st, sub, e.what()); } catch (...) {}
        return 3;
    } catch (const Error& e) {
        log << "error: " << e.what() << "\n";
        try { write_manifest(st, sub, e.what()); } catch (...) {}
        return 2;
    }
}

} // namespace flowcast
