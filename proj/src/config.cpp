#include "flowcast/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "flowcast/errors.hpp"

namespace flowcast {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                    const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

std::string resolve_path(const std::string& dir, const std::string& p) {
    if (p.empty()) return p;
    std::filesystem::path fp(p);
    if (fp.is_absolute()) return p;
    return (std::filesystem::path(dir) / fp).lexically_normal().string();
}

double need_number(const json& v, const std::string& where) {
    if (!v.is_number()) throw ConfigError(where + " must be a number");
    return v.get<double>();
}

int need_int(const json& v, const std::string& where) {
    if (!v.is_number_integer()) throw ConfigError(where + " must be an integer");
    return v.get<int>();
}

std::string need_string(const json& v, const std::string& where) {
    if (!v.is_string()) throw ConfigError(where + " must be a string");
    return v.get<std::string>();
}

bool need_bool(const json& v, const std::string& where) {
    if (!v.is_boolean()) throw ConfigError(where + " must be a boolean");
    return v.get<bool>();
}

Eigen::MatrixXd need_matrix(const json& v, const std::string& where) {
    if (!v.is_array() || v.empty() || !v[0].is_array())
        throw ConfigError(where + " must be an array of rows");
    const int rows = static_cast<int>(v.size());
    const int cols = static_cast<int>(v[0].size());
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        if (!v[i].is_array() || static_cast<int>(v[i].size()) != cols)
            throw ConfigError(where + " rows must all have the same length");
        for (int j = 0; j < cols; ++j)
            m(i, j) = need_number(v[i][j], where);
    }
    return m;
}

OptionSet parse_options(const json& v, const std::string& where) {
    if (v.is_array()) {
        OptionSet o(v.get<std::vector<std::string>>());
        return o;
    }
    if (!v.is_object()) throw ConfigError(where + " must be a list or an object");
    reject_unknown(v, {"labels", "reference"}, where);
    if (!v.contains("labels")) throw ConfigError(where + " needs labels");
    OptionSet o(v.at("labels").get<std::vector<std::string>>());
    if (v.contains("reference")) {
        const json& r = v.at("reference");
        if (r.is_string())
            o.reference_index = o.index_of(r.get<std::string>());
        else
            o.reference_index = need_int(r, where + ".reference");
        if (o.reference_index < 0 || o.reference_index >= o.size())
            throw ConfigError(where + ".reference is not one of the labels");
    }
    return o;
}

void parse_estimator(const json& v, EiConfig& ei) {
    reject_unknown(v, {"max_iter", "tol_loglik", "tol_grad", "phi_floor",
                       "rake_tol", "rake_max_sweeps"}, "estimator");
    if (v.contains("max_iter")) ei.max_iter = need_int(v["max_iter"], "estimator.max_iter");
    if (v.contains("tol_loglik")) ei.tol_loglik = need_number(v["tol_loglik"], "estimator.tol_loglik");
    if (v.contains("tol_grad")) ei.tol_grad = need_number(v["tol_grad"], "estimator.tol_grad");
    if (v.contains("phi_floor")) ei.phi_floor = need_number(v["phi_floor"], "estimator.phi_floor");
    if (v.contains("rake_tol")) ei.rake_tol = need_number(v["rake_tol"], "estimator.rake_tol");
    if (v.contains("rake_max_sweeps"))
        ei.rake_max_sweeps = need_int(v["rake_max_sweeps"], "estimator.rake_max_sweeps");
}

void parse_models(const json& v, RunConfig& cfg) {
    reject_unknown(v,
                   {"anchors", "stepwise_schedule", "strong_p", "weak_p",
                    "marginal_step", "mnl", "auto_dummies", "max_dummy_zones",
                    "outlier_cutoff"},
                   "models");
    if (v.contains("anchors")) {
        if (!v["anchors"].is_array()) throw ConfigError("models.anchors must be a list");
        for (const auto& a : v["anchors"]) {
            AnchorSpec spec;
            if (a.is_string()) {
                spec.option = a.get<std::string>();
            } else if (a.is_object()) {
                reject_unknown(a, {"option", "direction"}, "models.anchors[]");
                spec.option = need_string(a.at("option"), "models.anchors[].option");
                if (a.contains("direction")) {
                    std::string d = need_string(a["direction"], "models.anchors[].direction");
                    if (d == "outgoing") spec.direction = Direction::outgoing;
                    else if (d == "incoming") spec.direction = Direction::incoming;
                    else throw ConfigError("direction must be outgoing or incoming");
                }
            } else {
                throw ConfigError("models.anchors entries must be strings or objects");
            }
            cfg.anchors.push_back(spec);
        }
    }
    if (v.contains("stepwise_schedule")) {
        if (!v["stepwise_schedule"].is_array())
            throw ConfigError("models.stepwise_schedule must be a list");
        cfg.stepwise_schedule.clear();
        for (const auto& t : v["stepwise_schedule"])
            cfg.stepwise_schedule.push_back(need_number(t, "models.stepwise_schedule"));
    }
    if (v.contains("strong_p")) cfg.strong_p = need_number(v["strong_p"], "models.strong_p");
    if (v.contains("weak_p")) cfg.weak_p = need_number(v["weak_p"], "models.weak_p");
    if (v.contains("marginal_step"))
        cfg.marginal_step = need_number(v["marginal_step"], "models.marginal_step");
    if (v.contains("mnl")) {
        reject_unknown(v["mnl"], {"max_iter", "tol_grad", "separation_beta"}, "models.mnl");
        if (v["mnl"].contains("max_iter"))
            cfg.mnl.max_iter = need_int(v["mnl"]["max_iter"], "models.mnl.max_iter");
        if (v["mnl"].contains("tol_grad"))
            cfg.mnl.tol_grad = need_number(v["mnl"]["tol_grad"], "models.mnl.tol_grad");
        if (v["mnl"].contains("separation_beta"))
            cfg.mnl.separation_beta =
                need_number(v["mnl"]["separation_beta"], "models.mnl.separation_beta");
    }
    if (v.contains("auto_dummies"))
        cfg.auto_dummies = need_bool(v["auto_dummies"], "models.auto_dummies");
    if (v.contains("max_dummy_zones"))
        cfg.max_dummy_zones = need_int(v["max_dummy_zones"], "models.max_dummy_zones");
    if (v.contains("outlier_cutoff"))
        cfg.outlier_cutoff = need_number(v["outlier_cutoff"], "models.outlier_cutoff");
}

void parse_simulate(const json& v, RunConfig& cfg) {
    reject_unknown(v,
                   {"seed", "zones", "stations_per_zone", "voters_per_station",
                    "electorate_spread", "origin_jitter_sd", "dirichlet_concentration",
                    "switch_abst_r", "switch_scale", "abst_scale", "geog_recovery_r",
                    "rural_periph_r", "raw_labels", "heterogeneity_stress",
                    "stress_scale", "options1", "options2", "abstention",
                    "origin_shares", "beta0", "effects", "true_P", "outliers",
                    "stations_out", "covariates_out", "truth_out"},
                   "simulate");
    cfg.has_simulate = true;
    SynthSpec& s = cfg.synth;
    if (v.contains("seed")) s.seed = v["seed"].get<std::uint64_t>();
    if (v.contains("zones")) s.zones = need_int(v["zones"], "simulate.zones");
    if (v.contains("stations_per_zone"))
        s.stations_per_zone = need_int(v["stations_per_zone"], "simulate.stations_per_zone");
    if (v.contains("voters_per_station"))
        s.voters_per_station = need_number(v["voters_per_station"], "simulate.voters_per_station");
    if (v.contains("electorate_spread"))
        s.electorate_spread = need_number(v["electorate_spread"], "simulate.electorate_spread");
    if (v.contains("origin_jitter_sd"))
        s.origin_jitter_sd = need_number(v["origin_jitter_sd"], "simulate.origin_jitter_sd");
    if (v.contains("dirichlet_concentration"))
        s.dirichlet_concentration =
            need_number(v["dirichlet_concentration"], "simulate.dirichlet_concentration");
    if (v.contains("switch_abst_r"))
        s.switch_abst_r = need_number(v["switch_abst_r"], "simulate.switch_abst_r");
    if (v.contains("switch_scale"))
        s.switch_scale = need_number(v["switch_scale"], "simulate.switch_scale");
    if (v.contains("abst_scale"))
        s.abst_scale = need_number(v["abst_scale"], "simulate.abst_scale");
    if (v.contains("geog_recovery_r"))
        s.geog_recovery_r = need_number(v["geog_recovery_r"], "simulate.geog_recovery_r");
    if (v.contains("rural_periph_r"))
        s.rural_periph_r = need_number(v["rural_periph_r"], "simulate.rural_periph_r");
    if (v.contains("raw_labels")) s.raw_labels = need_bool(v["raw_labels"], "simulate.raw_labels");
    if (v.contains("heterogeneity_stress"))
        s.heterogeneity_stress = need_bool(v["heterogeneity_stress"], "simulate.heterogeneity_stress");
    if (v.contains("stress_scale"))
        s.stress_scale = need_number(v["stress_scale"], "simulate.stress_scale");
    if (v.contains("options1")) s.options1 = parse_options(v["options1"], "simulate.options1");
    if (v.contains("options2")) s.options2 = parse_options(v["options2"], "simulate.options2");
    if (v.contains("abstention"))
        s.abstention_label = need_string(v["abstention"], "simulate.abstention");
    if (v.contains("origin_shares")) {
        const auto& arr = v["origin_shares"];
        if (!arr.is_array()) throw ConfigError("simulate.origin_shares must be a list");
        s.origin_shares.resize(static_cast<int>(arr.size()));
        for (int i = 0; i < s.origin_shares.size(); ++i)
            s.origin_shares(i) = need_number(arr[i], "simulate.origin_shares");
    }
    if (v.contains("beta0")) s.beta0 = need_matrix(v["beta0"], "simulate.beta0");
    if (v.contains("effects")) {
        if (!v["effects"].is_object())
            throw ConfigError("simulate.effects must map driver names to matrices");
        for (auto it = v["effects"].begin(); it != v["effects"].end(); ++it)
            s.effects.emplace_back(it.key(), need_matrix(it.value(), "simulate.effects." + it.key()));
    }
    if (v.contains("true_P")) {
        if (!v["true_P"].is_array()) throw ConfigError("simulate.true_P must be a list of matrices");
        for (const auto& m : v["true_P"]) s.true_P.push_back(need_matrix(m, "simulate.true_P"));
    }
    if (v.contains("outliers")) {
        if (!v["outliers"].is_array()) throw ConfigError("simulate.outliers must be a list");
        for (const auto& o : v["outliers"]) {
            reject_unknown(o, {"zone", "origin", "destination", "bump"}, "simulate.outliers[]");
            OutlierSpec spec;
            spec.zone_id = need_string(o.at("zone"), "simulate.outliers[].zone");
            spec.origin = need_string(o.at("origin"), "simulate.outliers[].origin");
            spec.destination = need_string(o.at("destination"), "simulate.outliers[].destination");
            spec.bump = need_number(o.at("bump"), "simulate.outliers[].bump");
            s.outliers.push_back(spec);
        }
    }
    cfg.sim_stations_out = v.contains("stations_out")
                               ? need_string(v["stations_out"], "simulate.stations_out")
                               : "stations.csv";
    cfg.sim_covariates_out = v.contains("covariates_out")
                                 ? need_string(v["covariates_out"], "simulate.covariates_out")
                                 : "covariates.csv";
    cfg.sim_truth_out =
        v.contains("truth_out") ? need_string(v["truth_out"], "simulate.truth_out") : "truth.json";
}

} // namespace

RunConfig parse_config(const json& doc, const std::string& config_dir) {
    if (!doc.is_object()) throw ConfigError("config root must be an object");
    reject_unknown(doc,
                   {"stations", "covariates", "aggregation", "format",
                    "min_stations", "reconcile", "abstention", "estimator",
                    "covariate_recipe", "models", "out_dir", "jobs", "simulate"},
                   "config");
    RunConfig cfg;
    cfg.config_dir = config_dir;
    if (doc.contains("stations"))
        cfg.stations_path = resolve_path(config_dir, need_string(doc["stations"], "stations"));
    if (doc.contains("covariates"))
        cfg.covariates_path = resolve_path(config_dir, need_string(doc["covariates"], "covariates"));
    if (doc.contains("aggregation"))
        cfg.aggregation_path =
            resolve_path(config_dir, need_string(doc["aggregation"], "aggregation"));
    if (doc.contains("format")) {
        std::string f = need_string(doc["format"], "format");
        if (f == "wide") cfg.format = StationFormat::wide;
        else if (f == "long") cfg.format = StationFormat::long_form;
        else throw ConfigError("format must be wide or long");
    }
    if (doc.contains("min_stations"))
        cfg.min_stations = need_int(doc["min_stations"], "min_stations");
    if (doc.contains("reconcile")) {
        std::string r = need_string(doc["reconcile"], "reconcile");
        if (r == "proportional_scale") cfg.reconcile = ReconcileMode::proportional_scale;
        else if (r == "reject") cfg.reconcile = ReconcileMode::reject;
        else throw ConfigError("reconcile must be proportional_scale or reject");
    }
    if (doc.contains("abstention"))
        cfg.abstention_label = need_string(doc["abstention"], "abstention");
    if (doc.contains("estimator")) parse_estimator(doc["estimator"], cfg.ei);
    if (doc.contains("covariate_recipe")) {
        if (!doc["covariate_recipe"].is_array())
            throw ConfigError("covariate_recipe must be a list of steps");
        cfg.covariate_recipe = doc["covariate_recipe"];
    }
    if (doc.contains("models")) parse_models(doc["models"], cfg);
    if (doc.contains("out_dir"))
        cfg.out_dir = resolve_path(config_dir, need_string(doc["out_dir"], "out_dir"));
    else
        cfg.out_dir = resolve_path(config_dir, "out");
    if (doc.contains("jobs")) cfg.jobs = need_int(doc["jobs"], "jobs");
    if (doc.contains("simulate")) {
        parse_simulate(doc["simulate"], cfg);
        cfg.sim_stations_out = resolve_path(config_dir, cfg.sim_stations_out);
        cfg.sim_covariates_out = resolve_path(config_dir, cfg.sim_covariates_out);
        cfg.sim_truth_out = resolve_path(config_dir, cfg.sim_truth_out);
    }
    for (double t : cfg.stepwise_schedule)
        if (!(t >= 0)) throw ConfigError("stepwise thresholds must be non-negative");
    if (cfg.min_stations < 2) throw ConfigError("min_stations must be at least 2");
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config " + path);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    std::string dir = std::filesystem::path(path).parent_path().string();
    if (dir.empty()) dir = ".";
    return parse_config(doc, dir);
}

int resolve_jobs(int cli_jobs, const RunConfig& cfg) {
    if (cli_jobs > 0) return cli_jobs;
    if (const char* env = std::getenv("FLOWCAST_JOBS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end && *end == '\0' && v > 0) return static_cast<int>(v);
    }
    if (cfg.jobs > 0) return cfg.jobs;
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

} // namespace flowcast
