#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <sstream>

#include "flowcast/config.hpp"
#include "flowcast/covariates.hpp"
#include "flowcast/data_model.hpp"
#include "flowcast/ei.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/mnl.hpp"
#include "flowcast/pipeline.hpp"
#include "flowcast/raking.hpp"
#include "flowcast/synth.hpp"
#include "flowcast/volatility.hpp"

namespace py = pybind11;
using namespace flowcast;

namespace {

Direction parse_direction(const std::string& s) {
    if (s == "outgoing") return Direction::outgoing;
    if (s == "incoming") return Direction::incoming;
    throw ConfigError("direction must be 'outgoing' or 'incoming'");
}

StationFormat parse_format(const std::string& s) {
    if (s == "wide") return StationFormat::wide;
    if (s == "long") return StationFormat::long_form;
    throw ConfigError("format must be 'wide' or 'long'");
}

// Zone built from per-station count matrices; margins are assumed already
// reconciled (equal grand totals).
ZoneTable make_zone(const std::string& zone_id, const OptionSet& options1,
                    const OptionSet& options2, const Eigen::MatrixXd& counts1,
                    const Eigen::MatrixXd& counts2,
                    std::vector<std::string> station_ids) {
    if (counts1.rows() != counts2.rows())
        throw DimensionMismatch("counts1 and counts2 must have one row per station");
    if (counts1.cols() != options1.size() || counts2.cols() != options2.size())
        throw DimensionMismatch("count columns must match the option sets");
    ZoneTable z;
    z.zone_id = zone_id;
    z.options1 = options1;
    z.options2 = options2;
    for (int s = 0; s < counts1.rows(); ++s) {
        StationRecord r;
        r.station_id = s < static_cast<int>(station_ids.size())
                           ? station_ids[s]
                           : zone_id + "S" + std::to_string(s + 1);
        r.zone_id = zone_id;
        for (int i = 0; i < counts1.cols(); ++i)
            r.counts1.push_back(std::llround(counts1(s, i)));
        for (int j = 0; j < counts2.cols(); ++j)
            r.counts2.push_back(std::llround(counts2(s, j)));
        r.electorate1 = r.total1();
        r.electorate2 = r.total2();
        z.stations.push_back(std::move(r));
    }
    z.recompute_margins();
    return z;
}

CovariateMatrix make_design(std::vector<std::string> zone_ids,
                            std::vector<std::string> names,
                            const Eigen::MatrixXd& X) {
    if (X.rows() != static_cast<int>(zone_ids.size()) ||
        X.cols() != static_cast<int>(names.size()))
        throw DimensionMismatch("X must be zones x names");
    CovariateMatrix M;
    M.zone_ids = std::move(zone_ids);
    M.names = std::move(names);
    M.X = X;
    for (std::size_t v = 0; v < M.names.size(); ++v)
        M.transforms.push_back({"raw", {M.names[v]}, false, "", 0.0});
    return M;
}

TransitionCountPanel make_panel(const std::string& anchor,
                                const std::string& direction,
                                std::vector<std::string> zone_ids,
                                const OptionSet& options,
                                const Eigen::MatrixXd& counts,
                                py::object totals, py::object count_se) {
    if (counts.rows() != static_cast<int>(zone_ids.size()) ||
        counts.cols() != options.size())
        throw DimensionMismatch("counts must be zones x options");
    TransitionCountPanel p;
    p.anchor = anchor;
    p.direction = parse_direction(direction);
    p.zone_ids = std::move(zone_ids);
    p.options = options;
    p.counts = counts;
    p.totals = totals.is_none() ? Eigen::VectorXd(counts.rowwise().sum())
                                : totals.cast<Eigen::VectorXd>();
    p.count_se = count_se.is_none()
                     ? Eigen::MatrixXd::Zero(counts.rows(), counts.cols())
                     : count_se.cast<Eigen::MatrixXd>();
    return p;
}

py::tuple estimate_zones(const std::string& stations, int min_stations,
                         const std::string& abstention,
                         const std::string& aggregation, const std::string& format,
                         int jobs) {
    RunConfig cfg;
    cfg.stations_path = stations;
    cfg.aggregation_path = aggregation;
    cfg.min_stations = min_stations;
    cfg.abstention_label = abstention;
    cfg.format = parse_format(format);
    LoadedData data;
    EstimateOutputs out;
    {
        py::gil_scoped_release release;
        data = load_and_validate(cfg);
        out = run_estimates(data, cfg, jobs < 1 ? 1 : jobs);
    }
    return py::make_tuple(out, data.warnings);
}

void simulate(const std::string& stations_path, const std::string& covariates_path,
              const std::string& truth_path, std::uint64_t seed, int zones,
              int stations_per_zone, double voters_per_station, bool umbria_like) {
    SynthSpec spec = umbria_like ? SynthSpec::defaults(seed) : SynthSpec{};
    spec.seed = seed;
    spec.zones = zones;
    spec.stations_per_zone = stations_per_zone;
    spec.voters_per_station = voters_per_station;
    SynthOutput out;
    {
        py::gil_scoped_release release;
        out = generate(spec);
        write_synth(out, stations_path, covariates_path, truth_path);
    }
}

py::tuple run(const std::string& subcommand, const std::string& config_path,
              const std::string& out_dir, int jobs) {
    RunConfig cfg = load_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    int resolved = resolve_jobs(jobs, cfg);
    std::ostringstream log;
    int code;
    {
        py::gil_scoped_release release;
        code = run_subcommand(subcommand, cfg, resolved, log);
    }
    return py::make_tuple(code, log.str());
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Voter transition flows from polling-station aggregates";
    m.attr("__version__") = "0.1.0";

    auto exc_base = py::register_exception<Error>(m, "FlowcastError", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", exc_base);
    py::register_exception<DataError>(m, "DataError", exc_base);
    py::register_exception<NumericError>(m, "NumericError", exc_base);

    py::class_<OptionSet>(m, "OptionSet")
        .def(py::init<std::vector<std::string>, int>(), py::arg("labels"),
             py::arg("reference") = -1)
        .def_readwrite("labels", &OptionSet::labels)
        .def_readwrite("reference_index", &OptionSet::reference_index)
        .def("size", &OptionSet::size)
        .def("index_of", &OptionSet::index_of)
        .def("__repr__", [](const OptionSet& o) {
            std::string s = "OptionSet([";
            for (std::size_t i = 0; i < o.labels.size(); ++i)
                s += (i ? ", '" : "'") + o.labels[i] + "'";
            return s + "], reference=" + std::to_string(o.reference_index) + ")";
        });

    py::class_<ZoneTable>(m, "ZoneTable")
        .def_readonly("zone_id", &ZoneTable::zone_id)
        .def_readonly("options1", &ZoneTable::options1)
        .def_readonly("options2", &ZoneTable::options2)
        .def_readonly("margins1", &ZoneTable::margins1)
        .def_readonly("margins2", &ZoneTable::margins2)
        .def("__repr__", [](const ZoneTable& z) {
            return "ZoneTable('" + z.zone_id + "', " +
                   std::to_string(z.stations.size()) + " stations)";
        });

    py::class_<TransitionEstimate>(m, "TransitionEstimate")
        .def_readonly("zone_id", &TransitionEstimate::zone_id)
        .def_readonly("options1", &TransitionEstimate::options1)
        .def_readonly("options2", &TransitionEstimate::options2)
        .def_readonly("P", &TransitionEstimate::P)
        .def_readonly("theta", &TransitionEstimate::theta)
        .def_readonly("se_P", &TransitionEstimate::se_P)
        .def_readonly("phi", &TransitionEstimate::phi)
        .def_readonly("loglik", &TransitionEstimate::loglik)
        .def_readonly("iterations", &TransitionEstimate::iterations)
        .def_readonly("converged", &TransitionEstimate::converged);

    py::class_<FlowTable>(m, "FlowTable")
        .def(py::init<>())
        .def_readwrite("zone_id", &FlowTable::zone_id)
        .def_readwrite("options1", &FlowTable::options1)
        .def_readwrite("options2", &FlowTable::options2)
        .def_readwrite("F", &FlowTable::F)
        .def_readwrite("row_margins", &FlowTable::row_margins)
        .def_readwrite("col_margins", &FlowTable::col_margins);

    py::class_<FitReport>(m, "FitReport")
        .def_readonly("zone_id", &FitReport::zone_id)
        .def_readonly("pearson_stat", &FitReport::pearson_stat)
        .def_readonly("df", &FitReport::df)
        .def_readonly("pseudo_r2", &FitReport::pseudo_r2);

    py::class_<VolatilityRecord>(m, "VolatilityRecord")
        .def_readonly("zone_id", &VolatilityRecord::zone_id)
        .def_readonly("party_switch_pct", &VolatilityRecord::party_switch_pct)
        .def_readonly("to_abstention_pct", &VolatilityRecord::to_abstention_pct)
        .def_readonly("loyalty_pct", &VolatilityRecord::loyalty_pct);

    py::class_<CovariateMatrix>(m, "CovariateMatrix")
        .def_readonly("zone_ids", &CovariateMatrix::zone_ids)
        .def_readonly("names", &CovariateMatrix::names)
        .def_readwrite("X", &CovariateMatrix::X)
        .def("cols", &CovariateMatrix::cols)
        .def("rows", &CovariateMatrix::rows)
        .def("find", &CovariateMatrix::find);

    py::class_<TransitionCountPanel>(m, "TransitionCountPanel")
        .def_readonly("anchor", &TransitionCountPanel::anchor)
        .def_readonly("zone_ids", &TransitionCountPanel::zone_ids)
        .def_readonly("options", &TransitionCountPanel::options)
        .def_readonly("counts", &TransitionCountPanel::counts)
        .def_readonly("totals", &TransitionCountPanel::totals)
        .def_readonly("count_se", &TransitionCountPanel::count_se)
        .def_property_readonly("direction", [](const TransitionCountPanel& p) {
            return direction_name(p.direction);
        });

    py::class_<MnlModel>(m, "MnlModel")
        .def_readonly("zone_ids", &MnlModel::zone_ids)
        .def_readonly("options", &MnlModel::options)
        .def_readonly("covariates", &MnlModel::covariates)
        .def_readonly("x_center", &MnlModel::x_center)
        .def_readonly("beta0", &MnlModel::beta0)
        .def_readonly("beta", &MnlModel::beta)
        .def_readonly("mask", &MnlModel::mask)
        .def_readonly("z_beta0", &MnlModel::z_beta0)
        .def_readonly("z_ratios", &MnlModel::z_ratios)
        .def_readonly("se_beta", &MnlModel::se_beta)
        .def_readonly("loglik", &MnlModel::loglik)
        .def_readonly("deviance", &MnlModel::deviance)
        .def_readonly("null_deviance", &MnlModel::null_deviance)
        .def_readonly("iterations", &MnlModel::iterations)
        .def("predict", &MnlModel::predict, py::arg("X"));

    py::class_<ResidualDiagnostics> rd(m, "ResidualDiagnostics");
    py::class_<ResidualDiagnostics::Outlier>(rd, "Outlier")
        .def_readonly("zone_id", &ResidualDiagnostics::Outlier::zone_id)
        .def_readonly("option", &ResidualDiagnostics::Outlier::option)
        .def_readonly("residual", &ResidualDiagnostics::Outlier::residual);
    rd.def_readonly("raw", &ResidualDiagnostics::raw)
        .def_readonly("standardized", &ResidualDiagnostics::standardized)
        .def_readonly("outliers", &ResidualDiagnostics::outliers)
        .def_readonly("cutoff", &ResidualDiagnostics::cutoff);

    py::class_<ZoneOutputs>(m, "ZoneOutputs")
        .def_readonly("est", &ZoneOutputs::est)
        .def_readonly("fit", &ZoneOutputs::fit)
        .def_readonly("flows", &ZoneOutputs::flows)
        .def_readonly("flow_se", &ZoneOutputs::flow_se);

    py::class_<EstimateOutputs>(m, "EstimateOutputs")
        .def_readonly("zones", &EstimateOutputs::zones)
        .def_readonly("failures", &EstimateOutputs::failures)
        .def_readonly("region", &EstimateOutputs::region)
        .def_readonly("volatility", &EstimateOutputs::volatility)
        .def_readonly("volatility_r", &EstimateOutputs::volatility_r)
        .def_readonly("loyalty_map", &EstimateOutputs::loyalty_map);

    // construction helpers
    m.def("make_zone", &make_zone, py::arg("zone_id"), py::arg("options1"),
          py::arg("options2"), py::arg("counts1"), py::arg("counts2"),
          py::arg("station_ids") = std::vector<std::string>{},
          "Zone from per-station origin/destination count matrices");
    m.def("make_design", &make_design, py::arg("zone_ids"), py::arg("names"),
          py::arg("X"), "Design matrix from a zones x covariates array");
    m.def("make_panel", &make_panel, py::arg("anchor"), py::arg("direction"),
          py::arg("zone_ids"), py::arg("options"), py::arg("counts"),
          py::arg("totals") = py::none(), py::arg("count_se") = py::none(),
          "Anchor transition counts from a zones x options array");

    // transition estimation
    m.def(
        "fit_zone",
        [](const ZoneTable& z, int max_iter, double tol_loglik, double tol_grad) {
            EiConfig cfg;
            cfg.max_iter = max_iter;
            cfg.tol_loglik = tol_loglik;
            cfg.tol_grad = tol_grad;
            return fit_zone(z, cfg);
        },
        py::arg("zone"), py::arg("max_iter") = 200, py::arg("tol_loglik") = 1e-8,
        py::arg("tol_grad") = 1e-6, py::call_guard<py::gil_scoped_release>());
    m.def("goodness_of_fit", &goodness_of_fit, py::arg("est"), py::arg("zone"));
    m.def(
        "flow_counts",
        [](const TransitionEstimate& est, const ZoneTable& z) {
            return flow_counts(est, z);
        },
        py::arg("est"), py::arg("zone"));
    m.def("standard_errors", &standard_errors, py::arg("est"));
    m.def("flow_count_se", &flow_count_se, py::arg("est"), py::arg("zone"));
    m.def("theta_to_p", &theta_to_p, py::arg("theta"));
    m.def("p_to_theta", &p_to_theta, py::arg("P"));
    m.def(
        "rake_to_margins",
        [](const Eigen::MatrixXd& F, const Eigen::VectorXd& rows,
           const Eigen::VectorXd& cols, double tol, int max_sweeps) {
            return rake_to_margins(F, rows, cols, tol, max_sweeps);
        },
        py::arg("F"), py::arg("row_margins"), py::arg("col_margins"),
        py::arg("tol") = 1e-6, py::arg("max_sweeps") = 1000);

    // volatility
    m.def("row_percentages", &row_percentages, py::arg("flows"));
    m.def("volatility_indexes", &volatility_indexes, py::arg("flows"),
          py::arg("abstention") = "No vote",
          py::arg("loyalty_overrides") = std::map<std::string, std::string>{});
    m.def("aggregate_region", &aggregate_region, py::arg("tables"));
    m.def("volatility_correlation", &volatility_correlation, py::arg("records"));

    // covariates
    m.def("standardize", &standardize, py::arg("x"), py::arg("invert") = false);
    m.def("composite", &composite, py::arg("xs"),
          py::arg("invert_flags") = std::vector<bool>{});
    m.def("residualize", &residualize, py::arg("y"), py::arg("on"));
    m.def("dichotomize_tradition", &dichotomize_tradition, py::arg("votes_a"),
          py::arg("votes_b"), py::arg("ratio") = 1.5);
    m.def("add_zone_dummies", &add_zone_dummies, py::arg("X"), py::arg("zones"));

    // covariate models
    m.def(
        "build_panel",
        [](const std::vector<FlowTable>& flows, const std::string& anchor,
           const std::string& direction, py::object flow_se) {
            if (flow_se.is_none()) return build_panel(flows, anchor, parse_direction(direction));
            auto se = flow_se.cast<std::vector<Eigen::MatrixXd>>();
            return build_panel(flows, anchor, parse_direction(direction), &se);
        },
        py::arg("flows"), py::arg("anchor"), py::arg("direction") = "outgoing",
        py::arg("flow_se") = py::none());
    m.def(
        "fit_mnl",
        [](const TransitionCountPanel& panel, const CovariateMatrix& X,
           py::object mask, int max_iter, double tol_grad, double separation_beta) {
            MnlConfig cfg;
            cfg.max_iter = max_iter;
            cfg.tol_grad = tol_grad;
            cfg.separation_beta = separation_beta;
            if (mask.is_none()) return fit(panel, X, cfg);
            return fit(panel, X, mask.cast<Mask>(), cfg);
        },
        py::arg("panel"), py::arg("X"), py::arg("mask") = py::none(),
        py::arg("max_iter") = 200, py::arg("tol_grad") = 1e-8,
        py::arg("separation_beta") = 30.0);
    m.def(
        "stepwise_select",
        [](const TransitionCountPanel& panel, const CovariateMatrix& X,
           std::vector<double> schedule, int max_iter) {
            MnlConfig cfg;
            cfg.max_iter = max_iter;
            return stepwise_select(panel, X, schedule, cfg);
        },
        py::arg("panel"), py::arg("X"),
        py::arg("schedule") = std::vector<double>{0.5, 1.0},
        py::arg("max_iter") = 200);
    m.def("marginal_effects", &marginal_effects, py::arg("model"),
          py::arg("t") = 1e-5);
    m.def("deviance_explained", &deviance_explained, py::arg("model"));
    m.def("residual_diagnostics", &residual_diagnostics, py::arg("model"),
          py::arg("panel"), py::arg("X"), py::arg("cutoff") = 2.0);

    // synthetic data and the pipeline driver
    m.def("simulate", &simulate, py::arg("stations_path"), py::arg("covariates_path"),
          py::arg("truth_path"), py::arg("seed") = 20220612, py::arg("zones") = 19,
          py::arg("stations_per_zone") = 53, py::arg("voters_per_station") = 700.0,
          py::arg("umbria_like") = true,
          "Write a synthetic two-election station file with known ground truth");
    m.def("estimate_zones", &estimate_zones, py::arg("stations"),
          py::arg("min_stations") = 10, py::arg("abstention") = "No vote",
          py::arg("aggregation") = "", py::arg("format") = "wide",
          py::arg("jobs") = 1,
          "Load a station file, fit every zone, and return (outputs, warnings)");
    m.def("run", &run, py::arg("subcommand"), py::arg("config"),
          py::arg("out_dir") = "", py::arg("jobs") = 0,
          "Run a CLI subcommand from a config file; returns (exit_code, log)");
}
