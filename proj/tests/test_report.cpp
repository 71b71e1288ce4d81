#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "flowcast/config.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/report.hpp"
#include "flowcast/sha256.hpp"

using namespace flowcast;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

FlowTable small_table() {
    FlowTable t;
    t.zone_id = "Z01";
    t.options1 = OptionSet({"A", "B"}, 1);
    t.options2 = OptionSet({"x", "y", "No vote"}, 2);
    t.F.resize(2, 3);
    t.F << 10.0, 4.5, 5.5,
           2.0, 30.0, 8.0;
    t.row_margins = t.F.rowwise().sum();
    t.col_margins = t.F.colwise().sum().transpose();
    return t;
}

// hand-built model shell, enough for the renderers
ModelReport tiny_model(const std::string& anchor, Direction dir,
                       std::vector<std::string> options, int ref) {
    ModelReport r;
    r.anchor = anchor;
    r.direction = dir;
    MnlModel& m = r.model;
    m.options = OptionSet(std::move(options), ref);
    m.covariates = {"geog", "unemp"};
    const int K = m.options.size(), V = 2;
    m.x_center = Eigen::VectorXd::Zero(V);
    m.beta0 = Eigen::VectorXd::Zero(K);
    m.beta = Eigen::MatrixXd::Zero(K, V);
    m.mask = Mask::Zero(K, V);
    m.z_beta0 = Eigen::VectorXd::Zero(K);
    m.z_ratios = Eigen::MatrixXd::Zero(K, V);
    m.se_beta = Eigen::MatrixXd::Zero(K, V);
    m.deviance = 100.0;
    m.null_deviance = 200.0;
    r.marginal = Eigen::MatrixXd::Zero(K, V);
    r.flags.p_values = Eigen::MatrixXd::Ones(K, V);
    r.flags.flags.assign(K, std::vector<Flag>(V, Flag::none));
    return r;
}

fs::path fresh_dir(const std::string& tag) {
    fs::path d = fs::temp_directory_path() / ("flowcast_test_" + tag);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

} // namespace

TEST_SUITE("report") {

TEST_CASE("sha256 matches the published vectors") {
    CHECK(sha256_hex("") ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
    CHECK(sha256_hex(std::string(1000000, 'a')) ==
          "cdc76e5c9914fb9281a1c7e284d73e67f1809a48a497200e046d39ccc7112cd0");
}

TEST_CASE("sha256_file streams the same digest") {
    fs::path d = fresh_dir("sha");
    fs::path f = d / "blob.bin";
    std::string payload(70000, 'x');
    payload[0] = '\0';
    payload[69999] = '\n';
    { std::ofstream(f, std::ios::binary).write(payload.data(), payload.size()); }
    CHECK(sha256_file(f.string()) == sha256_hex(payload));
    CHECK_THROWS_AS(sha256_file((d / "absent").string()), DataError);
}

TEST_CASE("config defaults") {
    RunConfig cfg = parse_config(json::object(), ".");
    CHECK(cfg.stations_path.empty());
    CHECK(cfg.format == StationFormat::wide);
    CHECK(cfg.min_stations == 10);
    CHECK(cfg.reconcile == ReconcileMode::proportional_scale);
    CHECK(cfg.abstention_label == "No vote");
    CHECK(cfg.ei.max_iter == 200);
    CHECK(cfg.stepwise_schedule == std::vector<double>{0.5, 1.0});
    CHECK(cfg.strong_p == 0.01);
    CHECK(cfg.weak_p == 0.08);
    CHECK(cfg.auto_dummies);
    CHECK(cfg.max_dummy_zones == 3);
    CHECK(cfg.outlier_cutoff == 2.0);
    CHECK(cfg.out_dir == "out");
    CHECK(cfg.jobs == 0);
    CHECK_FALSE(cfg.has_simulate);
}

TEST_CASE("config full round trip") {
    json doc = {
        {"stations", "data/s.csv"},
        {"covariates", "/abs/c.csv"},
        {"aggregation", "agg.json"},
        {"format", "long"},
        {"min_stations", 5},
        {"reconcile", "reject"},
        {"abstention", "Astensione"},
        {"estimator", {{"max_iter", 77}, {"tol_grad", 1e-5}, {"rake_tol", 1e-9}}},
        {"covariate_recipe", json::array({{{"op", "standardize"}, {"name", "g"}, {"input", "raw_g"}}})},
        {"models",
         {{"anchors", json::array({"M5S", {{"option", "PD"}, {"direction", "incoming"}}})},
          {"stepwise_schedule", {0.5, 1.0, 1.5}},
          {"strong_p", 0.02},
          {"weak_p", 0.1},
          {"marginal_step", 1e-4},
          {"mnl", {{"max_iter", 99}, {"separation_beta", 25.0}}},
          {"auto_dummies", false},
          {"max_dummy_zones", 5},
          {"outlier_cutoff", 2.5}}},
        {"out_dir", "results"},
        {"jobs", 4},
    };
    RunConfig cfg = parse_config(doc, "/base");
    CHECK(cfg.stations_path == "/base/data/s.csv");
    CHECK(cfg.covariates_path == "/abs/c.csv"); // absolute paths pass through
    CHECK(cfg.aggregation_path == "/base/agg.json");
    CHECK(cfg.format == StationFormat::long_form);
    CHECK(cfg.min_stations == 5);
    CHECK(cfg.reconcile == ReconcileMode::reject);
    CHECK(cfg.abstention_label == "Astensione");
    CHECK(cfg.ei.max_iter == 77);
    CHECK(cfg.ei.tol_grad == 1e-5);
    CHECK(cfg.ei.rake_tol == 1e-9);
    CHECK(cfg.ei.tol_loglik == 1e-8); // untouched default
    REQUIRE(cfg.anchors.size() == 2);
    CHECK(cfg.anchors[0].option == "M5S");
    CHECK(cfg.anchors[0].direction == Direction::outgoing);
    CHECK(cfg.anchors[1].option == "PD");
    CHECK(cfg.anchors[1].direction == Direction::incoming);
    CHECK(cfg.stepwise_schedule == std::vector<double>{0.5, 1.0, 1.5});
    CHECK(cfg.strong_p == 0.02);
    CHECK(cfg.weak_p == 0.1);
    CHECK(cfg.marginal_step == 1e-4);
    CHECK(cfg.mnl.max_iter == 99);
    CHECK(cfg.mnl.separation_beta == 25.0);
    CHECK_FALSE(cfg.auto_dummies);
    CHECK(cfg.max_dummy_zones == 5);
    CHECK(cfg.outlier_cutoff == 2.5);
    CHECK(cfg.out_dir == "/base/results");
    CHECK(cfg.jobs == 4);
    CHECK(cfg.covariate_recipe.size() == 1);
}

TEST_CASE("config rejects unknown keys everywhere") {
    CHECK_THROWS_WITH_AS(parse_config({{"stattions", "x"}}, "."),
                         "unknown key 'stattions' in config", ConfigError);
    CHECK_THROWS_AS(parse_config({{"estimator", {{"maxiter", 3}}}}, "."), ConfigError);
    CHECK_THROWS_AS(parse_config({{"models", {{"anchor", "M5S"}}}}, "."), ConfigError);
    CHECK_THROWS_AS(
        parse_config({{"models", {{"mnl", {{"tolgrad", 1.0}}}}}}, "."), ConfigError);
    CHECK_THROWS_AS(
        parse_config({{"models", {{"anchors", json::array({{{"option", "A"}, {"dir", "x"}}})}}}}, "."),
        ConfigError);
    CHECK_THROWS_AS(parse_config({{"simulate", {{"seeds", 1}}}}, "."), ConfigError);
    CHECK_THROWS_AS(parse_config(json::array(), "."), ConfigError);
}

TEST_CASE("config type and value validation") {
    CHECK_THROWS_AS(parse_config({{"min_stations", "ten"}}, "."), ConfigError);
    CHECK_THROWS_AS(parse_config({{"min_stations", 1}}, "."), ConfigError);
    CHECK_THROWS_AS(parse_config({{"format", "tall"}}, "."), ConfigError);
    CHECK_THROWS_AS(parse_config({{"reconcile", "drop"}}, "."), ConfigError);
    CHECK_THROWS_AS(parse_config({{"models", {{"stepwise_schedule", {-0.5}}}}}, "."),
                    ConfigError);
    CHECK_THROWS_AS(parse_config({{"models", {{"anchors", "M5S"}}}}, "."), ConfigError);
    CHECK_THROWS_AS(
        parse_config({{"models", {{"anchors", json::array({{{"option", "A"}, {"direction", "up"}}})}}}}, "."),
        ConfigError);
    CHECK_THROWS_AS(parse_config({{"covariate_recipe", "steps"}}, "."), ConfigError);
}

TEST_CASE("simulate block parses options and outputs") {
    json doc = {{"simulate",
                 {{"seed", 7},
                  {"zones", 4},
                  {"stations_per_zone", 12},
                  {"voters_per_station", 300.0},
                  {"options1", {{"labels", {"A", "B", "No vote"}}, {"reference", "No vote"}}},
                  {"options2", json::array({"A", "B", "No vote"})},
                  {"true_P", json::array({{{0.8, 0.1, 0.1}, {0.1, 0.8, 0.1}, {0.05, 0.05, 0.9}}})},
                  {"stations_out", "sim/st.csv"}}}};
    RunConfig cfg = parse_config(doc, "/base");
    REQUIRE(cfg.has_simulate);
    CHECK(cfg.synth.seed == 7);
    CHECK(cfg.synth.zones == 4);
    CHECK(cfg.synth.stations_per_zone == 12);
    CHECK(cfg.synth.options1.labels == std::vector<std::string>{"A", "B", "No vote"});
    CHECK(cfg.synth.options1.reference_index == 2);
    CHECK(cfg.synth.options2.labels.size() == 3);
    REQUIRE(cfg.synth.true_P.size() == 1);
    CHECK(cfg.synth.true_P[0](2, 2) == 0.9);
    CHECK(cfg.sim_stations_out == "/base/sim/st.csv");
    CHECK(cfg.sim_covariates_out == "/base/covariates.csv"); // default name
    CHECK(cfg.sim_truth_out == "/base/truth.json");

    CHECK_THROWS_AS(
        parse_config({{"simulate", {{"options1", {{"labels", {"A", "B"}}, {"reference", "C"}}}}}}, "."),
        ConfigError);
    CHECK_THROWS_AS(
        parse_config({{"simulate", {{"true_P", json::array({json::array({0.5, 0.5})})}}}}, "."),
        ConfigError);
}

TEST_CASE("load_config resolves against the file directory") {
    fs::path d = fresh_dir("cfg");
    {
        std::ofstream out(d / "run.json");
        out << R"({"stations": "st.csv", "out_dir": "artifacts"})";
    }
    RunConfig cfg = load_config((d / "run.json").string());
    CHECK(cfg.stations_path == (d / "st.csv").string());
    CHECK(cfg.out_dir == (d / "artifacts").string());

    CHECK_THROWS_AS(load_config((d / "missing.json").string()), ConfigError);
    { std::ofstream(d / "bad.json") << "{nope"; }
    CHECK_THROWS_AS(load_config((d / "bad.json").string()), ConfigError);
}

TEST_CASE("resolve_jobs precedence") {
    RunConfig cfg;
    unsetenv("FLOWCAST_JOBS");
    CHECK(resolve_jobs(3, cfg) == 3); // CLI wins outright
    cfg.jobs = 2;
    CHECK(resolve_jobs(0, cfg) == 2); // then the config
    setenv("FLOWCAST_JOBS", "5", 1);
    CHECK(resolve_jobs(0, cfg) == 5); // env beats config
    CHECK(resolve_jobs(7, cfg) == 7); // but not the flag
    setenv("FLOWCAST_JOBS", "junk", 1);
    CHECK(resolve_jobs(0, cfg) == 2); // unparsable env is ignored
    unsetenv("FLOWCAST_JOBS");
    cfg.jobs = 0;
    CHECK(resolve_jobs(0, cfg) >= 1); // hardware fallback
}

TEST_CASE("flow counts csv carries margins and a total row") {
    CsvTable t = flow_counts_csv(small_table(), 1.0, 2);
    CHECK(t.header == std::vector<std::string>{"origin", "x", "y", "No vote", "total"});
    REQUIRE(t.rows.size() == 3);
    CHECK(t.rows[0] == std::vector<std::string>{"A", "10.00", "4.50", "5.50", "20.00"});
    CHECK(t.rows[1] == std::vector<std::string>{"B", "2.00", "30.00", "8.00", "40.00"});
    CHECK(t.rows[2] == std::vector<std::string>{"total", "12.00", "34.50", "13.50", "60.00"});

    // thousands scaling, one decimal
    CsvTable k = flow_counts_csv(small_table(), 1e-3, 1);
    CHECK(k.rows[0][1] == "0.0");
    CHECK(k.rows[2][4] == "0.1");
}

TEST_CASE("negative zero never leaks into csv output") {
    FlowTable t = small_table();
    t.F(0, 0) = -0.004; // rounds to -0.00
    t.row_margins = t.F.rowwise().sum();
    t.col_margins = t.F.colwise().sum().transpose();
    CsvTable c = flow_counts_csv(t, 1.0, 2);
    CHECK(c.rows[0][1] == "0.00");
}

TEST_CASE("flow percent csv rows sum to hundred") {
    CsvTable t = flow_percent_csv(small_table());
    CHECK(t.header.size() == 4); // no total column
    CHECK(t.rows[0] == std::vector<std::string>{"A", "50.0", "22.5", "27.5"});
    CHECK(t.rows[1] == std::vector<std::string>{"B", "5.0", "75.0", "20.0"});
}

TEST_CASE("marginal effects table marks significance and zeroes the rest") {
    ModelReport out = tiny_model("M5S", Direction::outgoing, {"x", "y", "No vote"}, 2);
    out.marginal(0, 0) = 1.234;
    out.flags.flags[0][0] = Flag::strong;
    out.marginal(1, 1) = -0.567;
    out.flags.flags[1][1] = Flag::weak;

    ModelReport in = tiny_model("PD", Direction::incoming, {"x", "y", "w"}, 1);
    in.marginal(2, 0) = 9.9;
    in.flags.flags[2][0] = Flag::strong;

    std::string s = render_table3({out, in});
    CHECK(s.find("Outgoing transitions towards x") != std::string::npos);
    CHECK(s.find("Outgoing transitions towards No vote") != std::string::npos);
    // option w only appears in the incoming model
    CHECK(s.find("Incoming transitions from w") != std::string::npos);
    CHECK(s.find("1.234**") != std::string::npos);
    CHECK(s.find("-0.567*") != std::string::npos);
    CHECK(s.find("9.900**") != std::string::npos);
    CHECK(s.find("geog") != std::string::npos);
    CHECK(s.find("unemp") != std::string::npos);
    // anchors label the rows
    CHECK(s.find("M5S") != std::string::npos);
    CHECK(s.find("PD") != std::string::npos);
    // identical inputs render identically
    CHECK(render_table3({out, in}) == s);
}

TEST_CASE("coefficient table prints b and z rows and skips the reference") {
    ModelReport r = tiny_model("Lega", Direction::outgoing, {"x", "y", "No vote"}, 2);
    r.model.beta(0, 0) = 1.5;
    r.model.mask(0, 0) = 1;
    r.model.z_ratios(0, 0) = 2.34;
    std::string s = render_tableC1({r});
    CHECK(s.find("Transitions out of Lega (% dev. 50.0)") != std::string::npos);
    CHECK(s.find("1.50") != std::string::npos);
    CHECK(s.find("2.34") != std::string::npos);
    // the reference option gets no coefficient block
    CHECK(s.find("No vote") == std::string::npos);
    // masked b cells print plain zero
    CHECK(s.find(" 0 ") != std::string::npos);

    ModelReport in = tiny_model("PD", Direction::incoming, {"x", "y", "No vote"}, 2);
    std::string s2 = render_tableC1({in});
    CHECK(s2.find("Transitions into PD") != std::string::npos);
}

TEST_CASE("estimate json captures the fit") {
    TransitionEstimate est;
    est.zone_id = "Z03";
    est.options1 = OptionSet({"A", "B"}, 1);
    est.options2 = OptionSet({"x", "y"}, 1);
    est.P.setConstant(2, 2, 0.5);
    est.se_P.setConstant(2, 2, 0.01);
    est.theta.setZero(2, 1);
    est.phi = 1.25;
    est.loglik = -12.5;
    est.grad_norm = 1e-9;
    est.iterations = 6;
    est.converged = true;
    FitReport fit;
    fit.pearson_stat = 3.5;
    fit.df = 7;
    fit.pseudo_r2 = 0.92;
    StationFit sf;
    sf.station_id = "S1";
    sf.chi_square = 1.75;
    sf.df = 1;
    fit.stations.push_back(sf);

    json j = estimate_json(est, fit);
    CHECK(j["zone_id"] == "Z03");
    CHECK(j["options1"] == json({"A", "B"}));
    CHECK(j["P"][0][1] == 0.5);
    CHECK(j["phi"] == 1.25);
    CHECK(j["converged"] == true);
    CHECK(j["fit"]["df"] == 7);
    CHECK(j["fit"]["stations"][0]["station_id"] == "S1");
    // serialization is stable
    CHECK(j.dump() == estimate_json(est, fit).dump());
}

TEST_CASE("model report json flags and optional dummy block") {
    ModelReport r = tiny_model("FI", Direction::outgoing, {"x", "y", "No vote"}, 2);
    r.flags.flags[0][0] = Flag::strong;
    r.flags.flags[0][1] = Flag::weak;
    r.residuals.raw.setZero(2, 3);
    r.residuals.standardized.setZero(2, 3);
    r.residuals.cutoff = 2.0;

    json j = model_report_json(r);
    CHECK(j["anchor"] == "FI");
    CHECK(j["direction"] == "outgoing");
    CHECK(j["model"]["reference"] == "No vote");
    CHECK(j["flags"][0][0] == "strong");
    CHECK(j["flags"][0][1] == "weak");
    CHECK(j["flags"][1][0] == "none");
    CHECK(j["refit_with_dummies"] == false);
    CHECK_FALSE(j.contains("dummy_zones"));

    r.refit_with_dummies = true;
    r.dummy_zones = {"Z05"};
    r.dummy_model = r.model;
    r.dummy_residuals = r.residuals;
    json j2 = model_report_json(r);
    CHECK(j2["dummy_zones"] == json({"Z05"}));
    CHECK(j2.contains("dummy_model"));
    CHECK(j2.contains("dummy_residuals"));
}

TEST_CASE("transforms json mirrors the recipe provenance") {
    CovariateMatrix M;
    M.zone_ids = {"Z1", "Z2", "Z3"};
    Eigen::VectorXd c(3);
    c << -1, 0, 1;
    M.append("geog", c, {"composite", {"rural", "periph"}, false, "", 0.0});
    M.append("spread", c, {"residualize", {"geogdiff"}, false, "geog", 0.0});
    M.append("lefttrad", Eigen::VectorXd::Ones(3), {"dichotomize", {"pci", "dc"}, false, "", 1.5});

    json j = transforms_json(M);
    CHECK(j["zones"] == json({"Z1", "Z2", "Z3"}));
    REQUIRE(j["columns"].size() == 3);
    CHECK(j["columns"][0]["op"] == "composite");
    CHECK(j["columns"][0]["inputs"] == json({"rural", "periph"}));
    CHECK_FALSE(j["columns"][0].contains("conditioned_on"));
    CHECK(j["columns"][1]["conditioned_on"] == "geog");
    CHECK(j["columns"][2]["ratio"] == 1.5);
    for (const auto& col : j["columns"]) CHECK(col["describe"].is_string());
}

TEST_CASE("svg renders are deterministic well-formed documents") {
    FlowTable t = small_table();
    std::string h = svg_heatmap(t, "zone Z01");
    CHECK(h.rfind("<svg", 0) == 0);
    CHECK(h.find("zone Z01") != std::string::npos);
    CHECK(h.find("No vote") != std::string::npos);
    CHECK(h.find("30.0") != std::string::npos); // the largest cell value
    CHECK(h.substr(h.size() - 7) == "</svg>\n");
    CHECK(svg_heatmap(t, "zone Z01") == h);

    VolatilityRecord a{"Z01", 31.0, 22.0, {}};
    VolatilityRecord b{"REGION", 32.4, 21.2, {}};
    std::string v = svg_volatility({a, b});
    CHECK(v.find("party switch %") != std::string::npos);
    CHECK(v.find("to abstention %") != std::string::npos);
    CHECK(v.find("REGION") != std::string::npos);
    CHECK(v.find("32.4") != std::string::npos);
    CHECK(svg_volatility({a, b}) == v);
}

} // TEST_SUITE
