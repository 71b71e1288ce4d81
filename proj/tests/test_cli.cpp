#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "flowcast/config.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/pipeline.hpp"
#include "flowcast/sha256.hpp"
#include "flowcast/synth.hpp"

using namespace flowcast;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    fs::path d = fs::temp_directory_path() / ("flowcast_cli_" + tag);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

json read_json(const fs::path& p) { return json::parse(read_file(p)); }

// two clean zones of four stations each; an exact mixture of
// P = (0.8 0.2; 0.3 0.7) so the estimator has a textbook optimum
std::string good_stations_csv() {
    std::ostringstream s;
    s << "station_id,zone_id,electorate1,electorate2,A_e1,B_e1,X_e2,Y_e2\n";
    const int n1[4][2] = {{100, 50}, {50, 100}, {120, 30}, {30, 120}};
    for (int z = 0; z < 2; ++z)
        for (int i = 0; i < 4; ++i) {
            int a = n1[i][0] + 10 * z, b = n1[i][1];
            double x = 0.8 * a + 0.3 * b, y = 0.2 * a + 0.7 * b;
            s << "Z" << z + 1 << "S" << i + 1 << ",Z" << z + 1 << "," << a + b
              << "," << a + b << "," << a << "," << b << "," << x << "," << y
              << "\n";
        }
    return s.str();
}

void write_file(const fs::path& p, const std::string& content) {
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << content;
}

int run_cli(const std::string& args) {
    std::string cmd = std::string(FLOWCAST_BIN) + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

// small simulated run shared by the pipeline tests
json small_config() {
    return json{
        {"stations", "stations.csv"},
        {"covariates", "covariates.csv"},
        {"min_stations", 10},
        {"abstention", "No vote"},
        {"covariate_recipe",
         json::array({{{"op", "composite"},
                       {"name", "geog"},
                       {"inputs", {"rural_share", "periph_index"}}},
                      {{"op", "standardize"}, {"name", "unemp"}, {"input", "unemp_rate"}}})},
        {"models",
         {{"anchors", json::array({"PD", {{"option", "PD"}, {"direction", "incoming"}}})}}},
        {"simulate",
         {{"seed", 99}, {"zones", 16}, {"stations_per_zone", 16}, {"voters_per_station", 500.0}}},
        {"out_dir", "run_a"},
    };
}

} // namespace

TEST_SUITE("cli") {

TEST_CASE("load_and_validate groups zones and collects warnings") {
    fs::path d = fresh_dir("validate");
    std::string csv = good_stations_csv();
    // a station with zero election-1 votes is dropped with a warning
    csv += "Z1S9,Z1,100,100,0,0,40,60\n";
    write_file(d / "stations.csv", csv);

    RunConfig cfg;
    cfg.stations_path = (d / "stations.csv").string();
    cfg.min_stations = 3;
    LoadedData data = load_and_validate(cfg);
    REQUIRE(data.zones.size() == 2);
    CHECK(data.zones[0].zone_id == "Z1");
    CHECK(data.zones[1].zone_id == "Z2");
    CHECK(data.zones[0].stations.size() == 4);
    CHECK(data.zones[0].margins1.size() == 2);
    CHECK(data.aggregated.options1.labels == std::vector<std::string>{"A", "B"});

    bool dropped = false, no_abst = false;
    for (const auto& w : data.warnings) {
        if (w.find("Z1S9 dropped") != std::string::npos) dropped = true;
        if (w.find("abstention option") != std::string::npos) no_abst = true;
    }
    CHECK(dropped);
    CHECK(no_abst); // labels A/B/X/Y carry no "No vote"

    cfg.min_stations = 5;
    CHECK_THROWS_AS(load_and_validate(cfg), MinStations);
    cfg.stations_path = (d / "missing.csv").string();
    CHECK_THROWS_AS(load_and_validate(cfg), DataError);
    cfg.stations_path.clear();
    CHECK_THROWS_AS(load_and_validate(cfg), ConfigError);
}

TEST_CASE("build_design runs every recipe op") {
    CsvTable raw;
    raw.header = {"zone_id", "a", "b", "c", "d"};
    const double vals[5][4] = {{1, 10, 30, 10},
                               {2, 6, 20, 20},
                               {3, 7, 45, 20},
                               {4, 3, 16, 30},
                               {5, 2, 60, 30}};
    for (int z = 0; z < 5; ++z) {
        std::vector<std::string> row{"Z" + std::to_string(z + 1)};
        for (double v : vals[z]) row.push_back(std::to_string(v));
        raw.rows.push_back(row);
    }

    json recipe = json::array({
        {{"op", "standardize"}, {"name", "s_a"}, {"input", "a"}},
        {{"op", "standardize"}, {"name", "s_b_inv"}, {"input", "b"}, {"invert", true}},
        {{"op", "composite"}, {"name", "comp"}, {"inputs", {"a", "b"}}, {"invert", {false, true}}},
        {{"op", "residualize"}, {"name", "res"}, {"input", "s_a"}, {"on", "comp"}},
        {{"op", "dichotomize"}, {"name", "dich"}, {"inputs", {"c", "d"}}, {"ratio", 1.5}},
    });
    CovariateMatrix M = build_design(raw, recipe);
    CHECK(M.names == std::vector<std::string>{"s_a", "s_b_inv", "comp", "res", "dich"});
    CHECK(M.zone_ids.front() == "Z1");
    CHECK(M.rows() == 5);

    // standardized columns: mean 0, population variance 1
    for (int v = 0; v < 4; ++v) {
        CHECK(std::abs(M.X.col(v).mean()) < 1e-12);
        CHECK(M.X.col(v).squaredNorm() / 5.0 == doctest::Approx(1.0).epsilon(1e-12));
    }
    // inversion flips the sign of the plain standardization
    Eigen::VectorXd b(5);
    for (int z = 0; z < 5; ++z) b(z) = vals[z][1];
    CHECK((M.X.col(1) + standardize(b)).cwiseAbs().maxCoeff() < 1e-12);
    // a is a perfect line, so s_a equals the composite's a part direction
    CHECK(std::abs(pearson(M.X.col(0), M.X.col(2))) > 0.5);
    // residuals are orthogonal to the conditioning column
    CHECK(std::abs(pearson(M.X.col(3), M.X.col(2))) < 1e-10);
    // dichotomize: c > 1.5 * d
    Eigen::VectorXd expect(5);
    for (int z = 0; z < 5; ++z) expect(z) = vals[z][2] > 1.5 * vals[z][3] ? 1.0 : 0.0;
    CHECK((M.X.col(4) - expect).cwiseAbs().maxCoeff() == 0.0);
    CHECK(M.transforms[4].ratio == 1.5);
    CHECK(M.transforms[1].inverted);
    CHECK(M.transforms[3].conditioned_on == "comp");

    // error paths
    auto step = [](json j) { return json::array({std::move(j)}); };
    CHECK_THROWS_AS(build_design(raw, json::object()), ConfigError);
    CHECK_THROWS_AS(build_design(raw, step({{"op", "log"}, {"name", "x"}})), ConfigError);
    CHECK_THROWS_AS(build_design(raw, step({{"name", "x"}})), ConfigError);
    CHECK_THROWS_AS(
        build_design(raw, step({{"op", "standardize"}, {"name", "zone_id"}, {"input", "a"}})),
        ConfigError);
    CHECK_THROWS_AS(
        build_design(raw, step({{"op", "standardize"}, {"name", "x"}, {"input", "nope"}})),
        MissingColumn);
    CHECK_THROWS_AS(
        build_design(raw, step({{"op", "standardize"}, {"name", "x"}, {"input", "a"}, {"scale", 2}})),
        ConfigError);
    // residualize may only touch design columns built earlier
    CHECK_THROWS_AS(
        build_design(raw, step({{"op", "residualize"}, {"name", "x"}, {"input", "a"}, {"on", "b"}})),
        ConfigError);
    CHECK_THROWS_AS(
        build_design(raw,
                     step({{"op", "composite"}, {"name", "x"}, {"inputs", {"a", "b"}}, {"invert", {true}}})),
        ConfigError);
    CHECK_THROWS_AS(
        build_design(raw, step({{"op", "dichotomize"}, {"name", "x"}, {"inputs", {"a"}}})),
        ConfigError);
    json dup = json::array({recipe[0], recipe[0]});
    CHECK_THROWS_AS(build_design(raw, dup), ConfigError);
    CsvTable no_zone;
    no_zone.header = {"id", "a"};
    CHECK_THROWS_AS(build_design(no_zone, json::array()), MissingColumn);
}

TEST_CASE("run_estimates converges on simulated zones and is thread stable") {
    fs::path d = fresh_dir("estimates");
    SynthSpec spec;
    spec.seed = 99;
    spec.zones = 16;
    spec.stations_per_zone = 16;
    spec.voters_per_station = 500.0;
    SynthOutput so = generate(spec);
    write_synth(so, (d / "stations.csv").string(), (d / "covariates.csv").string(),
                (d / "truth.json").string());

    RunConfig cfg;
    cfg.stations_path = (d / "stations.csv").string();
    cfg.min_stations = 10;
    LoadedData data = load_and_validate(cfg);
    REQUIRE(data.zones.size() == 16);

    EstimateOutputs eo = run_estimates(data, cfg, 4);
    CHECK(eo.failures.empty());
    REQUIRE(eo.zones.size() == 16);
    for (const auto& z : eo.zones) {
        CHECK(z.est.converged);
        CHECK(z.flows.F.minCoeff() >= 0.0);
        // raking pinned both margins to the observed totals
        CHECK((z.flows.F.rowwise().sum() - z.flows.row_margins).cwiseAbs().maxCoeff() <
              1e-6 * z.flows.row_margins.maxCoeff());
        CHECK((z.flows.F.colwise().sum().transpose() - z.flows.col_margins)
                  .cwiseAbs()
                  .maxCoeff() < 1e-6 * z.flows.col_margins.maxCoeff());
    }
    REQUIRE(eo.volatility.size() == 17); // zones then REGION
    CHECK(eo.volatility.back().zone_id == "REGION");
    CHECK(eo.loyalty_map.size() == 4);  // every non-abstention origin
    CHECK(std::isfinite(eo.volatility_r));

    // same answers regardless of the thread count
    EstimateOutputs eo1 = run_estimates(data, cfg, 1);
    for (std::size_t i = 0; i < eo.zones.size(); ++i) {
        CHECK((eo.zones[i].est.P - eo1.zones[i].est.P).cwiseAbs().maxCoeff() == 0.0);
        CHECK((eo.zones[i].flows.F - eo1.zones[i].flows.F).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("pipeline writes the full artifact set and a reproducible manifest") {
    fs::path d = fresh_dir("pipeline");
    write_file(d / "config.json", small_config().dump(2));
    RunConfig cfg = load_config((d / "config.json").string());

    std::ostringstream log;
    REQUIRE(run_subcommand("pipeline", cfg, 2, log) == 0);

    fs::path out = d / "run_a";
    for (const char* rel :
         {"validation.json", "estimates/Z01.json", "flows.csv", "volatility.csv",
          "estimate_summary.json", "design.csv", "transforms.json",
          "correlations.json", "models/PD_outgoing.json", "models/PD_incoming.json",
          "table3.txt", "table3.csv", "tableC1.txt", "tableC1.csv",
          "report/table1_counts.csv", "report/table1_percent.csv",
          "report/heatmap_REGION.svg", "report/volatility.svg", "manifest.json"})
        CHECK_MESSAGE(fs::exists(out / rel), rel);

    json manifest = read_json(out / "manifest.json");
    CHECK(manifest["command"] == "pipeline");
    CHECK(manifest["counts"]["zone_estimates"] == 16);
    CHECK(manifest["counts"]["anchor_models"] == 2);
    CHECK(manifest["counts"]["volatility_reports"] == 1);
    CHECK(manifest["inputs"].contains("stations"));
    CHECK(manifest["inputs"].contains("covariates"));
    CHECK_FALSE(manifest.contains("error"));
    CHECK(manifest["failures"].empty());
    // every artifact the manifest lists is on disk with the advertised hash
    for (const auto& [rel, hash] : manifest["artifacts"].items()) {
        fs::path p = rel.front() == '/' ? fs::path(rel) : out / rel;
        if (!fs::exists(p)) p = d / rel; // simulate outputs live by the config
        REQUIRE_MESSAGE(fs::exists(p), rel);
        CHECK(json(sha256_file(p.string())) == hash);
    }

    // the per-zone artifact keeps flows and their standard errors
    json z01 = read_json(out / "estimates/Z01.json");
    CHECK(z01["converged"] == true);
    CHECK(z01["flows"]["F"].size() == 5);
    CHECK(z01["flow_se"].size() == 5);

    // outgoing PD model pins its reference to the loyal destination
    json pd = read_json(out / "models/PD_outgoing.json");
    CHECK(pd["model"]["reference"] == "PD");

    // volatility annotations: loyalty rule plus the origin-subset caveat
    std::string vol = read_file(out / "volatility.csv");
    CHECK(vol.find("# correlation(party_switch, to_abstention)") != std::string::npos);
    CHECK(vol.find("minor origin categories") != std::string::npos);
    json summary = read_json(out / "estimate_summary.json");
    REQUIRE(summary["notes"].size() == 2);
    CHECK(std::string(summary["notes"][1]).find("minor origin categories") !=
          std::string::npos);

    // a second run elsewhere reproduces the manifest byte for byte
    RunConfig cfg2 = cfg;
    cfg2.out_dir = (d / "run_b").string();
    std::ostringstream log2;
    REQUIRE(run_subcommand("pipeline", cfg2, 2, log2) == 0);
    CHECK(read_file(out / "manifest.json") == read_file(d / "run_b/manifest.json"));
    CHECK(read_file(out / "flows.csv") == read_file(d / "run_b/flows.csv"));
}

TEST_CASE("stagewise runs equal one pipeline run") {
    fs::path d = fresh_dir("stagewise");
    write_file(d / "config.json", small_config().dump(2));
    RunConfig cfg = load_config((d / "config.json").string());

    std::ostringstream log;
    REQUIRE(run_subcommand("pipeline", cfg, 2, log) == 0);

    RunConfig staged = cfg;
    staged.out_dir = (d / "staged").string();
    for (const char* sub : {"validate", "estimate", "covariates", "model", "report"}) {
        std::ostringstream slog;
        CHECK_MESSAGE(run_subcommand(sub, staged, 2, slog) == 0, sub);
    }

    int compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(d / "run_a")) {
        if (!e.is_regular_file()) continue;
        fs::path rel = fs::relative(e.path(), d / "run_a");
        if (rel == "manifest.json") continue; // records a different command
        CHECK_MESSAGE(fs::exists(d / "staged" / rel), rel.string());
        CHECK_MESSAGE(read_file(e.path()) == read_file(d / "staged" / rel), rel.string());
        ++compared;
    }
    CHECK(compared >= 19);
}

TEST_CASE("exit codes separate config, data and numeric failures") {
    fs::path d = fresh_dir("exitcodes");
    std::ostringstream log;

    // missing stations file: validation failure, manifest records the error
    RunConfig cfg;
    cfg.stations_path = (d / "absent.csv").string();
    cfg.out_dir = (d / "out1").string();
    CHECK(run_subcommand("validate", cfg, 1, log) == 2);
    json m1 = read_json(d / "out1/manifest.json");
    CHECK(std::string(m1["error"]).find("not found") != std::string::npos);

    // a zone under the station minimum fails as data validation
    write_file(d / "stations.csv", good_stations_csv());
    cfg.stations_path = (d / "stations.csv").string();
    cfg.min_stations = 5;
    cfg.out_dir = (d / "out2").string();
    CHECK(run_subcommand("estimate", cfg, 1, log) == 2);
    json m2 = read_json(d / "out2/manifest.json");
    CHECK(std::string(m2["error"]).find("usable stations, minimum is 5") !=
          std::string::npos);

    // model stage before any estimate artifacts exist
    cfg.min_stations = 3;
    cfg.out_dir = (d / "out3").string();
    cfg.anchors.push_back({"A", Direction::outgoing});
    CHECK(run_subcommand("model", cfg, 1, log) == 2);
    CHECK(std::string(read_json(d / "out3/manifest.json")["error"])
              .find("run the estimate stage first") != std::string::npos);

    CHECK(run_subcommand("bogus", cfg, 1, log) == 2);

    // one degenerate zone (identical origin margins at every station) fails
    // numerically; the good zone still lands on disk
    std::string csv = good_stations_csv();
    for (int i = 0; i < 4; ++i)
        csv += "Z9S" + std::to_string(i + 1) + ",Z9,150,150,100,50," +
               std::to_string(95 + i) + "," + std::to_string(55 - i) + "\n";
    write_file(d / "mixed.csv", csv);
    RunConfig cfg2;
    cfg2.stations_path = (d / "mixed.csv").string();
    cfg2.min_stations = 3;
    cfg2.out_dir = (d / "out4").string();
    std::ostringstream log2;
    CHECK(run_subcommand("estimate", cfg2, 1, log2) == 3);
    json m4 = read_json(d / "out4/manifest.json");
    CHECK(m4["failures"]["zones"].contains("Z9"));
    CHECK(m4["counts"]["zone_estimates"] == 2);
    CHECK(fs::exists(d / "out4/estimates/Z1.json"));
    CHECK_FALSE(fs::exists(d / "out4/estimates/Z9.json"));
}

TEST_CASE("command line binary honors the exit contract") {
    fs::path d = fresh_dir("binary");
    write_file(d / "stations.csv", good_stations_csv());
    json cfg = {{"stations", "stations.csv"}, {"min_stations", 3}, {"out_dir", "out"}};
    write_file(d / "ok.json", cfg.dump());
    cfg["min_stations"] = 5;
    write_file(d / "short.json", cfg.dump());

    CHECK(run_cli("validate --config " + (d / "ok.json").string()) == 0);
    CHECK(run_cli("estimate --config " + (d / "ok.json").string() + " --jobs 2") == 0);
    CHECK(run_cli("estimate --config " + (d / "short.json").string()) == 2);
    CHECK(run_cli("validate --config " + (d / "nope.json").string()) == 2);
    CHECK(run_cli("validate") != 0);          // --config is required
    CHECK(run_cli("") != 0);                  // a subcommand is required
    CHECK(run_cli("frobnicate --config x") != 0);

    // --out overrides the configured directory
    CHECK(run_cli("validate --config " + (d / "ok.json").string() + " --out " +
                  (d / "alt").string()) == 0);
    CHECK(fs::exists(d / "alt/manifest.json"));
    CHECK(fs::exists(d / "alt/validation.json"));
}

} // TEST_SUITE
