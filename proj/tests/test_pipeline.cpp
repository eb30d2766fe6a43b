#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "granflow/archive.hpp"
#include "granflow/pipeline.hpp"
#include "granflow/report.hpp"

using namespace granflow;
using namespace granflow::pipeline;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("granflow_pipeline_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("config json roundtrip and partial sections") {
    PipelineConfig c;
    c.seed = 42;
    c.dev_instances = 3;
    c.backbone.epochs = 7;
    c.sampler.xi = 2.5;
    c.observation.rho = 0.4;
    c.sweep.stride = {1, 5};
    c.eval_slices = {2, 3};
    c.min_active = 9;
    nlohmann::json j = c;
    PipelineConfig back;
    from_json(j, back);
    CHECK(nlohmann::json(back) == j);

    PipelineConfig partial;
    from_json(nlohmann::json{{"seed", 5}, {"train", {{"backbone", {{"epochs", 3}}}}}}, partial);
    CHECK(partial.seed == 5);
    CHECK(partial.backbone.epochs == 3);
    CHECK(partial.backbone.kind == nets::ModelKind::Backbone);
    CHECK(partial.forward.epochs == PipelineConfig{}.forward.epochs);

    CHECK_THROWS_AS(from_json(nlohmann::json{{"seeds", 1}}, partial), ConfigError);
    CHECK_THROWS_AS(from_json(nlohmann::json{{"eval", {{"slice", 1}}}}, partial), ConfigError);
}

TEST_CASE("config validation") {
    CHECK_NOTHROW(PipelineConfig{}.validate());
    PipelineConfig c;
    c.observation.rho = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PipelineConfig{};
    c.eval_slices = {0};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PipelineConfig{};
    c.sweep.stride = {0};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PipelineConfig{};
    c.backbone.widths = {16, 32, 64, 128, 256, 512};  // grid no longer divisible
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PipelineConfig{};
    c.min_active = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("metric summaries") {
    std::vector<metrics::MetricRow> rows{
        {"vx", 1, 0.0, "active", 0.2, 0.8, 10}, {"vy", 1, 0.0, "active", 0.4, NAN, 10},
        {"vz", 1, 0.0, "active", 0.6, 0.4, 10}, {"vx", 1, 0.0, "empty", 0.1, 0.0, 5},
        {"vy", 1, 0.0, "empty", 0.2, 0.0, 5},   {"vz", 1, 0.0, "empty", 0.3, 0.0, 5}};
    CHECK(mean_active_rmse(rows) == doctest::Approx(0.4));
    CHECK(mean_active_r(rows) == doctest::Approx(0.6));
    CHECK(active_r(rows, "vx") == 0.8);
    CHECK(std::isnan(active_r(rows, "vy")));
    CHECK(std::isnan(active_r(rows, "p")));
    CHECK(active_rmse(rows, "vz") == 0.6);
    CHECK(mean_empty_rmse(rows) == doctest::Approx(0.2));
}

TEST_CASE("sweep csv") {
    const auto dir = scratch("sweep");
    SweepRow a{"rho", 0.2, 1, 0.1, 0.5, 0.6, NAN, 0.04, 12, 8};
    write_sweep_csv(dir / "s.csv", {a});
    const auto text = slurp(dir / "s.csv");
    CHECK(text.rfind("variable,value,slice,rmse,r,r_x,r_z,window_fraction,observed_cells,cases\n", 0) == 0);
    CHECK(text.find("rho,0.2,1,0.1,0.5,0.6,nan,0.04,12,8\n") != std::string::npos);
}

TEST_CASE("heatmap svg") {
    const std::vector<double> v{0.0, 1.0, 2.0, 3.0, 4.0, 5.0};
    const auto svg = report::heatmap_svg("t <1>", 2, 3, {{"a", v, 0.0, 5.0, "vx [m/s]"}});
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("t &lt;1&gt;") != std::string::npos);
    CHECK(svg.find("vx [m/s]") != std::string::npos);
    CHECK(svg.find("#440154") != std::string::npos);  // low end of the colour map
    CHECK(svg.find("#fde725") != std::string::npos);  // high end
    CHECK(svg == report::heatmap_svg("t <1>", 2, 3, {{"a", v, 0.0, 5.0, "vx [m/s]"}}));
    CHECK_THROWS_AS(report::heatmap_svg("x", 2, 2, {{"a", v, 0.0, 1.0, ""}}), ShapeError);
}

TEST_CASE("layout paths") {
    const Layout lay{"out"};
    CHECK(lay.run(3) == fs::path("out/runs/inst_03"));
    CHECK(lay.fields(0) == fs::path("out/fields/inst_00"));
    CHECK(lay.checkpoint(nets::ModelKind::Surrogate).parent_path() == fs::path("out/models"));
    CHECK(lay.recon("x") == fs::path("out/recon/x"));
}

TEST_CASE("instance seeds differ and depend on the global seed") {
    PipelineConfig c;
    CHECK(instance_dem(c, 0).rng_seed != instance_dem(c, 1).rng_seed);
    PipelineConfig d;
    d.seed = 2;
    CHECK(instance_dem(c, 0).rng_seed != instance_dem(d, 0).rng_seed);
    CHECK(instance_dem(c, 4).rng_seed == instance_dem(c, 4).rng_seed);
}
