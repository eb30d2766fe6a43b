#include "granflow/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "granflow/archive.hpp"
#include "granflow/report.hpp"

namespace granflow::pipeline {

namespace {

using sampler::GuidanceMode;
using Json = nlohmann::json;

constexpr GuidanceMode kModes[] = {GuidanceMode::None, GuidanceMode::SparsityAware, GuidanceMode::NormalizedBaseline};

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

// Mean of the finite entries; NaN if none.
double finite_mean(const std::vector<double>& v) {
    double s = 0.0;
    int n = 0;
    for (double x : v) {
        if (std::isfinite(x)) s += x, ++n;
    }
    return n ? s / n : nan();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
    char buf[160];
    std::snprintf(buf, sizeof buf, f, a, b, c);
    return buf;
}

struct CaseRow {
    int snapshot = 0;
    double time = 0.0;
    int slice = 0;
    GuidanceMode mode = GuidanceMode::None;
    double rmse = 0.0;
    double r = 0.0;
    double r_x = 0.0;
    double r_z = 0.0;
    double empty_rmse = 0.0;
};

}  // namespace

Json evaluate(const PipelineConfig& cfg, const Dataset& ds, const Models& models, const LogFn& log) {
    auto say = [&](const std::string& m) {
        if (log) log(m);
    };
    const Layout lay{cfg.output_dir};
    const auto snaps = eval_snapshots(cfg, ds);
    if (snaps.empty()) throw ConfigError("eval: no test snapshot has enough active cells on every evaluation slice");
    const int rep = pick_snapshot(cfg, ds);
    const auto& test = ds.test();

    // Per-case ensemble means.
    std::vector<CaseRow> rows;
    for (int s : snaps) {
        for (int c : cfg.eval_slices) {
            for (auto mode : kModes) {
                ReconRequest req;
                req.slice = c;
                req.snapshot = s;
                req.obs = cfg.observation;
                req.mode = mode;
                req.ensemble = cfg.eval_members;
                req.decode_physics = s == rep && mode == cfg.sampler.mode && models.decoder != nullptr;
                const auto r = reconstruct(cfg, ds, models, req);
                CaseRow row{s, r.time, c, mode, mean_active_rmse(r.metrics), mean_active_r(r.metrics),
                            active_r(r.metrics, "vx"), active_r(r.metrics, "vz"), mean_empty_rmse(r.metrics)};
                rows.push_back(row);
                if (s == rep) save_reconstruction(lay.recon(recon_name(r)), r, cfg);
            }
            say(fmt("snapshot %.0f t=%.3f slice %.0f done", s, test.snapshots[s].time, c));
        }
    }

    Json cases = Json::array();
    for (const auto& r : rows) {
        cases.push_back({{"snapshot", r.snapshot},
                         {"time", r.time},
                         {"slice", r.slice},
                         {"mode", sampler::to_string(r.mode)},
                         {"rmse", r.rmse},
                         {"r", r.r},
                         {"r_x", r.r_x},
                         {"r_z", r.r_z},
                         {"empty_rmse", r.empty_rmse}});
    }
    auto collect = [&](GuidanceMode mode, int slice, double CaseRow::*field) {
        std::vector<double> v;
        for (const auto& r : rows) {
            if (r.mode == mode && (slice < 0 || r.slice == slice)) v.push_back(r.*field);
        }
        return v;
    };

    // Guided vs unguided.
    Json guidance = Json::array();
    for (int c : cfg.eval_slices) {
        const double g = finite_mean(collect(cfg.sampler.mode, c, &CaseRow::rmse));
        const double u = finite_mean(collect(GuidanceMode::None, c, &CaseRow::rmse));
        const double rx = finite_mean(collect(cfg.sampler.mode, c, &CaseRow::r_x));
        guidance.push_back({{"slice", c},
                            {"guided_rmse", g},
                            {"unguided_rmse", u},
                            {"ratio", g / u},
                            {"guided_r_x", rx},
                            {"unguided_r_x", finite_mean(collect(GuidanceMode::None, c, &CaseRow::r_x))},
                            {"guided_r", finite_mean(collect(cfg.sampler.mode, c, &CaseRow::r))}});
        say(fmt("guidance slice %.0f: rmse ratio %.3f, r_x %.3f", c, g / u, rx));
    }

    // Sparsity-aware vs normalized loss.
    const Json sparsity = {
        {"sparse_empty_rmse", finite_mean(collect(GuidanceMode::SparsityAware, -1, &CaseRow::empty_rmse))},
        {"baseline_empty_rmse", finite_mean(collect(GuidanceMode::NormalizedBaseline, -1, &CaseRow::empty_rmse))},
        {"sparse_r_x", finite_mean(collect(GuidanceMode::SparsityAware, -1, &CaseRow::r_x))},
        {"baseline_r_x", finite_mean(collect(GuidanceMode::NormalizedBaseline, -1, &CaseRow::r_x))},
        {"sparse_r", finite_mean(collect(GuidanceMode::SparsityAware, -1, &CaseRow::r))},
        {"baseline_r", finite_mean(collect(GuidanceMode::NormalizedBaseline, -1, &CaseRow::r))}};
    say(fmt("empty rmse sparse %.4f vs normalized %.4f", sparsity["sparse_empty_rmse"].get<double>(),
            sparsity["baseline_empty_rmse"].get<double>()));

    // Unguided samples against validation values, active cells of each evaluation slice pooled.
    say("prior samples");
    const auto prior = prior_samples(cfg, models, ds);
    Json ks = Json::array();
    const char* names[] = {"vx", "vy", "vz"};
    for (int ch = 0; ch < 3; ++ch) {
        std::vector<double> gen, ref;
        for (std::size_t k = 0; k < cfg.eval_slices.size(); ++k) {
            const int c = cfg.eval_slices[k];
            for (const auto* snap : ds.val()) {
                const auto& v = snap->slices[c].velocity;
                const auto x = metrics::masked_values(v, cg::activity_mask(v), ch);
                ref.insert(ref.end(), x.begin(), x.end());
            }
            for (const auto& f : prior[k]) {
                const auto x = metrics::masked_values(f, cg::activity_mask(f), ch);
                gen.insert(gen.end(), x.begin(), x.end());
            }
        }
        const double d = gen.empty() || ref.empty() ? nan() : metrics::ecdf_distance(gen, ref);
        ks.push_back({{"component", names[ch]}, {"ks", d}, {"generated", gen.size()}, {"reference", ref.size()}});
        say(std::string("prior KS ") + names[ch] + fmt(" %.3f", d));
    }

    // Calibration ensemble at the representative snapshot.
    Json uq = Json::array();
    double covered = 0.0, total = 0.0;
    for (int c : cfg.eval_slices) {
        say(fmt("ensemble slice %.0f (K = %.0f)", c, kCalibrationMembers));
        ReconRequest req;
        req.slice = c;
        req.snapshot = rep;
        req.obs = cfg.observation;
        req.mode = cfg.sampler.mode;
        req.ensemble = kCalibrationMembers;
        req.decode_physics = models.decoder != nullptr;
        const auto r = reconstruct(cfg, ds, models, req);
        save_reconstruction(lay.recon(recon_name(r)), r, cfg);
        const double n = static_cast<double>(r.active.count());
        double cov = 0.0, sd = 0.0;
        for (int ch = 0; ch < 3; ++ch) {
            cov += metrics::coverage(r.truth, r.mean, r.std, r.active, ch, 3.0) / 3.0;
            const auto s = metrics::masked_values(r.std, r.active, ch);
            for (double x : s) sd += x;
        }
        sd /= 3.0 * n;
        covered += cov * n;
        total += n;
        uq.push_back({{"slice", c},
                      {"coverage", cov},
                      {"mean_std", sd},
                      {"active_cells", r.active.count()},
                      {"rmse", mean_active_rmse(r.metrics)},
                      {"r_x", active_r(r.metrics, "vx")}});
    }
    const double coverage = covered / total;
    say(fmt("coverage at 3 std %.3f", coverage));

    say("sweeps");
    const auto sw = sweep(cfg, ds, models);
    fs::create_directories(lay.sweeps());
    write_sweep_csv(lay.sweeps() / "sweep.csv", sw);
    Json sweep_json = Json::array();
    for (const auto& s : sw) {
        if (s.slice != cfg.eval_slices.front()) continue;
        sweep_json.push_back({{"variable", s.variable}, {"value", s.value}, {"r_x", s.r_x}, {"r", s.r}, {"rmse", s.rmse}});
    }

    // Figures and table of the representative snapshot.
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(lay.root / "recon")) {
        if (e.is_directory() && e.path().extension() != ".tmp") dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) report::render_reconstruction(d, lay.report());
    io::write_text_atomic(lay.report() / "summary.md", report::summary_table(dirs));

    Json snaps_json = Json::array();
    for (int s : snaps) snaps_json.push_back({{"snapshot", s}, {"time", test.snapshots[s].time}});
    Json summary = {{"snapshots", snaps_json},
                    {"representative", rep},
                    {"mode", sampler::to_string(cfg.sampler.mode)},
                    {"cases", cases},
                    {"guidance", guidance},
                    {"sparsity", sparsity},
                    {"prior", ks},
                    {"uq", {{"members", kCalibrationMembers}, {"coverage", coverage}, {"slices", uq}}},
                    {"sweep", sweep_json}};
    fs::create_directories(lay.eval());
    io::write_json_atomic(lay.eval() / "summary.json", summary);
    return summary;
}

}  // namespace granflow::pipeline
