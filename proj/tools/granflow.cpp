// Command-line driver: simulate -> grid -> dataset -> train -> reconstruct / sweep / eval -> report.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "granflow/archive.hpp"
#include "granflow/error.hpp"
#include "granflow/evaluate.hpp"
#include "granflow/pipeline.hpp"
#include "granflow/report.hpp"

namespace fs = std::filesystem;
using namespace granflow;
using namespace granflow::pipeline;

namespace {

struct Globals {
    std::string config;
    std::string output;
    std::optional<std::uint64_t> seed;
};

PipelineConfig resolve(const Globals& g) {
    PipelineConfig cfg;
    if (!g.config.empty()) cfg = load_config(g.config);
    if (!g.output.empty()) cfg.output_dir = g.output;
    if (g.seed) cfg.seed = *g.seed;
    cfg.validate();
    return cfg;
}

std::vector<int> instance_list(const PipelineConfig& cfg, int instance) {
    if (instance >= cfg.instance_count()) throw ConfigError("instance " + std::to_string(instance) + " out of range");
    if (instance >= 0) return {instance};
    std::vector<int> ids;
    for (int i = 0; i < cfg.instance_count(); ++i) ids.push_back(i);
    return ids;
}

void save_config(const PipelineConfig& cfg) {
    fs::create_directories(cfg.output_dir);
    io::write_json_atomic(cfg.output_dir / "config.json", cfg);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"granflow: granular flow reconstruction from boundary observations"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("-c,--config", g.config, "JSON pipeline configuration");
    app.add_option("-o,--output", g.output, "Output directory (overrides output_dir)");
    app.add_option("--seed", g.seed, "Global seed (overrides seed)");

    int instance = -1;
    auto* sim = app.add_subcommand("simulate", "Run the DEM for every instance (or one)");
    sim->add_option("--instance", instance, "Instance id");
    auto* grd = app.add_subcommand("grid", "Coarse-grain run archives into field archives");
    grd->add_option("--instance", instance, "Instance id");
    auto* dst = app.add_subcommand("dataset", "Split instances and compute normalization statistics");

    std::string kind;
    std::optional<int> epochs;
    bool resume = false;
    auto* trn = app.add_subcommand("train", "Train one model");
    trn->add_option("--kind", kind, "backbone, forward, decoder or baseline")->required();
    trn->add_option("--epochs", epochs, "Override the configured epoch count");
    trn->add_flag("--resume", resume, "Continue from the existing checkpoint");

    int slice = 1, count = 8;
    auto* smp = app.add_subcommand("sample", "Draw unguided samples of one slice");
    smp->add_option("--slice", slice, "Slice index 1..3");
    smp->add_option("--count", count, "Number of samples");

    ReconRequest req;
    std::string guidance;
    std::string name;
    auto* rec = app.add_subcommand("reconstruct", "Reconstruct a test slice from the wall observation");
    rec->add_option("--slice", req.slice, "Slice index 1..3");
    rec->add_option("--snapshot", req.snapshot, "Test snapshot index (default: configured or most active)");
    std::optional<double> rho;
    std::optional<int> stride;
    rec->add_option("--rho", rho, "Observation window coverage ratio");
    rec->add_option("--stride", stride, "Observation stride");
    rec->add_option("--guidance", guidance, "sparse, baseline or none");
    rec->add_option("--uq", req.ensemble, "Ensemble size K");
    rec->add_flag("--decode-physics", req.decode_physics, "Decode p, q, T with the decoder");
    rec->add_option("--name", name, "Output name under recon/");

    std::string which = "both";
    auto* swp = app.add_subcommand("sweep", "Coverage-ratio and stride sweeps");
    swp->add_option("--which", which, "rho, stride or both");

    std::vector<std::string> dirs;
    auto* rep = app.add_subcommand("report", "SVG heatmaps and a summary table");
    rep->add_option("dirs", dirs, "Reconstruction directories (default: all under recon/)");

    auto* evl = app.add_subcommand("eval", "Evaluation suite over the test instance");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        PipelineConfig cfg = resolve(g);
        const Layout lay{cfg.output_dir};
        if (sim->parsed()) {
            save_config(cfg);
            for (int id : instance_list(cfg, instance)) {
                std::printf("simulate instance %d\n", id);
                simulate(cfg, id);
            }
        } else if (grd->parsed()) {
            for (int id : instance_list(cfg, instance)) {
                std::printf("grid instance %d\n", id);
                grid(lay.run(id), cfg.grid, lay.fields(id));
            }
        } else if (dst->parsed()) {
            const auto ds = build_dataset(cfg);
            std::printf("train %zu, val %zu snapshots; test instance %d\n", ds.split.train.size(), ds.split.val.size(),
                        ds.split.test_instance);
        } else if (trn->parsed()) {
            const auto k = nets::parse_kind(kind);
            if (epochs) {
                cfg.train_config(k).epochs = *epochs;
                cfg.validate();
            }
            const auto ds = load_dataset(cfg);
            const auto res = train(
                cfg, k, ds,
                [](const cfm::LogRow& r) {
                    std::printf("epoch %d train %.6g val %.6g lr %.3g\n", r.epoch, r.train_loss, r.val_loss, r.lr);
                    std::fflush(stdout);
                },
                resume);
            std::printf("wrote %s\n", lay.checkpoint(k).string().c_str());
        } else if (smp->parsed()) {
            if (slice < 1 || slice > 3) throw ConfigError("sample: slice must be in 1..3");
            if (count < 1) throw ConfigError("sample: count must be >= 1");
            const auto ds = load_dataset(cfg);
            const auto models = load_models(cfg);
            cfg.eval_slices = {slice};
            cfg.prior_samples = count;
            const auto s = prior_samples(cfg, models, ds)[0];
            io::FieldArchive a;
            std::vector<double> all;
            for (const auto& f : s) all.insert(all.end(), f.data.begin(), f.data.end());
            a.add("samples", {count, 3, s[0].rows, s[0].cols}, "m/s", 0.0, all);
            a.attributes = {{"slice", slice}, {"seed", cfg.seed}};
            const auto dir = lay.samples() / ("slice" + std::to_string(slice));
            a.save(dir);
            std::printf("wrote %s\n", dir.string().c_str());
        } else if (rec->parsed()) {
            if (!guidance.empty()) {
                req.mode = sampler::parse_guidance(guidance);
            } else {
                req.mode = cfg.sampler.mode;
            }
            req.obs = cfg.observation;
            if (rho) req.obs.rho = *rho;
            if (stride) req.obs.stride = *stride;
            if (!(req.obs.rho > 0.0 && req.obs.rho <= 1.0)) throw ConfigError("reconstruct: rho must be in (0, 1]");
            if (req.obs.stride < 1) throw ConfigError("reconstruct: stride must be >= 1");
            if (req.snapshot < 0) req.snapshot = cfg.eval_snapshot;
            const auto ds = load_dataset(cfg);
            const auto models = load_models(cfg);
            const auto r = reconstruct(cfg, ds, models, req);
            if (name.empty()) name = recon_name(r);
            save_reconstruction(lay.recon(name), r, cfg);
            std::printf("%s: active rmse %.4g m/s, r %.3f\n", name.c_str(), mean_active_rmse(r.metrics),
                        mean_active_r(r.metrics));
        } else if (swp->parsed()) {
            const auto ds = load_dataset(cfg);
            const auto models = load_models(cfg);
            const auto rows = sweep(cfg, ds, models, which);
            fs::create_directories(lay.sweeps());
            write_sweep_csv(lay.sweeps() / "sweep.csv", rows);
            std::printf("wrote %zu rows to %s\n", rows.size(), (lay.sweeps() / "sweep.csv").string().c_str());
        } else if (rep->parsed()) {
            std::vector<fs::path> paths(dirs.begin(), dirs.end());
            if (paths.empty() && fs::exists(lay.root / "recon")) {
                for (const auto& e : fs::directory_iterator(lay.root / "recon")) {
                    if (e.is_directory() && e.path().extension() != ".tmp") paths.push_back(e.path());
                }
                std::sort(paths.begin(), paths.end());
            }
            if (paths.empty()) throw ConfigError("report: no reconstruction directories");
            for (const auto& p : paths) report::render_reconstruction(p, lay.report());
            io::write_text_atomic(lay.report() / "summary.md", report::summary_table(paths));
            std::printf("wrote %s\n", lay.report().string().c_str());
        } else if (evl->parsed()) {
            const auto ds = load_dataset(cfg);
            const auto models = load_models(cfg);
            evaluate(cfg, ds, models, [](const std::string& m) {
                std::printf("%s\n", m.c_str());
                std::fflush(stdout);
            });
            std::printf("wrote %s\n", (lay.eval() / "summary.json").string().c_str());
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
