#include "granflow/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <sstream>

#include "granflow/archive.hpp"
#include "granflow/json_util.hpp"
#include "granflow/random.hpp"

namespace granflow::pipeline {

using nets::ModelKind;

namespace {

constexpr ModelKind kKinds[] = {ModelKind::Backbone, ModelKind::Surrogate, ModelKind::Decoder, ModelKind::Baseline};

const std::vector<std::string> kVelocityNames{"vx", "vy", "vz"};
const std::vector<std::string> kPhysicsNames{"p", "q", "T"};

std::string instance_name(int id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "inst_%02d", id);
    return buf;
}

Field denormalize_velocity(const Field& f, const data::NormStats& st) {
    return data::denormalize(f, st, data::kVelocityVars);
}

sampler::Shape slice_shape(const cg::GridSpec& g) { return {3, g.dims[2], g.dims[0]}; }

}  // namespace

void PipelineConfig::validate() const {
    if (dev_instances < 1) throw ConfigError("pipeline: dev_instances must be >= 1");
    if (output_dir.empty()) throw ConfigError("pipeline: output_dir must be set");
    dem.validate();
    grid.validate();
    cg::slice_layers(grid, dem.mean_diameter);
    for (auto k : kKinds) {
        const auto& t = train_config(k);
        if (t.kind != k) throw ConfigError("pipeline: train." + nets::to_string(k) + " has kind " + nets::to_string(t.kind));
        t.validate();
        const int m = t.arch().spatial_multiple();
        if (grid.dims[0] % m != 0 || grid.dims[2] % m != 0) {
            throw ConfigError("pipeline: grid nx and nz must be multiples of " + std::to_string(m) + " for the " +
                              nets::to_string(k) + " widths");
        }
    }
    sampler.validate();
    if (!(observation.rho > 0.0 && observation.rho <= 1.0)) throw ConfigError("observation: rho must be in (0, 1]");
    if (observation.stride < 1) throw ConfigError("observation: stride must be >= 1");
    for (double r : sweep.rho) {
        if (!(r > 0.0 && r <= 1.0)) throw ConfigError("sweep: rho values must be in (0, 1]");
    }
    for (int k : sweep.stride) {
        if (k < 1) throw ConfigError("sweep: stride values must be >= 1");
    }
    if (eval_slices.empty()) throw ConfigError("eval: slices must be non-empty");
    for (int c : eval_slices) {
        if (c < 1 || c > 3) throw ConfigError("eval: slices must be in 1..3");
    }
    if (prior_samples < 1) throw ConfigError("eval: prior_samples must be >= 1");
    if (min_active < 2) throw ConfigError("eval: min_active must be >= 2");
    if (eval_members < 1) throw ConfigError("eval: members must be >= 1");
}

const cfm::TrainConfig& PipelineConfig::train_config(ModelKind kind) const {
    switch (kind) {
        case ModelKind::Backbone: return backbone;
        case ModelKind::Surrogate: return forward;
        case ModelKind::Decoder: return decoder;
        case ModelKind::Baseline: return baseline;
    }
    return backbone;
}

cfm::TrainConfig& PipelineConfig::train_config(ModelKind kind) {
    return const_cast<cfm::TrainConfig&>(std::as_const(*this).train_config(kind));
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
    nlohmann::json train;
    for (auto k : kKinds) train[nets::to_string(k)] = c.train_config(k);
    j = {{"seed", c.seed},
         {"output_dir", c.output_dir.string()},
         {"dev_instances", c.dev_instances},
         {"dem", c.dem},
         {"grid", c.grid},
         {"train", train},
         {"sampler", c.sampler},
         {"observation", {{"rho", c.observation.rho}, {"stride", c.observation.stride}}},
         {"sweep", {{"rho", c.sweep.rho}, {"stride", c.sweep.stride}}},
         {"eval",
          {{"slices", c.eval_slices},
           {"snapshot", c.eval_snapshot},
           {"min_active", c.min_active},
           {"members", c.eval_members},
           {"prior_samples", c.prior_samples}}}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
    SectionReader r(j, "config");
    std::string out = c.output_dir.string();
    r.get("seed", c.seed);
    r.get("output_dir", out);
    c.output_dir = out;
    r.get("dev_instances", c.dev_instances);
    r.get("dem", c.dem);
    r.get("grid", c.grid);
    nlohmann::json train = nlohmann::json::object();
    r.get("train", train);
    r.get("sampler", c.sampler);
    nlohmann::json obs = nlohmann::json::object(), sw = nlohmann::json::object(), ev = nlohmann::json::object();
    r.get("observation", obs);
    r.get("sweep", sw);
    r.get("eval", ev);
    r.finish();

    SectionReader tr(train, "train");
    for (auto k : kKinds) {
        nlohmann::json section = nlohmann::json::object();
        tr.get(nets::to_string(k).c_str(), section);
        if (!section.contains("kind")) section["kind"] = nets::to_string(k);
        from_json(section, c.train_config(k));
    }
    tr.finish();
    SectionReader o(obs, "observation");
    o.get("rho", c.observation.rho);
    o.get("stride", c.observation.stride);
    o.finish();
    SectionReader s(sw, "sweep");
    s.get("rho", c.sweep.rho);
    s.get("stride", c.sweep.stride);
    s.finish();
    SectionReader e(ev, "eval");
    e.get("slices", c.eval_slices);
    e.get("snapshot", c.eval_snapshot);
    e.get("min_active", c.min_active);
    e.get("members", c.eval_members);
    e.get("prior_samples", c.prior_samples);
    e.finish();
}

PipelineConfig load_config(const fs::path& path) {
    PipelineConfig c;
    from_json(io::read_json(path), c);
    return c;
}

fs::path Layout::run(int id) const { return root / "runs" / instance_name(id); }
fs::path Layout::fields(int id) const { return root / "fields" / instance_name(id); }
fs::path Layout::checkpoint(ModelKind kind) const { return root / "models" / nets::to_string(kind); }
fs::path Layout::loss_log(ModelKind kind) const { return root / "models" / (nets::to_string(kind) + "_loss.csv"); }

dem::DemConfig instance_dem(const PipelineConfig& cfg, int id) {
    dem::DemConfig d = cfg.dem;
    d.rng_seed = derive_seed(cfg.seed, "dem", static_cast<std::uint64_t>(id));
    return d;
}

void simulate(const PipelineConfig& cfg, int id) {
    if (id < 0 || id >= cfg.instance_count()) throw ConfigError("simulate: instance id out of range");
    const auto d = instance_dem(cfg, id);
    const auto states = dem::run(d);
    dem::save_run(Layout{cfg.output_dir}.run(id), d, states);
}

void grid(const fs::path& run_dir, const cg::GridSpec& spec, const fs::path& fields_dir) {
    spec.validate();
    dem::DemConfig d;
    const auto states = dem::load_run(run_dir, &d);
    const auto layers = cg::slice_layers(spec, d.mean_diameter);
    io::FieldArchive archive;
    nlohmann::json snaps = nlohmann::json::array();
    for (std::size_t k = 0; k < states.size(); ++k) {
        const auto& st = states[k];
        const auto vol = cg::coarse_grain(st, spec);
        const auto slices = cg::extract_slices(vol, d.mean_diameter, st.time);
        const std::string prefix = "s" + std::to_string(k);
        cg::add_volume(archive, prefix + "/volume", vol, st.time);
        for (int c = 0; c < 4; ++c) cg::add_slice(archive, prefix + "/slice" + std::to_string(c), slices[c]);
        snaps.push_back({{"index", k}, {"time", st.time}, {"outside", vol.outside}});
    }
    archive.attributes["snapshots"] = snaps;
    archive.attributes["slice_layers"] = layers;
    archive.attributes["grid"] = spec;
    archive.attributes["mean_diameter"] = d.mean_diameter;
    archive.attributes["rng_seed"] = d.rng_seed;
    archive.save(fields_dir);
}

Dataset build_dataset(const PipelineConfig& cfg) {
    const Layout lay{cfg.output_dir};
    Dataset ds;
    for (int id = 0; id < cfg.instance_count(); ++id) ds.instances.push_back(data::load_instance(lay.fields(id), id));
    ds.split = data::make_splits(ds.instances, derive_seed(cfg.seed, "dataset"));
    const auto train = ds.train();
    ds.stats = data::compute_active_stats(std::span<const data::Snapshot* const>(train));
    fs::create_directories(lay.dataset());
    io::write_json_atomic(lay.dataset() / "split.json", ds.split);
    io::write_json_atomic(lay.dataset() / "stats.json", ds.stats);
    return ds;
}

Dataset load_dataset(const PipelineConfig& cfg) {
    const Layout lay{cfg.output_dir};
    Dataset ds;
    try {
        ds.split = io::read_json(lay.dataset() / "split.json").get<data::DatasetSplit>();
        ds.stats = io::read_json(lay.dataset() / "stats.json").get<data::NormStats>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(lay.dataset().string() + ": " + e.what());
    }
    std::vector<int> ids = ds.split.dev_instances;
    ids.push_back(ds.split.test_instance);
    std::sort(ids.begin(), ids.end());
    for (int id : ids) ds.instances.push_back(data::load_instance(lay.fields(id), id));
    return ds;
}

cfm::TrainResult train(const PipelineConfig& cfg, ModelKind kind, const Dataset& ds, const cfm::EpochCallback& on_epoch,
                       bool resume) {
    cfm::TrainConfig tc = cfg.train_config(kind);
    const Layout lay{cfg.output_dir};
    std::optional<nets::ModelParams> warm;
    if (resume) {
        warm = nets::load_checkpoint(lay.checkpoint(kind));
        if (warm->arch.kind != kind) throw ConfigError("resume: checkpoint holds a " + nets::to_string(warm->arch.kind));
    }
    tc.seed = derive_seed(cfg.seed, "train-" + nets::to_string(kind), tc.seed);
    const auto tr = ds.train();
    const auto va = ds.val();
    std::vector<cfm::Example> ex_train, ex_val;
    if (kind == ModelKind::Backbone) {
        ex_train = cfm::backbone_examples(tr, ds.stats);
        ex_val = cfm::backbone_examples(va, ds.stats);
    } else {
        ex_train = cfm::surrogate_examples(kind, tr, ds.stats);
        ex_val = cfm::surrogate_examples(kind, va, ds.stats);
    }
    const nets::ModelParams* start = warm ? &*warm : nullptr;
    auto res = kind == ModelKind::Backbone ? cfm::train_backbone(ex_train, ex_val, tc, on_epoch, start)
                                           : cfm::train_surrogate(ex_train, ex_val, tc, on_epoch, start);
    fs::create_directories(lay.checkpoint(kind).parent_path());
    cfm::write_log_csv(lay.loss_log(kind), res.log);
    nets::save_checkpoint(lay.checkpoint(kind), res.params,
                          {{"train", tc}, {"epochs", tc.epochs}, {"stats", ds.stats},
                           {"train_examples", ex_train.size()}, {"val_examples", ex_val.size()}});
    return res;
}

Models load_models(const PipelineConfig& cfg) {
    const Layout lay{cfg.output_dir};
    auto load = [&](ModelKind k, bool required) -> std::shared_ptr<const nets::ModelParams> {
        const auto path = lay.checkpoint(k);
        if (!required && !fs::exists(fs::path(path.string() + ".json"))) return nullptr;
        auto p = std::make_shared<nets::ModelParams>(nets::load_checkpoint(path));
        if (p->arch.kind != k) throw ConfigError(path.string() + ": checkpoint holds a " + nets::to_string(p->arch.kind));
        return p;
    };
    Models m;
    m.backbone = load(ModelKind::Backbone, true);
    m.forward = load(ModelKind::Surrogate, false);
    m.decoder = load(ModelKind::Decoder, false);
    m.baseline = load(ModelKind::Baseline, false);
    return m;
}

std::vector<int> eval_snapshots(const PipelineConfig& cfg, const Dataset& ds) {
    const auto& test = ds.test();
    std::vector<int> out;
    for (std::size_t k = 0; k < test.snapshots.size(); ++k) {
        bool ok = true;
        for (int c : cfg.eval_slices) ok = ok && test.snapshots[k].slices[c].mask.count() >= static_cast<std::size_t>(cfg.min_active);
        if (ok) out.push_back(static_cast<int>(k));
    }
    return out;
}

int pick_snapshot(const PipelineConfig& cfg, const Dataset& ds) {
    const auto& test = ds.test();
    if (test.snapshots.empty()) throw ConfigError("test instance has no snapshots");
    if (cfg.eval_snapshot >= 0) {
        if (cfg.eval_snapshot >= static_cast<int>(test.snapshots.size())) throw ConfigError("eval: snapshot out of range");
        return cfg.eval_snapshot;
    }
    const auto cases = eval_snapshots(cfg, ds);
    if (!cases.empty()) return cases[cases.size() / 2];
    int best = 0;
    std::size_t best_n = 0;
    for (std::size_t k = 0; k < test.snapshots.size(); ++k) {
        std::size_t n = 0;
        for (int c : cfg.eval_slices) n += test.snapshots[k].slices[c].mask.count();
        if (n > best_n) best = static_cast<int>(k), best_n = n;
    }
    return best;
}

namespace {

const data::Snapshot& test_snapshot(const PipelineConfig& cfg, const Dataset& ds, int& snapshot) {
    const auto& test = ds.test();
    if (snapshot < 0) snapshot = pick_snapshot(cfg, ds);
    if (snapshot >= static_cast<int>(test.snapshots.size())) throw ConfigError("snapshot index out of range");
    return test.snapshots[snapshot];
}

std::uint64_t recon_seed(const PipelineConfig& cfg, int snapshot, int slice) {
    return derive_seed(derive_seed(cfg.seed, "recon", cfg.sampler.seed), "case",
                       static_cast<std::uint64_t>(snapshot) * 4 + static_cast<std::uint64_t>(slice));
}

}  // namespace

Reconstruction reconstruct(const PipelineConfig& cfg, const Dataset& ds, const Models& models, const ReconRequest& req) {
    if (req.slice < 1 || req.slice > 3) throw ConfigError("reconstruct: slice must be in 1..3");
    if (req.ensemble < 1) throw ConfigError("reconstruct: ensemble size must be >= 1");
    if (!models.backbone) throw ConfigError("reconstruct: backbone checkpoint missing");
    if (req.mode != sampler::GuidanceMode::None && !models.forward) {
        throw ConfigError("reconstruct: guidance needs the forward-operator checkpoint");
    }
    if (req.decode_physics && !models.decoder) throw ConfigError("reconstruct: --decode-physics needs the decoder checkpoint");

    Reconstruction r;
    r.request = req;
    r.snapshot = req.snapshot;
    const auto& snap = test_snapshot(cfg, ds, r.snapshot);
    r.time = snap.time;
    const int c = req.slice;
    r.truth = snap.slices[c].velocity;
    r.active = cg::activity_mask(r.truth);

    const Field& wall = snap.slices[0].velocity;
    const Field obs_values = data::observed_components(data::normalize(wall, ds.stats, data::kVelocityVars));
    r.obs = sampler::make_observation(obs_values, cg::activity_mask(wall), req.obs.rho, req.obs.stride);

    sampler::SamplerConfig sc = cfg.sampler;
    sc.mode = req.mode;
    sc.ensemble = req.ensemble;
    sc.seed = recon_seed(cfg, r.snapshot, c);
    sampler::NetworkField f(models.backbone);
    std::unique_ptr<sampler::NetworkOperator> g;
    if (models.forward) g = std::make_unique<sampler::NetworkOperator>(models.forward);
    const auto shape = sampler::Shape{3, r.truth.rows, r.truth.cols};
    auto ens = sampler::uq_ensemble(f, g.get(), c, g ? &r.obs : nullptr, sc, shape);

    for (const auto& s : ens.samples) r.samples.push_back(denormalize_velocity(s, ds.stats));
    sampler::ensemble_stats(r.samples, r.mean, r.std);
    for (auto& run : ens.runs) r.guidance_loss.push_back(std::move(run.loss));
    r.metrics = metrics::evaluate(r.truth, r.mean, r.active, kVelocityNames, c, r.time);

    if (req.decode_physics) {
        nets::Network dec(*models.decoder);
        std::vector<Field> decoded;
        for (const auto& s : ens.samples) {
            decoded.push_back(data::denormalize(dec.forward(s, {0.0, c}), ds.stats, data::kPhysicsVars));
        }
        Field sd;
        sampler::ensemble_stats(decoded, r.physics, sd);
        r.physics_truth = snap.slices[c].physics;
        const auto rows = metrics::evaluate(r.physics_truth, r.physics, r.active, kPhysicsNames, c, r.time);
        r.metrics.insert(r.metrics.end(), rows.begin(), rows.end());
    }
    return r;
}

void save_reconstruction(const fs::path& dir, const Reconstruction& r, const PipelineConfig& cfg) {
    io::StagedDir staged(dir);
    io::FieldArchive a;
    const int R = r.truth.rows, C = r.truth.cols;
    a.add("truth", {3, R, C}, "m/s", r.time, r.truth.data);
    a.add("mean", {3, R, C}, "m/s", r.time, r.mean.data);
    a.add("std", {3, R, C}, "m/s", r.time, r.std.data);
    std::vector<double> all;
    for (const auto& s : r.samples) all.insert(all.end(), s.data.begin(), s.data.end());
    a.add("samples", {static_cast<int>(r.samples.size()), 3, R, C}, "m/s", r.time, all);
    std::vector<double> m(r.active.data.begin(), r.active.data.end());
    a.add("active", {R, C}, "1", r.time, m);
    m.assign(r.obs.mask.data.begin(), r.obs.mask.data.end());
    a.add("obs_mask", {R, C}, "1", r.time, m);
    a.add("obs_values", {2, R, C}, "normalized", r.time, r.obs.values.data);
    if (!r.physics.data.empty()) {
        a.add("physics_truth", {3, R, C}, "Pa,Pa,m^2/s^2", r.time, r.physics_truth.data);
        a.add("physics", {3, R, C}, "Pa,Pa,m^2/s^2", r.time, r.physics.data);
    }
    nlohmann::json sc = cfg.sampler;
    sc["mode"] = sampler::to_string(r.request.mode);
    sc["ensemble"] = r.request.ensemble;
    a.attributes = {{"slice", r.request.slice},
                    {"snapshot", r.snapshot},
                    {"time", r.time},
                    {"rho", r.request.obs.rho},
                    {"stride", r.request.obs.stride},
                    {"window", {r.obs.row0, r.obs.col0, r.obs.rows, r.obs.cols}},
                    {"decode_physics", r.request.decode_physics},
                    {"sampler", sc},
                    {"seed", cfg.seed}};
    a.save(staged.path() / "fields");
    metrics::write_csv(staged.path() / "metrics.csv", r.metrics);
    std::ostringstream os;
    os.precision(9);
    os << "member,step,loss\n";
    for (std::size_t k = 0; k < r.guidance_loss.size(); ++k) {
        for (std::size_t n = 0; n < r.guidance_loss[k].size(); ++n) os << k << ',' << n << ',' << r.guidance_loss[k][n] << '\n';
    }
    io::write_text_atomic(staged.path() / "guidance_loss.csv", os.str());
    staged.commit();
}

std::string recon_name(const Reconstruction& r) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "s%d_c%d_%s_rho%g_k%d_K%d", r.snapshot, r.request.slice,
                  sampler::to_string(r.request.mode).c_str(), r.request.obs.rho, r.request.obs.stride, r.request.ensemble);
    return buf;
}

Field baseline_predict(const PipelineConfig& cfg, const Dataset& ds, const Models& models, int slice, int snapshot) {
    if (!models.baseline) throw ConfigError("baseline checkpoint missing");
    const auto& snap = test_snapshot(cfg, ds, snapshot);
    const Field in = data::observed_components(data::normalize(snap.slices[0].velocity, ds.stats, data::kVelocityVars));
    nets::Network net(*models.baseline);
    return denormalize_velocity(net.forward(in, {0.0, slice}), ds.stats);
}

std::vector<std::vector<Field>> prior_samples(const PipelineConfig& cfg, const Models& models, const Dataset& ds) {
    sampler::NetworkField f(models.backbone);
    sampler::SamplerConfig sc = cfg.sampler;
    sc.mode = sampler::GuidanceMode::None;
    sc.ensemble = cfg.prior_samples;
    std::vector<std::vector<Field>> out;
    for (int c : cfg.eval_slices) {
        sc.seed = derive_seed(derive_seed(cfg.seed, "prior", cfg.sampler.seed), "slice", c);
        const auto ens = sampler::uq_ensemble(f, nullptr, c, nullptr, sc, slice_shape(cfg.grid));
        std::vector<Field> v;
        for (const auto& s : ens.samples) v.push_back(denormalize_velocity(s, ds.stats));
        out.push_back(std::move(v));
    }
    return out;
}

double mean_active_rmse(const std::vector<metrics::MetricRow>& rows) {
    double s = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        if (r.mask_kind == "active" && (r.quantity == "vx" || r.quantity == "vy" || r.quantity == "vz")) s += r.rmse, ++n;
    }
    return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

double mean_active_r(const std::vector<metrics::MetricRow>& rows) {
    double s = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        if (r.mask_kind == "active" && (r.quantity == "vx" || r.quantity == "vy" || r.quantity == "vz") &&
            !std::isnan(r.r)) {
            s += r.r, ++n;
        }
    }
    return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

double active_r(const std::vector<metrics::MetricRow>& rows, const std::string& quantity) {
    for (const auto& r : rows) {
        if (r.mask_kind == "active" && r.quantity == quantity) return r.r;
    }
    return std::numeric_limits<double>::quiet_NaN();
}

double active_rmse(const std::vector<metrics::MetricRow>& rows, const std::string& quantity) {
    for (const auto& r : rows) {
        if (r.mask_kind == "active" && r.quantity == quantity) return r.rmse;
    }
    return std::numeric_limits<double>::quiet_NaN();
}

double mean_empty_rmse(const std::vector<metrics::MetricRow>& rows) {
    double s = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        if (r.mask_kind == "empty" && (r.quantity == "vx" || r.quantity == "vy" || r.quantity == "vz")) s += r.rmse, ++n;
    }
    return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

std::vector<SweepRow> sweep(const PipelineConfig& cfg, const Dataset& ds, const Models& models, const std::string& which) {
    if (which != "both" && which != "rho" && which != "stride") throw ConfigError("sweep: expected rho, stride or both");
    std::vector<int> snaps;
    if (cfg.eval_snapshot >= 0) {
        snaps = {pick_snapshot(cfg, ds)};
    } else {
        snaps = eval_snapshots(cfg, ds);
        if (snaps.empty()) snaps = {pick_snapshot(cfg, ds)};
    }
    std::vector<SweepRow> rows;
    auto point = [&](const std::string& var, double value, ObservationSpec obs) {
        for (int c : cfg.eval_slices) {
            SweepRow row;
            row.variable = var;
            row.value = value;
            row.slice = c;
            double acc[4] = {0.0, 0.0, 0.0, 0.0};
            int n[4] = {0, 0, 0, 0};
            for (int s : snaps) {
                ReconRequest req;
                req.slice = c;
                req.snapshot = s;
                req.obs = obs;
                req.mode = cfg.sampler.mode;
                req.ensemble = cfg.eval_members;
                const auto r = reconstruct(cfg, ds, models, req);
                const double m[4] = {mean_active_rmse(r.metrics), mean_active_r(r.metrics), active_r(r.metrics, "vx"),
                                     active_r(r.metrics, "vz")};
                for (int k = 0; k < 4; ++k) {
                    if (std::isfinite(m[k])) acc[k] += m[k], ++n[k];
                }
                row.window_fraction = static_cast<double>(r.obs.rows * r.obs.cols) / static_cast<double>(r.truth.plane());
                row.observed_cells = r.obs.mask.count();
            }
            const double nan = std::numeric_limits<double>::quiet_NaN();
            row.rmse = n[0] ? acc[0] / n[0] : nan;
            row.r = n[1] ? acc[1] / n[1] : nan;
            row.r_x = n[2] ? acc[2] / n[2] : nan;
            row.r_z = n[3] ? acc[3] / n[3] : nan;
            row.cases = static_cast<int>(snaps.size());
            rows.push_back(row);
        }
    };
    if (which != "stride") {
        auto rho = cfg.sweep.rho;
        std::sort(rho.begin(), rho.end());
        for (double v : rho) point("rho", v, {v, 1});
    }
    if (which != "rho") {
        auto st = cfg.sweep.stride;
        std::sort(st.begin(), st.end());
        for (int k : st) point("stride", k, {1.0, k});
    }
    return rows;
}

void write_sweep_csv(const fs::path& path, const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os.precision(9);
    os << "variable,value,slice,rmse,r,r_x,r_z,window_fraction,observed_cells,cases\n";
    auto put = [&](double v) {
        if (std::isnan(v)) {
            os << "nan";
        } else {
            os << v;
        }
    };
    for (const auto& r : rows) {
        os << r.variable << ',' << r.value << ',' << r.slice << ',' << r.rmse << ',';
        put(r.r);
        os << ',';
        put(r.r_x);
        os << ',';
        put(r.r_z);
        os << ',' << r.window_fraction << ',' << r.observed_cells << ',' << r.cases << '\n';
    }
    io::write_text_atomic(path, os.str());
}

}  // namespace granflow::pipeline
