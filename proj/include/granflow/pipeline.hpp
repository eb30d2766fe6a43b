#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "granflow/cfm.hpp"
#include "granflow/coarsegrain.hpp"
#include "granflow/dataset.hpp"
#include "granflow/dem.hpp"
#include "granflow/metrics.hpp"
#include "granflow/nets.hpp"
#include "granflow/sampler.hpp"

namespace granflow::pipeline {

namespace fs = std::filesystem;

struct ObservationSpec {
    double rho = 1.0;
    int stride = 1;
};

struct SweepConfig {
    std::vector<double> rho{1.0, 0.8, 0.6, 0.4, 0.2};
    std::vector<int> stride{1, 3, 5, 7};
};

/// DEM settings of the desk pipeline: more particles and a shorter run than the module defaults.
inline dem::DemConfig desk_dem() {
    dem::DemConfig d;
    d.n_particles = 4000;
    d.total_time = 0.5;
    return d;
}

struct PipelineConfig {
    std::uint64_t seed = 1;
    fs::path output_dir = "granflow_out";
    int dev_instances = 5;  // plus one test instance
    dem::DemConfig dem = desk_dem();
    cg::GridSpec grid;
    cfm::TrainConfig backbone = cfm::TrainConfig::defaults(nets::ModelKind::Backbone);
    cfm::TrainConfig forward = cfm::TrainConfig::defaults(nets::ModelKind::Surrogate);
    cfm::TrainConfig decoder = cfm::TrainConfig::defaults(nets::ModelKind::Decoder);
    cfm::TrainConfig baseline = cfm::TrainConfig::defaults(nets::ModelKind::Baseline);
    sampler::SamplerConfig sampler;
    ObservationSpec observation;
    SweepConfig sweep;
    std::vector<int> eval_slices{1, 2, 3};
    int eval_snapshot = -1;  // test snapshot to reconstruct; -1 picks the median evaluation snapshot
    int min_active = 20;     // active cells every evaluation slice needs for a snapshot to be evaluated
    int eval_members = 5;    // ensemble size of each evaluated reconstruction
    int prior_samples = 8;   // unconditional samples per slice for distribution checks

    void validate() const;
    const cfm::TrainConfig& train_config(nets::ModelKind kind) const;
    cfm::TrainConfig& train_config(nets::ModelKind kind);
    int instance_count() const { return dev_instances + 1; }
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
/// Sections absent from j keep their defaults; unknown keys raise ConfigError.
void from_json(const nlohmann::json& j, PipelineConfig& c);
PipelineConfig load_config(const fs::path& path);

/// Output tree under the configured directory.
struct Layout {
    fs::path root;

    fs::path run(int id) const;
    fs::path fields(int id) const;
    fs::path dataset() const { return root / "dataset"; }
    fs::path checkpoint(nets::ModelKind kind) const;
    fs::path loss_log(nets::ModelKind kind) const;
    fs::path recon(const std::string& name) const { return root / "recon" / name; }
    fs::path sweeps() const { return root / "sweeps"; }
    fs::path samples() const { return root / "samples"; }
    fs::path report() const { return root / "report"; }
    fs::path eval() const { return root / "eval"; }
};

/// Per-instance DEM configuration (seed fanned out from the global seed).
dem::DemConfig instance_dem(const PipelineConfig& cfg, int id);
void simulate(const PipelineConfig& cfg, int id);
/// Coarse-grains every snapshot of a run archive into a field archive of volumes and slices.
void grid(const fs::path& run_dir, const cg::GridSpec& spec, const fs::path& fields_dir);

struct Dataset {
    std::vector<data::Instance> instances;
    data::DatasetSplit split;
    data::NormStats stats;

    std::vector<const data::Snapshot*> train() const { return data::select(instances, split.train); }
    std::vector<const data::Snapshot*> val() const { return data::select(instances, split.val); }
    const data::Instance& test() const { return data::find_instance(instances, split.test_instance); }
};

/// Loads all field archives, splits them and computes statistics; writes split.json and stats.json.
Dataset build_dataset(const PipelineConfig& cfg);
/// Reads split.json and stats.json written by build_dataset plus the field archives.
Dataset load_dataset(const PipelineConfig& cfg);

/// Trains one model and writes its checkpoint and loss log. With `resume` the existing
/// checkpoint is the starting point; its architecture must match the config.
cfm::TrainResult train(const PipelineConfig& cfg, nets::ModelKind kind, const Dataset& ds,
                       const cfm::EpochCallback& on_epoch = {}, bool resume = false);

struct Models {
    std::shared_ptr<const nets::ModelParams> backbone;
    std::shared_ptr<const nets::ModelParams> forward;
    std::shared_ptr<const nets::ModelParams> decoder;   // optional
    std::shared_ptr<const nets::ModelParams> baseline;  // optional
};

/// Loads the checkpoints present under the layout; the backbone is required.
Models load_models(const PipelineConfig& cfg);

struct ReconRequest {
    int slice = 1;
    int snapshot = -1;
    ObservationSpec obs;
    sampler::GuidanceMode mode = sampler::GuidanceMode::SparsityAware;
    int ensemble = 1;
    bool decode_physics = false;
};

struct Reconstruction {
    ReconRequest request;
    double time = 0.0;
    int snapshot = 0;
    Field truth;  // m/s
    Mask active;  // from the truth
    sampler::Observation obs;
    Field mean;  // m/s
    Field std;   // m/s; zero for K = 1
    std::vector<Field> samples;
    std::vector<std::vector<double>> guidance_loss;
    Field physics_truth;  // Pa, Pa, m^2/s^2 (decode_physics only)
    Field physics;
    std::vector<metrics::MetricRow> metrics;
};

/// Test snapshots where every evaluation slice has at least min_active active cells.
std::vector<int> eval_snapshots(const PipelineConfig& cfg, const Dataset& ds);
/// The configured snapshot, else the median of eval_snapshots, else the most active one.
int pick_snapshot(const PipelineConfig& cfg, const Dataset& ds);
Reconstruction reconstruct(const PipelineConfig& cfg, const Dataset& ds, const Models& models, const ReconRequest& req);
void save_reconstruction(const fs::path& dir, const Reconstruction& r, const PipelineConfig& cfg);
/// Directory name under recon/ encoding snapshot, slice, mode, rho, stride and K.
std::string recon_name(const Reconstruction& r);

/// Deterministic inverse-direction baseline model applied to the same test case.
Field baseline_predict(const PipelineConfig& cfg, const Dataset& ds, const Models& models, int slice, int snapshot);

/// Unguided samples for every evaluation slice, in m/s.
std::vector<std::vector<Field>> prior_samples(const PipelineConfig& cfg, const Models& models, const Dataset& ds);

struct SweepRow {
    std::string variable;  // rho or stride
    double value = 0.0;
    int slice = 0;
    double rmse = 0.0;  // active-region RMSE averaged over vx, vy, vz
    double r = 0.0;     // active-region Pearson r averaged over the defined components
    double r_x = 0.0;
    double r_z = 0.0;
    double window_fraction = 0.0;
    std::size_t observed_cells = 0;
    int cases = 0;  // snapshots averaged
};

/// rho sweep at stride 1 and stride sweep at rho = 1, each sorted by its variable. Metrics are
/// averaged over the evaluation snapshots, or taken at the configured eval snapshot.
std::vector<SweepRow> sweep(const PipelineConfig& cfg, const Dataset& ds, const Models& models,
                            const std::string& which = "both");
void write_sweep_csv(const fs::path& path, const std::vector<SweepRow>& rows);

/// Mean over channels of the active-region metric for a reconstruction (NaN terms skipped).
double mean_active_rmse(const std::vector<metrics::MetricRow>& rows);
double mean_active_r(const std::vector<metrics::MetricRow>& rows);
/// Active-region value of one quantity (NaN when absent or undefined).
double active_r(const std::vector<metrics::MetricRow>& rows, const std::string& quantity);
double active_rmse(const std::vector<metrics::MetricRow>& rows, const std::string& quantity);
/// Empty-region RMSE averaged over vx, vy, vz (NaN when the slice has no empty cells).
double mean_empty_rmse(const std::vector<metrics::MetricRow>& rows);

}  // namespace granflow::pipeline
