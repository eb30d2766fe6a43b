#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>

#include "granflow/dataset.hpp"
#include "granflow/field.hpp"
#include "granflow/nets.hpp"
#include "granflow/random.hpp"

namespace granflow::cfm {

inline constexpr double kSigmaMin = 1e-4;

class DivergenceError : public NumericError {
public:
    using NumericError::NumericError;
};

struct TrainConfig {
    nets::ModelKind kind = nets::ModelKind::Backbone;
    std::vector<int> widths{16, 32, 64};
    int epochs = 300;
    int batch_size = 8;
    double sigma_min = kSigmaMin;
    double lr_base = 2e-3;
    double lr_floor = 1e-4;
    double clip_norm = 1.0;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;

    /// Desk defaults per model kind.
    static TrainConfig defaults(nets::ModelKind kind);
    void validate() const;
    nets::ArchDescriptor arch() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep their current values; unknown keys raise ConfigError.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// u_tau = (1 - (1 - sigma_min) tau) u0 + tau u1.
Field ot_interpolate(const Field& u0, const Field& u1, double tau, double sigma_min = kSigmaMin);
/// (u1 - (1 - sigma_min) u_tau) / (1 - (1 - sigma_min) tau).
Field target_field(const Field& u_tau, const Field& u1, double tau, double sigma_min = kSigmaMin);

/// One training pair in normalized units. The backbone uses only `target` (= u1).
struct Example {
    Field input;
    Field target;
    int c = 0;
};

/// Interior slices c = 1..3 of every snapshot, velocity normalized.
std::vector<Example> backbone_examples(std::span<const data::Snapshot* const> snapshots, const data::NormStats& stats);
/// forward: slice c in {1,2,3} -> slice-0 (vx, vz); decoder: slice c in {0..3} -> (p, q, T);
/// baseline: slice-0 (vx, vz) -> slice c in {1,2,3}.
std::vector<Example> surrogate_examples(nets::ModelKind kind, std::span<const data::Snapshot* const> snapshots,
                                        const data::NormStats& stats);

/// Flow-matching loss of one batch: per-sample tau ~ U[0,1] and u0 ~ N(0, I) drawn
/// from rng in sample order; mean over samples of the element-mean squared error.
double cfm_loss(const nets::ModelParams& params, std::span<const Example> batch, Rng& rng,
                double sigma_min = kSigmaMin);
/// Element-mean squared error of a surrogate averaged over the batch.
double mse_loss(const nets::ModelParams& params, std::span<const Example> batch);

struct LogRow {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;  // NaN without validation data
    double lr = 0.0;
};

struct TrainResult {
    nets::ModelParams params;
    std::vector<LogRow> log;
};

using EpochCallback = std::function<void(const LogRow&)>;

/// `warm_start` replaces the seeded initialization; its architecture must match.
TrainResult train_backbone(std::span<const Example> train, std::span<const Example> val, const TrainConfig& config,
                           const EpochCallback& on_epoch = {}, const nets::ModelParams* warm_start = nullptr);
/// MSE training for forward, decoder and baseline models; the result is frozen.
TrainResult train_surrogate(std::span<const Example> train, std::span<const Example> val, const TrainConfig& config,
                            const EpochCallback& on_epoch = {}, const nets::ModelParams* warm_start = nullptr);

void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& log);

}  // namespace granflow::cfm
