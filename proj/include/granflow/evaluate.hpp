#pragma once

#include <functional>
#include <string>

#include <json.hpp>

#include "granflow/pipeline.hpp"

namespace granflow::pipeline {

using LogFn = std::function<void(const std::string&)>;

/// Evaluation suite over the test instance. Writes eval/summary.json, the reconstructions of
/// the representative snapshot under recon/, sweeps/sweep.csv and the report, and returns the summary.
///
/// summary keys:
///   cases        one row per (snapshot, slice, mode), ensemble mean of eval_members members
///   guidance     per slice: mean active RMSE guided and unguided, their ratio; mean r_x at each slice
///   sparsity     mean empty RMSE and active r_x of the sparsity-aware and normalized modes
///   prior        per component KS distance of unguided samples against validation values
///   uq           K-member ensemble at the representative snapshot: coverage at 3 std, mean std per slice
///   sweep        r_x at the first eval slice for every rho and stride, averaged over the eval snapshots
nlohmann::json evaluate(const PipelineConfig& cfg, const Dataset& ds, const Models& models, const LogFn& log = {});

/// Ensemble size of the calibration run.
inline constexpr int kCalibrationMembers = 25;

}  // namespace granflow::pipeline
