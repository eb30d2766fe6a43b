#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "granflow/coarsegrain.hpp"
#include "granflow/field.hpp"

namespace granflow::data {

/// Variables in NormStats order.
inline constexpr std::array<const char*, 6> kVariables{"vx", "vy", "vz", "p", "q", "T"};
inline constexpr std::array<int, 3> kVelocityVars{0, 1, 2};
inline constexpr std::array<int, 2> kObservedVars{0, 2};  // vy is unobservable at the wall
inline constexpr std::array<int, 3> kPhysicsVars{3, 4, 5};

/// One coarse-grained time instant of one simulation instance, with its four slices.
struct Snapshot {
    int instance = 0;
    int snapshot = 0;
    double time = 0.0;
    std::array<cg::SliceSample, 4> slices;
};

struct Instance {
    int id = 0;
    std::string source;  // field archive it was read from
    std::vector<Snapshot> snapshots;
};

struct NormStats {
    std::array<double, 6> mean{};
    std::array<double, 6> std{};
    double threshold = cg::kActivityThreshold;
    std::vector<int> source_instances;
    std::size_t active_cells = 0;
};

struct SnapshotRef {
    int instance = 0;
    int snapshot = 0;
    double time = 0.0;
    bool operator==(const SnapshotRef&) const = default;
};

/// Train/validation split at snapshot granularity (all four slices of a snapshot
/// stay together) plus one held-out test instance.
struct DatasetSplit {
    std::vector<SnapshotRef> train;
    std::vector<SnapshotRef> val;
    int test_instance = -1;
    std::vector<int> dev_instances;
    std::uint64_t seed = 0;
};

/// Population mean and standard deviation per variable over cells whose velocity
/// magnitude exceeds `threshold`, pooled over every slice of every given snapshot.
NormStats compute_active_stats(std::span<const Snapshot* const> snapshots, double threshold = cg::kActivityThreshold);
NormStats compute_active_stats(std::span<const cg::SliceSample* const> slices, double threshold = cg::kActivityThreshold);

/// z-scores channel k of `f` with variable vars[k]; every cell is transformed.
Field normalize(const Field& f, const NormStats& stats, std::span<const int> vars);
Field denormalize(const Field& f, const NormStats& stats, std::span<const int> vars);

/// The (vx, vz) channels of a velocity field.
Field observed_components(const Field& velocity);

/// Number of validation snapshots for an instance with n snapshots.
int validation_count(int n);

/// Instances are (id, snapshot count); the last instance becomes the test instance.
DatasetSplit make_splits(const std::vector<Instance>& instances, std::uint64_t seed);

/// Snapshots named by `refs`, looked up in `instances`.
std::vector<const Snapshot*> select(const std::vector<Instance>& instances, const std::vector<SnapshotRef>& refs);
const Instance& find_instance(const std::vector<Instance>& instances, int id);

void to_json(nlohmann::json& j, const NormStats& s);
void from_json(const nlohmann::json& j, NormStats& s);
void to_json(nlohmann::json& j, const DatasetSplit& s);
void from_json(const nlohmann::json& j, DatasetSplit& s);

/// Reads every snapshot's four slices from a field archive written by the grid stage.
Instance load_instance(const std::filesystem::path& fields_dir, int id);

}  // namespace granflow::data
