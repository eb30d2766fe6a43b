#pragma once

#include <array>
#include <optional>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "granflow/archive.hpp"
#include "granflow/dem.hpp"
#include "granflow/field.hpp"

namespace granflow::cg {

using dem::Vec3;
using Mat3 = Eigen::Matrix3d;

/// Cells with |v_cell| above this speed (m/s) are active.
inline constexpr double kActivityThreshold = 0.01;

/// Depths of slices 1-3 below the observation wall, in particle diameters.
inline constexpr std::array<double, 3> kSliceDepths{6.7, 13.3, 20.0};

struct GridSpec {
    Vec3 origin{-0.032, 0.0, 0.0};
    double cell_size = 0.004;
    std::array<int, 3> dims{32, 11, 16};  // nx, ny, nz

    void validate() const;
    std::size_t cell_count() const { return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2]; }
    /// Flat index of (ix, iy, iz); x fastest, then y, then z.
    std::size_t index(int ix, int iy, int iz) const {
        return (static_cast<std::size_t>(iz) * dims[1] + iy) * dims[0] + ix;
    }
    /// Cell containing x, or nothing when x lies outside the grid.
    std::optional<std::size_t> locate(const Vec3& x) const;
    double cell_volume() const { return cell_size * cell_size * cell_size; }
};

struct GridVolume {
    GridSpec spec;
    std::vector<int> count;
    std::vector<Vec3> v_cell;
    std::vector<double> T;
    std::vector<Mat3> sigma;
    std::vector<double> p;
    std::vector<double> q;
    int outside = 0;  // mobile particles whose centers fell outside the grid
};

/// Mean velocity of the mobile particles per cell; fixed spheres are ignored.
GridVolume grid_average_velocity(const dem::ParticleState& state, const GridSpec& spec);
/// Mean squared velocity fluctuation per cell, averaged over the three components.
void granular_temperature(const dem::ParticleState& state, GridVolume& volume);
/// Static contact stress sum(f l^T) / V per cell, symmetrized. Each particle-particle
/// contact (fixed spheres included) goes to the cell holding its contact point.
void loveweber_stress(const dem::ParticleState& state, GridVolume& volume);
/// Mean stress p = -tr(sigma)/3 and deviatoric stress q = sqrt(3 J2).
void stress_invariants(GridVolume& volume);
GridVolume coarse_grain(const dem::ParticleState& state, const GridSpec& spec);

struct SliceSample {
    int index = 0;       // 0 = observation wall, 1..3 interior
    double y_plus = 0;   // depth below the wall in particle diameters
    int layer = 0;       // y cell index
    double time = 0;
    Field velocity;      // (vx, vy, vz) x nz x nx, m/s
    Mask mask;           // |v| > threshold
    Field physics;       // (p, q, T): Pa, Pa, m^2/s^2
};

/// y cell layers for slices 0..3: the layer whose center is nearest to each depth,
/// measured from the center of the wall-adjacent layer.
std::array<int, 4> slice_layers(const GridSpec& spec, double d);
std::array<SliceSample, 4> extract_slices(const GridVolume& volume, double d, double time);
Mask activity_mask(const Field& velocity, double threshold = kActivityThreshold);

void to_json(nlohmann::json& j, const GridSpec& g);
void from_json(const nlohmann::json& j, GridSpec& g);

// Field-archive naming: "s<k>/slice<c>/{velocity,mask,physics}" and "s<k>/volume/...".
void add_volume(io::FieldArchive& archive, const std::string& prefix, const GridVolume& volume, double time);
void add_slice(io::FieldArchive& archive, const std::string& prefix, const SliceSample& slice);
SliceSample read_slice(const io::FieldArchive& archive, const std::string& prefix);

}  // namespace granflow::cg
