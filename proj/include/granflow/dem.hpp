#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "granflow/error.hpp"

namespace granflow::dem {

using Vec3 = Eigen::Vector3d;

inline constexpr double kStandardGravity = 9.81;

// Frame: x runs downslope along incline #1, y across the channel (lateral walls at
// y = 0 and y = channel_width), z along the outward normal of incline #1. Incline #1
// occupies x in [0, plane1_length]; incline #2 rises upslope from the junction line
// x = z = 0; the retaining plate is the plane x = 0.
struct DemConfig {
    double incline1_angle = 30.0;  // degrees
    double incline2_angle = 75.0;  // degrees
    double channel_width = 0.044;
    double plane1_length = 0.096;
    double plane2_length = 0.08;
    double plate_height = 0.2;
    bool end_wall = true;

    int n_particles = 2000;
    double mean_diameter = 0.002;
    std::pair<double, double> diameter_span{0.8, 1.2};
    double density = 2500.0;
    double mu_pp = 0.2;
    double mu_pw = 0.5;
    double base_roughness_diameter = 0.004;  // 0 disables the fixed base layer

    double normal_stiffness = 2000.0;  // N/m
    double tangential_stiffness_ratio = 2.0 / 7.0;
    double damping_ratio = 0.2;
    double gravity = kStandardGravity;

    double dt = 2.5e-5;
    double total_time = 0.8;
    double snapshot_interval = 0.04;
    std::uint64_t rng_seed = 1;

    // Settling behind the plate before release.
    double settle_speed = 0.01;
    double relax_drag = 20.0;  // 1/s, applied only while settling
    double min_relax_time = 0.05;
    double max_relax_time = 2.0;

    double min_radius() const { return 0.5 * mean_diameter * diameter_span.first; }
    double max_radius() const { return 0.5 * mean_diameter * diameter_span.second; }
    double lightest_mass() const;
    /// Period of the linear contact oscillator for the lightest particle on a wall.
    double contact_period() const;
    Vec3 gravity_vector() const;

    /// Throws ConfigError when an invariant is violated.
    void validate() const;
};

enum class Wall : std::uint32_t { Plane1 = 0, Plane2, Plate, SideNear, SideFar, EndWall };
inline constexpr std::uint32_t kWallBase = 0xFFFFFF00u;

struct Contact {
    std::uint32_t i = 0;
    std::uint32_t j = 0;  // particle index, or kWallBase + wall id
    Vec3 force = Vec3::Zero();   // acting on particle i
    Vec3 branch = Vec3::Zero();  // center i -> center j (walls: center -> contact point)
    Vec3 point = Vec3::Zero();
    double overlap = 0.0;
    Vec3 shear = Vec3::Zero();  // tangential spring elongation

    bool is_wall() const { return j >= kWallBase; }
    Wall wall() const { return static_cast<Wall>(j - kWallBase); }
};

struct ParticleState {
    double time = 0.0;
    std::vector<Vec3> positions;
    std::vector<Vec3> velocities;
    std::vector<Vec3> forces;  // net contact force per particle, consistent with `contacts`
    std::vector<double> radii;
    std::vector<std::uint8_t> fixed;
    std::vector<Contact> contacts;  // sorted by i
    bool plate_active = true;
    double max_overlap_ratio = 0.0;  // largest overlap / smaller radius among current contacts

    std::size_t size() const { return positions.size(); }
    std::size_t mobile_count() const;
};

class PackingError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class InstabilityError : public NumericError {
public:
    using NumericError::NumericError;
};

/// Advances particle states with a linear spring-dashpot contact law and
/// Coulomb-capped tangential springs, integrated by semi-implicit Euler.
class Simulator {
public:
    explicit Simulator(DemConfig config);

    const DemConfig& config() const { return config_; }

    /// One time step in place. `drag` adds a viscous body force -drag * m * v.
    void advance(ParticleState& state, double drag = 0.0);

    /// Recomputes contacts and forces at the current positions and velocities
    /// without moving anything (tangential history is carried over).
    void refresh_contacts(ParticleState& state);

    double particle_mass(double radius) const;

private:
    struct WallGeom {
        Wall id;
        Vec3 origin;
        Vec3 normal;
        Vec3 tangent;  // in-plane direction with a bounded extent
        double smin;
        double smax;
    };

    struct BinGrid {
        Vec3 lo = Vec3::Zero();
        double size = 1.0;
        int nx = 1, ny = 1, nz = 1;
        std::vector<int> start;
        std::vector<int> items;

        int bin_of(const Vec3& x) const;
        void build(const std::vector<Vec3>& positions, const std::vector<int>& ids);
    };

    /// Rebuilds the Verlet neighbour lists when some particle moved more than half the skin.
    void update_neighbors(const ParticleState& state);
    void compute_contacts(ParticleState& state, double shear_dt);
    void add_wall_contacts(ParticleState& state, std::uint32_t i, const std::vector<Contact>& previous,
                           const std::vector<std::size_t>& offsets, double shear_dt);

    DemConfig config_;
    Vec3 gravity_;
    std::vector<WallGeom> walls_;
    double kt_;
    BinGrid mobile_bins_;
    BinGrid fixed_bins_;
    double skin_;
    std::vector<int> mobile_ids_;
    std::vector<int> fixed_ids_;
    // Per mobile particle (in mobile_ids_ order): fixed candidates, then mobile candidates j > i.
    std::vector<int> nbr_start_;
    std::vector<int> nbr_items_;
    std::vector<Vec3> ref_positions_;
    std::vector<double> ref_radii_;
    std::vector<std::uint8_t> ref_fixed_;
};

ParticleState init_packing(const DemConfig& config);
ParticleState step(const ParticleState& state, const DemConfig& config);
/// Removes the retaining plate; a no-op when it is already gone.
ParticleState release_plate(const ParticleState& state, const DemConfig& config);
std::vector<ParticleState> run(const DemConfig& config);

double kinetic_energy(const ParticleState& state, const DemConfig& config);
/// Kinetic + gravitational (height above the lowest point of incline #1) + elastic contact energy.
double mechanical_energy(const ParticleState& state, const DemConfig& config);
Vec3 total_momentum(const ParticleState& state, const DemConfig& config);
double max_mobile_speed(const ParticleState& state);

void to_json(nlohmann::json& j, const DemConfig& c);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
void from_json(const nlohmann::json& j, DemConfig& c);

// Snapshot archive: manifest.json plus per-snapshot raw little-endian arrays.
void save_run(const std::filesystem::path& dir, const DemConfig& config,
              const std::vector<ParticleState>& snapshots);
std::vector<ParticleState> load_run(const std::filesystem::path& dir, DemConfig* config = nullptr);

}  // namespace granflow::dem
