#include "granflow/dem.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <tuple>

#include "granflow/archive.hpp"
#include "granflow/json_util.hpp"
#include "granflow/random.hpp"

namespace granflow::dem {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMaxOverlapRatio = 0.1;

double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }

// Material (incline #2) direction angle measured from incline #1 inside the frame.
double plane2_angle(const DemConfig& c) { return deg2rad(c.incline2_angle - c.incline1_angle); }

}  // namespace

double DemConfig::lightest_mass() const {
    const double r = min_radius();
    return density * 4.0 / 3.0 * std::numbers::pi * r * r * r;
}

double DemConfig::contact_period() const {
    return 2.0 * std::numbers::pi * std::sqrt(lightest_mass() / normal_stiffness);
}

Vec3 DemConfig::gravity_vector() const {
    const double a = deg2rad(incline1_angle);
    return {gravity * std::sin(a), 0.0, -gravity * std::cos(a)};
}

void DemConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("dem: " + msg); };
    if (!(incline1_angle > 0 && incline1_angle < 90)) fail("incline1_angle must be in (0, 90)");
    if (!(incline2_angle > 0 && incline2_angle < 90)) fail("incline2_angle must be in (0, 90)");
    if (!(incline2_angle > incline1_angle)) fail("incline2_angle must exceed incline1_angle");
    if (!(mean_diameter > 0)) fail("mean_diameter must be positive");
    if (!(diameter_span.first > 0 && diameter_span.first < diameter_span.second)) {
        fail("diameter_span must satisfy 0 < low < high");
    }
    if (!(dt > 0)) fail("dt must be positive");
    if (!(normal_stiffness > 0)) fail("normal_stiffness must be positive");
    if (!(dt < contact_period() / 5.0)) {
        fail("dt must be below 1/5 of the contact period (" + std::to_string(contact_period() / 5.0) + " s)");
    }
    if (n_particles < 0) fail("n_particles must be non-negative");
    if (!(density > 0)) fail("density must be positive");
    if (mu_pp < 0 || mu_pw < 0) fail("friction coefficients must be non-negative");
    if (damping_ratio < 0 || damping_ratio >= 1) fail("damping_ratio must be in [0, 1)");
    if (tangential_stiffness_ratio < 0) fail("tangential_stiffness_ratio must be non-negative");
    if (!(channel_width > 2 * max_radius())) fail("channel_width too small for the particles");
    if (!(plane1_length > 0 && plane2_length > 0 && plate_height > 0)) fail("geometry lengths must be positive");
    if (base_roughness_diameter < 0) fail("base_roughness_diameter must be non-negative");
    if (gravity < 0) fail("gravity must be non-negative");
    if (total_time < 0) fail("total_time must be non-negative");
    if (!(snapshot_interval >= dt)) fail("snapshot_interval must be at least dt");
    if (!(settle_speed > 0 && max_relax_time >= min_relax_time && min_relax_time >= 0)) {
        fail("invalid relaxation settings");
    }
}

std::size_t ParticleState::mobile_count() const {
    return static_cast<std::size_t>(std::count(fixed.begin(), fixed.end(), std::uint8_t{0}));
}

Simulator::Simulator(DemConfig config) : config_(std::move(config)) {
    config_.validate();
    gravity_ = config_.gravity_vector();
    kt_ = config_.tangential_stiffness_ratio * config_.normal_stiffness;

    const double beta = plane2_angle(config_);
    const Vec3 ex(1, 0, 0), ey(0, 1, 0), ez(0, 0, 1);
    const double w = config_.channel_width;
    const double l1 = config_.plane1_length;
    walls_.push_back({Wall::Plane1, Vec3::Zero(), ez, ex, 0.0, l1});
    walls_.push_back({Wall::Plane2, Vec3::Zero(), Vec3(std::sin(beta), 0, std::cos(beta)),
                      Vec3(-std::cos(beta), 0, std::sin(beta)), 0.0, config_.plane2_length});
    walls_.push_back({Wall::Plate, Vec3::Zero(), -ex, ez, 0.0, config_.plate_height});
    walls_.push_back({Wall::SideNear, Vec3::Zero(), ey, ex, -kInf, kInf});
    walls_.push_back({Wall::SideFar, Vec3(0, w, 0), -ey, ex, -kInf, kInf});
    if (config_.end_wall) walls_.push_back({Wall::EndWall, Vec3(l1, 0, 0), -ex, ez, 0.0, kInf});

    const double top = config_.plane2_length * std::sin(beta) + 0.02;
    const Vec3 lo(-config_.plane2_length * std::cos(beta) - 0.01, -0.005, -0.005);
    const Vec3 hi(l1 + 0.01, w + 0.005, top);
    skin_ = 0.2 * config_.max_radius();
    const double reach = 2.0 * config_.max_radius() + skin_;
    for (BinGrid* g : {&mobile_bins_, &fixed_bins_}) {
        g->lo = lo;
        g->size = reach;
        if (g == &fixed_bins_) {
            g->size = std::max(reach, config_.max_radius() + 0.5 * config_.base_roughness_diameter + skin_);
        }
        g->nx = std::max(1, static_cast<int>(std::ceil((hi.x() - lo.x()) / g->size)));
        g->ny = std::max(1, static_cast<int>(std::ceil((hi.y() - lo.y()) / g->size)));
        g->nz = std::max(1, static_cast<int>(std::ceil((hi.z() - lo.z()) / g->size)));
    }
}

double Simulator::particle_mass(double radius) const {
    return config_.density * 4.0 / 3.0 * std::numbers::pi * radius * radius * radius;
}

int Simulator::BinGrid::bin_of(const Vec3& x) const {
    const Vec3 rel = (x - lo) / size;
    const int bx = std::clamp(static_cast<int>(std::floor(rel.x())), 0, nx - 1);
    const int by = std::clamp(static_cast<int>(std::floor(rel.y())), 0, ny - 1);
    const int bz = std::clamp(static_cast<int>(std::floor(rel.z())), 0, nz - 1);
    return (bz * ny + by) * nx + bx;
}

void Simulator::BinGrid::build(const std::vector<Vec3>& positions, const std::vector<int>& ids) {
    const std::size_t nbins = static_cast<std::size_t>(nx) * ny * nz;
    start.assign(nbins + 1, 0);
    std::vector<int> bins(ids.size());
    for (std::size_t k = 0; k < ids.size(); ++k) {
        bins[k] = bin_of(positions[ids[k]]);
        ++start[bins[k] + 1];
    }
    for (std::size_t b = 0; b < nbins; ++b) start[b + 1] += start[b];
    items.resize(ids.size());
    std::vector<int> fill(start.begin(), start.end() - 1);
    for (std::size_t k = 0; k < ids.size(); ++k) items[fill[bins[k]]++] = ids[k];
}

namespace {

// Visits every particle of `grid` in the 27 bins around x.
template <typename Grid, typename Visit>
void scan_bins(const Grid& grid, const Vec3& x, Visit&& visit) {
    const int b = grid.bin_of(x);
    const int bx = b % grid.nx, by = (b / grid.nx) % grid.ny, bz = b / (grid.nx * grid.ny);
    for (int z = std::max(bz - 1, 0); z <= std::min(bz + 1, grid.nz - 1); ++z) {
        for (int y = std::max(by - 1, 0); y <= std::min(by + 1, grid.ny - 1); ++y) {
            const int row = (z * grid.ny + y) * grid.nx;
            const int first = row + std::max(bx - 1, 0);
            const int last = row + std::min(bx + 1, grid.nx - 1);
            for (int k = grid.start[first]; k < grid.start[last + 1]; ++k) visit(grid.items[k]);
        }
    }
}

}  // namespace

void Simulator::update_neighbors(const ParticleState& state) {
    const std::size_t n = state.size();
    bool stale = ref_positions_.size() != n || ref_radii_ != state.radii || ref_fixed_ != state.fixed;
    const double limit2 = 0.25 * skin_ * skin_;
    for (std::size_t i = 0; i < n && !stale; ++i) {
        stale = (state.positions[i] - ref_positions_[i]).squaredNorm() > limit2;
    }
    if (!stale) return;

    ref_positions_ = state.positions;
    ref_radii_ = state.radii;
    ref_fixed_ = state.fixed;
    mobile_ids_.clear();
    fixed_ids_.clear();
    for (std::size_t i = 0; i < n; ++i) (state.fixed[i] ? fixed_ids_ : mobile_ids_).push_back(static_cast<int>(i));
    mobile_bins_.build(state.positions, mobile_ids_);
    fixed_bins_.build(state.positions, fixed_ids_);

    nbr_start_.assign(1, 0);
    nbr_items_.clear();
    for (const int i : mobile_ids_) {
        const Vec3& xi = state.positions[i];
        const double ri = state.radii[i];
        auto consider = [&](int j) {
            const double cut = ri + state.radii[j] + skin_;
            if ((xi - state.positions[j]).squaredNorm() < cut * cut) nbr_items_.push_back(j);
        };
        scan_bins(fixed_bins_, xi, consider);
        scan_bins(mobile_bins_, xi, [&](int j) {
            if (j > i) consider(j);
        });
        nbr_start_.push_back(static_cast<int>(nbr_items_.size()));
    }
}

namespace {

struct PairLaw {
    double kn, kt, zeta;
};

// Normal spring-dashpot plus Coulomb-capped tangential spring. `normal` points from
// the partner towards particle i; `vrel` is v_i - v_partner. Updates `shear` in place
// and returns the force on particle i.
Vec3 contact_force(const PairLaw& law, double overlap, const Vec3& normal, const Vec3& vrel, double meff,
                   double mu, Vec3& shear, double shear_dt) {
    const double vn = vrel.dot(normal);
    const double damping = 2.0 * law.zeta * std::sqrt(meff * law.kn);
    const double fn = std::max(0.0, law.kn * overlap - damping * vn);

    const Vec3 vt = vrel - vn * normal;
    shear -= shear.dot(normal) * normal;
    shear += vt * shear_dt;
    Vec3 ft = -law.kt * shear;
    const double ft_norm = ft.norm();
    const double cap = mu * fn;
    if (ft_norm > cap) {
        ft = ft_norm > 0 ? Vec3(ft * (cap / ft_norm)) : Vec3(Vec3::Zero());
        shear = law.kt > 0 ? Vec3(-ft / law.kt) : Vec3(Vec3::Zero());
    }
    return fn * normal + ft;
}

const Contact* find_previous(const std::vector<Contact>& previous, const std::vector<std::size_t>& offsets,
                             std::uint32_t i, std::uint32_t j) {
    if (i + 1 >= offsets.size()) return nullptr;
    for (std::size_t k = offsets[i]; k < offsets[i + 1]; ++k) {
        if (previous[k].j == j) return &previous[k];
    }
    return nullptr;
}

}  // namespace

void Simulator::add_wall_contacts(ParticleState& state, std::uint32_t i, const std::vector<Contact>& previous,
                                  const std::vector<std::size_t>& offsets, double shear_dt) {
    const Vec3& c = state.positions[i];
    const double r = state.radii[i];
    const PairLaw law{config_.normal_stiffness, kt_, config_.damping_ratio};
    const double m = particle_mass(r);
    for (const auto& w : walls_) {
        if (w.id == Wall::Plate && !state.plate_active) continue;
        const Vec3 rel = c - w.origin;
        const double height = rel.dot(w.normal);
        if (height >= r) continue;
        const double s = rel.dot(w.tangent);
        double overlap;
        Vec3 normal;
        if (s >= w.smin && s <= w.smax) {
            overlap = r - height;
            normal = w.normal;
        } else {
            // Beyond the bounded edge: contact with the edge line.
            if (height <= 0) continue;
            const double sc = std::clamp(s, w.smin, w.smax);
            const Vec3 foot = c - height * w.normal - (s - sc) * w.tangent;
            const Vec3 d = c - foot;
            const double dist = d.norm();
            if (dist >= r || dist <= 0) continue;
            overlap = r - dist;
            normal = d / dist;
        }
        const std::uint32_t code = kWallBase + static_cast<std::uint32_t>(w.id);
        Contact ct;
        ct.i = i;
        ct.j = code;
        if (const Contact* prev = find_previous(previous, offsets, i, code)) ct.shear = prev->shear;
        ct.force = contact_force(law, overlap, normal, state.velocities[i], m, config_.mu_pw, ct.shear, shear_dt);
        ct.point = c - normal * (r - 0.5 * overlap);
        ct.branch = ct.point - c;
        ct.overlap = overlap;
        state.forces[i] += ct.force;
        state.max_overlap_ratio = std::max(state.max_overlap_ratio, overlap / r);
        state.contacts.push_back(ct);
    }
}

void Simulator::compute_contacts(ParticleState& state, double shear_dt) {
    const std::size_t n = state.size();
    std::vector<Contact> previous;
    previous.swap(state.contacts);
    std::vector<std::size_t> offsets(n + 1, 0);
    for (const auto& c : previous) {
        if (c.i < n) ++offsets[c.i + 1];
    }
    for (std::size_t i = 0; i < n; ++i) offsets[i + 1] += offsets[i];

    state.contacts.clear();
    state.contacts.reserve(previous.size() + 16);
    state.forces.assign(n, Vec3::Zero());
    state.max_overlap_ratio = 0.0;
    update_neighbors(state);

    const PairLaw law{config_.normal_stiffness, kt_, config_.damping_ratio};
    auto touch = [&](std::uint32_t i, std::uint32_t j) {
        const Vec3& xi = state.positions[i];
        const double ri = state.radii[i];
        const Vec3 d = xi - state.positions[j];
        const double rsum = ri + state.radii[j];
        const double dist2 = d.squaredNorm();
        if (dist2 >= rsum * rsum) return;
        const double dist = std::sqrt(dist2);
        if (dist <= 0) throw InstabilityError("dem: coincident particle centers");
        const Vec3 normal = d / dist;
        const double overlap = rsum - dist;
        const bool wall_like = state.fixed[j] != 0;
        const double mi = particle_mass(ri);
        const double mj = particle_mass(state.radii[j]);
        const double meff = wall_like ? mi : mi * mj / (mi + mj);
        Contact ct;
        ct.i = i;
        ct.j = j;
        if (const Contact* prev = find_previous(previous, offsets, i, j)) ct.shear = prev->shear;
        ct.force = contact_force(law, overlap, normal, state.velocities[i] - state.velocities[j], meff,
                                 wall_like ? config_.mu_pw : config_.mu_pp, ct.shear, shear_dt);
        ct.point = xi - normal * (ri - 0.5 * overlap);
        ct.branch = state.positions[j] - xi;
        ct.overlap = overlap;
        state.forces[i] += ct.force;
        if (!wall_like) state.forces[j] -= ct.force;
        state.max_overlap_ratio = std::max(state.max_overlap_ratio, overlap / std::min(ri, state.radii[j]));
        state.contacts.push_back(ct);
    };
    // Contacts are emitted grouped by ascending i: each mobile particle meets walls,
    // then fixed spheres, then mobile partners with a larger index.
    for (std::size_t m = 0; m < mobile_ids_.size(); ++m) {
        const auto i = static_cast<std::uint32_t>(mobile_ids_[m]);
        add_wall_contacts(state, i, previous, offsets, shear_dt);
        for (int k = nbr_start_[m]; k < nbr_start_[m + 1]; ++k) touch(i, static_cast<std::uint32_t>(nbr_items_[k]));
    }
}

void Simulator::refresh_contacts(ParticleState& state) { compute_contacts(state, 0.0); }

void Simulator::advance(ParticleState& state, double drag) {
    const double dt = config_.dt;
    const double vmax = 100.0 * std::sqrt(kStandardGravity * config_.plane1_length);
    for (std::size_t i = 0; i < state.size(); ++i) {
        if (state.fixed[i]) continue;
        const double m = particle_mass(state.radii[i]);
        Vec3 a = state.forces[i] / m + gravity_;
        if (drag > 0) a -= drag * state.velocities[i];
        state.velocities[i] += a * dt;
        if (!(state.velocities[i].norm() <= vmax)) {
            throw InstabilityError("dem: particle speed exceeded " + std::to_string(vmax) +
                                   " m/s (time step too large?)");
        }
        state.positions[i] += state.velocities[i] * dt;
    }
    state.time += dt;
    compute_contacts(state, dt);
}

ParticleState init_packing(const DemConfig& config) {
    config.validate();
    Rng rng(config.rng_seed);
    ParticleState state;
    state.plate_active = true;

    const double w = config.channel_width;
    if (config.base_roughness_diameter > 0) {
        const double dbase = config.base_roughness_diameter;
        const double rb = 0.5 * dbase;
        for (double x = rb; x <= config.plane1_length - rb + 1e-12; x += dbase) {
            for (double y = rb; y <= w - rb + 1e-12; y += dbase) {
                state.positions.emplace_back(x, y, rb);
                state.radii.push_back(rb);
                state.fixed.push_back(1);
            }
        }
    }

    if (config.n_particles > 0) {
        const double rmax = config.max_radius();
        const double spacing = 2.0 * rmax * 1.05;
        const double beta = plane2_angle(config);
        const double a1 = deg2rad(config.incline1_angle);
        const double lo = config.diameter_span.first, hi = config.diameter_span.second;
        const double mean_d3 = (std::pow(hi, 4) - std::pow(lo, 4)) / (4.0 * (hi - lo)) *
                               std::pow(config.mean_diameter, 3);
        const double v_rcp = config.n_particles * std::numbers::pi / 6.0 * mean_d3 / 0.64;
        // Wedge between plate and incline #2 holding ten times the close-packed volume.
        const double ztop = std::sqrt(20.0 * std::tan(beta) * v_rcp / w);
        const Vec3 n2(std::sin(beta), 0, std::cos(beta));
        const Vec3 t2(-std::cos(beta), 0, std::sin(beta));
        const double margin = rmax * 1.01;

        struct Site {
            double height;
            Vec3 p;
        };
        std::vector<Site> sites;
        const int nx = static_cast<int>(std::ceil(ztop / std::tan(beta) / spacing)) + 2;
        const int nz = static_cast<int>(std::ceil(ztop / spacing)) + 1;
        for (int iz = 0; iz < nz; ++iz) {
            for (int ix = 0; ix < nx; ++ix) {
                for (double y = margin; y <= w - margin + 1e-12; y += spacing) {
                    const Vec3 p(-margin - ix * spacing, y, margin + iz * spacing);
                    if (p.z() > ztop) continue;
                    if (p.dot(n2) < margin) continue;
                    if (p.dot(t2) > config.plane2_length - margin) continue;
                    sites.push_back({-p.x() * std::sin(a1) + p.z() * std::cos(a1), p});
                }
            }
        }
        if (sites.size() < static_cast<std::size_t>(config.n_particles)) {
            throw PackingError("dem: cannot fit " + std::to_string(config.n_particles) +
                               " particles behind the plate (room for " + std::to_string(sites.size()) + ")");
        }
        std::stable_sort(sites.begin(), sites.end(),
                         [](const Site& a, const Site& b) { return a.height < b.height; });
        std::uniform_real_distribution<double> diam(lo * config.mean_diameter, hi * config.mean_diameter);
        std::uniform_real_distribution<double> jitter(-0.01 * spacing, 0.01 * spacing);
        for (int k = 0; k < config.n_particles; ++k) {
            const double d = diam(rng);
            Vec3 p = sites[k].p;
            p.x() += jitter(rng);
            p.y() += jitter(rng);
            p.z() += jitter(rng);
            state.positions.push_back(p);
            state.radii.push_back(0.5 * d);
            state.fixed.push_back(0);
        }
    }
    state.velocities.assign(state.size(), Vec3::Zero());
    state.forces.assign(state.size(), Vec3::Zero());

    Simulator sim(config);
    sim.refresh_contacts(state);
    if (config.n_particles > 0) {
        const auto min_steps = static_cast<long>(std::ceil(config.min_relax_time / config.dt));
        const auto max_steps = static_cast<long>(std::ceil(config.max_relax_time / config.dt));
        long steps = 0;
        for (;;) {
            sim.advance(state, config.relax_drag);
            ++steps;
            if (state.max_overlap_ratio > kMaxOverlapRatio) {
                throw InstabilityError("dem: overlap exceeded 10% of the smaller radius while settling");
            }
            if (steps >= min_steps && max_mobile_speed(state) < config.settle_speed) break;
            if (steps >= max_steps) throw PackingError("dem: packing did not settle within max_relax_time");
        }
    }
    state.time = 0.0;
    return state;
}

ParticleState step(const ParticleState& state, const DemConfig& config) {
    ParticleState out = state;
    Simulator(config).advance(out);
    return out;
}

ParticleState release_plate(const ParticleState& state, const DemConfig& config) {
    ParticleState out = state;
    if (!out.plate_active) return out;
    out.plate_active = false;
    Simulator(config).refresh_contacts(out);
    return out;
}

std::vector<ParticleState> run(const DemConfig& config) {
    ParticleState state = release_plate(init_packing(config), config);
    Simulator sim(config);
    std::vector<ParticleState> snapshots{state};
    const auto per_snapshot = std::max<long>(1, std::lround(config.snapshot_interval / config.dt));
    const auto count = static_cast<long>(std::floor(config.total_time / (per_snapshot * config.dt) + 1e-9));
    long steps = 0;
    for (long s = 0; s < count; ++s) {
        for (long k = 0; k < per_snapshot; ++k) {
            sim.advance(state);
            ++steps;
            if (state.max_overlap_ratio > kMaxOverlapRatio) {
                throw InstabilityError("dem: overlap exceeded 10% of the smaller radius at t = " +
                                       std::to_string(state.time));
            }
        }
        state.time = static_cast<double>(steps) * config.dt;
        snapshots.push_back(state);
    }
    return snapshots;
}

double kinetic_energy(const ParticleState& state, const DemConfig& config) {
    double ke = 0.0;
    for (std::size_t i = 0; i < state.size(); ++i) {
        if (state.fixed[i]) continue;
        const double r = state.radii[i];
        const double m = config.density * 4.0 / 3.0 * std::numbers::pi * r * r * r;
        ke += 0.5 * m * state.velocities[i].squaredNorm();
    }
    return ke;
}

double mechanical_energy(const ParticleState& state, const DemConfig& config) {
    const Vec3 g = config.gravity_vector();
    const Vec3 lowest(config.plane1_length, 0, 0);
    double pe = 0.0;
    for (std::size_t i = 0; i < state.size(); ++i) {
        if (state.fixed[i]) continue;
        const double r = state.radii[i];
        const double m = config.density * 4.0 / 3.0 * std::numbers::pi * r * r * r;
        pe += m * g.dot(lowest - state.positions[i]);
    }
    const double kn = config.normal_stiffness;
    const double kt = config.tangential_stiffness_ratio * kn;
    double elastic = 0.0;
    for (const auto& c : state.contacts) {
        elastic += 0.5 * kn * c.overlap * c.overlap + 0.5 * kt * c.shear.squaredNorm();
    }
    return kinetic_energy(state, config) + pe + elastic;
}

Vec3 total_momentum(const ParticleState& state, const DemConfig& config) {
    Vec3 p = Vec3::Zero();
    for (std::size_t i = 0; i < state.size(); ++i) {
        if (state.fixed[i]) continue;
        const double r = state.radii[i];
        p += config.density * 4.0 / 3.0 * std::numbers::pi * r * r * r * state.velocities[i];
    }
    return p;
}

double max_mobile_speed(const ParticleState& state) {
    double vmax = 0.0;
    for (std::size_t i = 0; i < state.size(); ++i) {
        if (!state.fixed[i]) vmax = std::max(vmax, state.velocities[i].norm());
    }
    return vmax;
}

void to_json(nlohmann::json& j, const DemConfig& c) {
    j = nlohmann::json{{"incline1_angle", c.incline1_angle},
                       {"incline2_angle", c.incline2_angle},
                       {"channel_width", c.channel_width},
                       {"plane1_length", c.plane1_length},
                       {"plane2_length", c.plane2_length},
                       {"plate_height", c.plate_height},
                       {"end_wall", c.end_wall},
                       {"n_particles", c.n_particles},
                       {"mean_diameter", c.mean_diameter},
                       {"diameter_span", {c.diameter_span.first, c.diameter_span.second}},
                       {"density", c.density},
                       {"mu_pp", c.mu_pp},
                       {"mu_pw", c.mu_pw},
                       {"base_roughness_diameter", c.base_roughness_diameter},
                       {"normal_stiffness", c.normal_stiffness},
                       {"tangential_stiffness_ratio", c.tangential_stiffness_ratio},
                       {"damping_ratio", c.damping_ratio},
                       {"gravity", c.gravity},
                       {"dt", c.dt},
                       {"total_time", c.total_time},
                       {"snapshot_interval", c.snapshot_interval},
                       {"rng_seed", c.rng_seed},
                       {"settle_speed", c.settle_speed},
                       {"relax_drag", c.relax_drag},
                       {"min_relax_time", c.min_relax_time},
                       {"max_relax_time", c.max_relax_time}};
}

void from_json(const nlohmann::json& j, DemConfig& c) {
    SectionReader r(j, "dem");
    r.get("incline1_angle", c.incline1_angle);
    r.get("incline2_angle", c.incline2_angle);
    r.get("channel_width", c.channel_width);
    r.get("plane1_length", c.plane1_length);
    r.get("plane2_length", c.plane2_length);
    r.get("plate_height", c.plate_height);
    r.get("end_wall", c.end_wall);
    r.get("n_particles", c.n_particles);
    r.get("mean_diameter", c.mean_diameter);
    r.get("diameter_span", c.diameter_span);
    r.get("density", c.density);
    r.get("mu_pp", c.mu_pp);
    r.get("mu_pw", c.mu_pw);
    r.get("base_roughness_diameter", c.base_roughness_diameter);
    r.get("normal_stiffness", c.normal_stiffness);
    r.get("tangential_stiffness_ratio", c.tangential_stiffness_ratio);
    r.get("damping_ratio", c.damping_ratio);
    r.get("gravity", c.gravity);
    r.get("dt", c.dt);
    r.get("total_time", c.total_time);
    r.get("snapshot_interval", c.snapshot_interval);
    r.get("rng_seed", c.rng_seed);
    r.get("settle_speed", c.settle_speed);
    r.get("relax_drag", c.relax_drag);
    r.get("min_relax_time", c.min_relax_time);
    r.get("max_relax_time", c.max_relax_time);
    r.finish();
}

namespace {

std::vector<double> flatten(const std::vector<Vec3>& v) {
    std::vector<double> out;
    out.reserve(3 * v.size());
    for (const auto& p : v) out.insert(out.end(), {p.x(), p.y(), p.z()});
    return out;
}

std::vector<Vec3> unflatten(const std::vector<float>& v) {
    std::vector<Vec3> out(v.size() / 3);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = Vec3(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
    return out;
}

constexpr int kContactFloats = 13;

}  // namespace

void save_run(const std::filesystem::path& dir, const DemConfig& config, const std::vector<ParticleState>& snapshots) {
    io::StagedDir staged(dir);
    nlohmann::json manifest;
    manifest["format"] = "granflow.snapshots";
    manifest["version"] = 1;
    manifest["config"] = config;
    manifest["units"] = {{"time", "s"}, {"positions", "m"}, {"velocities", "m/s"}, {"radii", "m"},
                         {"forces", "N"}, {"branch", "m"}, {"point", "m"}, {"overlap", "m"}, {"shear", "m"}};
    manifest["contacts_layout"] = {
        {"contacts.idx", "u32 pairs (i, j); j >= 4294967040 marks a wall contact with wall id j - 4294967040 "
                         "(0 incline1, 1 incline2, 2 plate, 3 near side, 4 far side, 5 end wall)"},
        {"contacts.f32", "13 floats per contact: force on i (3), branch i->j (3), contact point (3), overlap, "
                         "tangential elongation (3)"}};
    nlohmann::json list = nlohmann::json::array();
    for (std::size_t s = 0; s < snapshots.size(); ++s) {
        const auto& st = snapshots[s];
        char name[32];
        std::snprintf(name, sizeof(name), "snap_%04zu", s);
        const auto sub = staged.path() / name;
        std::filesystem::create_directories(sub);
        io::write_f32(sub / "positions.f32", flatten(st.positions));
        io::write_f32(sub / "velocities.f32", flatten(st.velocities));
        io::write_f32(sub / "forces.f32", flatten(st.forces));
        io::write_f32(sub / "radii.f32", st.radii);
        std::vector<std::uint32_t> fixed(st.fixed.begin(), st.fixed.end());
        io::write_u32(sub / "fixed.u32", fixed);
        std::vector<std::uint32_t> idx;
        std::vector<double> vals;
        idx.reserve(2 * st.contacts.size());
        vals.reserve(kContactFloats * st.contacts.size());
        for (const auto& c : st.contacts) {
            idx.push_back(c.i);
            idx.push_back(c.j);
            for (const Vec3* v : {&c.force, &c.branch, &c.point}) vals.insert(vals.end(), {v->x(), v->y(), v->z()});
            vals.push_back(c.overlap);
            vals.insert(vals.end(), {c.shear.x(), c.shear.y(), c.shear.z()});
        }
        io::write_u32(sub / "contacts.idx", idx);
        io::write_f32(sub / "contacts.f32", vals);
        list.push_back({{"index", s}, {"time", st.time}, {"dir", name}, {"n_particles", st.size()},
                        {"n_mobile", st.mobile_count()}, {"n_contacts", st.contacts.size()},
                        {"plate_active", st.plate_active}, {"max_overlap_ratio", st.max_overlap_ratio}});
    }
    manifest["snapshots"] = list;
    io::write_json_atomic(staged.path() / "manifest.json", manifest);
    staged.commit();
}

std::vector<ParticleState> load_run(const std::filesystem::path& dir, DemConfig* config) {
    const auto manifest = io::read_json(dir / "manifest.json");
    try {
        if (manifest.at("format") != "granflow.snapshots") throw ConfigError(dir.string() + ": not a snapshot archive");
        if (config) *config = manifest.at("config").get<DemConfig>();
        std::vector<ParticleState> out;
        for (const auto& entry : manifest.at("snapshots")) {
            const auto sub = dir / entry.at("dir").get<std::string>();
            ParticleState st;
            st.time = entry.at("time").get<double>();
            st.plate_active = entry.value("plate_active", false);
            st.max_overlap_ratio = entry.value("max_overlap_ratio", 0.0);
            st.positions = unflatten(io::read_f32(sub / "positions.f32"));
            st.velocities = unflatten(io::read_f32(sub / "velocities.f32"));
            st.forces = unflatten(io::read_f32(sub / "forces.f32"));
            const auto radii = io::read_f32(sub / "radii.f32");
            st.radii.assign(radii.begin(), radii.end());
            const auto fixed = io::read_u32(sub / "fixed.u32");
            st.fixed.assign(fixed.begin(), fixed.end());
            const auto idx = io::read_u32(sub / "contacts.idx");
            const auto vals = io::read_f32(sub / "contacts.f32");
            const std::size_t nc = idx.size() / 2;
            if (vals.size() != nc * kContactFloats || st.velocities.size() != st.size() ||
                st.radii.size() != st.size() || st.fixed.size() != st.size()) {
                throw ConfigError(sub.string() + ": inconsistent array lengths");
            }
            st.contacts.resize(nc);
            for (std::size_t k = 0; k < nc; ++k) {
                auto& c = st.contacts[k];
                const float* v = vals.data() + kContactFloats * k;
                c.i = idx[2 * k];
                c.j = idx[2 * k + 1];
                c.force = Vec3(v[0], v[1], v[2]);
                c.branch = Vec3(v[3], v[4], v[5]);
                c.point = Vec3(v[6], v[7], v[8]);
                c.overlap = v[9];
                c.shear = Vec3(v[10], v[11], v[12]);
            }
            out.push_back(std::move(st));
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError((dir / "manifest.json").string() + ": " + e.what());
    }
}

}  // namespace granflow::dem
