#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <Eigen/Eigenvalues>

#include "granflow/coarsegrain.hpp"

using namespace granflow;
using namespace granflow::cg;
using dem::ParticleState;

namespace {

void add_particle(ParticleState& s, const Vec3& x, const Vec3& v, bool fixed = false) {
    s.positions.push_back(x);
    s.velocities.push_back(fixed ? Vec3::Zero() : v);
    s.forces.push_back(Vec3::Zero());
    s.radii.push_back(0.001);
    s.fixed.push_back(fixed ? 1 : 0);
}

GridSpec small_grid() {
    GridSpec g;
    g.origin = Vec3(0, 0, 0);
    g.cell_size = 0.01;
    g.dims = {3, 2, 2};
    return g;
}

ParticleState random_state(std::mt19937_64& rng, int n, const GridSpec& g) {
    std::uniform_real_distribution<double> u(-0.002, 1.0);
    std::normal_distribution<double> nv(0.0, 0.5);
    ParticleState s;
    for (int i = 0; i < n; ++i) {
        Vec3 x;
        for (int a = 0; a < 3; ++a) x[a] = g.origin[a] + u(rng) * g.dims[a] * g.cell_size;
        add_particle(s, x, Vec3(nv(rng), nv(rng), nv(rng)), i % 7 == 0);
    }
    return s;
}

// Brute-force membership by explicit bounds.
bool inside(const GridSpec& g, int ix, int iy, int iz, const Vec3& x) {
    const int id[3] = {ix, iy, iz};
    for (int a = 0; a < 3; ++a) {
        const double lo = g.origin[a] + id[a] * g.cell_size;
        if (!(x[a] >= lo && x[a] < lo + g.cell_size)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("velocity averaging small cases") {
    GridSpec g = small_grid();
    ParticleState s;
    add_particle(s, Vec3(0.005, 0.005, 0.005), Vec3(1, 2, 3));
    auto v = grid_average_velocity(s, g);
    CHECK(v.count[0] == 1);
    CHECK(v.v_cell[0] == Vec3(1, 2, 3));

    ParticleState t;
    add_particle(t, Vec3(0.015, 0.005, 0.005), Vec3(1, 0, 0));
    add_particle(t, Vec3(0.016, 0.006, 0.004), Vec3(3, 0, 0));
    add_particle(t, Vec3(0.014, 0.004, 0.004), Vec3(9, 9, 9), true);
    add_particle(t, Vec3(0.5, 0.004, 0.004), Vec3(9, 9, 9));
    v = grid_average_velocity(t, g);
    CHECK(v.count[1] == 2);
    CHECK(v.v_cell[1] == Vec3(2, 0, 0));
    CHECK(v.outside == 1);
}

TEST_CASE("granular temperature small cases") {
    GridSpec g = small_grid();
    ParticleState s;
    add_particle(s, Vec3(0.005, 0.005, 0.005), Vec3(1, 0, 0));
    add_particle(s, Vec3(0.006, 0.005, 0.005), Vec3(-1, 0, 0));
    add_particle(s, Vec3(0.015, 0.005, 0.005), Vec3(0.3, 0.1, 0));
    add_particle(s, Vec3(0.016, 0.005, 0.005), Vec3(0.3, 0.1, 0));
    add_particle(s, Vec3(0.025, 0.005, 0.005), Vec3(5, 0, 0));
    auto v = grid_average_velocity(s, g);
    granular_temperature(s, v);
    CHECK(v.v_cell[0] == Vec3(0, 0, 0));
    CHECK(v.T[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(v.T[1] == 0.0);
    CHECK(v.T[2] == 0.0);
}

TEST_CASE("averaging and temperature match brute-force oracles") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        const GridSpec g = small_grid();
        const auto s = random_state(rng, 50, g);
        auto v = grid_average_velocity(s, g);
        granular_temperature(s, v);
        int in_grid = 0;
        for (int iz = 0; iz < g.dims[2]; ++iz) {
            for (int iy = 0; iy < g.dims[1]; ++iy) {
                for (int ix = 0; ix < g.dims[0]; ++ix) {
                    int n = 0;
                    Vec3 sum = Vec3::Zero();
                    for (std::size_t i = 0; i < s.size(); ++i) {
                        if (!s.fixed[i] && inside(g, ix, iy, iz, s.positions[i])) {
                            ++n;
                            sum += s.velocities[i];
                        }
                    }
                    const Vec3 mean = n ? Vec3(sum / n) : Vec3(Vec3::Zero());
                    double fl = 0.0;
                    for (std::size_t i = 0; i < s.size(); ++i) {
                        if (!s.fixed[i] && inside(g, ix, iy, iz, s.positions[i])) {
                            const Vec3 d = s.velocities[i] - mean;
                            fl += d.x() * d.x() + d.y() * d.y() + d.z() * d.z();
                        }
                    }
                    const double t = n > 1 ? fl / n / 3.0 : 0.0;
                    const auto k = g.index(ix, iy, iz);
                    in_grid += n;
                    CHECK(v.count[k] == n);
                    CHECK((v.v_cell[k] - mean).norm() <= 1e-12 * (1.0 + mean.norm()));
                    CHECK(std::abs(v.T[k] - t) <= 1e-12 * (1.0 + t));
                    CHECK(v.T[k] >= 0.0);
                }
            }
        }
        int mobile = 0;
        for (auto f : s.fixed) mobile += f ? 0 : 1;
        CHECK(in_grid + v.outside == mobile);
    }
}

TEST_CASE("love-weber stress of a single contact") {
    GridSpec g;
    g.origin = Vec3(0, 0, 0);
    g.cell_size = 1.0;
    g.dims = {2, 1, 1};
    ParticleState s;
    add_particle(s, Vec3(0.5, 0.5, 0.5), Vec3(0.1, 0, 0));
    add_particle(s, Vec3(0.502, 0.5, 0.5), Vec3(0, 0, 0));
    dem::Contact c;
    c.i = 0;
    c.j = 1;
    c.force = Vec3(1, 0, 0);
    c.branch = Vec3(0.002, 0, 0);
    c.point = Vec3(0.501, 0.5, 0.5);
    s.contacts.push_back(c);
    auto v = coarse_grain(s, g);
    CHECK(v.sigma[0](0, 0) == doctest::Approx(0.002).epsilon(1e-15));
    CHECK(v.sigma[0].cwiseAbs().sum() == doctest::Approx(0.002).epsilon(1e-15));
    CHECK(v.sigma[1].isZero(0.0));
}

TEST_CASE("love-weber stress matches per-contact oracle") {
    std::mt19937_64 rng(5);
    const GridSpec g = small_grid();
    auto s = random_state(rng, 80, g);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_real_distribution<double> pos(0.0, 1.0);
    for (int k = 0; k < 200; ++k) {
        dem::Contact c;
        c.i = static_cast<std::uint32_t>(k % 80);
        c.j = k % 11 == 0 ? dem::kWallBase + 1 : static_cast<std::uint32_t>((k * 7 + 3) % 80);
        c.force = Vec3(u(rng), u(rng), u(rng));
        c.branch = 0.002 * Vec3(u(rng), u(rng), u(rng));
        for (int a = 0; a < 3; ++a) c.point[a] = pos(rng) * g.dims[a] * g.cell_size;
        s.contacts.push_back(c);
    }
    auto v = coarse_grain(s, g);
    const double vol = g.cell_size * g.cell_size * g.cell_size;
    for (int iz = 0; iz < g.dims[2]; ++iz) {
        for (int iy = 0; iy < g.dims[1]; ++iy) {
            for (int ix = 0; ix < g.dims[0]; ++ix) {
                const auto k = g.index(ix, iy, iz);
                double raw[3][3] = {};
                for (const auto& c : s.contacts) {
                    if (c.j >= dem::kWallBase || !inside(g, ix, iy, iz, c.point)) continue;
                    for (int a = 0; a < 3; ++a) {
                        for (int b = 0; b < 3; ++b) raw[a][b] += c.force[a] * c.branch[b];
                    }
                }
                for (int a = 0; a < 3; ++a) {
                    for (int b = 0; b < 3; ++b) {
                        const double expect = v.count[k] ? 0.5 * (raw[a][b] + raw[b][a]) / vol : 0.0;
                        CHECK(std::abs(v.sigma[k](a, b) - expect) <= 1e-12 * (1.0 + std::abs(expect)));
                        CHECK(v.sigma[k](a, b) == v.sigma[k](b, a));
                    }
                }
            }
        }
    }
}

TEST_CASE("stress invariants") {
    GridVolume v;
    v.spec.dims = {3, 1, 1};
    v.sigma.assign(3, Mat3::Zero());
    v.sigma[0] = Mat3::Identity() * -100e3;
    v.sigma[1](0, 0) = -3.0;
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    Mat3 r;
    for (int a = 0; a < 3; ++a) {
        for (int b = a; b < 3; ++b) r(a, b) = r(b, a) = u(rng);
    }
    v.sigma[2] = r;
    stress_invariants(v);
    CHECK(v.p[0] == doctest::Approx(100e3).epsilon(1e-15));
    CHECK(v.q[0] == 0.0);
    CHECK(v.p[1] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(v.q[1] == doctest::Approx(3.0).epsilon(1e-15));

    // q = sqrt(3 J2) from the eigenvalues of the deviator.
    const Mat3 dev = r - r.trace() / 3.0 * Mat3::Identity();
    Eigen::SelfAdjointEigenSolver<Mat3> es(dev);
    const double j2 = 0.5 * es.eigenvalues().squaredNorm();
    CHECK(std::abs(v.q[2] - std::sqrt(3.0 * j2)) <= 1e-10 * std::sqrt(3.0 * j2));
    CHECK(v.p[2] == doctest::Approx(-r.trace() / 3.0).epsilon(1e-14));
}

TEST_CASE("slice layers follow the nearest-center rule") {
    GridSpec g;
    const auto layers = slice_layers(g, 0.002);
    CHECK(layers == std::array<int, 4>{0, 3, 7, 10});
    GridSpec shallow = g;
    shallow.dims[1] = 8;
    CHECK_THROWS_AS(slice_layers(shallow, 0.002), ConfigError);
}

TEST_CASE("uniform volume gives identical slices with threshold masks") {
    GridSpec g;
    GridVolume v;
    v.spec = g;
    const auto n = g.cell_count();
    v.count.assign(n, 3);
    v.v_cell.assign(n, Vec3(0.2, -0.1, 0.05));
    v.T.assign(n, 0.01);
    v.sigma.assign(n, Mat3::Zero());
    v.p.assign(n, 40.0);
    v.q.assign(n, 12.0);
    // A band of slow cells.
    for (int ix = 0; ix < g.dims[0]; ++ix) {
        for (int iy = 0; iy < g.dims[1]; ++iy) v.v_cell[g.index(ix, iy, 5)] = Vec3(0.005, 0, 0.005);
    }
    const auto slices = extract_slices(v, 0.002, 0.3);
    for (int s = 0; s < 4; ++s) {
        CHECK(slices[s].index == s);
        CHECK(slices[s].velocity.data == slices[0].velocity.data);
        CHECK(slices[s].physics.data == slices[0].physics.data);
        CHECK(slices[s].mask.data == activity_mask(slices[s].velocity, kActivityThreshold).data);
        CHECK(slices[s].time == 0.3);
    }
    CHECK(slices[0].mask.count() == static_cast<std::size_t>(g.dims[0] * (g.dims[2] - 1)));
    CHECK(slices[2].y_plus == 13.3);
}

TEST_CASE("coarse-graining a DEM snapshot keeps the field invariants") {
    dem::DemConfig c;
    c.n_particles = 400;
    c.total_time = 0.08;
    const auto snaps = dem::run(c);
    const auto& s = snaps.back();
    const GridSpec g;
    const auto v = coarse_grain(s, g);
    int total = 0;
    for (std::size_t k = 0; k < g.cell_count(); ++k) {
        total += v.count[k];
        CHECK(v.T[k] >= 0.0);
        CHECK(v.q[k] >= 0.0);
        if (v.count[k] == 0) {
            CHECK(v.v_cell[k].isZero(0.0));
            CHECK(v.T[k] == 0.0);
            CHECK(v.sigma[k].isZero(0.0));
            CHECK(v.p[k] == 0.0);
            CHECK(v.q[k] == 0.0);
        }
        const double scale = v.sigma[k].norm();
        CHECK((v.sigma[k] - v.sigma[k].transpose()).norm() <= 1e-9 * scale);
        if (v.sigma[k](0, 0) <= 0 && v.sigma[k](1, 1) <= 0 && v.sigma[k](2, 2) <= 0) CHECK(v.p[k] >= 0.0);
    }
    CHECK(total + v.outside == static_cast<int>(s.mobile_count()));
    double pmax = 0.0;
    for (double p : v.p) pmax = std::max(pmax, p);
    CHECK(pmax > 0.0);
}

TEST_CASE("slice archive roundtrip") {
    GridSpec g;
    g.dims = {4, 11, 3};
    GridVolume v;
    v.spec = g;
    const auto n = g.cell_count();
    v.count.assign(n, 1);
    v.v_cell.assign(n, Vec3(0.25, 0.5, -0.125));
    v.T.assign(n, 0.5);
    v.sigma.assign(n, Mat3::Identity());
    v.p.assign(n, 1.0);
    v.q.assign(n, 0.0);
    const auto slices = extract_slices(v, 0.002, 0.12);
    io::FieldArchive ar;
    add_slice(ar, "s0/slice1", slices[1]);
    add_volume(ar, "s0/volume", v, 0.12);
    const auto dir = std::filesystem::temp_directory_path() / "granflow_test_fields";
    ar.save(dir);
    const auto back = io::FieldArchive::load(dir);
    const auto s = read_slice(back, "s0/slice1");
    CHECK(s.velocity.data == slices[1].velocity.data);
    CHECK(s.mask.data == slices[1].mask.data);
    CHECK(s.time == 0.12);
    CHECK(back.get("s0/volume/sigma").shape == std::vector<int>{3, 3, 3, 11, 4});
    CHECK(back.get("s0/slice1/velocity").units == "m/s");
    std::filesystem::remove_all(dir);
}
