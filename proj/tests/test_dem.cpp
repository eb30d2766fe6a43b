#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "granflow/dem.hpp"

using namespace granflow;
using namespace granflow::dem;

namespace {

DemConfig bare_config() {
    DemConfig c;
    c.n_particles = 0;
    c.base_roughness_diameter = 0.0;
    c.gravity = 0.0;
    return c;
}

ParticleState single(const Vec3& x, const Vec3& v, double r) {
    ParticleState s;
    s.positions = {x};
    s.velocities = {v};
    s.forces = {Vec3::Zero()};
    s.radii = {r};
    s.fixed = {0};
    s.plate_active = false;
    return s;
}

ParticleState pair(const Vec3& x1, const Vec3& v1, double r1, const Vec3& x2, const Vec3& v2, double r2) {
    ParticleState s = single(x1, v1, r1);
    s.positions.push_back(x2);
    s.velocities.push_back(v2);
    s.forces.push_back(Vec3::Zero());
    s.radii.push_back(r2);
    s.fixed.push_back(0);
    return s;
}

bool same_state(const ParticleState& a, const ParticleState& b) {
    if (a.size() != b.size() || a.contacts.size() != b.contacts.size() || a.time != b.time) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.positions[i] != b.positions[i] || a.velocities[i] != b.velocities[i] || a.forces[i] != b.forces[i] ||
            a.radii[i] != b.radii[i]) {
            return false;
        }
    }
    for (std::size_t k = 0; k < a.contacts.size(); ++k) {
        const auto& p = a.contacts[k];
        const auto& q = b.contacts[k];
        if (p.i != q.i || p.j != q.j || p.force != q.force || p.shear != q.shear) return false;
    }
    return true;
}

// Relative normal coordinate of two equal spheres under the same linear
// spring-dashpot law, integrated with classical RK4 on a much finer step.
double oracle_rebound_speed(double v_in, double r, double k, double zeta, double density) {
    const double m = density * 4.0 / 3.0 * std::numbers::pi * r * r * r;
    const double meff = 0.5 * m;
    const double gamma = 2.0 * zeta * std::sqrt(meff * k);
    auto accel = [&](double delta, double rate) {
        const double f = std::max(0.0, k * delta + gamma * rate);
        return -f / meff;
    };
    // delta = overlap, rate = d(delta)/dt, starts at contact with closing speed v_in.
    double delta = 0.0, rate = v_in;
    const double h = 1e-9;
    for (int it = 0; it < 10000000; ++it) {
        const double k1d = rate, k1v = accel(delta, rate);
        const double k2d = rate + 0.5 * h * k1v, k2v = accel(delta + 0.5 * h * k1d, rate + 0.5 * h * k1v);
        const double k3d = rate + 0.5 * h * k2v, k3v = accel(delta + 0.5 * h * k2d, rate + 0.5 * h * k2v);
        const double k4d = rate + h * k3v, k4v = accel(delta + h * k3d, rate + h * k3v);
        delta += h / 6.0 * (k1d + 2 * k2d + 2 * k3d + k4d);
        rate += h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v);
        if (delta < 0.0) return -rate;
    }
    return NAN;
}

}  // namespace

TEST_CASE("config validation") {
    DemConfig c;
    CHECK_NOTHROW(c.validate());
    c.dt = c.contact_period();
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = DemConfig{};
    c.incline1_angle = 90.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = DemConfig{};
    c.diameter_span = {1.2, 0.8};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = DemConfig{};
    c.mean_diameter = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("free flight advances by v dt") {
    const DemConfig c = bare_config();
    const Vec3 x(0.05, 0.022, 0.05), v(0.1, 0.2, -0.05);
    const auto s = step(single(x, v, 0.001), c);
    CHECK(s.positions[0] == x + v * c.dt);
    CHECK(s.velocities[0] == v);
    CHECK(s.contacts.empty());
}

TEST_CASE("frictionless incline accelerates at g sin 30") {
    DemConfig c = bare_config();
    c.gravity = 9.81;
    c.mu_pw = 0.0;
    const double r = 0.001;
    auto s = single(Vec3(0.01, 0.022, r), Vec3::Zero(), r);
    Simulator sim(c);
    sim.refresh_contacts(s);
    const int steps = 400;
    for (int k = 0; k < steps; ++k) sim.advance(s);
    REQUIRE(!s.contacts.empty());
    const double along = s.velocities[0].x() / (steps * c.dt);
    CHECK(std::abs(along - 4.905) < 1e-6);
}

TEST_CASE("head-on collision loses relative speed like the two-body oracle") {
    DemConfig c = bare_config();
    c.mu_pp = 0.0;
    c.damping_ratio = 0.2;
    c.dt = 1e-7;
    const double r = 0.001, v = 0.5;
    const double gap = 1e-5;
    auto s = pair(Vec3(0.05, 0.022, 0.05), Vec3(v, 0, 0), r, Vec3(0.05 + 2 * r + gap, 0.022, 0.05),
                  Vec3(-v, 0, 0), r);
    Simulator sim(c);
    bool touched = false;
    for (int k = 0; k < 20000; ++k) {
        sim.advance(s);
        if (!s.contacts.empty()) touched = true;
        if (touched && s.contacts.empty()) break;
    }
    REQUIRE(touched);
    REQUIRE(s.contacts.empty());
    const double out = s.velocities[1].x() - s.velocities[0].x();
    const double oracle = oracle_rebound_speed(2 * v, r, c.normal_stiffness, c.damping_ratio, c.density);
    CHECK(out < 2 * v);
    CHECK(out > 0);
    CHECK(std::abs(out - oracle) / oracle < 5e-3);
}

TEST_CASE("two-body elastic contact conserves momentum") {
    DemConfig c = bare_config();
    c.mu_pp = 0.0;
    c.damping_ratio = 0.0;
    auto s = pair(Vec3(0.05, 0.02, 0.05), Vec3(0.3, 0.05, 0.0), 0.001, Vec3(0.0525, 0.0205, 0.0505),
                  Vec3(-0.2, 0.0, 0.02), 0.0009);
    const Vec3 p0 = total_momentum(s, c);
    Simulator sim(c);
    bool touched = false;
    for (int k = 0; k < 400; ++k) {
        sim.advance(s);
        touched = touched || !s.contacts.empty();
    }
    REQUIRE(touched);
    CHECK((total_momentum(s, c) - p0).norm() / p0.norm() < 1e-10);
}

TEST_CASE("empty packing keeps only the base layer") {
    DemConfig c;
    c.n_particles = 0;
    const auto s = init_packing(c);
    CHECK(s.mobile_count() == 0);
    CHECK(s.size() > 0);
    for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(s.fixed[i] == 1);
        CHECK(s.radii[i] == doctest::Approx(0.002));
    }
}

TEST_CASE("packing that cannot fit raises PackingError") {
    DemConfig c;
    c.plane2_length = 0.01;
    CHECK_THROWS_AS(init_packing(c), PackingError);
}

const ParticleState& packed_seed7() {
    static const ParticleState s = [] {
        DemConfig c;
        c.rng_seed = 7;
        return init_packing(c);
    }();
    return s;
}

TEST_CASE("relaxed packing is settled, deterministic and within the radius span") {
    DemConfig c;
    c.rng_seed = 7;
    const auto& a = packed_seed7();
    CHECK(a.mobile_count() == 2000);
    CHECK(max_mobile_speed(a) < 0.01);
    CHECK(a.max_overlap_ratio <= 0.1);
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.fixed[i]) continue;
        CHECK(a.radii[i] >= c.min_radius());
        CHECK(a.radii[i] <= c.max_radius());
        CHECK(a.positions[i].x() < 0.0);
    }
    SUBCASE("repacking is bit-identical") { CHECK(same_state(a, init_packing(c))); }

    SUBCASE("release produces downslope momentum within 50 steps") {
        auto s = release_plate(a, c);
        CHECK_FALSE(s.plate_active);
        Simulator sim(c);
        for (int k = 0; k < 50; ++k) sim.advance(s);
        CHECK(total_momentum(s, c).x() > 0.0);
    }
    SUBCASE("double release is a no-op") {
        const auto once = release_plate(a, c);
        CHECK(same_state(once, release_plate(once, c)));
    }
}

TEST_CASE("release then step without gravity matches a plate-free step") {
    DemConfig c;
    c.gravity = 0.0;
    c.n_particles = 200;
    const auto packed = init_packing(c);
    auto manual = packed;
    manual.plate_active = false;
    Simulator(c).refresh_contacts(manual);
    CHECK(same_state(step(release_plate(packed, c), c), step(manual, c)));
}

TEST_CASE("run snapshots") {
    DemConfig c;
    c.n_particles = 200;
    c.total_time = 0.0;
    CHECK(run(c).size() == 1);

    c.total_time = 0.1;
    const auto a = run(c);
    CHECK(a.size() == 3);
    CHECK(a.back().time == doctest::Approx(0.08));
    const auto b = run(c);
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(same_state(a[k], b[k]));

    c.rng_seed = 2;
    const auto other = run(c);
    CHECK_FALSE(same_state(a.back(), other.back()));
}

TEST_CASE("mechanical energy does not increase during the flow") {
    DemConfig c;
    c.n_particles = 300;
    auto s = release_plate(init_packing(c), c);
    Simulator sim(c);
    double e = mechanical_energy(s, c);
    int violations = 0;
    double worst = 0.0;
    for (int k = 0; k < 4000; ++k) {
        sim.advance(s);
        const double next = mechanical_energy(s, c);
        const double rel = (next - e) / std::abs(e);
        worst = std::max(worst, rel);
        if (rel > 1e-3) ++violations;
        e = next;
    }
    INFO("largest relative increase " << worst);
    CHECK(violations == 0);
}

TEST_CASE("snapshot archive roundtrip") {
    DemConfig c;
    c.n_particles = 100;
    c.total_time = 0.04;
    const auto snaps = run(c);
    const auto dir = std::filesystem::temp_directory_path() / "granflow_test_run";
    std::filesystem::remove_all(dir);
    save_run(dir, c, snaps);
    DemConfig back;
    const auto loaded = load_run(dir, &back);
    REQUIRE(loaded.size() == snaps.size());
    CHECK(nlohmann::json(back) == nlohmann::json(c));
    const auto& s = snaps.back();
    const auto& l = loaded.back();
    REQUIRE(l.size() == s.size());
    REQUIRE(l.contacts.size() == s.contacts.size());
    CHECK(l.positions[5].x() == static_cast<float>(s.positions[5].x()));
    CHECK(l.contacts[3].j == s.contacts[3].j);
    CHECK(l.fixed == s.fixed);
    std::filesystem::remove_all(dir);
}

TEST_CASE("config json rejects unknown keys") {
    nlohmann::json j = DemConfig{};
    j["n_particels"] = 5;
    CHECK_THROWS_AS(j.get<DemConfig>(), ConfigError);
}
