#include <doctest.h>

#include <cmath>
#include <random>

#include "granflow/dataset.hpp"

using namespace granflow;
using namespace granflow::data;

namespace {

cg::SliceSample make_slice(int rows, int cols, double fill) {
    cg::SliceSample s;
    s.velocity = Field(3, rows, cols, fill);
    s.physics = Field(3, rows, cols, fill);
    s.mask = cg::activity_mask(s.velocity);
    return s;
}

Instance make_instance(int id, int n) {
    Instance inst;
    inst.id = id;
    for (int k = 0; k < n; ++k) {
        Snapshot s;
        s.instance = id;
        s.snapshot = k;
        s.time = 0.04 * k;
        inst.snapshots.push_back(s);
    }
    return inst;
}

}  // namespace

TEST_CASE("active stats error cases") {
    auto quiet = make_slice(2, 3, 0.0);
    const cg::SliceSample* one[] = {&quiet};
    CHECK_THROWS_AS(compute_active_stats(std::span<const cg::SliceSample* const>(one)), ConfigError);

    auto single = make_slice(2, 3, 0.0);
    single.velocity.at(0, 1, 1) = 2.0;
    const cg::SliceSample* two[] = {&single};
    CHECK_THROWS_AS(compute_active_stats(std::span<const cg::SliceSample* const>(two)), NumericError);
}

TEST_CASE("active stats recover planted moments") {
    // Plant values whose active-cell moments are known in closed form: each
    // variable takes mu +- sd on an equal number of active cells.
    const std::array<double, 6> mu{0.3, -0.02, 0.1, 50.0, 20.0, 0.004};
    const std::array<double, 6> sd{0.2, 0.05, 0.07, 10.0, 4.0, 0.001};
    std::vector<cg::SliceSample> slices;
    std::mt19937_64 rng(1);
    for (int s = 0; s < 4; ++s) {
        auto sl = make_slice(4, 6, 0.0);
        for (int k = 0; k < 24; ++k) {
            if (k % 4 == 3) {
                // Inactive cell with values that must be ignored.
                sl.velocity.data[k] = 0.001;
                sl.physics.data[k] = 1e6;
                continue;
            }
            const double sign = (k + s) % 2 ? 1.0 : -1.0;
            for (int v = 0; v < 3; ++v) sl.velocity.data[v * 24 + k] = mu[v] + sign * sd[v];
            for (int v = 0; v < 3; ++v) sl.physics.data[v * 24 + k] = mu[3 + v] + sign * sd[3 + v];
        }
        slices.push_back(sl);
    }
    std::vector<const cg::SliceSample*> ptrs;
    for (auto& s : slices) ptrs.push_back(&s);
    // The sign pattern puts 9 + and 9 - cells per pair of slices.
    const auto st = compute_active_stats(std::span<const cg::SliceSample* const>(ptrs));
    CHECK(st.active_cells == 72);
    for (int v = 0; v < 6; ++v) {
        CHECK(std::abs(st.mean[v] - mu[v]) <= 1e-12 * std::abs(mu[v]) + 1e-15);
        CHECK(std::abs(st.std[v] - sd[v]) <= 1e-12 * sd[v]);
    }
}

TEST_CASE("normalization roundtrip") {
    NormStats st;
    st.mean = {0.3, -0.1, 0.05, 40.0, 10.0, 0.01};
    st.std = {0.2, 0.03, 0.1, 15.0, 6.0, 0.02};
    Field f(3, 5, 7);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& x : f.data) x = n(rng);
    const auto back = denormalize(normalize(f, st, kVelocityVars), st, kVelocityVars);
    double err = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) err = std::max(err, std::abs(back.data[k] - f.data[k]));
    CHECK(err < 1e-12);

    Field at_mean(2, 1, 1);
    at_mean.data = {st.mean[0], st.mean[2]};
    const auto z = normalize(at_mean, st, kObservedVars);
    CHECK(z.data[0] == 0.0);
    CHECK(z.data[1] == 0.0);

    NormStats unit;
    unit.mean.fill(0.0);
    unit.std.fill(1.0);
    CHECK(normalize(f, unit, kPhysicsVars).data == f.data);
    CHECK_THROWS_AS(normalize(f, unit, kObservedVars), ShapeError);
}

TEST_CASE("splits") {
    std::vector<Instance> six;
    for (int i = 0; i < 6; ++i) six.push_back(make_instance(i, 10));
    const auto s = make_splits(six, 42);
    CHECK(s.dev_instances.size() == 5);
    CHECK(s.test_instance == 5);
    CHECK(s.train.size() == 45);
    CHECK(s.val.size() == 5);
    for (const auto& r : s.train) CHECK(r.instance != 5);
    for (const auto& r : s.val) CHECK(r.instance != 5);
    for (int i = 0; i < 5; ++i) {
        int nt = 0, nv = 0;
        for (const auto& r : s.train) nt += r.instance == i;
        for (const auto& r : s.val) nv += r.instance == i;
        CHECK(nt == 9);
        CHECK(nv == 1);
    }
    const auto again = make_splits(six, 42);
    CHECK(again.train == s.train);
    CHECK(again.val == s.val);
    const auto other = make_splits(six, 43);
    CHECK_FALSE(other.val == s.val);

    CHECK_THROWS_AS(make_splits({make_instance(0, 10)}, 1), ConfigError);
    CHECK(validation_count(1) == 0);
    CHECK(validation_count(5) == 1);
    CHECK(validation_count(25) == 2);

    nlohmann::json j = s;
    const auto r = j.get<DatasetSplit>();
    CHECK(r.train == s.train);
    CHECK(r.test_instance == 5);
}

TEST_CASE("stats use training instances only") {
    std::vector<Instance> inst;
    for (int i = 0; i < 3; ++i) {
        Instance in = make_instance(i, 4);
        for (auto& s : in.snapshots) {
            for (int c = 0; c < 4; ++c) {
                s.slices[c] = make_slice(2, 2, 0.1 * (i + 1) + 0.01 * c);
                s.slices[c].velocity.data[0] = 0.0;
            }
        }
        inst.push_back(in);
    }
    const auto split = make_splits(inst, 3);
    const auto train = select(inst, split.train);
    const auto st = compute_active_stats(std::span<const Snapshot* const>(train));
    CHECK(st.source_instances == std::vector<int>{0, 1});
    nlohmann::json j = st;
    const auto back = j.get<NormStats>();
    CHECK(back.mean == st.mean);
    CHECK(back.std == st.std);
}
