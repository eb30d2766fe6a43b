#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "granflow/metrics.hpp"

using namespace granflow;
using namespace granflow::metrics;

namespace {

Field random_field(int c, int r, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Field f(c, r, w);
    for (auto& v : f.data) v = n(rng);
    return f;
}

Mask random_mask(int r, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Mask m(r, w);
    for (auto& v : m.data) v = (rng() % 3) != 0;
    return m;
}

// Two-pass oracles written against (row, col) indexing.
double oracle_rmse(const Field& t, const Field& p, const Mask& m, int ch) {
    double s = 0.0;
    int n = 0;
    for (int r = 0; r < t.rows; ++r) {
        for (int w = 0; w < t.cols; ++w) {
            if (!m(r, w)) continue;
            const double d = t.at(ch, r, w) - p.at(ch, r, w);
            s += d * d;
            ++n;
        }
    }
    return std::sqrt(s / n);
}

double oracle_pearson(const Field& t, const Field& p, const Mask& m, int ch) {
    std::vector<double> a, b;
    for (int r = 0; r < t.rows; ++r) {
        for (int w = 0; w < t.cols; ++w) {
            if (m(r, w)) a.push_back(t.at(ch, r, w)), b.push_back(p.at(ch, r, w));
        }
    }
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) ma += a[k] / n, mb += b[k] / n;
    double num = 0.0, da = 0.0, db = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        num += (a[k] - ma) * (b[k] - mb);
        da += (a[k] - ma) * (a[k] - ma);
        db += (b[k] - mb) * (b[k] - mb);
    }
    return num / (std::sqrt(da) * std::sqrt(db));
}

// Evaluates both empirical CDFs at every sample point.
double oracle_ks(const std::vector<double>& a, const std::vector<double>& b) {
    std::set<double> pts(a.begin(), a.end());
    pts.insert(b.begin(), b.end());
    double d = 0.0;
    for (double x : pts) {
        const double fa = static_cast<double>(std::count_if(a.begin(), a.end(), [&](double v) { return v <= x; })) / a.size();
        const double fb = static_cast<double>(std::count_if(b.begin(), b.end(), [&](double v) { return v <= x; })) / b.size();
        d = std::max(d, std::abs(fa - fb));
    }
    return d;
}

}  // namespace

TEST_CASE("masked rmse") {
    const Field t = random_field(2, 5, 7, 1);
    const Mask m = random_mask(5, 7, 2);
    CHECK(masked_rmse(t, t, m, 0) == 0.0);
    Field off = t;
    for (auto& v : off.data) v += 0.1;
    CHECK(masked_rmse(t, off, m, 1) == doctest::Approx(0.1).epsilon(1e-12));
    const Field p = random_field(2, 5, 7, 3);
    for (int ch = 0; ch < 2; ++ch) {
        CHECK(std::abs(masked_rmse(t, p, m, ch) - oracle_rmse(t, p, m, ch)) <= 1e-12 * oracle_rmse(t, p, m, ch));
        CHECK(masked_rmse(t, p, m, ch) == masked_rmse(p, t, m, ch));
    }
    CHECK_THROWS_AS(masked_rmse(t, p, Mask(5, 7), 0), ConfigError);
    CHECK_THROWS_AS(masked_rmse(t, random_field(2, 5, 6, 1), m, 0), ShapeError);
}

TEST_CASE("masked pearson") {
    const Field t = random_field(1, 6, 6, 4);
    const Mask m = random_mask(6, 6, 5);
    CHECK(masked_pearson(t, t, m, 0) == doctest::Approx(1.0).epsilon(1e-14));

    Field z = t;  // zero masked mean
    double mean = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) mean += m.data[k] ? z.data[k] : 0.0;
    mean /= static_cast<double>(m.count());
    for (auto& v : z.data) v -= mean;
    Field neg = z;
    for (auto& v : neg.data) v = -v;
    CHECK(masked_pearson(z, neg, m, 0) == doctest::Approx(-1.0).epsilon(1e-14));

    const Field p = random_field(1, 6, 6, 6);
    const double r = masked_pearson(t, p, m, 0);
    CHECK(std::abs(r - oracle_pearson(t, p, m, 0)) <= 1e-12);

    Field aff = p;
    for (auto& v : aff.data) v = 3.5 * v - 2.0;
    CHECK(std::abs(masked_pearson(t, aff, m, 0) - r) <= 1e-12);

    CHECK_THROWS_AS(masked_pearson(t, Field(1, 6, 6, 0.3), m, 0), UndefinedMetric);
}

TEST_CASE("masked-out cells are ignored") {
    const Field t = random_field(3, 4, 8, 7);
    const Field p = random_field(3, 4, 8, 8);
    const Mask m = random_mask(4, 8, 9);
    Field t2 = t, p2 = p;
    for (std::size_t k = 0; k < m.size(); ++k) {
        if (m.data[k]) continue;
        for (int ch = 0; ch < 3; ++ch) t2.data[ch * m.size() + k] = 1e6, p2.data[ch * m.size() + k] = -7.0;
    }
    for (int ch = 0; ch < 3; ++ch) {
        CHECK(masked_rmse(t, p, m, ch) == masked_rmse(t2, p2, m, ch));
        CHECK(masked_pearson(t, p, m, ch) == masked_pearson(t2, p2, m, ch));
        CHECK(coverage(t, p, Field(3, 4, 8, 0.5), m, ch, 2.0) == coverage(t2, p2, Field(3, 4, 8, 0.5), m, ch, 2.0));
    }
}

TEST_CASE("ks distance") {
    CHECK(ecdf_distance({1.0, 2.0, 2.0, 5.0}, {5.0, 2.0, 1.0, 2.0}) == 0.0);
    CHECK(ecdf_distance({0.0}, {1.0}) == 1.0);
    CHECK(ecdf_distance({0.0, 0.0}, {1.0, 1.0, 1.0}) == 1.0);
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> a(1 + rng() % 9), b(1 + rng() % 9);
        for (auto& v : a) v = static_cast<double>(rng() % 6);
        for (auto& v : b) v = static_cast<double>(rng() % 6) + 0.5 * (rng() % 2);
        CHECK(ecdf_distance(a, b) == oracle_ks(a, b));
    }
    CHECK_THROWS_AS(ecdf_distance({}, {1.0}), ConfigError);
}

TEST_CASE("coverage") {
    const Field t = random_field(1, 5, 5, 10);
    const Mask m = random_mask(5, 5, 11);
    CHECK(coverage(t, t, Field(1, 5, 5, 0.0), m, 0, 3.0) == 1.0);
    CHECK(coverage(t, t, Field(1, 5, 5, 1.0), m, 0, 0.5) == 1.0);
    Field shifted = t;
    for (auto& v : shifted.data) v += 1.0;
    CHECK(coverage(t, shifted, Field(1, 5, 5, 0.0), m, 0, 3.0) == 0.0);

    const Field mean = random_field(1, 5, 5, 12);
    Field sd = random_field(1, 5, 5, 13);
    for (auto& v : sd.data) v = std::abs(v);
    sd.data[0] = 0.0;
    for (double mult : {1.0, 2.0, 3.0}) {
        int hit = 0, n = 0;
        for (int r = 0; r < 5; ++r) {
            for (int w = 0; w < 5; ++w) {
                if (!m(r, w)) continue;
                ++n;
                const double e = std::abs(t.at(0, r, w) - mean.at(0, r, w));
                if (sd.at(0, r, w) == 0.0 ? e == 0.0 : e <= mult * sd.at(0, r, w)) ++hit;
            }
        }
        CHECK(coverage(t, mean, sd, m, 0, mult) == static_cast<double>(hit) / n);
    }
}

TEST_CASE("evaluate rows and csv roundtrip") {
    const Field t = random_field(3, 4, 4, 14);
    const Field p = random_field(3, 4, 4, 15);
    Mask m = random_mask(4, 4, 16);
    const std::vector<std::string> names{"vx", "vy", "vz"};
    const auto rows = evaluate(t, p, m, names, 2, 0.12);
    REQUIRE(rows.size() == 9);
    CHECK(rows[0].mask_kind == "active");
    CHECK(rows[3].mask_kind == "empty");
    CHECK(rows[3].n_act == 16 - m.count());
    CHECK(rows[3].rmse == masked_rmse(t, p, m.complement(), 0));
    CHECK(rows[8].n_act == 16);

    const auto all = evaluate(t, p, Mask(4, 4, true), names, 1, 0.0);
    CHECK(all.size() == 6);  // no empty rows

    const auto path = std::filesystem::temp_directory_path() / "granflow_metrics_test.csv";
    auto with_nan = rows;
    with_nan[1].r = std::nan("");
    write_csv(path, with_nan);
    const auto back = read_csv(path);
    REQUIRE(back.size() == with_nan.size());
    CHECK(std::isnan(back[1].r));
    CHECK(back[2].quantity == "vz");
    CHECK(back[2].rmse == doctest::Approx(rows[2].rmse).epsilon(1e-8));
}
