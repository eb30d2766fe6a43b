#include <doctest.h>

#include <cmath>
#include <memory>

#include "granflow/random.hpp"
#include "granflow/sampler.hpp"

using namespace granflow;
using namespace granflow::sampler;

namespace {

Field random_field(int c, int r, int w, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Field f(c, r, w);
    fill_normal(rng, f.data);
    for (auto& v : f.data) v *= scale;
    return f;
}

Observation full_observation(const Field& values) {
    return make_observation(values, Mask(values.rows, values.cols), 1.0, 1);
}

std::shared_ptr<const std::vector<double>> noisy_params(const nets::ArchDescriptor& a, std::uint64_t seed) {
    const auto mp = nets::init_params(a, seed);
    auto p = std::make_shared<std::vector<double>>(mp.values.begin(), mp.values.end());
    Rng rng(seed + 7);
    std::normal_distribution<double> n(0.0, 0.2);
    for (auto& v : *p) v += n(rng);
    return p;
}

struct TinyModels {
    nets::ArchDescriptor fa = nets::ArchDescriptor::for_kind(nets::ModelKind::Backbone, {4, 6});
    nets::ArchDescriptor ga = nets::ArchDescriptor::for_kind(nets::ModelKind::Surrogate, {4, 6});
    TinyModels() { fa.embed_dim = ga.embed_dim = 4; }
};

}  // namespace

TEST_CASE("config and parsing") {
    SamplerConfig c;
    CHECK(c.steps == 100);
    CHECK(c.xi == 1.0);
    CHECK(c.eps == 1e-8);
    CHECK(c.ensemble == 25);
    CHECK(parse_guidance("sparse") == GuidanceMode::SparsityAware);
    CHECK(parse_guidance("baseline") == GuidanceMode::NormalizedBaseline);
    CHECK(parse_guidance("none") == GuidanceMode::None);
    CHECK_THROWS_AS(parse_guidance("cfg"), ConfigError);
    c.steps = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    nlohmann::json j = SamplerConfig{};
    SamplerConfig back;
    back.steps = 3;
    from_json(j, back);
    CHECK(back.steps == 100);
    CHECK_THROWS_AS(from_json(nlohmann::json{{"xii", 1}}, back), ConfigError);
}

TEST_CASE("observation windows") {
    const Field v = random_field(2, 16, 32, 1);
    Mask active(16, 32);
    const auto full = make_observation(v, active, 1.0, 1);
    CHECK(full.mask.count() == 512);

    const auto w = make_observation(v, active, 0.4, 1);
    CHECK(w.rows == 6);
    CHECK(w.cols == 13);
    CHECK(std::abs(static_cast<double>(w.mask.count()) / 512.0 - 0.16) < 0.01);

    // Centred on the active centroid, shifted inside the domain near the edge.
    for (int r = 2; r <= 4; ++r) {
        for (int c = 20; c <= 24; ++c) active.data[r * 32 + c] = 1;
    }
    const auto cen = make_observation(v, active, 0.25, 1);
    CHECK(cen.rows == 4);
    CHECK(cen.cols == 8);
    CHECK(cen.row0 == 2);  // centroid row 3: rows 1.5..4.5 round to 2..5
    CHECK(cen.col0 == 19);
    for (std::size_t k = 0; k < active.size(); ++k) active.data[k] = 0;
    active.data[0] = 1;
    const auto edge = make_observation(v, active, 0.5, 1);
    CHECK(edge.row0 == 0);
    CHECK(edge.col0 == 0);

    const auto s = make_observation(v, Mask(16, 32), 0.5, 3);
    for (int r = 0; r < 16; ++r) {
        for (int c = 0; c < 32; ++c) {
            const bool in = r >= s.row0 && r < s.row0 + s.rows && c >= s.col0 && c < s.col0 + s.cols;
            const bool on = in && (r - s.row0) % 3 == 0 && (c - s.col0) % 3 == 0;
            CHECK(s.mask(r, c) == on);
        }
    }
    CHECK_THROWS_AS(make_observation(v, Mask(16, 32), 0.0, 1), ConfigError);
    CHECK_THROWS_AS(make_observation(v, Mask(16, 32), 1.0, 0), ConfigError);
}

TEST_CASE("terminal estimate") {
    const Field u = random_field(3, 2, 4, 2), f = random_field(3, 2, 4, 3);
    const Field a = estimate_terminal(u, 0.0, f);
    for (std::size_t k = 0; k < u.size(); ++k) CHECK(a.data[k] == u.data[k] + f.data[k]);
    CHECK(estimate_terminal(u, 0.4, Field(3, 2, 4)).data == u.data);
    const Field b = estimate_terminal(u, 1.0, f);
    CHECK(b.data == u.data);
}

TEST_CASE("guidance loss is a masked sum") {
    const Field g = random_field(2, 4, 6, 4);
    Observation obs = full_observation(g);
    CHECK(guidance_loss(g, obs) == 0.0);

    Field shifted = g;
    for (auto& v : shifted.data) v += 0.5;  // residual 0.5 in both channels
    obs.mask = Mask(4, 6);
    for (int k = 0; k < 8; ++k) obs.mask.data[k] = 1;
    const double l8 = guidance_loss(shifted, obs);
    for (int k = 4; k < 8; ++k) obs.mask.data[k] = 0;
    const double l4 = guidance_loss(shifted, obs);
    CHECK(l8 == 2.0 * 8 * 0.25);
    CHECK(l4 == 0.5 * l8);

    const Field y = random_field(2, 4, 6, 5);
    obs.mask = Mask(4, 6);
    for (std::size_t k = 0; k < obs.mask.size(); k += 3) obs.mask.data[k] = 1;
    double ref = 0.0;
    for (int ch = 0; ch < 2; ++ch) {
        for (int r = 0; r < 4; ++r) {
            for (int c = 0; c < 6; ++c) {
                if (obs.mask(r, c)) ref += std::pow(y.at(ch, r, c) - g.at(ch, r, c), 2);
            }
        }
    }
    CHECK(std::abs(guidance_loss(y, obs) - ref) <= 1e-10 * ref);
}

TEST_CASE("guidance formulas") {
    const Field f = random_field(3, 3, 5, 6), g = random_field(3, 3, 5, 7);
    CHECK(sparse_guidance(f, g, 0.0).data == f.data);
    const Field zero(3, 3, 5);
    CHECK(normalized_guidance(f, zero, 1.0, 1e-8).data == f.data);
    for (double v : normalized_guidance(zero, g, 1.0, 1e-8).data) CHECK(v == 0.0);

    const double xi = 0.7, eps = 1e-8;
    double gg = 0.0, ff = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) gg += g.data[k] * g.data[k], ff += f.data[k] * f.data[k];
    const Field out = normalized_guidance(f, g, xi, eps);
    const Field sp = sparse_guidance(f, g, xi);
    for (std::size_t k = 0; k < f.size(); ++k) {
        const double ref = f.data[k] - xi * g.data[k] / (gg + eps) * ff;
        CHECK(std::abs(out.data[k] - ref) <= 1e-10 * std::max(1.0, std::abs(ref)));
        CHECK(sp.data[k] == f.data[k] - xi * g.data[k]);
    }
}

TEST_CASE("guided field with stubs") {
    const Field v = random_field(3, 4, 8, 8, 0.3);
    ConstantField f(v);
    IdentityOperator g;
    const Field u = random_field(3, 4, 8, 9);
    SamplerConfig cfg;

    // Observation equal to the operator output at the terminal estimate.
    const double tau = 0.3;
    IdentityOperator probe;
    Observation exact = full_observation(probe.eval(estimate_terminal(u, tau, v), 1));
    auto st = guided_field(f, &g, u, tau, 1, &exact, cfg);
    CHECK(st.loss == 0.0);
    CHECK(st.guided.data == st.f.data);

    // Window excluding the right half: no correction there.
    Observation half = make_observation(random_field(2, 4, 8, 10), Mask(4, 8), 1.0, 1);
    for (int r = 0; r < 4; ++r) {
        for (int c = 4; c < 8; ++c) half.mask.data[r * 8 + c] = 0;
    }
    st = guided_field(f, &g, u, tau, 1, &half, cfg);
    for (int ch = 0; ch < 3; ++ch) {
        for (int r = 0; r < 4; ++r) {
            for (int c = 0; c < 8; ++c) {
                if (c >= 4 || ch == 1) CHECK(st.grad.at(ch, r, c) == 0.0);
                if (c < 4 && ch != 1) CHECK(st.grad.at(ch, r, c) != 0.0);
            }
        }
    }

    // Adding zero-residual cells to the window leaves the gradient unchanged.
    Observation widened = half;
    const Field y = probe.eval(estimate_terminal(u, tau, v), 1);
    for (int r = 0; r < 4; ++r) {
        for (int c = 4; c < 8; ++c) {
            widened.mask.data[r * 8 + c] = 1;
            for (int ch = 0; ch < 2; ++ch) widened.values.at(ch, r, c) = y.at(ch, r, c);
        }
    }
    const auto st2 = guided_field(f, &g, u, tau, 1, &widened, cfg);
    CHECK(st2.grad.data == st.grad.data);

    cfg.xi = 0.0;
    CHECK(guided_field(f, &g, u, tau, 1, &half, cfg).guided.data == v.data);
    CHECK_THROWS_AS(guided_field(f, nullptr, u, tau, 1, nullptr, SamplerConfig{}), ConfigError);
}

TEST_CASE("guidance gradient through both networks matches finite differences") {
    TinyModels tm;
    NetworkField f(tm.fa, noisy_params(tm.fa, 1));
    NetworkOperator g(tm.ga, noisy_params(tm.ga, 2));
    const Field u = random_field(3, 4, 8, 11);
    Observation obs = make_observation(random_field(2, 4, 8, 12), Mask(4, 8), 0.75, 1);
    const double tau = 0.35;
    const int c = 2;
    const auto st = guided_field(f, &g, u, tau, c, &obs, SamplerConfig{});

    auto loss_at = [&](const Field& x) {
        const Field fx = f.eval(x, tau, c);
        return guidance_loss(estimate_terminal(x, tau, fx), c, obs, g);
    };
    const double h = 1e-5;
    double worst = 0.0, scale = 0.0;
    std::vector<double> fd(u.size());
    for (std::size_t k = 0; k < u.size(); ++k) {
        Field up = u, um = u;
        up.data[k] += h;
        um.data[k] -= h;
        fd[k] = (loss_at(up) - loss_at(um)) / (2 * h);
        scale = std::max(scale, std::abs(fd[k]));
    }
    for (std::size_t k = 0; k < u.size(); ++k) {
        worst = std::max(worst, std::abs(st.grad.data[k] - fd[k]) / std::max({std::abs(fd[k]), std::abs(st.grad.data[k]), 1e-3 * scale}));
    }
    CHECK(worst < 1e-4);

    SamplerConfig stop;
    stop.stop_gradient = true;
    const auto sg = guided_field(f, &g, u, tau, c, &obs, stop);
    double diff = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) diff += std::abs(sg.grad.data[k] - st.grad.data[k]);
    CHECK(diff > 0.0);
}

TEST_CASE("euler integration") {
    SamplerConfig cfg;
    cfg.mode = GuidanceMode::None;
    cfg.steps = 1;
    const Shape shape{3, 4, 8};
    Field u0(3, 4, 8);
    Rng rng(77);
    fill_normal(rng, u0.data);

    ConstantField zero(Field(3, 4, 8));
    CHECK(integrate(zero, nullptr, 1, nullptr, cfg, 77, shape).u1.data == u0.data);

    const Field v = random_field(3, 4, 8, 13);
    ConstantField cf(v);
    for (int n : {1, 7, 100}) {
        cfg.steps = n;
        const auto tr = integrate(cf, nullptr, 1, nullptr, cfg, 77, shape);
        for (std::size_t k = 0; k < v.size(); ++k) CHECK(tr.u1.data[k] == doctest::Approx(u0.data[k] + v.data[k]).epsilon(1e-12));
        CHECK(tr.loss.empty());
    }

    TinyModels tm;
    NetworkField f(tm.fa, noisy_params(tm.fa, 3));
    NetworkOperator g(tm.ga, noisy_params(tm.ga, 4));
    Observation obs = full_observation(random_field(2, 4, 8, 14));
    cfg.steps = 10;
    cfg.mode = GuidanceMode::SparsityAware;
    const auto a = integrate(f, &g, 1, &obs, cfg, 5, shape);
    const auto b = integrate(f, &g, 1, &obs, cfg, 5, shape);
    CHECK(a.u1.data == b.u1.data);
    CHECK(a.loss == b.loss);
    CHECK(a.loss.size() == 10);

    cfg.xi = 0.0;
    const auto guided0 = integrate(f, &g, 1, &obs, cfg, 5, shape);
    cfg.mode = GuidanceMode::None;
    const auto plain = integrate(f, &g, 1, &obs, cfg, 5, shape);
    CHECK(guided0.u1.data == plain.u1.data);
    CHECK(guided0.loss == plain.loss);
}

TEST_CASE("ensemble statistics") {
    const Field v = random_field(3, 4, 8, 15);
    ConstantField cf(v);
    SamplerConfig cfg;
    cfg.mode = GuidanceMode::None;
    cfg.steps = 3;
    cfg.ensemble = 1;
    const Shape shape{3, 4, 8};
    auto e1 = uq_ensemble(cf, nullptr, 1, nullptr, cfg, shape);
    for (double s : e1.std.data) CHECK(s == 0.0);

    const std::vector<std::uint64_t> same{9, 9, 9};
    auto es = uq_ensemble(cf, nullptr, 1, nullptr, cfg, same, shape);
    for (double s : es.std.data) CHECK(s == 0.0);

    std::vector<Field> samples;
    for (int k = 0; k < 5; ++k) samples.push_back(random_field(2, 3, 3, 20 + k));
    Field mean, sd;
    ensemble_stats(samples, mean, sd);
    for (std::size_t i = 0; i < mean.size(); ++i) {
        double m = 0.0;
        for (const auto& s : samples) m += s.data[i];
        m /= 5.0;
        double var = 0.0;
        for (const auto& s : samples) var += (s.data[i] - m) * (s.data[i] - m);
        CHECK(std::abs(mean.data[i] - m) <= 1e-12 * std::max(1.0, std::abs(m)));
        CHECK(std::abs(sd.data[i] - std::sqrt(var / 5.0)) <= 1e-12);
    }

    cfg.ensemble = 4;
    auto e4 = uq_ensemble(cf, nullptr, 1, nullptr, cfg, shape);
    CHECK(e4.samples.size() == 4);
    CHECK(e4.samples[0].data != e4.samples[1].data);
    auto again = uq_ensemble(cf, nullptr, 1, nullptr, cfg, shape);
    CHECK(again.mean.data == e4.mean.data);
}
