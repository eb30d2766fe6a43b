#include "granflow/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "granflow/json_util.hpp"
#include "granflow/parallel.hpp"
#include "granflow/random.hpp"

namespace granflow::sampler {

std::string to_string(GuidanceMode m) {
    switch (m) {
        case GuidanceMode::None: return "none";
        case GuidanceMode::SparsityAware: return "sparse";
        case GuidanceMode::NormalizedBaseline: return "baseline";
    }
    return "?";
}

GuidanceMode parse_guidance(const std::string& s) {
    if (s == "none") return GuidanceMode::None;
    if (s == "sparse" || s == "sparsity_aware") return GuidanceMode::SparsityAware;
    if (s == "baseline" || s == "normalized_baseline") return GuidanceMode::NormalizedBaseline;
    throw ConfigError("unknown guidance mode '" + s + "' (expected sparse, baseline or none)");
}

void SamplerConfig::validate() const {
    if (steps < 1) throw ConfigError("sampler: steps must be >= 1");
    if (!(xi >= 0.0)) throw ConfigError("sampler: xi must be >= 0");
    if (!(eps > 0.0)) throw ConfigError("sampler: eps must be positive");
    if (ensemble < 1) throw ConfigError("sampler: ensemble must be >= 1");
}

void to_json(nlohmann::json& j, const SamplerConfig& c) {
    j = {{"steps", c.steps}, {"xi", c.xi},         {"mode", to_string(c.mode)}, {"eps", c.eps},
         {"ensemble", c.ensemble}, {"seed", c.seed}, {"stop_gradient", c.stop_gradient}};
}

void from_json(const nlohmann::json& j, SamplerConfig& c) {
    SectionReader r(j, "sampler");
    std::string mode = to_string(c.mode);
    r.get("steps", c.steps);
    r.get("xi", c.xi);
    r.get("mode", mode);
    r.get("eps", c.eps);
    r.get("ensemble", c.ensemble);
    r.get("seed", c.seed);
    r.get("stop_gradient", c.stop_gradient);
    r.finish();
    c.mode = parse_guidance(mode);
}

void Observation::validate() const {
    if (values.channels != 2) throw ShapeError("observation: expected 2 channels (vx, vz)");
    if (mask.rows != values.rows || mask.cols != values.cols) throw ShapeError("observation: mask shape mismatch");
    if (mask.count() == 0) throw ConfigError("observation: empty window");
}

Observation make_observation(const Field& values, const Mask& active, double rho, int stride) {
    if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("observation: rho must be in (0, 1]");
    if (stride < 1) throw ConfigError("observation: stride must be >= 1");
    if (active.rows != values.rows || active.cols != values.cols) throw ShapeError("observation: mask shape mismatch");
    Observation obs;
    obs.values = values;
    obs.rho = rho;
    obs.stride = stride;
    const int R = values.rows, C = values.cols;
    obs.rows = std::clamp(static_cast<int>(std::lround(rho * R)), 1, R);
    obs.cols = std::clamp(static_cast<int>(std::lround(rho * C)), 1, C);
    double cr = 0.5 * (R - 1), cc = 0.5 * (C - 1);
    if (active.count() > 0) {
        double sr = 0.0, sc = 0.0;
        std::size_t n = 0;
        for (int r = 0; r < R; ++r) {
            for (int w = 0; w < C; ++w) {
                if (active(r, w)) sr += r, sc += w, ++n;
            }
        }
        cr = sr / static_cast<double>(n);
        cc = sc / static_cast<double>(n);
    }
    obs.row0 = std::clamp(static_cast<int>(std::lround(cr - 0.5 * (obs.rows - 1))), 0, R - obs.rows);
    obs.col0 = std::clamp(static_cast<int>(std::lround(cc - 0.5 * (obs.cols - 1))), 0, C - obs.cols);
    obs.mask = Mask(R, C);
    for (int r = obs.row0; r < obs.row0 + obs.rows; r += stride) {
        for (int w = obs.col0; w < obs.col0 + obs.cols; w += stride) obs.mask.data[static_cast<std::size_t>(r) * C + w] = 1;
    }
    return obs;
}

NetworkField::NetworkField(std::shared_ptr<const nets::ModelParams> params, nets::Precision precision)
    : params_(std::move(params)), precision_(precision), net_(*params_, precision) {}

NetworkField::NetworkField(const nets::ArchDescriptor& arch, std::shared_ptr<const std::vector<double>> params)
    : params64_(std::move(params)), precision_(nets::Precision::F64), net_(arch, *params64_) {}

Field NetworkField::eval(const Field& u, double tau, int c) { return net_.forward(u, {tau, c}); }
Field NetworkField::vjp(const Field& cot) { return net_.input_vjp(cot); }

std::unique_ptr<VectorField> NetworkField::clone() const {
    if (params64_) return std::make_unique<NetworkField>(net_.arch(), params64_);
    return std::make_unique<NetworkField>(params_, precision_);
}

NetworkOperator::NetworkOperator(std::shared_ptr<const nets::ModelParams> params, nets::Precision precision)
    : params_(std::move(params)), precision_(precision), net_(*params_, precision) {}

NetworkOperator::NetworkOperator(const nets::ArchDescriptor& arch, std::shared_ptr<const std::vector<double>> params)
    : params64_(std::move(params)), precision_(nets::Precision::F64), net_(arch, *params64_) {}

Field NetworkOperator::eval(const Field& u, int c) { return net_.forward(u, {0.0, c}); }
Field NetworkOperator::vjp(const Field& cot) { return net_.input_vjp(cot); }

std::unique_ptr<ForwardOperator> NetworkOperator::clone() const {
    if (params64_) return std::make_unique<NetworkOperator>(net_.arch(), params64_);
    return std::make_unique<NetworkOperator>(params_, precision_);
}

Field ConstantField::eval(const Field& u, double, int) {
    if (!u.same_shape(value_)) throw ShapeError("constant field: shape mismatch");
    return value_;
}

Field ConstantField::vjp(const Field& cot) { return Field(cot.channels, cot.rows, cot.cols); }

Field IdentityOperator::eval(const Field& u, int) {
    if (u.channels != 3) throw ShapeError("identity operator: expected 3 channels");
    rows_ = u.rows;
    cols_ = u.cols;
    Field out(2, u.rows, u.cols);
    std::copy(u.channel(0).begin(), u.channel(0).end(), out.channel(0).begin());
    std::copy(u.channel(2).begin(), u.channel(2).end(), out.channel(1).begin());
    return out;
}

Field IdentityOperator::vjp(const Field& cot) {
    Field d(3, rows_, cols_);
    std::copy(cot.channel(0).begin(), cot.channel(0).end(), d.channel(0).begin());
    std::copy(cot.channel(1).begin(), cot.channel(1).end(), d.channel(2).begin());
    return d;
}

Field estimate_terminal(const Field& u_tau, double tau, const Field& f) {
    if (!u_tau.same_shape(f)) throw ShapeError("estimate_terminal: shape mismatch");
    Field out = u_tau;
    for (std::size_t k = 0; k < out.size(); ++k) out.data[k] += (1.0 - tau) * f.data[k];
    return out;
}

double guidance_loss(const Field& g_out, const Observation& obs) {
    if (!g_out.same_shape(obs.values)) throw ShapeError("guidance_loss: operator output does not match the observation");
    const std::size_t plane = g_out.plane();
    double sse = 0.0;
    for (int ch = 0; ch < g_out.channels; ++ch) {
        for (std::size_t k = 0; k < plane; ++k) {
            if (!obs.mask.data[k]) continue;
            const double r = g_out.data[ch * plane + k] - obs.values.data[ch * plane + k];
            sse += r * r;
        }
    }
    return sse;
}

double guidance_loss(const Field& u_hat, int c, const Observation& obs, ForwardOperator& g) {
    return guidance_loss(g.eval(u_hat, c), obs);
}

Field sparse_guidance(const Field& f, const Field& grad, double xi) {
    Field out = f;
    for (std::size_t k = 0; k < out.size(); ++k) out.data[k] -= xi * grad.data[k];
    return out;
}

Field normalized_guidance(const Field& f, const Field& grad, double xi, double eps) {
    double gg = 0.0, ff = 0.0;
    for (double v : grad.data) gg += v * v;
    for (double v : f.data) ff += v * v;
    const double s = xi * ff / (gg + eps);
    Field out = f;
    for (std::size_t k = 0; k < out.size(); ++k) out.data[k] -= s * grad.data[k];
    return out;
}

GuidedStep guided_field(VectorField& f, ForwardOperator* g, const Field& u, double tau, int c, const Observation* obs,
                        const SamplerConfig& cfg) {
    GuidedStep st;
    st.f = f.eval(u, tau, c);
    if (!obs || !g) {
        if (cfg.mode != GuidanceMode::None) throw ConfigError("guidance requires an observation and a forward operator");
        st.guided = st.f;
        return st;
    }
    const Field u_hat = estimate_terminal(u, tau, st.f);
    const Field y = g->eval(u_hat, c);
    st.loss = guidance_loss(y, *obs);
    if (cfg.mode == GuidanceMode::None) {
        st.guided = st.f;
        return st;
    }
    Field dy(y.channels, y.rows, y.cols);
    const std::size_t plane = y.plane();
    for (int ch = 0; ch < y.channels; ++ch) {
        for (std::size_t k = 0; k < plane; ++k) {
            if (obs->mask.data[k]) dy.data[ch * plane + k] = 2.0 * (y.data[ch * plane + k] - obs->values.data[ch * plane + k]);
        }
    }
    st.grad = g->vjp(dy);
    if (!cfg.stop_gradient) {
        const Field back = f.vjp(st.grad);
        for (std::size_t k = 0; k < st.grad.size(); ++k) st.grad.data[k] += (1.0 - tau) * back.data[k];
    }
    for (double v : st.grad.data) {
        if (!std::isfinite(v)) throw NumericError("guidance: non-finite gradient at tau = " + std::to_string(tau));
    }
    st.guided = cfg.mode == GuidanceMode::SparsityAware ? sparse_guidance(st.f, st.grad, cfg.xi)
                                                         : normalized_guidance(st.f, st.grad, cfg.xi, cfg.eps);
    return st;
}

Trajectory integrate(VectorField& f, ForwardOperator* g, int c, const Observation* obs, const SamplerConfig& cfg,
                     std::uint64_t seed, Shape shape) {
    cfg.validate();
    if (obs) obs->validate();
    Trajectory tr;
    Field u(shape.channels, shape.rows, shape.cols);
    Rng rng(seed);
    fill_normal(rng, u.data);
    const double dt = 1.0 / cfg.steps;
    for (int n = 0; n < cfg.steps; ++n) {
        const double tau = n * dt;
        const GuidedStep st = guided_field(f, g, u, tau, c, obs, cfg);
        if (obs && g) tr.loss.push_back(st.loss);
        for (std::size_t k = 0; k < u.size(); ++k) u.data[k] += st.guided.data[k] * dt;
    }
    for (double v : u.data) {
        if (!std::isfinite(v)) throw NumericError("integrate: non-finite state");
    }
    if (obs && g) tr.final_loss = guidance_loss(u, c, *obs, *g);
    tr.u1 = std::move(u);
    return tr;
}

void ensemble_stats(std::span<const Field> samples, Field& mean, Field& std) {
    if (samples.empty()) throw ConfigError("ensemble_stats: no samples");
    const Field& s0 = samples[0];
    mean = Field(s0.channels, s0.rows, s0.cols);
    std = mean;
    const double K = static_cast<double>(samples.size());
    // Running mean: identical members give exactly zero spread.
    double n = 0.0;
    for (const auto& s : samples) {
        if (!s.same_shape(s0)) throw ShapeError("ensemble_stats: shape mismatch");
        n += 1.0;
        for (std::size_t k = 0; k < s.size(); ++k) mean.data[k] += (s.data[k] - mean.data[k]) / n;
    }
    for (const auto& s : samples) {
        for (std::size_t k = 0; k < s.size(); ++k) {
            const double d = s.data[k] - mean.data[k];
            std.data[k] += d * d;
        }
    }
    for (auto& v : std.data) v = std::sqrt(v / K);
}

std::uint64_t member_seed(std::uint64_t seed, int k) { return derive_seed(seed, "member", static_cast<std::uint64_t>(k)); }

Ensemble uq_ensemble(const VectorField& f, const ForwardOperator* g, int c, const Observation* obs,
                     const SamplerConfig& cfg, Shape shape) {
    cfg.validate();
    std::vector<std::uint64_t> seeds(cfg.ensemble);
    for (int k = 0; k < cfg.ensemble; ++k) seeds[k] = member_seed(cfg.seed, k);
    return uq_ensemble(f, g, c, obs, cfg, seeds, shape);
}

Ensemble uq_ensemble(const VectorField& f, const ForwardOperator* g, int c, const Observation* obs,
                     const SamplerConfig& cfg, std::span<const std::uint64_t> seeds, Shape shape) {
    if (seeds.empty()) throw ConfigError("uq_ensemble: K must be >= 1");
    Ensemble e;
    e.runs.resize(seeds.size());
    parallel_for(seeds.size(), [&](std::size_t k) {
        auto fk = f.clone();
        auto gk = g ? g->clone() : nullptr;
        e.runs[k] = integrate(*fk, gk.get(), c, obs, cfg, seeds[k], shape);
    });
    for (const auto& r : e.runs) e.samples.push_back(r.u1);
    ensemble_stats(e.samples, e.mean, e.std);
    return e;
}

}  // namespace granflow::sampler
