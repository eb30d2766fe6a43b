#include "granflow/cfm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "granflow/archive.hpp"
#include "granflow/json_util.hpp"
#include "granflow/parallel.hpp"

namespace granflow::cfm {

using nets::ModelKind;

TrainConfig TrainConfig::defaults(ModelKind kind) {
    TrainConfig c;
    c.kind = kind;
    if (kind == ModelKind::Backbone) return c;
    c.widths = {8, 16, 32};
    c.epochs = 150;
    c.lr_base = 2e-3;
    c.lr_floor = 1e-5;
    return c;
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train: " + m); };
    if (!(sigma_min > 0.0 && sigma_min <= 0.01)) fail("sigma_min must be in (0, 0.01]");
    if (epochs < 1) fail("epochs must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(lr_base > 0.0) || !(lr_floor >= 0.0) || lr_floor > lr_base) fail("need 0 <= lr_floor <= lr_base, lr_base > 0");
    if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
    arch().validate();
}

nets::ArchDescriptor TrainConfig::arch() const { return nets::ArchDescriptor::for_kind(kind, widths); }

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"kind", nets::to_string(c.kind)}, {"widths", c.widths},     {"epochs", c.epochs},
         {"batch_size", c.batch_size},     {"sigma_min", c.sigma_min}, {"lr_base", c.lr_base},
         {"lr_floor", c.lr_floor},         {"clip_norm", c.clip_norm}, {"weight_decay", c.weight_decay},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    SectionReader r(j, "train");
    std::string kind = nets::to_string(c.kind);
    r.get("kind", kind);
    c.kind = nets::parse_kind(kind);
    r.get("widths", c.widths);
    r.get("epochs", c.epochs);
    r.get("batch_size", c.batch_size);
    r.get("sigma_min", c.sigma_min);
    r.get("lr_base", c.lr_base);
    r.get("lr_floor", c.lr_floor);
    r.get("clip_norm", c.clip_norm);
    r.get("weight_decay", c.weight_decay);
    r.get("seed", c.seed);
    r.finish();
}

Field ot_interpolate(const Field& u0, const Field& u1, double tau, double sigma_min) {
    if (!u0.same_shape(u1)) throw ShapeError("ot_interpolate: shape mismatch");
    const double a = 1.0 - (1.0 - sigma_min) * tau;
    Field out = u0;
    for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = a * u0.data[k] + tau * u1.data[k];
    return out;
}

Field target_field(const Field& u_tau, const Field& u1, double tau, double sigma_min) {
    if (!u_tau.same_shape(u1)) throw ShapeError("target_field: shape mismatch");
    const double den = 1.0 - (1.0 - sigma_min) * tau;
    if (!(tau < 1.0 / (1.0 - sigma_min)) || !(den > 0.0)) throw NumericError("target_field: degenerate denominator at tau = " + std::to_string(tau));
    Field out = u1;
    for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = (u1.data[k] - (1.0 - sigma_min) * u_tau.data[k]) / den;
    return out;
}

namespace {

Field pick(const Field& f, int k0, int k1) {
    Field out(2, f.rows, f.cols);
    std::copy(f.channel(k0).begin(), f.channel(k0).end(), out.channel(0).begin());
    std::copy(f.channel(k1).begin(), f.channel(k1).end(), out.channel(1).begin());
    return out;
}

Field normalized_velocity(const data::Snapshot& s, int c, const data::NormStats& stats) {
    const Field& v = s.slices[c].velocity;
    if (v.channels != 3 || v.size() == 0) {
        throw ConfigError("pairing: snapshot " + std::to_string(s.snapshot) + " of instance " +
                          std::to_string(s.instance) + " lacks a velocity field for slice " + std::to_string(c));
    }
    return data::normalize(v, stats, data::kVelocityVars);
}

Field normalized_observation(const data::Snapshot& s, const data::NormStats& stats) {
    return pick(normalized_velocity(s, 0, stats), 0, 2);
}

struct Draw {
    double tau = 0.0;
    std::vector<double> u0;
};

std::vector<Draw> make_draws(std::span<const Example> data, std::span<const std::size_t> idx, Rng& rng) {
    std::vector<Draw> d(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
        d[b].tau = uniform01(rng);
        d[b].u0.resize(data[idx[b]].target.size());
        fill_normal(rng, d[b].u0);
    }
    return d;
}

// Per-sample forward/backward on dedicated networks; gradients are reduced in sample order.
class BatchRunner {
public:
    BatchRunner(const nets::ArchDescriptor& arch, int slots, double sigma_min) : sigma_min_(sigma_min) {
        for (int s = 0; s < slots; ++s) nets_.emplace_back(arch);
        grads_.resize(slots);
    }

    double run(const std::vector<float>& params, std::span<const Example> data, std::span<const std::size_t> idx,
               std::span<const Draw> draws, std::vector<float>* grad) {
        const std::size_t B = idx.size();
        std::vector<double> losses(B);
        parallel_for(B, [&](std::size_t b) {
            const Example& ex = data[idx[b]];
            Field in;
            Field tgt;
            nets::Conditioning cond{0.0, ex.c};
            if (!draws.empty()) {
                Field u0(ex.target.channels, ex.target.rows, ex.target.cols);
                u0.data = draws[b].u0;
                in = ot_interpolate(u0, ex.target, draws[b].tau, sigma_min_);
                tgt = target_field(in, ex.target, draws[b].tau, sigma_min_);
                cond.tau = draws[b].tau;
            } else {
                in = ex.input;
                tgt = ex.target;
            }
            std::vector<float> x(in.data.begin(), in.data.end());
            std::vector<float> y(tgt.size());
            auto& net = nets_[b];
            net.forward(params, x, 1, in.rows, in.cols, std::span<const nets::Conditioning>(&cond, 1), y);
            const double n = static_cast<double>(y.size());
            double sse = 0.0;
            std::vector<float> dy(y.size());
            for (std::size_t k = 0; k < y.size(); ++k) {
                const double r = static_cast<double>(y[k]) - tgt.data[k];
                sse += r * r;
                dy[k] = static_cast<float>(2.0 * r / (n * static_cast<double>(B)));
            }
            losses[b] = sse / n;
            if (grad) {
                grads_[b].assign(params.size(), 0.0f);
                net.backward(params, dy, grads_[b], {});
            }
        });
        if (grad) {
            std::vector<double> acc(params.size(), 0.0);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += grads_[b][k];
            }
            grad->assign(acc.begin(), acc.end());
        }
        return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(B);
    }

private:
    double sigma_min_;
    std::vector<nets::UNet<float>> nets_;
    std::vector<std::vector<float>> grads_;
};

void check_examples(std::span<const Example> data, const nets::ArchDescriptor& arch, bool flow) {
    for (const auto& ex : data) {
        const int in_ch = flow ? ex.target.channels : ex.input.channels;
        if (in_ch != arch.in_channels || ex.target.channels != arch.out_channels) {
            throw ConfigError("pairing: example channels " + std::to_string(in_ch) + " -> " +
                              std::to_string(ex.target.channels) + " do not fit a " + nets::to_string(arch.kind) +
                              " model");
        }
        if (ex.c < 0 || ex.c >= arch.vocab) throw ConfigError("pairing: slice index out of range");
        if (!flow && (ex.input.rows != ex.target.rows || ex.input.cols != ex.target.cols)) {
            throw ConfigError("pairing: input and target shapes differ");
        }
    }
}

// Mean loss over `data`, evaluated in batches without touching the parameters.
double evaluate(BatchRunner& runner, const std::vector<float>& params, std::span<const Example> data, int batch,
                Rng* rng) {
    double total = 0.0;
    for (std::size_t start = 0; start < data.size(); start += batch) {
        const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch));
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const auto draws = rng ? make_draws(data, idx, *rng) : std::vector<Draw>{};
        total += runner.run(params, data, idx, draws, nullptr) * static_cast<double>(idx.size());
    }
    return total / static_cast<double>(data.size());
}

TrainResult train_impl(std::span<const Example> train, std::span<const Example> val, const TrainConfig& cfg,
                       const EpochCallback& on_epoch, bool flow, const nets::ModelParams* warm_start) {
    cfg.validate();
    if (train.empty()) throw ConfigError("train: empty training set");
    const auto arch = cfg.arch();
    check_examples(train, arch, flow);
    check_examples(val, arch, flow);

    TrainResult res;
    if (warm_start) {
        if (!(warm_start->arch == arch)) throw ConfigError("train: checkpoint architecture differs from the configuration");
        res.params = *warm_start;
        res.params.frozen = false;
    } else {
        res.params = nets::init_params(arch, derive_seed(cfg.seed, "init"));
    }
    auto& params = res.params.values;
    BatchRunner runner(arch, cfg.batch_size, cfg.sigma_min);
    nets::AdamWConfig acfg;
    acfg.weight_decay = cfg.weight_decay;
    acfg.clip_norm = cfg.clip_norm;
    nets::AdamWState opt;

    const std::size_t n = train.size();
    const long per_epoch = static_cast<long>((n + cfg.batch_size - 1) / cfg.batch_size);
    const long total = per_epoch * cfg.epochs;
    long step = 0;
    std::vector<float> grad;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle(derive_seed(cfg.seed, "shuffle", epoch));
        std::shuffle(order.begin(), order.end(), shuffle);
        Rng draw_rng(derive_seed(cfg.seed, "draws", epoch));

        LogRow row;
        row.epoch = epoch;
        row.lr = nets::cosine_lr(step, total, cfg.lr_base, cfg.lr_floor);
        double sum = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            std::span<const std::size_t> idx(order.data() + start, end - start);
            const auto draws = flow ? make_draws(train, idx, draw_rng) : std::vector<Draw>{};
            const double loss = runner.run(params, train, idx, draws, &grad);
            if (!std::isfinite(loss)) {
                throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch));
            }
            const double lr = nets::cosine_lr(step, total, cfg.lr_base, cfg.lr_floor);
            try {
                nets::adamw_step(std::span<float>(params), std::span<const float>(grad), opt, lr, acfg);
            } catch (const NumericError& e) {
                throw DivergenceError("train: epoch " + std::to_string(epoch) + ": " + e.what());
            }
            ++step;
            sum += loss * static_cast<double>(idx.size());
        }
        row.train_loss = sum / static_cast<double>(n);
        if (val.empty()) {
            row.val_loss = std::numeric_limits<double>::quiet_NaN();
        } else {
            Rng val_rng(derive_seed(cfg.seed, "val"));
            row.val_loss = evaluate(runner, params, val, cfg.batch_size, flow ? &val_rng : nullptr);
        }
        res.log.push_back(row);
        if (on_epoch) on_epoch(row);
    }
    return res;
}

}  // namespace

std::vector<Example> backbone_examples(std::span<const data::Snapshot* const> snapshots, const data::NormStats& stats) {
    std::vector<Example> out;
    for (const auto* s : snapshots) {
        for (int c = 1; c <= 3; ++c) out.push_back({Field{}, normalized_velocity(*s, c, stats), c});
    }
    return out;
}

std::vector<Example> surrogate_examples(ModelKind kind, std::span<const data::Snapshot* const> snapshots,
                                        const data::NormStats& stats) {
    std::vector<Example> out;
    for (const auto* s : snapshots) {
        switch (kind) {
            case ModelKind::Surrogate: {
                const Field obs = normalized_observation(*s, stats);
                for (int c = 1; c <= 3; ++c) out.push_back({normalized_velocity(*s, c, stats), obs, c});
                break;
            }
            case ModelKind::Decoder:
                for (int c = 0; c <= 3; ++c) {
                    const Field& ph = s->slices[c].physics;
                    if (ph.channels != 3 || ph.size() == 0) {
                        throw ConfigError("pairing: snapshot " + std::to_string(s->snapshot) + " of instance " +
                                          std::to_string(s->instance) + " lacks physics for slice " +
                                          std::to_string(c));
                    }
                    out.push_back({normalized_velocity(*s, c, stats), data::normalize(ph, stats, data::kPhysicsVars), c});
                }
                break;
            case ModelKind::Baseline: {
                const Field obs = normalized_observation(*s, stats);
                for (int c = 1; c <= 3; ++c) out.push_back({obs, normalized_velocity(*s, c, stats), c});
                break;
            }
            case ModelKind::Backbone:
                throw ConfigError("surrogate_examples: the backbone is not a surrogate");
        }
    }
    return out;
}

double cfm_loss(const nets::ModelParams& params, std::span<const Example> batch, Rng& rng, double sigma_min) {
    if (batch.empty()) throw ConfigError("cfm_loss: empty batch");
    check_examples(batch, params.arch, true);
    BatchRunner runner(params.arch, static_cast<int>(batch.size()), sigma_min);
    std::vector<std::size_t> idx(batch.size());
    std::iota(idx.begin(), idx.end(), 0);
    const auto draws = make_draws(batch, idx, rng);
    return runner.run(params.values, batch, idx, draws, nullptr);
}

double mse_loss(const nets::ModelParams& params, std::span<const Example> batch) {
    if (batch.empty()) throw ConfigError("mse_loss: empty batch");
    check_examples(batch, params.arch, false);
    BatchRunner runner(params.arch, static_cast<int>(batch.size()), kSigmaMin);
    std::vector<std::size_t> idx(batch.size());
    std::iota(idx.begin(), idx.end(), 0);
    return runner.run(params.values, batch, idx, {}, nullptr);
}

TrainResult train_backbone(std::span<const Example> train, std::span<const Example> val, const TrainConfig& config,
                           const EpochCallback& on_epoch, const nets::ModelParams* warm_start) {
    if (config.kind != ModelKind::Backbone) throw ConfigError("train_backbone: config kind must be backbone");
    return train_impl(train, val, config, on_epoch, true, warm_start);
}

TrainResult train_surrogate(std::span<const Example> train, std::span<const Example> val, const TrainConfig& config,
                            const EpochCallback& on_epoch, const nets::ModelParams* warm_start) {
    if (config.kind == ModelKind::Backbone) throw ConfigError("train_surrogate: kind must be forward, decoder or baseline");
    TrainResult r = train_impl(train, val, config, on_epoch, false, warm_start);
    r.params.frozen = true;
    return r;
}

void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& log) {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,train_loss,val_loss,lr\n";
    for (const auto& r : log) os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.lr << '\n';
    io::write_text_atomic(path, os.str());
}

}  // namespace granflow::cfm
