#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "granflow/field.hpp"
#include "granflow/nets.hpp"

namespace granflow::sampler {

enum class GuidanceMode { None, SparsityAware, NormalizedBaseline };

std::string to_string(GuidanceMode m);
/// Accepts none, sparse (sparsity_aware) and baseline (normalized_baseline).
GuidanceMode parse_guidance(const std::string& s);

struct SamplerConfig {
    int steps = 100;
    double xi = 1.0;
    GuidanceMode mode = GuidanceMode::SparsityAware;
    double eps = 1e-8;
    int ensemble = 25;
    std::uint64_t seed = 0;
    bool stop_gradient = false;  // drop the backbone term from the guidance gradient

    void validate() const;
};

void to_json(nlohmann::json& j, const SamplerConfig& c);
void from_json(const nlohmann::json& j, SamplerConfig& c);

/// Boundary observation: normalized (vx, vz) at slice 0 and the cells that enter the loss.
struct Observation {
    Field values;
    Mask mask;
    double rho = 1.0;
    int stride = 1;
    int row0 = 0, col0 = 0, rows = 0, cols = 0;  // window

    void validate() const;
};

/// Window of round(rho*rows) x round(rho*cols) cells centred on the centroid of
/// `active` (domain centre when empty) and shifted inside the domain, thinned to
/// every stride-th row and column counted from the window origin.
Observation make_observation(const Field& values, const Mask& active, double rho, int stride);

/// Learned or stub vector field f(u, tau, c) with the input VJP of its last evaluation.
class VectorField {
public:
    virtual ~VectorField() = default;
    virtual Field eval(const Field& u, double tau, int c) = 0;
    virtual Field vjp(const Field& cot) = 0;
    virtual std::unique_ptr<VectorField> clone() const = 0;
};

/// Boundary operator g(u, c) with the input VJP of its last evaluation.
class ForwardOperator {
public:
    virtual ~ForwardOperator() = default;
    virtual Field eval(const Field& u, int c) = 0;
    virtual Field vjp(const Field& cot) = 0;
    virtual std::unique_ptr<ForwardOperator> clone() const = 0;
};

class NetworkField : public VectorField {
public:
    explicit NetworkField(std::shared_ptr<const nets::ModelParams> params,
                          nets::Precision precision = nets::Precision::F32);
    NetworkField(const nets::ArchDescriptor& arch, std::shared_ptr<const std::vector<double>> params);
    Field eval(const Field& u, double tau, int c) override;
    Field vjp(const Field& cot) override;
    std::unique_ptr<VectorField> clone() const override;
    nets::Network& network() { return net_; }

private:
    std::shared_ptr<const nets::ModelParams> params_;
    std::shared_ptr<const std::vector<double>> params64_;
    nets::Precision precision_;
    nets::Network net_;
};

class NetworkOperator : public ForwardOperator {
public:
    explicit NetworkOperator(std::shared_ptr<const nets::ModelParams> params,
                             nets::Precision precision = nets::Precision::F32);
    NetworkOperator(const nets::ArchDescriptor& arch, std::shared_ptr<const std::vector<double>> params);
    Field eval(const Field& u, int c) override;
    Field vjp(const Field& cot) override;
    std::unique_ptr<ForwardOperator> clone() const override;
    nets::Network& network() { return net_; }

private:
    std::shared_ptr<const nets::ModelParams> params_;
    std::shared_ptr<const std::vector<double>> params64_;
    nets::Precision precision_;
    nets::Network net_;
};

/// f(u, tau, c) = v for every input.
class ConstantField : public VectorField {
public:
    explicit ConstantField(Field value) : value_(std::move(value)) {}
    Field eval(const Field& u, double tau, int c) override;
    Field vjp(const Field& cot) override;
    std::unique_ptr<VectorField> clone() const override { return std::make_unique<ConstantField>(value_); }

private:
    Field value_;
};

/// g(u) = (u_x, u_z).
class IdentityOperator : public ForwardOperator {
public:
    Field eval(const Field& u, int c) override;
    Field vjp(const Field& cot) override;
    std::unique_ptr<ForwardOperator> clone() const override { return std::make_unique<IdentityOperator>(*this); }

private:
    int rows_ = 0, cols_ = 0;
};

/// u_hat1 = u_tau + (1 - tau) f.
Field estimate_terminal(const Field& u_tau, double tau, const Field& f);
/// Sum of squared residuals g - u_obs over the window cells of both channels.
double guidance_loss(const Field& g_out, const Observation& obs);
double guidance_loss(const Field& u_hat, int c, const Observation& obs, ForwardOperator& g);
/// f - xi * grad.
Field sparse_guidance(const Field& f, const Field& grad, double xi);
/// f - xi * grad / (|grad|^2 + eps) * |f|^2 with norms over the whole field.
Field normalized_guidance(const Field& f, const Field& grad, double xi, double eps);

struct GuidedStep {
    Field f;       // unguided model field
    Field guided;  // field used for the Euler update
    Field grad;    // d L_guide / d u_tau (empty when mode is none)
    double loss = 0.0;
};

/// Model field at (u, tau) with the configured guidance. The gradient runs through g
/// and, unless stop_gradient is set, through f inside the terminal estimate.
GuidedStep guided_field(VectorField& f, ForwardOperator* g, const Field& u, double tau, int c,
                        const Observation* obs, const SamplerConfig& cfg);

struct Shape {
    int channels = 3, rows = 16, cols = 32;
};

struct Trajectory {
    Field u1;
    std::vector<double> loss;  // L_guide at each step (empty without observation)
    double final_loss = 0.0;   // L_guide of g(u1)
};

/// Euler integration from u0 ~ N(0, I) drawn with `seed`.
Trajectory integrate(VectorField& f, ForwardOperator* g, int c, const Observation* obs, const SamplerConfig& cfg,
                     std::uint64_t seed, Shape shape = {});

struct Ensemble {
    Field mean;
    Field std;  // population
    std::vector<Field> samples;
    std::vector<Trajectory> runs;
};

/// Pixel-wise mean and population standard deviation.
void ensemble_stats(std::span<const Field> samples, Field& mean, Field& std);
std::uint64_t member_seed(std::uint64_t seed, int k);
/// cfg.ensemble members with member_seed(cfg.seed, k), run in parallel.
Ensemble uq_ensemble(const VectorField& f, const ForwardOperator* g, int c, const Observation* obs,
                     const SamplerConfig& cfg, Shape shape = {});
Ensemble uq_ensemble(const VectorField& f, const ForwardOperator* g, int c, const Observation* obs,
                     const SamplerConfig& cfg, std::span<const std::uint64_t> seeds, Shape shape = {});

}  // namespace granflow::sampler
