#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "granflow/error.hpp"
#include "granflow/field.hpp"

namespace granflow::nets {

enum class ModelKind { Backbone, Surrogate, Decoder, Baseline };

std::string to_string(ModelKind k);
ModelKind parse_kind(const std::string& s);

struct ArchDescriptor {
    ModelKind kind = ModelKind::Backbone;
    int in_channels = 3;
    int out_channels = 3;
    std::vector<int> widths{16, 32, 64};
    int blocks_per_stage = 1;
    int embed_dim = 16;
    bool use_tau = true;
    int vocab = 4;

    /// Channel contract of each kind: backbone 3->3 with tau, surrogate 3->2,
    /// decoder 3->3, baseline 2->3; embedding width = smallest stage width.
    static ArchDescriptor for_kind(ModelKind kind, std::vector<int> widths = {16, 32, 64});
    void validate() const;
    std::size_t param_count() const;
    /// Spatial sizes must be divisible by this.
    int spatial_multiple() const { return 1 << (widths.size() - 1); }
    bool operator==(const ArchDescriptor&) const = default;
};

void to_json(nlohmann::json& j, const ArchDescriptor& a);
void from_json(const nlohmann::json& j, ArchDescriptor& a);

struct Conditioning {
    double tau = 0.0;
    int c = 0;
};

struct ModelParams {
    ArchDescriptor arch;
    std::vector<float> values;
    std::uint64_t seed = 0;
    bool frozen = false;
};

ModelParams init_params(const ArchDescriptor& arch, std::uint64_t seed);

/// Checkpoint: <path>.json descriptor plus <path>.f32 parameter block.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const nlohmann::json& extra = {});
ModelParams load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

/// U-Net evaluator in precision T. Holds the activations of the last forward pass,
/// so one instance serves one thread; backward() must follow the matching forward().
/// Tensors are batch-major: (batch, channels, rows, cols).
template <typename T>
class UNet {
public:
    explicit UNet(const ArchDescriptor& arch);
    ~UNet();
    UNet(UNet&&) noexcept;
    UNet& operator=(UNet&&) noexcept;

    const ArchDescriptor& arch() const;
    std::size_t param_count() const;

    void forward(std::span<const T> params, std::span<const T> input, int batch, int rows, int cols,
                 std::span<const Conditioning> cond, std::span<T> output);
    /// Accumulates the parameter gradient of <output, d_output> into d_params (if
    /// non-empty) and writes the input gradient into d_input (if non-empty).
    void backward(std::span<const T> params, std::span<const T> d_output, std::span<T> d_params,
                  std::span<T> d_input);

    /// Deterministic initialization: uniform(+-1/sqrt(fan_in)) weights, zero biases,
    /// unit norm gains, standard-normal embedding table, zero output convolution.
    void initialize(std::span<T> params, std::uint64_t seed) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

extern template class UNet<float>;
extern template class UNet<double>;

enum class Precision { F32, F64 };

/// Single-sample model over double Fields with a cached forward for input VJPs.
class Network {
public:
    Network(const ModelParams& params, Precision precision = Precision::F32);
    /// 64-bit network over explicit double parameters (gradient checks).
    Network(const ArchDescriptor& arch, std::vector<double> params);

    const ArchDescriptor& arch() const { return arch_; }
    Field forward(const Field& x, Conditioning cond);
    /// Gradient of <forward(x), cot> with respect to x, for the last forward call.
    Field input_vjp(const Field& cot);
    /// Same, also returning the parameter gradient (double).
    Field vjp(const Field& cot, std::vector<double>& d_params);

private:
    Field vjp_impl(const Field& cot, std::vector<double>* d_params);

    ArchDescriptor arch_;
    Precision precision_;
    std::vector<float> pf_;
    std::vector<double> pd_;
    UNet<float> net_f_;
    UNet<double> net_d_;
    int rows_ = 0, cols_ = 0;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
};

struct AdamWState {
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;
};

/// Clips grads to the global norm limit, then applies one AdamW update at rate lr.
/// Returns the pre-clip global norm. Non-finite gradients raise NumericError.
double adamw_step(std::span<float> params, std::span<const float> grads, AdamWState& state, double lr,
                  const AdamWConfig& cfg = {});
double adamw_step(std::span<double> params, std::span<const double> grads, AdamWState& state, double lr,
                  const AdamWConfig& cfg = {});

/// Cosine annealing from base (step 0) to floor (step total).
double cosine_lr(long step, long total, double base, double floor);

}  // namespace granflow::nets
