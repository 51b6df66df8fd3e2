#pragma once

#include <memory>
#include <string>
#include <vector>

#include "attnflow/attention.hpp"
#include "attnflow/layers.hpp"

namespace attnflow {

enum class CouplingKind { Affine, Mixture };
enum class AttentionKind { None, IMap, ISdp };
// Insertion slot of the attention layer within each flow step:
// pos1 before actnorm, pos2 after actnorm, pos3 after the 1x1 convolution
// (the permutation), pos4 after the coupling.
enum class AttentionPosition { Pos1, Pos2, Pos3, Pos4 };

struct ModelConfig {
    int levels = 2;
    int steps = 2;
    CouplingKind coupling = CouplingKind::Affine;
    int hidden_channels = 16;
    SplitRuleKind split_rule = SplitRuleKind::ChannelHalves;
    AttentionKind attention = AttentionKind::None;
    AttentionPosition attention_position = AttentionPosition::Pos4;
    int heads = 1;
    int patches = 4;
    int mask_phase = 0;
    std::uint64_t mask_seed = 7;
    int mixture_components = 3;
    bool conditional = false;
    std::int64_t condition_channels = 1;
    SdpActivation isdp_activation = SdpActivation::Sigmoid;
    bool isdp_pure_eq6 = false;
    std::int64_t input_channels = 1;
    std::int64_t input_height = 8;
    std::int64_t input_width = 8;
    std::uint64_t seed = 1;

    void validate() const;
    Shape input_shape(std::int64_t batch = 1) const {
        return Shape(batch, input_channels, input_height, input_width);
    }
};

struct ForwardResult {
    std::vector<Tensor> latents;  // split latents in emission order; final z last
    Tensor logdet;                // (B,1,1,1)
    Tensor logprior;              // (B,1,1,1)
    Tensor logp() const { return add(logdet, logprior); }
};

// L levels of (squeeze, K flow steps, split prior) over a Gaussian base
// density. Step layout: actnorm, invertible 1x1 conv, coupling for the
// unconditional model; actnorm, 1x1, affine injector, conditional coupling
// for the conditional one. The optional attention layer occupies one of the
// four configured slots in every step.
class FlowModel {
public:
    static FlowModel build(const ModelConfig& cfg);
    // Assembles a model from an explicit layer stack (used by tests and the
    // closed-form suites). Layers all run at the input resolution (level 0).
    FlowModel(ModelConfig cfg, std::vector<std::unique_ptr<FlowLayer>> layers);

    ForwardResult forward(const Tensor& x, const Tensor* condition = nullptr);
    // log p(x) (or log p(x|c)) per sample -> (B,1,1,1)
    Tensor log_likelihood(const Tensor& x, const Tensor* condition = nullptr);

    Tensor inverse_from_latents(std::vector<Tensor> latents,
                                const Tensor* condition = nullptr) const;
    Tensor sample(std::int64_t n, double temperature, Rng& rng,
                  const Tensor* condition = nullptr) const;

    struct Recon {
        Tensor x_hat;
        double max_abs_error;
    };
    Recon reconstruct(const Tensor& x, const Tensor* condition = nullptr);

    ParamMap parameters();
    std::int64_t param_count();
    const ModelConfig& config() const { return config_; }
    std::vector<Shape> latent_shapes(std::int64_t batch) const;

    // Flattened D -> D bijection view used by the dense Jacobian oracle.
    Tensor forward_flat(const Tensor& x, const Tensor* condition = nullptr);

    bool actnorm_initialized() const;
    void set_actnorm_initialized(bool v);
    // Identity actnorm (log_scale = 0, bias = 0, initialized); leaves every
    // other parameter at its built value.
    void set_actnorm_identity();

    // Adds seeded Gaussian noise to every parameter and marks actnorms
    // initialized; test/verify support.
    void randomize_parameters(Rng& rng, double stddev);

    std::size_t layer_count() const { return layers_.size(); }
    FlowLayer& layer(std::size_t i) { return *layers_[i].layer; }

private:
    struct Entry {
        std::unique_ptr<FlowLayer> layer;
        int level = 0;
    };
    // Per-level condition features (empty for unconditional models).
    std::vector<Tensor> condition_features(const Tensor& c) const;

    ModelConfig config_;
    std::vector<Entry> layers_;
    ConditionEncoder encoder_;
    bool has_encoder_ = false;
    bool explicit_stack_ = false;
};

// Negative log2-likelihood per dimension, offset for 8-bit dequantized data.
double bits_per_dim(double logp_nats, std::int64_t dims);

}  // namespace attnflow
