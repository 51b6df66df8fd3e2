#pragma once

#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "attnflow/mask.hpp"
#include "attnflow/ops.hpp"
#include "attnflow/rng.hpp"

namespace attnflow {

using ParamMap = std::vector<std::pair<std::string, Tensor*>>;

// Accumulator threaded through a forward pass over the layer stack.
struct FlowState {
    Tensor h;
    Tensor logdet;    // (B,1,1,1) per-sample log|det J|
    Tensor logprior;  // (B,1,1,1) split-prior and final-prior log-densities
    std::vector<Tensor> latents;
};

// State threaded through an inverse pass. In sample mode split priors draw
// their own latents; otherwise they consume recorded ones from the back.
struct InverseState {
    Tensor h;
    std::vector<Tensor> latents;
    bool sample_mode = false;
    double temperature = 0.0;
    Rng* rng = nullptr;
};

class FlowLayer {
public:
    explicit FlowLayer(std::string name) : name_(std::move(name)) {}
    virtual ~FlowLayer() = default;
    FlowLayer(const FlowLayer&) = delete;
    FlowLayer& operator=(const FlowLayer&) = delete;

    const std::string& name() const { return name_; }

    virtual void forward(FlowState& s, const Tensor* cond) = 0;
    virtual void inverse(InverseState& s, const Tensor* cond) const = 0;
    virtual void params(ParamMap& out) = 0;

private:
    std::string name_;
};

// Convenience wrappers for layers that neither split nor change batch shape.
std::pair<Tensor, Tensor> layer_forward(FlowLayer& layer, const Tensor& x,
                                        const Tensor* cond = nullptr);
Tensor layer_inverse(const FlowLayer& layer, const Tensor& y, const Tensor* cond = nullptr);

// ---------------------------------------------------------------------------

// Per-channel affine with data-dependent initialization: the first forward
// batch sets scale/bias so post-layer channel statistics are mean 0, std 1.
class Actnorm : public FlowLayer {
public:
    Actnorm(std::string name, std::int64_t channels);

    void forward(FlowState& s, const Tensor* cond) override;
    void inverse(InverseState& s, const Tensor* cond) const override;
    void params(ParamMap& out) override;

    bool initialized() const { return initialized_; }
    // Marks the layer initialized with its current parameters (identity when
    // freshly built). Used when loading checkpoints and in closed-form tests.
    void set_initialized(bool v) { initialized_ = v; }

    Tensor log_scale;  // (1,C,1,1)
    Tensor bias;       // (1,C,1,1)

private:
    void init_from_batch(const Tensor& x);
    std::int64_t channels_;
    bool initialized_ = false;
    std::mutex init_mutex_;
};

// Invertible 1x1 convolution in LU form: W = P * L * (U + diag(sign * exp(log_s))).
// log|det W| is the sum of log_s; the inverse runs triangular solves.
class InvConv1x1 : public FlowLayer {
public:
    // Initialized from a random rotation (log-det 0) drawn from rng, or the
    // identity when rng is null.
    InvConv1x1(std::string name, std::int64_t channels, Rng* rng);

    void forward(FlowState& s, const Tensor* cond) override;
    void inverse(InverseState& s, const Tensor* cond) const override;
    void params(ParamMap& out) override;

    // Assembled weight matrix (no tape).
    SquareMatrix weight() const;

    Tensor lower;   // (1,1,C,C) strict lower part used
    Tensor upper;   // (1,1,C,C) strict upper part used
    Tensor log_s;   // (1,1,1,C)

private:
    Tensor assemble() const;  // tape-recorded W
    std::int64_t channels_;
    std::vector<int> perm_;        // assembled row i lands at output row perm_[i]
    Tensor perm_matrix_;           // constant (1,1,C,C)
    Tensor sign_s_;                // constant (1,1,1,C)
    Tensor lower_mask_, upper_mask_, identity_;  // constants
};

// Two pointwise hidden layers plus a zero-initialized 3x3 output conv, so a
// fresh net outputs exactly zero.
class CouplingNet {
public:
    CouplingNet() = default;
    CouplingNet(std::int64_t in_channels, std::int64_t hidden, std::int64_t out_channels,
                Rng& rng);

    Tensor apply(const Tensor& in) const;
    void params(const std::string& prefix, ParamMap& out);

    Tensor w1, b1;  // (1,1,hid,in), (1,hid,1,1)
    Tensor w2, b2;  // (1,1,hid,hid), (1,hid,1,1)
    Tensor w3, b3;  // (out,hid,3,3), (1,out,1,1) zero-initialized
};

enum class SplitRuleKind { ChannelHalves, Checkerboard2D, Permuted3D };

// How a coupling layer partitions its input into a transformed part and a
// conditioning part.
struct SplitSpec {
    SplitRuleKind kind = SplitRuleKind::ChannelHalves;
    std::optional<CheckerboardMask> mask;  // present for the mask-based rules
};

SplitSpec make_split_spec(SplitRuleKind kind, std::int64_t c, std::int64_t h, std::int64_t w,
                          int phase, std::uint64_t seed);

// y_t = exp(log s) .* x_t + t with (log s, t) = net(conditioning part); log s
// is clamped through 1.9*tanh. Mask rules transform half B conditioned on
// half A; the channel rule transforms the first half of the channels.
class AffineCoupling : public FlowLayer {
public:
    AffineCoupling(std::string name, std::int64_t channels, std::int64_t h, std::int64_t w,
                   std::int64_t hidden, SplitSpec split, Rng& rng,
                   std::int64_t cond_channels = 0);

    void forward(FlowState& s, const Tensor* cond) override;
    void inverse(InverseState& s, const Tensor* cond) const override;
    void params(ParamMap& out) override;

    CouplingNet net;

private:
    // Computes clamped (log s, t); data-dependent on the conditioning part.
    std::pair<Tensor, Tensor> scale_shift(const Tensor& x, const Tensor* cond) const;
    Tensor net_input(const Tensor& x, const Tensor* cond) const;
    std::int64_t channels_;
    SplitSpec split_;
    bool conditional_;
};

// Monotone elementwise logistic-mixture map followed by an affine:
// y_t = logit(f(x_t)) .* exp(log s) + t where f is a K-component mixture CDF.
// The inverse solves f(x) = F by bisection.
class MixtureCoupling : public FlowLayer {
public:
    MixtureCoupling(std::string name, std::int64_t channels, std::int64_t h, std::int64_t w,
                    std::int64_t hidden, int components, SplitSpec split, Rng& rng);

    void forward(FlowState& s, const Tensor* cond) override;
    void inverse(InverseState& s, const Tensor* cond) const override;
    void params(ParamMap& out) override;

    CouplingNet net;

private:
    struct Heads;  // per-element mixture parameters read out of the net
    std::int64_t channels_;
    int components_;
    SplitSpec split_;
};

// Conditional affine injector: (log s, t) = net(condition) transforms every
// channel and position; exact affine inverse given the same condition.
class CondInjector : public FlowLayer {
public:
    CondInjector(std::string name, std::int64_t channels, std::int64_t hidden,
                 std::int64_t cond_channels, Rng& rng);

    void forward(FlowState& s, const Tensor* cond) override;
    void inverse(InverseState& s, const Tensor* cond) const override;
    void params(ParamMap& out) override;

    CouplingNet net;

private:
    std::pair<Tensor, Tensor> scale_shift(const Tensor* cond, std::int64_t batch) const;
    std::int64_t channels_;
};

// Volume-preserving 2x2 space-to-channel rearrangement.
class Squeeze : public FlowLayer {
public:
    explicit Squeeze(std::string name) : FlowLayer(std::move(name)) {}
    void forward(FlowState& s, const Tensor* cond) override;
    void inverse(InverseState& s, const Tensor* cond) const override;
    void params(ParamMap&) override {}
};

// Factors out half the channels, scoring them under a Gaussian whose mean and
// log-std come from a zero-initialized conv on the kept half.
class SplitPrior : public FlowLayer {
public:
    SplitPrior(std::string name, std::int64_t channels);

    void forward(FlowState& s, const Tensor* cond) override;
    void inverse(InverseState& s, const Tensor* cond) const override;
    void params(ParamMap& out) override;

    Tensor conv_w;  // (C, C/2, 3, 3) zero-initialized
    Tensor conv_b;  // (1, C, 1, 1)

private:
    std::pair<Tensor, Tensor> prior_moments(const Tensor& kept) const;  // (mu, log_sd)
    std::int64_t channels_;
};

// Maps a condition tensor to feature maps at the input resolution; the model
// squeezes the encoding down to each level's working resolution.
class ConditionEncoder {
public:
    ConditionEncoder() = default;
    ConditionEncoder(std::int64_t cond_channels, std::int64_t features, Rng& rng);

    Tensor encode(const Tensor& c) const;
    void params(const std::string& prefix, ParamMap& out);

    Tensor w1, b1;  // (F,Cc,3,3)
    Tensor w2, b2;  // (1,1,F,F)
    Tensor w3, b3;  // (F,F,3,3)
};

// Elementwise standard-normal log-density summed per sample -> (B,1,1,1).
Tensor gaussian_logprob_per_sample(const Tensor& z);

}  // namespace attnflow
