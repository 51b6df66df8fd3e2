#pragma once

#include "attnflow/layers.hpp"

namespace attnflow {

// Invertible map-based attention: a data-dependent diagonal (per-position)
// scaling. Half-A positions are scaled by sigmoid(b); half-B positions by the
// sigmoid of s times a channel-pooled pointwise-conv feature of the half-A
// input, routed across the split by the canonical half pairing. Both branches
// stay in (0,1), so the diagonal weight matrix is invertible.
class IMapAttention : public FlowLayer {
public:
    IMapAttention(std::string name, std::int64_t channels, std::int64_t h, std::int64_t w,
                  int mask_phase, Rng& rng);

    void forward(FlowState& s, const Tensor* cond) override;
    void inverse(InverseState& s, const Tensor* cond) const override;
    void params(ParamMap& out) override;

    struct Weights {
        Tensor preact;  // (B,1,H,W) data-dependent pre-activation (s * pooled feature)
        Tensor scales;  // (B,1,H,W) applied per-position scales in (0,1)
    };
    // Data-dependent entries depend only on half-A values of x.
    Weights weights(const Tensor& x) const;

    const CheckerboardMask& mask() const { return mask_; }

    Tensor g2_weight;  // (1,1,C',C), no bias
    Tensor scale_s;    // learnable scalar (1,1,1,1)
    Tensor bias_b;     // learnable per-position map (1,1,H,W)

private:
    CheckerboardMask mask_;
    std::int64_t channels_;
};

enum class SdpActivation { Sigmoid, Softmax };

// Invertible scaled dot-product attention. Per patch, an m x m weight matrix
// built from the half-A positions (queries/keys from two pointwise convs,
// sigmoid or row-softmax activation, optional alpha*I stabilization) is
// applied linearly to the half-B positions; heads partition the channels.
class ISdpAttention : public FlowLayer {
public:
    ISdpAttention(std::string name, std::int64_t channels, std::int64_t h, std::int64_t w,
                  int mask_phase, PatchGrid grid, int heads, SdpActivation activation,
                  bool pure_eq6, Rng& rng);

    void forward(FlowState& s, const Tensor* cond) override;
    void inverse(InverseState& s, const Tensor* cond) const override;
    void params(ParamMap& out) override;

    // The (B,1,m,m) block for one patch and head; depends only on half-A values.
    Tensor weights_block(const Tensor& x, std::int64_t patch_index, int head) const;

    const CheckerboardMask& mask() const { return mask_; }
    const PatchGrid& grid() const { return grid_; }
    std::int64_t positions_per_patch() const { return m_; }
    int heads() const { return int(head_ranges_.size()); }
    std::pair<std::int64_t, std::int64_t> head_range(int h) const { return head_ranges_[h]; }

    std::vector<Tensor> wq, wk;  // per-head (1,1,C,C)
    Tensor log_d;                // scalar; d = exp(log_d)
    Tensor alpha_raw;            // scalar; alpha = softplus(alpha_raw)

private:
    CheckerboardMask mask_;
    PatchGrid grid_;
    std::int64_t channels_;
    std::int64_t m_;  // half positions per patch
    SdpActivation activation_;
    bool pure_eq6_;
    std::vector<std::pair<std::int64_t, std::int64_t>> head_ranges_;
    Tensor eye_;  // (1,1,m,m) constant
};

// Largest r x c grid with r*c <= requested patches such that the grid tiles
// (H,W) and every patch holds equal half-A/half-B counts.
PatchGrid fit_patch_grid(std::int64_t h, std::int64_t w, int requested_patches);

}  // namespace attnflow
