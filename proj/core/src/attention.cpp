#include "attnflow/attention.hpp"

#include <cmath>

namespace attnflow {

// --------------------------------------------------------------------------
// IMapAttention

IMapAttention::IMapAttention(std::string name, std::int64_t channels, std::int64_t h,
                             std::int64_t w, int mask_phase, Rng& rng)
    : FlowLayer(std::move(name)),
      g2_weight(normal_tensor(Shape(1, 1, channels, channels), rng, 0.05)),
      scale_s(Shape(1, 1, 1, 1)),
      bias_b(Shape(1, 1, h, w)),
      mask_(CheckerboardMask::make_2d(h, w, mask_phase)),
      channels_(channels) {}

IMapAttention::Weights IMapAttention::weights(const Tensor& x) const {
    Tensor u = conv1x1(apply_mask(x, mask_, Half::A), g2_weight);
    Tensor pooled = pair_halves(channel_mean(u), mask_);
    Tensor preact = mul(pooled, scale_s);
    Tensor sa = broadcast_batch(sigmoid(bias_b), x.shape.b);
    Tensor sb = sigmoid(preact);
    Tensor scales = add(apply_mask(sa, mask_, Half::A), apply_mask(sb, mask_, Half::B));
    return {std::move(preact), std::move(scales)};
}

void IMapAttention::forward(FlowState& s, const Tensor*) {
    const Tensor x = s.h;
    Weights w = weights(x);
    for (std::size_t i = 0; i < w.scales.data.size(); ++i) {
        if (w.scales.data[i] == 0.0) {
            throw NumericalError(name() + ": attention scale underflowed to 0 at position " +
                                 std::to_string(i));
        }
    }
    s.h = spatial_scale(x, w.scales);
    // per-sample logdet: C * (sum_A log sigmoid(b) + sum_B log sigmoid(preact))
    Tensor ls_a = apply_mask(broadcast_batch(log_sigmoid(bias_b), x.shape.b), mask_, Half::A);
    Tensor ls_b = apply_mask(log_sigmoid(w.preact), mask_, Half::B);
    s.logdet = add(s.logdet, mul(sum_per_sample(add(ls_a, ls_b)), double(channels_)));
}

void IMapAttention::inverse(InverseState& s, const Tensor*) const {
    const Tensor& y = s.h;
    const std::int64_t B = y.shape.b, C = y.shape.c, P = y.shape.h * y.shape.w;

    // half A first: x_A = y_A / sigmoid(b)
    Tensor x_rec(y.shape);
    const auto pos_a = mask_.positions(Half::A);
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            for (const std::int64_t p : pos_a) {
                const std::size_t k = std::size_t((b * C + c) * P + p);
                const double sc = 1.0 / (1.0 + std::exp(-bias_b.data[std::size_t(p)]));
                if (sc < 1e-12) {
                    throw NumericalError(name() + ": inverse scale below 1e-12 at position " +
                                         std::to_string(p));
                }
                x_rec.data[k] = y.data[k] / sc;
            }
        }
    }
    // recompute the data-dependent weights from the recovered half A
    Weights w = weights(x_rec);
    const auto pos_b = mask_.positions(Half::B);
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            for (const std::int64_t p : pos_b) {
                const std::size_t k = std::size_t((b * C + c) * P + p);
                const double sc = w.scales.data[std::size_t(b * P + p)];
                if (sc < 1e-12) {
                    throw NumericalError(name() + ": inverse scale below 1e-12 at position " +
                                         std::to_string(p));
                }
                x_rec.data[k] = y.data[k] / sc;
            }
        }
    }
    s.h = x_rec;
}

void IMapAttention::params(ParamMap& out) {
    out.emplace_back(name() + ".g2_weight", &g2_weight);
    out.emplace_back(name() + ".scale_s", &scale_s);
    out.emplace_back(name() + ".bias_b", &bias_b);
}

// --------------------------------------------------------------------------
// ISdpAttention

PatchGrid fit_patch_grid(std::int64_t h, std::int64_t w, int requested_patches) {
    int g = 1;
    while ((g + 1) * (g + 1) <= requested_patches) ++g;
    for (; g >= 1; --g) {
        if (h % g != 0 || w % g != 0) continue;
        const std::int64_t ph = h / g, pw = w / g;
        if (ph % 2 == 0 || pw % 2 == 0) return PatchGrid{g, g};
    }
    throw ShapeError("no patch grid fits (" + std::to_string(h) + "," + std::to_string(w) + ")");
}

ISdpAttention::ISdpAttention(std::string name, std::int64_t channels, std::int64_t h,
                             std::int64_t w, int mask_phase, PatchGrid grid, int heads,
                             SdpActivation activation, bool pure_eq6, Rng& rng)
    : FlowLayer(std::move(name)),
      log_d(Shape(1, 1, 1, 1), {0.5 * std::log(double(channels))}),  // d = sqrt(C)
      alpha_raw(Shape(1, 1, 1, 1), {std::log(std::exp(1.0) - 1.0)}),  // softplus -> 1
      mask_(CheckerboardMask::make_2d(h, w, mask_phase)),
      grid_(grid),
      channels_(channels),
      activation_(activation),
      pure_eq6_(pure_eq6) {
    if (heads < 1) throw DomainError(this->name() + ": heads must be >= 1");
    if (heads > channels) {
        throw ShapeError(this->name() + ": " + std::to_string(heads) + " heads exceed " +
                         std::to_string(channels) + " channels");
    }
    // every patch must hold equal half-A and half-B counts
    m_ = -1;
    for (std::int64_t p = 0; p < grid_.count(); ++p) {
        const auto a = mask_.positions(Half::A, grid_, p);
        const auto b = mask_.positions(Half::B, grid_, p);
        if (a.size() != b.size()) {
            throw ShapeError(this->name() + ": patch " + std::to_string(p) +
                             " has unbalanced halves (" + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()) + ")");
        }
        if (m_ < 0) m_ = std::int64_t(a.size());
        if (std::int64_t(a.size()) != m_) {
            throw ShapeError(this->name() + ": patches have differing half sizes");
        }
    }
    // heads partition the channels as evenly as possible
    const std::int64_t base = channels / heads, extra = channels % heads;
    std::int64_t c0 = 0;
    for (int hh = 0; hh < heads; ++hh) {
        const std::int64_t size = base + (hh < extra ? 1 : 0);
        head_ranges_.emplace_back(c0, c0 + size);
        c0 += size;
    }
    for (int hh = 0; hh < heads; ++hh) {
        wq.push_back(normal_tensor(Shape(1, 1, channels, channels), rng, 0.05));
        wk.push_back(normal_tensor(Shape(1, 1, channels, channels), rng, 0.05));
    }
    eye_ = Tensor(Shape(1, 1, m_, m_));
    for (std::int64_t i = 0; i < m_; ++i) eye_.data[std::size_t(i * m_ + i)] = 1.0;
}

Tensor ISdpAttention::weights_block(const Tensor& x, std::int64_t patch_index, int head) const {
    Tensor xa = gather_half(x, mask_, Half::A, &grid_, patch_index);  // (B,1,m,C)
    Tensor q = matmul(xa, wq[std::size_t(head)], false, true);
    Tensor k = matmul(xa, wk[std::size_t(head)], false, true);
    Tensor scores = mul(matmul(q, k, false, true), exp(mul(log_d, -0.5)));
    Tensor act = activation_ == SdpActivation::Sigmoid ? sigmoid(scores) : row_softmax(scores);
    if (pure_eq6_) return act;
    Tensor alpha_eye = broadcast_batch(mul(eye_, softplus(alpha_raw)), x.shape.b);
    return add(act, alpha_eye);
}

void ISdpAttention::forward(FlowState& s, const Tensor*) {
    const Tensor x = s.h;
    Tensor y = apply_mask(x, mask_, Half::A);
    for (std::int64_t p = 0; p < grid_.count(); ++p) {
        for (int hh = 0; hh < heads(); ++hh) {
            const auto [c0, c1] = head_ranges_[std::size_t(hh)];
            Tensor wt = weights_block(x, p, hh);
            Tensor xb = gather_half(x, mask_, Half::B, &grid_, p, c0, c1);
            Tensor yb = matmul(wt, xb);
            y = add(y, scatter_half(yb, mask_, Half::B, x.shape, &grid_, p, c0, c1));
            try {
                s.logdet = add(s.logdet, mul(logabsdet_batched(wt), double(c1 - c0)));
            } catch (const SingularMatrixError& e) {
                throw SingularMatrixError(name() + ": singular attention block at patch " +
                                              std::to_string(p) + ", head " + std::to_string(hh) +
                                              ": " + e.what(),
                                          e.pivot_index);
            }
        }
    }
    s.h = y;
}

void ISdpAttention::inverse(InverseState& s, const Tensor*) const {
    const Tensor& y = s.h;
    // half A is unchanged; the blocks are recomputed from it exactly
    Tensor x = apply_mask(y, mask_, Half::A);
    const std::int64_t B = y.shape.b;
    for (std::int64_t p = 0; p < grid_.count(); ++p) {
        for (int hh = 0; hh < heads(); ++hh) {
            const auto [c0, c1] = head_ranges_[std::size_t(hh)];
            Tensor wt = weights_block(x, p, hh);  // (B,1,m,m)
            Tensor yb = gather_half(y, mask_, Half::B, &grid_, p, c0, c1);
            Tensor xb(yb.shape);
            const std::int64_t cols = c1 - c0;
            for (std::int64_t b = 0; b < B; ++b) {
                std::vector<double> block(wt.data.begin() + b * m_ * m_,
                                          wt.data.begin() + (b + 1) * m_ * m_);
                LuFactors f;
                try {
                    f = lu_factor(int(m_), block);
                } catch (const SingularMatrixError& e) {
                    throw SingularMatrixError(name() + ": singular attention block at patch " +
                                                  std::to_string(p) + ", head " +
                                                  std::to_string(hh) + ": " + e.what(),
                                              e.pivot_index);
                }
                Mat rhs(static_cast<int>(m_), static_cast<int>(cols));
                for (std::int64_t r = 0; r < m_; ++r) {
                    for (std::int64_t cc = 0; cc < cols; ++cc) {
                        rhs.at(int(r), int(cc)) = yb.data[std::size_t((b * m_ + r) * cols + cc)];
                    }
                }
                const Mat sol = lu_solve(f, rhs);
                for (std::int64_t r = 0; r < m_; ++r) {
                    for (std::int64_t cc = 0; cc < cols; ++cc) {
                        xb.data[std::size_t((b * m_ + r) * cols + cc)] = sol.at(int(r), int(cc));
                    }
                }
            }
            x = add(x, scatter_half(xb, mask_, Half::B, y.shape, &grid_, p, c0, c1));
        }
    }
    s.h = x;
}

void ISdpAttention::params(ParamMap& out) {
    for (int hh = 0; hh < heads(); ++hh) {
        out.emplace_back(name() + ".wq" + std::to_string(hh), &wq[std::size_t(hh)]);
        out.emplace_back(name() + ".wk" + std::to_string(hh), &wk[std::size_t(hh)]);
    }
    out.emplace_back(name() + ".log_d", &log_d);
    out.emplace_back(name() + ".alpha_raw", &alpha_raw);
}

}  // namespace attnflow
