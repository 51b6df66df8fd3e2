#include "attnflow/mask.hpp"

#include "attnflow/rng.hpp"

namespace attnflow {

CheckerboardMask CheckerboardMask::make_2d(std::int64_t h, std::int64_t w, int phase) {
    if (h < 1 || w < 1) throw ShapeError("make_mask_2d: H,W must be >= 1");
    if (phase != 0 && phase != 1) throw DomainError("make_mask_2d: phase must be 0 or 1");
    CheckerboardMask m;
    m.kind_ = MaskKind::Spatial2D;
    m.c_ = 0;
    m.h_ = h;
    m.w_ = w;
    m.phase_or_seed_ = std::uint64_t(phase);
    m.bits_.resize(std::size_t(h * w));
    for (std::int64_t i = 0; i < h; ++i) {
        for (std::int64_t j = 0; j < w; ++j) {
            m.bits_[std::size_t(i * w + j)] = ((i + j + phase) % 2 == 0) ? 1 : 0;
        }
    }
    return m;
}

CheckerboardMask CheckerboardMask::make_3d(std::int64_t c, std::int64_t h, std::int64_t w,
                                           std::uint64_t seed) {
    const std::int64_t n = c * h * w;
    if (n < 2) throw ShapeError("make_mask_3d: C*H*W must be >= 2");
    CheckerboardMask m;
    m.kind_ = MaskKind::Permuted3D;
    m.c_ = c;
    m.h_ = h;
    m.w_ = w;
    m.phase_or_seed_ = seed;
    m.bits_.assign(std::size_t(n), 0);

    // seeded Fisher-Yates permutation of all positions; the first ceil(n/2)
    // permuted indices form half A
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) perm[std::size_t(i)] = i;
    Rng rng(seed);
    for (std::int64_t i = n - 1; i > 0; --i) {
        const std::int64_t j = std::int64_t(rng.below(std::uint64_t(i) + 1));
        std::swap(perm[std::size_t(i)], perm[std::size_t(j)]);
    }
    const std::int64_t half = (n + 1) / 2;
    for (std::int64_t k = 0; k < half; ++k) m.bits_[std::size_t(perm[std::size_t(k)])] = 1;
    return m;
}

std::int64_t CheckerboardMask::count(Half h) const {
    std::int64_t a = 0;
    for (auto b : bits_) a += b;
    return h == Half::A ? a : std::int64_t(bits_.size()) - a;
}

std::vector<std::int64_t> CheckerboardMask::positions(Half h) const {
    std::vector<std::int64_t> out;
    out.reserve(bits_.size() / 2 + 1);
    const bool want = (h == Half::A);
    for (std::size_t k = 0; k < bits_.size(); ++k) {
        if ((bits_[k] != 0) == want) out.push_back(std::int64_t(k));
    }
    return out;
}

std::vector<std::int64_t> CheckerboardMask::positions(Half h, const PatchGrid& grid,
                                                      std::int64_t patch_index) const {
    if (kind_ != MaskKind::Spatial2D) {
        throw ShapeError("mask positions: patches require a 2D mask");
    }
    if (h_ % grid.rows != 0 || w_ % grid.cols != 0) {
        throw ShapeError("patch grid " + std::to_string(grid.rows) + "x" +
                         std::to_string(grid.cols) + " does not tile (" + std::to_string(h_) +
                         "," + std::to_string(w_) + ")");
    }
    if (patch_index < 0 || patch_index >= grid.count()) {
        throw ShapeError("patch index " + std::to_string(patch_index) + " out of range");
    }
    const std::int64_t ph = h_ / grid.rows, pw = w_ / grid.cols;
    const std::int64_t pi = patch_index / grid.cols, pj = patch_index % grid.cols;
    std::vector<std::int64_t> out;
    const bool want = (h == Half::A);
    for (std::int64_t i = pi * ph; i < (pi + 1) * ph; ++i) {
        for (std::int64_t j = pj * pw; j < (pj + 1) * pw; ++j) {
            const std::int64_t flat = i * w_ + j;
            if ((bits_[std::size_t(flat)] != 0) == want) out.push_back(flat);
        }
    }
    return out;
}

Tensor CheckerboardMask::indicator(Half h) const {
    const bool want = (h == Half::A);
    if (kind_ == MaskKind::Spatial2D) {
        Tensor t(Shape(1, 1, h_, w_));
        for (std::size_t k = 0; k < bits_.size(); ++k) {
            t.data[k] = ((bits_[k] != 0) == want) ? 1.0 : 0.0;
        }
        return t;
    }
    Tensor t(Shape(1, c_, h_, w_));
    for (std::size_t k = 0; k < bits_.size(); ++k) {
        t.data[k] = ((bits_[k] != 0) == want) ? 1.0 : 0.0;
    }
    return t;
}

namespace {

void check_mask_compat(const Tensor& x, const CheckerboardMask& m) {
    if (m.kind() == MaskKind::Spatial2D) {
        if (x.shape.h != m.height() || x.shape.w != m.width()) {
            throw ShapeError("mask (" + std::to_string(m.height()) + "," +
                             std::to_string(m.width()) + ") vs tensor " + x.shape.str());
        }
    } else {
        if (x.shape.c != m.channels() || x.shape.h != m.height() || x.shape.w != m.width()) {
            throw ShapeError("3D mask (" + std::to_string(m.channels()) + "," +
                             std::to_string(m.height()) + "," + std::to_string(m.width()) +
                             ") vs tensor " + x.shape.str());
        }
    }
}

}  // namespace

Tensor apply_mask(const Tensor& x, const CheckerboardMask& m, Half half) {
    check_mask_compat(x, m);
    const std::int64_t B = x.shape.b, C = x.shape.c, P = x.shape.h * x.shape.w;
    Tensor y(x.shape);
    const bool want_a = (half == Half::A);
    auto keep = [&](std::int64_t c, std::int64_t p) {
        const std::int64_t flat = (m.kind() == MaskKind::Spatial2D) ? p : c * P + p;
        return m.in_half_a(flat) == want_a;
    };
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double* xd = x.data.data() + (b * C + c) * P;
            double* yd = y.data.data() + (b * C + c) * P;
            for (std::int64_t p = 0; p < P; ++p) yd[p] = keep(c, p) ? xd[p] : 0.0;
        }
    }

    Tape* tp = active_tape();
    if (tp && tp->tracks(x)) {
        const int xi = tp->node_of(x);
        // capture the kept-index pattern as a flat bitmap over one sample
        auto bitmap = std::make_shared<std::vector<std::uint8_t>>(std::size_t(C * P));
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t p = 0; p < P; ++p) {
                (*bitmap)[std::size_t(c * P + p)] = keep(c, p) ? 1 : 0;
            }
        }
        const std::int64_t per = C * P;
        tp->emit(y, [xi, bitmap, B, per](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            std::vector<double> gx(g.size(), 0.0);
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t k = 0; k < per; ++k) {
                    if ((*bitmap)[std::size_t(k)]) {
                        gx[std::size_t(b * per + k)] = g[std::size_t(b * per + k)];
                    }
                }
            }
            t.accumulate(xi, gx);
        });
    }
    return y;
}

namespace {

// Resolves the (channel offset, position list) pair used by gather/scatter.
struct GatherPlan {
    std::vector<std::int64_t> pos;  // flattened; spatial for 2D, (c*H+i)*W+j for 3D
    std::int64_t c0 = 0, c1 = 0;    // channel column range (2D); [0,1) pseudo-range for 3D
    bool spatial = true;
};

GatherPlan make_plan(const Tensor& x, const CheckerboardMask& m, Half half, const PatchGrid* grid,
                     std::int64_t patch_index, std::int64_t c0, std::int64_t c1) {
    check_mask_compat(x, m);
    GatherPlan plan;
    if (m.kind() == MaskKind::Spatial2D) {
        plan.spatial = true;
        plan.c0 = c0;
        plan.c1 = (c1 < 0) ? x.shape.c : c1;
        if (plan.c0 < 0 || plan.c1 <= plan.c0 || plan.c1 > x.shape.c) {
            throw ShapeError("gather_half: channel range [" + std::to_string(plan.c0) + "," +
                             std::to_string(plan.c1) + ") of " + x.shape.str());
        }
        plan.pos = grid ? m.positions(half, *grid, patch_index) : m.positions(half);
    } else {
        if (grid) throw ShapeError("gather_half: patches require a 2D mask");
        if (c0 != 0 || (c1 != -1 && c1 != 1)) {
            throw ShapeError("gather_half: channel ranges require a 2D mask");
        }
        plan.spatial = false;
        plan.c0 = 0;
        plan.c1 = 1;
        plan.pos = m.positions(half);
    }
    return plan;
}

}  // namespace

Tensor gather_half(const Tensor& x, const CheckerboardMask& m, Half half, const PatchGrid* grid,
                   std::int64_t patch_index, std::int64_t c0, std::int64_t c1) {
    GatherPlan plan = make_plan(x, m, half, grid, patch_index, c0, c1);
    const std::int64_t B = x.shape.b, C = x.shape.c, P = x.shape.h * x.shape.w;
    const std::int64_t rows = std::int64_t(plan.pos.size());
    const std::int64_t cols = plan.c1 - plan.c0;
    Tensor y(Shape(B, 1, rows, cols));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t cc = 0; cc < cols; ++cc) {
                const std::int64_t src =
                    plan.spatial ? (b * C + plan.c0 + cc) * P + plan.pos[std::size_t(r)]
                                 : b * C * P + plan.pos[std::size_t(r)];
                y.data[std::size_t((b * rows + r) * cols + cc)] = x.data[std::size_t(src)];
            }
        }
    }

    Tape* tp = active_tape();
    if (tp && tp->tracks(x)) {
        const int xi = tp->node_of(x);
        auto pos = std::make_shared<std::vector<std::int64_t>>(std::move(plan.pos));
        const std::int64_t pc0 = plan.c0;
        const bool spatial = plan.spatial;
        const Shape xs = x.shape;
        tp->emit(y, [xi, pos, pc0, spatial, xs, rows, cols](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            const std::int64_t C = xs.c, P = xs.h * xs.w;
            std::vector<double> gx(std::size_t(xs.numel()), 0.0);
            for (std::int64_t b = 0; b < xs.b; ++b) {
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t cc = 0; cc < cols; ++cc) {
                        const std::int64_t dst =
                            spatial ? (b * C + pc0 + cc) * P + (*pos)[std::size_t(r)]
                                    : b * C * P + (*pos)[std::size_t(r)];
                        gx[std::size_t(dst)] += g[std::size_t((b * rows + r) * cols + cc)];
                    }
                }
            }
            t.accumulate(xi, gx);
        });
    }
    return y;
}

Tensor scatter_half(const Tensor& rows_in, const CheckerboardMask& m, Half half, Shape out_shape,
                    const PatchGrid* grid, std::int64_t patch_index, std::int64_t c0,
                    std::int64_t c1) {
    Tensor probe(out_shape);  // shape carrier for plan validation
    GatherPlan plan = make_plan(probe, m, half, grid, patch_index, c0, c1);
    const std::int64_t rows = std::int64_t(plan.pos.size());
    const std::int64_t cols = plan.c1 - plan.c0;
    if (!(rows_in.shape == Shape(out_shape.b, 1, rows, cols))) {
        throw ShapeError("scatter_half: rows " + rows_in.shape.str() + ", expected (" +
                         std::to_string(out_shape.b) + ",1," + std::to_string(rows) + "," +
                         std::to_string(cols) + ")");
    }
    const std::int64_t B = out_shape.b, C = out_shape.c, P = out_shape.h * out_shape.w;
    Tensor y(out_shape);
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t cc = 0; cc < cols; ++cc) {
                const std::int64_t dst = plan.spatial
                                             ? (b * C + plan.c0 + cc) * P + plan.pos[std::size_t(r)]
                                             : b * C * P + plan.pos[std::size_t(r)];
                y.data[std::size_t(dst)] = rows_in.data[std::size_t((b * rows + r) * cols + cc)];
            }
        }
    }

    Tape* tp = active_tape();
    if (tp && tp->tracks(rows_in)) {
        const int ri = tp->node_of(rows_in);
        auto pos = std::make_shared<std::vector<std::int64_t>>(std::move(plan.pos));
        const std::int64_t pc0 = plan.c0;
        const bool spatial = plan.spatial;
        tp->emit(y, [ri, pos, pc0, spatial, out_shape, rows, cols](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            const std::int64_t C = out_shape.c, P = out_shape.h * out_shape.w;
            std::vector<double> gr(std::size_t(out_shape.b * rows * cols));
            for (std::int64_t b = 0; b < out_shape.b; ++b) {
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t cc = 0; cc < cols; ++cc) {
                        const std::int64_t src =
                            spatial ? (b * C + pc0 + cc) * P + (*pos)[std::size_t(r)]
                                    : b * C * P + (*pos)[std::size_t(r)];
                        gr[std::size_t((b * rows + r) * cols + cc)] = g[std::size_t(src)];
                    }
                }
            }
            t.accumulate(ri, gr);
        });
    }
    return y;
}

Tensor pair_halves(const Tensor& values, const CheckerboardMask& m) {
    if (m.kind() != MaskKind::Spatial2D) throw ShapeError("pair_halves: 2D masks only");
    if (values.shape.c != 1 || values.shape.h != m.height() || values.shape.w != m.width()) {
        throw ShapeError("pair_halves: expected (B,1,H,W) matching mask, got " +
                         values.shape.str());
    }
    const auto pos_a = m.positions(Half::A);
    const auto pos_b = m.positions(Half::B);
    const std::int64_t B = values.shape.b, P = values.shape.h * values.shape.w;

    // source index per output position: identity on half A, k-th A for k-th B
    auto src_of = std::make_shared<std::vector<std::int64_t>>(std::size_t(P));
    for (std::int64_t p = 0; p < P; ++p) (*src_of)[std::size_t(p)] = p;
    for (std::size_t k = 0; k < pos_b.size(); ++k) {
        (*src_of)[std::size_t(pos_b[k])] = pos_a[k];
    }

    Tensor y(values.shape);
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t p = 0; p < P; ++p) {
            y.data[std::size_t(b * P + p)] =
                values.data[std::size_t(b * P + (*src_of)[std::size_t(p)])];
        }
    }

    Tape* tp = active_tape();
    if (tp && tp->tracks(values)) {
        const int vi = tp->node_of(values);
        tp->emit(y, [vi, src_of, B, P](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            std::vector<double> gv(g.size(), 0.0);
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t p = 0; p < P; ++p) {
                    gv[std::size_t(b * P + (*src_of)[std::size_t(p)])] +=
                        g[std::size_t(b * P + p)];
                }
            }
            t.accumulate(vi, gv);
        });
    }
    return y;
}

}  // namespace attnflow
