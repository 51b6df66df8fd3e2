#pragma once

#include <cstdint>
#include <vector>

#include "attnflow/ops.hpp"
#include "attnflow/tensor.hpp"

namespace attnflow {

enum class MaskKind { Spatial2D, Permuted3D };

// Half A is the conditioning half (left unchanged / read from), half B is the
// transformed half.
enum class Half { A, B };

inline Half other_half(Half h) { return h == Half::A ? Half::B : Half::A; }

// Rectangular grid of patches tiling (H, W): rows x cols patches.
struct PatchGrid {
    std::int64_t rows = 1;
    std::int64_t cols = 1;
    std::int64_t count() const { return rows * cols; }
};

// Binary partition of tensor positions. 2D masks partition the (H,W) plane by
// parity and broadcast over channels and batch; 3D masks partition the full
// (C,H,W) volume via a seeded global permutation.
class CheckerboardMask {
public:
    static CheckerboardMask make_2d(std::int64_t h, std::int64_t w, int phase);
    static CheckerboardMask make_3d(std::int64_t c, std::int64_t h, std::int64_t w,
                                    std::uint64_t seed);

    MaskKind kind() const { return kind_; }
    std::int64_t channels() const { return c_; }  // 0 for 2D masks
    std::int64_t height() const { return h_; }
    std::int64_t width() const { return w_; }
    std::uint64_t phase_or_seed() const { return phase_or_seed_; }

    // flattened position index: i*W+j (2D) or (c*H+i)*W+j (3D)
    bool in_half_a(std::int64_t flat) const { return bits_[std::size_t(flat)] != 0; }
    std::int64_t count(Half h) const;

    // Positions of a half in canonical order (row-major over (i,j), and over
    // (c,i,j) for 3D masks). With a grid, restricted to one patch.
    std::vector<std::int64_t> positions(Half h) const;
    std::vector<std::int64_t> positions(Half h, const PatchGrid& grid,
                                        std::int64_t patch_index) const;

    // 0/1 tensor of the half's indicator, shaped (1,1,H,W) or (1,C,H,W).
    Tensor indicator(Half h) const;

private:
    MaskKind kind_ = MaskKind::Spatial2D;
    std::int64_t c_ = 0, h_ = 0, w_ = 0;
    std::uint64_t phase_or_seed_ = 0;
    std::vector<std::uint8_t> bits_;  // 1 = half A
};

// Zeroes entries outside the chosen half. 2D masks broadcast over batch and
// channels; 3D masks require matching (C,H,W).
Tensor apply_mask(const Tensor& x, const CheckerboardMask& m, Half half);

// Gathers a half into a (B,1,rows,cols) matrix: rows enumerate the half's
// positions in canonical order; cols are channels [c0,c1) for 2D masks and a
// single column for 3D masks. With a grid, only one patch's positions.
Tensor gather_half(const Tensor& x, const CheckerboardMask& m, Half half,
                   const PatchGrid* grid = nullptr, std::int64_t patch_index = 0,
                   std::int64_t c0 = 0, std::int64_t c1 = -1);

// Adjoint of gather_half: places matrix rows back at the half's positions,
// zeros elsewhere.
Tensor scatter_half(const Tensor& rows, const CheckerboardMask& m, Half half, Shape out_shape,
                    const PatchGrid* grid = nullptr, std::int64_t patch_index = 0,
                    std::int64_t c0 = 0, std::int64_t c1 = -1);

// Routes per-position values across the split: the k-th half-B position
// receives the value at the k-th half-A position; half-A positions pass
// through. Input and output shaped (B,1,H,W); 2D masks only.
Tensor pair_halves(const Tensor& values, const CheckerboardMask& m);

}  // namespace attnflow
