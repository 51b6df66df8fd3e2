#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnflow/errors.hpp"

namespace attnflow {

// Extents of a rank-4 tensor: (batch, channel, height, width).
// Vectors and matrices are embedded as degenerate shapes, e.g. a per-channel
// vector is (1,C,1,1) and an m-by-n matrix is (1,1,m,n).
struct Shape {
    std::int64_t b = 0;
    std::int64_t c = 0;
    std::int64_t h = 0;
    std::int64_t w = 0;

    Shape() = default;
    Shape(std::int64_t b_, std::int64_t c_, std::int64_t h_, std::int64_t w_)
        : b(b_), c(c_), h(h_), w(w_) {}

    std::int64_t numel() const { return b * c * h * w; }
    bool operator==(const Shape& o) const = default;
    std::string str() const;
};

// Dense rank-4 tensor of 64-bit floats, contiguous row-major (B,C,H,W).
// Values are immutable by convention once handed to another component; the
// tape fields link a tensor to the gradient tape that produced it.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0)
        : shape(s), data(static_cast<std::size_t>(s.numel()), fill) {
        if (s.b < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
            throw ShapeError("tensor shape has negative extent " + s.str());
        }
    }
    Tensor(Shape s, std::vector<double> values) : shape(s), data(std::move(values)) {
        if (static_cast<std::int64_t>(data.size()) != s.numel()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + s.str());
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape(1, 1, 1, 1), {v}); }

    std::int64_t numel() const { return shape.numel(); }
    bool is_scalar() const { return numel() == 1; }

    std::size_t index(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return static_cast<std::size_t>(((b * shape.c + c) * shape.h + h) * shape.w + w);
    }
    double& at(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) {
        return data[index(b, c, h, w)];
    }
    double at(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data[index(b, c, h, w)];
    }

    Shape shape;
    std::vector<double> data;

    // Tape linkage; a tensor is tracked by a tape iff tape_epoch matches the
    // tape's epoch. Stale ids from consumed tapes are ignored.
    std::int32_t tape_id = -1;
    std::uint64_t tape_epoch = 0;
};

// Throws NumericalError naming `context` if any entry of t is NaN/Inf.
void check_finite(const Tensor& t, const char* context);
void check_finite(const std::vector<double>& v, const char* context);

// Max-abs difference between equal-shaped tensors.
double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);

}  // namespace attnflow
