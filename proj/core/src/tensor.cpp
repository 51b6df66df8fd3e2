#include "attnflow/tensor.hpp"

#include <cmath>
#include <cstdlib>

namespace attnflow {

std::string Shape::str() const {
    return "(" + std::to_string(b) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
}

void check_finite(const std::vector<double>& v, const char* context) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw NumericalError(std::string(context) + ": non-finite value at flat index " +
                                 std::to_string(i));
        }
    }
}

void check_finite(const Tensor& t, const char* context) {
    check_finite(t.data, context);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!(a.shape == b.shape)) {
        throw ShapeError("max_abs_diff: " + a.shape.str() + " vs " + b.shape.str());
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    }
    return m;
}

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::fabs(v));
    return m;
}

}  // namespace attnflow
