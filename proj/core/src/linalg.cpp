#include "attnflow/linalg.hpp"

#include <cmath>

namespace attnflow {

Mat Mat::identity(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

SquareMatrix::SquareMatrix(int n, std::vector<double> entries) : n_(n), a_(std::move(entries)) {
    if (static_cast<int>(a_.size()) != n * n) {
        throw ShapeError("SquareMatrix: entry count " + std::to_string(a_.size()) +
                         " does not match order " + std::to_string(n));
    }
}

SquareMatrix SquareMatrix::identity(int n) {
    SquareMatrix m(n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

const LuFactors& SquareMatrix::lu() const {
    if (!cache_) cache_ = lu_factor(n_, a_);
    return *cache_;
}

LuFactors lu_factor(int n, const std::vector<double>& a, double pivot_tol) {
    check_finite(a, "lu_factor");
    LuFactors f;
    f.n = n;
    f.lu = a;
    f.perm.resize(n);
    for (int i = 0; i < n; ++i) f.perm[i] = i;

    auto& lu = f.lu;
    for (int k = 0; k < n; ++k) {
        // partial pivoting: largest magnitude in column k at or below the diagonal
        int piv = k;
        double best = std::fabs(lu[std::size_t(k) * n + k]);
        for (int i = k + 1; i < n; ++i) {
            const double v = std::fabs(lu[std::size_t(i) * n + k]);
            if (v > best) {
                best = v;
                piv = i;
            }
        }
        if (best < pivot_tol) {
            throw SingularMatrixError(
                "singular matrix: pivot " + std::to_string(best) + " below threshold at column " +
                    std::to_string(k),
                k);
        }
        if (piv != k) {
            for (int j = 0; j < n; ++j) {
                std::swap(lu[std::size_t(k) * n + j], lu[std::size_t(piv) * n + j]);
            }
            std::swap(f.perm[k], f.perm[piv]);
            f.perm_sign = -f.perm_sign;
        }
        const double d = lu[std::size_t(k) * n + k];
        for (int i = k + 1; i < n; ++i) {
            const double m = lu[std::size_t(i) * n + k] / d;
            lu[std::size_t(i) * n + k] = m;
            for (int j = k + 1; j < n; ++j) {
                lu[std::size_t(i) * n + j] -= m * lu[std::size_t(k) * n + j];
            }
        }
    }
    return f;
}

Mat lu_solve(const LuFactors& f, const Mat& rhs) {
    const int n = f.n;
    if (rhs.rows != n) {
        throw ShapeError("lu_solve: rhs has " + std::to_string(rhs.rows) + " rows, expected " +
                         std::to_string(n));
    }
    Mat x(n, rhs.cols);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < rhs.cols; ++j) x.at(i, j) = rhs.at(f.perm[i], j);
    }
    // forward substitution (unit lower)
    for (int i = 1; i < n; ++i) {
        for (int k = 0; k < i; ++k) {
            const double m = f.lu[std::size_t(i) * n + k];
            if (m == 0.0) continue;
            for (int j = 0; j < rhs.cols; ++j) x.at(i, j) -= m * x.at(k, j);
        }
    }
    // back substitution
    for (int i = n - 1; i >= 0; --i) {
        for (int k = i + 1; k < n; ++k) {
            const double m = f.lu[std::size_t(i) * n + k];
            if (m == 0.0) continue;
            for (int j = 0; j < rhs.cols; ++j) x.at(i, j) -= m * x.at(k, j);
        }
        const double d = f.lu[std::size_t(i) * n + i];
        for (int j = 0; j < rhs.cols; ++j) x.at(i, j) /= d;
    }
    return x;
}

double lu_logabsdet(const LuFactors& f, int* sign) {
    double logabs = 0.0;
    int s = f.perm_sign;
    for (int i = 0; i < f.n; ++i) {
        const double d = f.lu[std::size_t(i) * f.n + i];
        logabs += std::log(std::fabs(d));
        if (d < 0.0) s = -s;
    }
    if (sign) *sign = s;
    return logabs;
}

LogDetSolve lu_logdet_solve(const SquareMatrix& m, const Mat* rhs) {
    const LuFactors& f = m.lu();
    LogDetSolve out;
    out.logabsdet = lu_logabsdet(f, &out.sign);
    if (rhs) out.solution = lu_solve(f, *rhs);
    return out;
}

SquareMatrix random_rotation(int n, Rng& rng) {
    // Householder QR of a Gaussian matrix; Q columns are then sign-fixed so
    // that R has positive diagonal, and det is forced to +1 by flipping one
    // column if needed.
    Mat a(n, n);
    for (auto& v : a.a) v = rng.normal();

    Mat q = Mat::identity(n);
    for (int k = 0; k < n; ++k) {
        // Householder vector for column k
        double norm = 0.0;
        for (int i = k; i < n; ++i) norm += a.at(i, k) * a.at(i, k);
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        const double alpha = a.at(k, k) >= 0 ? -norm : norm;
        std::vector<double> v(n, 0.0);
        v[k] = a.at(k, k) - alpha;
        for (int i = k + 1; i < n; ++i) v[i] = a.at(i, k);
        double vnorm2 = 0.0;
        for (int i = k; i < n; ++i) vnorm2 += v[i] * v[i];
        if (vnorm2 == 0.0) continue;
        // apply H = I - 2 v v^T / (v^T v) to A (left) and accumulate into Q
        for (int j = 0; j < n; ++j) {
            double dot = 0.0;
            for (int i = k; i < n; ++i) dot += v[i] * a.at(i, j);
            const double f = 2.0 * dot / vnorm2;
            for (int i = k; i < n; ++i) a.at(i, j) -= f * v[i];
        }
        for (int j = 0; j < n; ++j) {
            double dot = 0.0;
            for (int i = k; i < n; ++i) dot += v[i] * q.at(j, i);
            const double f = 2.0 * dot / vnorm2;
            for (int i = k; i < n; ++i) q.at(j, i) -= f * v[i];
        }
    }
    // fix signs so diag(R) > 0
    for (int k = 0; k < n; ++k) {
        if (a.at(k, k) < 0.0) {
            for (int i = 0; i < n; ++i) q.at(i, k) = -q.at(i, k);
        }
    }
    // force det(Q) = +1
    SquareMatrix out(n, q.a);
    int sign = 1;
    lu_logabsdet(out.lu(), &sign);
    if (sign < 0) {
        SquareMatrix flipped(n, q.a);
        for (int i = 0; i < n; ++i) flipped.at(i, 0) = -flipped.at(i, 0);
        return flipped;
    }
    return out;
}

}  // namespace attnflow
