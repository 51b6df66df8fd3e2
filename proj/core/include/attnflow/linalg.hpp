#pragma once

#include <optional>
#include <vector>

#include "attnflow/rng.hpp"
#include "attnflow/tensor.hpp"

namespace attnflow {

// Minimal dense matrix used at the linear-algebra boundary (RHS blocks,
// solutions). Row-major.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), a(std::size_t(r) * c, fill) {}
    double& at(int i, int j) { return a[std::size_t(i) * cols + j]; }
    double at(int i, int j) const { return a[std::size_t(i) * cols + j]; }
    static Mat identity(int n);
};

// Packed LU factorization with partial pivoting: P*A = L*U where L is unit
// lower triangular and U upper triangular, both stored in `lu`.
struct LuFactors {
    int n = 0;
    std::vector<double> lu;    // n*n packed L (strict lower) and U (upper incl. diag)
    std::vector<int> perm;     // row permutation applied to A: row i of PA is row perm[i] of A
    int perm_sign = 1;         // det(P)
};

// Order-n square matrix with a lazily cached LU factorization.
class SquareMatrix {
public:
    SquareMatrix() = default;
    explicit SquareMatrix(int n, double fill = 0.0) : n_(n), a_(std::size_t(n) * n, fill) {}
    SquareMatrix(int n, std::vector<double> entries);
    static SquareMatrix identity(int n);

    int order() const { return n_; }
    double& at(int i, int j) {
        cache_.reset();
        return a_[std::size_t(i) * n_ + j];
    }
    double at(int i, int j) const { return a_[std::size_t(i) * n_ + j]; }
    const std::vector<double>& entries() const { return a_; }

    // Cached factorization; throws SingularMatrixError on a pivot < 1e-12.
    const LuFactors& lu() const;

private:
    int n_ = 0;
    std::vector<double> a_;
    mutable std::optional<LuFactors> cache_;
};

struct LogDetSolve {
    int sign = 1;              // sign of det
    double logabsdet = 0.0;    // log |det|
    std::optional<Mat> solution;
};

// Factor a raw n*n buffer in place. Throws SingularMatrixError carrying the
// pivot index when the best pivot magnitude falls below `pivot_tol`.
LuFactors lu_factor(int n, const std::vector<double>& a, double pivot_tol = 1e-12);

// Solve L U x = P b for one or more right-hand sides.
Mat lu_solve(const LuFactors& f, const Mat& rhs);

double lu_logabsdet(const LuFactors& f, int* sign = nullptr);

// sign, log|det|, and optionally the solution of m * x = rhs.
LogDetSolve lu_logdet_solve(const SquareMatrix& m, const Mat* rhs = nullptr);

// Random rotation (orthogonal matrix with |det| = 1) from a seeded draw,
// via Householder QR of a Gaussian matrix.
SquareMatrix random_rotation(int n, Rng& rng);

}  // namespace attnflow
