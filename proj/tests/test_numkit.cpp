#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <algorithm>

#include "attnflow/linalg.hpp"
#include "attnflow/ops.hpp"
#include "attnflow/rng.hpp"
#include "attnflow/tape.hpp"

using namespace attnflow;

namespace {

// independent triple-loop reference for the 1x1 convolution
Tensor conv1x1_reference(const Tensor& x, const Tensor& w) {
    const std::int64_t B = x.shape.b, Ci = x.shape.c, H = x.shape.h, W = x.shape.w;
    const std::int64_t Co = w.shape.h;
    Tensor y(Shape(B, Co, H, W));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t o = 0; o < Co; ++o) {
            for (std::int64_t i = 0; i < H; ++i) {
                for (std::int64_t j = 0; j < W; ++j) {
                    double acc = 0.0;
                    for (std::int64_t c = 0; c < Ci; ++c) {
                        acc += w.data[std::size_t(o * Ci + c)] * x.at(b, c, i, j);
                    }
                    y.at(b, o, i, j) = acc;
                }
            }
        }
    }
    return y;
}

// cofactor-expansion determinant for n <= 4
double det_cofactor(const std::vector<double>& a, int n) {
    if (n == 1) return a[0];
    double det = 0.0;
    for (int j = 0; j < n; ++j) {
        std::vector<double> minor;
        minor.reserve(std::size_t((n - 1) * (n - 1)));
        for (int r = 1; r < n; ++r) {
            for (int c = 0; c < n; ++c) {
                if (c == j) continue;
                minor.push_back(a[std::size_t(r * n + c)]);
            }
        }
        const double sign = (j % 2 == 0) ? 1.0 : -1.0;
        det += sign * a[std::size_t(j)] * det_cofactor(minor, n - 1);
    }
    return det;
}

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

double loss_value(const OpFn& f, const std::vector<Tensor>& inputs, const Tensor& w) {
    return sum_all(mul(f(inputs), w)).data[0];
}

// max relative error between tape adjoints and central differences, taken
// over every element of every input
double max_grad_err(const OpFn& f, std::vector<Tensor> inputs, std::uint64_t seed) {
    Rng rng(seed);
    Tensor probe = f(inputs);
    Tensor w = normal_tensor(probe.shape, rng);

    std::vector<Tensor> grads;
    {
        Tape tape;
        TapeScope scope(tape);
        for (auto& t : inputs) tape.watch(t);
        Tensor loss = sum_all(mul(f(inputs), w));
        tape.backward(loss);
        for (auto& t : inputs) grads.push_back(tape.grad(t));
    }

    const double eps = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t j = 0; j < inputs[i].data.size(); ++j) {
            const double keep = inputs[i].data[j];
            inputs[i].data[j] = keep + eps;
            const double up = loss_value(f, inputs, w);
            inputs[i].data[j] = keep - eps;
            const double dn = loss_value(f, inputs, w);
            inputs[i].data[j] = keep;
            const double fd = (up - dn) / (2.0 * eps);
            const double an = grads[i].data[j];
            const double err = std::fabs(an - fd);
            if (err > 1e-8) {
                worst = std::max(worst, err / std::max({std::fabs(an), std::fabs(fd), 1e-8}));
            }
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("elementwise basics") {
    Tensor x(Shape(1, 1, 2, 2), {0.0, 0.0, 0.0, 0.0});
    Tensor s = sigmoid(x);
    for (const double v : s.data) CHECK(v == 0.5);

    Rng rng(3);
    Tensor pos = uniform_tensor(Shape(1, 2, 3, 3), rng, 0.1, 5.0);
    CHECK(max_abs_diff(exp(log(pos)), pos) < 1e-12);

    // d(a*b)/da = b at a=2, b=3
    Tensor a = Tensor::scalar(2.0), b = Tensor::scalar(3.0);
    Tape tape;
    TapeScope scope(tape);
    tape.watch(a);
    Tensor y = mul(a, b);
    tape.backward(y);
    CHECK(tape.grad(a).data[0] == 3.0);
}

TEST_CASE("elementwise shape and domain errors") {
    Tensor a(Shape(1, 1, 2, 2), 1.0);
    Tensor b(Shape(1, 1, 2, 3), 1.0);
    CHECK_THROWS_AS(add(a, b), ShapeError);
    Tensor z(Shape(1, 1, 2, 2), 0.0);
    CHECK_THROWS_AS(div(a, z), DomainError);
    CHECK_THROWS_AS(log(z), DomainError);
    Tensor neg_t(Shape(1, 1, 2, 2), -1.0);
    CHECK_THROWS_AS(log(neg_t), DomainError);
}

TEST_CASE("scalar broadcast") {
    Tensor a(Shape(2, 1, 2, 2), 3.0);
    Tensor s = Tensor::scalar(2.0);
    Tensor y = mul(a, s);
    for (const double v : y.data) CHECK(v == 6.0);
    Tensor d = sub(1.0, a);
    for (const double v : d.data) CHECK(v == -2.0);
    Tensor q = div(6.0, a);
    for (const double v : q.data) CHECK(v == 2.0);
}

TEST_CASE("conv1x1 identity and permutation") {
    Rng rng(7);
    Tensor x = normal_tensor(Shape(1, 2, 3, 3), rng);
    Tensor eye(Shape(1, 1, 2, 2), {1, 0, 0, 1});
    CHECK(max_abs_diff(conv1x1(x, eye), x) == 0.0);

    Tensor swap(Shape(1, 1, 2, 2), {0, 1, 1, 0});
    Tensor y = conv1x1(x, swap);
    for (std::int64_t i = 0; i < 3; ++i) {
        for (std::int64_t j = 0; j < 3; ++j) {
            CHECK(y.at(0, 0, i, j) == x.at(0, 1, i, j));
            CHECK(y.at(0, 1, i, j) == x.at(0, 0, i, j));
        }
    }
}

TEST_CASE("conv1x1 matches triple-loop reference") {
    Rng rng(11);
    Tensor x = normal_tensor(Shape(1, 3, 2, 2), rng);
    Tensor w = normal_tensor(Shape(1, 1, 3, 3), rng);
    CHECK(max_abs_diff(conv1x1(x, w), conv1x1_reference(x, w)) < 1e-12);

    // rectangular weight
    Tensor w2 = normal_tensor(Shape(1, 1, 5, 3), rng);
    CHECK(max_abs_diff(conv1x1(x, w2), conv1x1_reference(x, w2)) < 1e-12);
}

TEST_CASE("channel_mean") {
    Tensor c(Shape(2, 3, 2, 2), 4.25);
    Tensor m = channel_mean(c);
    CHECK(m.shape == Shape(2, 1, 2, 2));
    for (const double v : m.data) CHECK(v == 4.25);

    Tensor two(Shape(1, 2, 1, 1), {1.0, 3.0});
    CHECK(channel_mean(two).data[0] == 2.0);

    Rng rng(13);
    Tensor x = normal_tensor(Shape(2, 5, 3, 3), rng);
    Tensor got = channel_mean(x);
    for (std::int64_t b = 0; b < 2; ++b) {
        for (std::int64_t i = 0; i < 3; ++i) {
            for (std::int64_t j = 0; j < 3; ++j) {
                double acc = 0.0;
                for (std::int64_t cix = 0; cix < 5; ++cix) acc += x.at(b, cix, i, j);
                CHECK(std::fabs(got.at(b, 0, i, j) - acc / 5.0) < 1e-13);
            }
        }
    }
}

TEST_CASE("lu_logdet_solve identity and diagonal") {
    SquareMatrix eye = SquareMatrix::identity(3);
    Mat rhs(3, 2);
    Rng rng(17);
    for (auto& v : rhs.a) v = rng.normal();
    const LogDetSolve r = lu_logdet_solve(eye, &rhs);
    CHECK(r.sign == 1);
    CHECK(r.logabsdet == 0.0);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 2; ++j) CHECK(r.solution->at(i, j) == rhs.at(i, j));
    }

    SquareMatrix d(2);
    d.at(0, 0) = 2.0;
    d.at(1, 1) = 0.5;
    const LogDetSolve rd = lu_logdet_solve(d);
    CHECK(rd.sign == 1);
    CHECK(std::fabs(rd.logabsdet) < 1e-15);
}

TEST_CASE("lu logdet matches cofactor expansion") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const int n = 4;
        std::vector<double> a(std::size_t(n * n));
        for (auto& v : a) v = rng.normal();
        // keep it well-conditioned
        for (int i = 0; i < n; ++i) a[std::size_t(i * n + i)] += 3.0;
        const double det = det_cofactor(a, n);
        SquareMatrix m(n, a);
        int sign = 0;
        const double logabs = lu_logabsdet(m.lu(), &sign);
        CHECK(std::fabs(logabs - std::log(std::fabs(det))) < 1e-9);
        CHECK(sign == (det < 0 ? -1 : 1));
    }
}

TEST_CASE("lu reconstruction and solve residuals over 1000 seeds") {
    int checked = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Rng rng(seed + 1);
        const int n = 1 + int(rng.below(8));
        std::vector<double> a(std::size_t(n * n));
        for (auto& v : a) v = rng.normal();
        for (int i = 0; i < n; ++i) a[std::size_t(i * n + i)] += 2.0 * (rng.uniform() < 0.5 ? -1 : 1);
        SquareMatrix m(n, a);
        LuFactors f;
        try {
            f = m.lu();
        } catch (const SingularMatrixError&) {
            continue;  // rare ill-conditioned draw
        }
        // P*A = L*U reconstruction
        double recon_err = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int k = 0; k <= std::min(i, j); ++k) {
                    const double l = (k == i) ? 1.0 : f.lu[std::size_t(i * n + k)];
                    acc += l * f.lu[std::size_t(k * n + j)];
                }
                recon_err = std::max(recon_err,
                                     std::fabs(acc - a[std::size_t(f.perm[std::size_t(i)] * n + j)]));
            }
        }
        CHECK(recon_err < 1e-10);

        Mat rhs(n, 2);
        double rhs_inf = 0.0;
        for (auto& v : rhs.a) {
            v = rng.normal();
            rhs_inf = std::max(rhs_inf, std::fabs(v));
        }
        const Mat x = lu_solve(f, rhs);
        double resid = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < 2; ++j) {
                double acc = 0.0;
                for (int k = 0; k < n; ++k) acc += a[std::size_t(i * n + k)] * x.at(k, j);
                resid = std::max(resid, std::fabs(acc - rhs.at(i, j)));
            }
        }
        CHECK(resid < 1e-9 * (1.0 + rhs_inf));
        ++checked;
    }
    CHECK(checked > 900);
}

TEST_CASE("singular matrix reports the pivot index") {
    SquareMatrix z(3);  // all zeros
    try {
        (void)z.lu();
        FAIL("expected SingularMatrixError");
    } catch (const SingularMatrixError& e) {
        CHECK(e.pivot_index == 0);
    }
}

TEST_CASE("backward on simple roots") {
    Tensor x(Shape(1, 1, 2, 2), {1.0, -2.0, 0.5, 3.0});
    {
        Tape tape;
        TapeScope scope(tape);
        tape.watch(x);
        Tensor loss = sum_all(x);
        tape.backward(loss);
        Tensor g = tape.grad(x);
        for (const double v : g.data) CHECK(v == 1.0);
    }
    {
        Tensor zero(Shape(1, 1, 2, 2), 0.0);
        Tape tape;
        TapeScope scope(tape);
        tape.watch(zero);
        Tensor loss = sum_all(sigmoid(zero));
        tape.backward(loss);
        Tensor g = tape.grad(zero);
        for (const double v : g.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
    }
}

TEST_CASE("backward error paths") {
    Tensor x(Shape(1, 1, 2, 2), 1.0);
    Tape tape;
    TapeScope scope(tape);
    tape.watch(x);
    Tensor y = mul(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);  // non-scalar root
    Tensor stranger = Tensor::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(stranger), Error);  // not on tape
}

TEST_CASE("gradcheck every differentiable op") {
    Rng rng(23);
    const Shape s(2, 3, 2, 2);
    auto randn = [&](Shape sh) { return normal_tensor(sh, rng); };
    auto positive = [&](Shape sh) { return uniform_tensor(sh, rng, 0.5, 2.0); };

    struct Case {
        const char* name;
        OpFn fn;
        std::vector<Tensor> inputs;
    };
    std::vector<Case> cases;
    cases.push_back({"add", [](const std::vector<Tensor>& in) { return add(in[0], in[1]); },
                     {randn(s), randn(s)}});
    cases.push_back({"sub", [](const std::vector<Tensor>& in) { return sub(in[0], in[1]); },
                     {randn(s), randn(s)}});
    cases.push_back({"mul", [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); },
                     {randn(s), randn(s)}});
    cases.push_back({"div", [](const std::vector<Tensor>& in) { return div(in[0], in[1]); },
                     {randn(s), positive(s)}});
    cases.push_back({"add_scalar_bcast",
                     [](const std::vector<Tensor>& in) { return add(in[0], in[1]); },
                     {randn(s), randn(Shape(1, 1, 1, 1))}});
    cases.push_back({"mul_scalar_bcast",
                     [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); },
                     {randn(s), randn(Shape(1, 1, 1, 1))}});
    cases.push_back({"exp", [](const std::vector<Tensor>& in) { return exp(in[0]); }, {randn(s)}});
    cases.push_back({"log", [](const std::vector<Tensor>& in) { return log(in[0]); },
                     {positive(s)}});
    cases.push_back({"sigmoid", [](const std::vector<Tensor>& in) { return sigmoid(in[0]); },
                     {randn(s)}});
    cases.push_back({"softplus", [](const std::vector<Tensor>& in) { return softplus(in[0]); },
                     {randn(s)}});
    cases.push_back({"neg", [](const std::vector<Tensor>& in) { return neg(in[0]); }, {randn(s)}});
    cases.push_back({"scaled_tanh",
                     [](const std::vector<Tensor>& in) { return scaled_tanh(in[0], 1.9); },
                     {randn(s)}});
    cases.push_back({"conv1x1",
                     [](const std::vector<Tensor>& in) { return conv1x1(in[0], in[1], &in[2]); },
                     {randn(s), randn(Shape(1, 1, 4, 3)), randn(Shape(1, 4, 1, 1))}});
    cases.push_back({"conv3x3",
                     [](const std::vector<Tensor>& in) { return conv3x3(in[0], in[1], &in[2]); },
                     {randn(Shape(2, 2, 3, 3)), randn(Shape(3, 2, 3, 3)),
                      randn(Shape(1, 3, 1, 1))}});
    cases.push_back({"channel_mean",
                     [](const std::vector<Tensor>& in) { return channel_mean(in[0]); },
                     {randn(s)}});
    cases.push_back({"channel_affine",
                     [](const std::vector<Tensor>& in) {
                         return channel_affine(in[0], in[1], in[2]);
                     },
                     {randn(s), positive(Shape(1, 3, 1, 1)), randn(Shape(1, 3, 1, 1))}});
    cases.push_back({"channel_slice",
                     [](const std::vector<Tensor>& in) { return channel_slice(in[0], 1, 3); },
                     {randn(s)}});
    cases.push_back({"channel_concat",
                     [](const std::vector<Tensor>& in) { return channel_concat(in[0], in[1]); },
                     {randn(s), randn(Shape(2, 2, 2, 2))}});
    cases.push_back({"spatial_scale",
                     [](const std::vector<Tensor>& in) { return spatial_scale(in[0], in[1]); },
                     {randn(s), positive(Shape(2, 1, 2, 2))}});
    cases.push_back({"broadcast_batch",
                     [](const std::vector<Tensor>& in) { return broadcast_batch(in[0], 3); },
                     {randn(Shape(1, 2, 2, 2))}});
    cases.push_back({"matmul",
                     [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); },
                     {randn(Shape(2, 1, 3, 4)), randn(Shape(2, 1, 4, 2))}});
    cases.push_back({"matmul_tb",
                     [](const std::vector<Tensor>& in) {
                         return matmul(in[0], in[1], false, true);
                     },
                     {randn(Shape(2, 1, 3, 4)), randn(Shape(2, 1, 2, 4))}});
    cases.push_back({"matmul_ta",
                     [](const std::vector<Tensor>& in) {
                         return matmul(in[0], in[1], true, false);
                     },
                     {randn(Shape(2, 1, 4, 3)), randn(Shape(2, 1, 4, 2))}});
    cases.push_back({"matmul_bcast_b",
                     [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); },
                     {randn(Shape(2, 1, 3, 4)), randn(Shape(1, 1, 4, 2))}});
    cases.push_back({"row_softmax",
                     [](const std::vector<Tensor>& in) { return row_softmax(in[0]); },
                     {randn(Shape(2, 1, 3, 4))}});
    {
        Tensor w = randn(Shape(2, 1, 3, 3));
        for (std::int64_t b = 0; b < 2; ++b) {
            for (std::int64_t i = 0; i < 3; ++i) w.at(b, 0, i, i) += 3.0;  // well-conditioned
        }
        cases.push_back({"logabsdet",
                         [](const std::vector<Tensor>& in) { return logabsdet_batched(in[0]); },
                         {w}});
    }
    cases.push_back({"sum_all", [](const std::vector<Tensor>& in) { return sum_all(in[0]); },
                     {randn(s)}});
    cases.push_back({"sum_per_sample",
                     [](const std::vector<Tensor>& in) { return sum_per_sample(in[0]); },
                     {randn(s)}});
    cases.push_back({"squeeze2x2",
                     [](const std::vector<Tensor>& in) { return squeeze2x2(in[0]); },
                     {randn(Shape(2, 1, 4, 4))}});
    cases.push_back({"unsqueeze2x2",
                     [](const std::vector<Tensor>& in) { return unsqueeze2x2(in[0]); },
                     {randn(Shape(2, 4, 2, 2))}});
    cases.push_back({"diag_embed",
                     [](const std::vector<Tensor>& in) { return diag_embed(in[0]); },
                     {randn(Shape(1, 1, 1, 5))}});

    for (auto& c : cases) {
        INFO(c.name);
        CHECK(max_grad_err(c.fn, c.inputs, 97) < 1e-5);
    }
}

TEST_CASE("squeeze preserves content") {
    Rng rng(29);
    Tensor x = normal_tensor(Shape(2, 3, 4, 6), rng);
    Tensor y = squeeze2x2(x);
    CHECK(y.shape == Shape(2, 12, 2, 3));
    CHECK(max_abs_diff(unsqueeze2x2(y), x) == 0.0);
    // pure rearrangement: same values, so sums agree exactly in any canonical order
    std::vector<double> vx = x.data, vy = y.data;
    std::sort(vx.begin(), vx.end());
    std::sort(vy.begin(), vy.end());
    CHECK(vx == vy);
    CHECK_THROWS_AS(squeeze2x2(normal_tensor(Shape(1, 1, 3, 4), rng)), ShapeError);
}

TEST_CASE("deterministic rng streams") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    Rng c(42), d(43);
    bool differ = false;
    for (int i = 0; i < 10; ++i) differ |= (c.next_u64() != d.next_u64());
    CHECK(differ);
}

TEST_CASE("finiteness is enforced") {
    Tensor big(Shape(1, 1, 1, 2), {1e308, 1e308});
    CHECK_THROWS_AS(exp(big), NumericalError);  // overflow to inf
    CHECK_THROWS_AS(add(big, big), NumericalError);
}
