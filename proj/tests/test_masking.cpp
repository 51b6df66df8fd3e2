#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "attnflow/mask.hpp"
#include "attnflow/rng.hpp"
#include "attnflow/tape.hpp"

using namespace attnflow;

TEST_CASE("2d mask parity and phase") {
    const CheckerboardMask m0 = CheckerboardMask::make_2d(2, 2, 0);
    CHECK(m0.in_half_a(0));       // (0,0)
    CHECK_FALSE(m0.in_half_a(1));  // (0,1)
    CHECK_FALSE(m0.in_half_a(2));  // (1,0)
    CHECK(m0.in_half_a(3));       // (1,1)

    const CheckerboardMask m1 = CheckerboardMask::make_2d(2, 2, 1);
    CHECK_FALSE(m1.in_half_a(0));
    CHECK(m1.in_half_a(1));
    CHECK(m1.in_half_a(2));
    CHECK_FALSE(m1.in_half_a(3));

    const CheckerboardMask m3 = CheckerboardMask::make_2d(3, 3, 0);
    CHECK(m3.count(Half::A) == 5);
    CHECK(m3.count(Half::B) == 4);
}

TEST_CASE("3d mask balance and determinism") {
    const CheckerboardMask a = CheckerboardMask::make_3d(2, 2, 2, 123);
    CHECK(a.count(Half::A) == 4);
    CHECK(a.count(Half::B) == 4);

    const CheckerboardMask b = CheckerboardMask::make_3d(2, 2, 2, 123);
    for (std::int64_t k = 0; k < 8; ++k) CHECK(a.in_half_a(k) == b.in_half_a(k));

    const CheckerboardMask c = CheckerboardMask::make_3d(2, 4, 4, 0);
    const CheckerboardMask d = CheckerboardMask::make_3d(2, 4, 4, 1);
    bool differ = false;
    for (std::int64_t k = 0; k < 32; ++k) differ |= (c.in_half_a(k) != d.in_half_a(k));
    CHECK(differ);

    // odd volume: half A takes the extra element
    const CheckerboardMask odd = CheckerboardMask::make_3d(1, 3, 3, 5);
    CHECK(odd.count(Half::A) == 5);
    CHECK(odd.count(Half::B) == 4);
}

TEST_CASE("halves partition every mask") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const CheckerboardMask m2 = CheckerboardMask::make_2d(3 + seed % 4, 2 + seed % 5,
                                                              int(seed % 2));
        CHECK(m2.count(Half::A) + m2.count(Half::B) == m2.height() * m2.width());
        const CheckerboardMask m3 = CheckerboardMask::make_3d(1 + seed % 3, 2 + seed % 3, 4, seed);
        const auto pa = m3.positions(Half::A);
        const auto pb = m3.positions(Half::B);
        std::vector<bool> seen(std::size_t(m3.channels() * m3.height() * m3.width()), false);
        for (const auto p : pa) {
            CHECK_FALSE(seen[std::size_t(p)]);
            seen[std::size_t(p)] = true;
        }
        for (const auto p : pb) {
            CHECK_FALSE(seen[std::size_t(p)]);
            seen[std::size_t(p)] = true;
        }
        for (const bool s : seen) CHECK(s);
    }
}

TEST_CASE("apply_mask partition and idempotence") {
    Rng rng(5);
    Tensor x = normal_tensor(Shape(2, 3, 4, 4), rng);
    const CheckerboardMask m = CheckerboardMask::make_2d(4, 4, 0);
    Tensor a = apply_mask(x, m, Half::A);
    Tensor b = apply_mask(x, m, Half::B);
    CHECK(max_abs_diff(add(a, b), x) == 0.0);
    CHECK(max_abs_diff(apply_mask(a, m, Half::A), a) == 0.0);

    Tensor ones(Shape(1, 2, 2, 2), 1.0);
    const CheckerboardMask m2 = CheckerboardMask::make_2d(2, 2, 0);
    Tensor ha = apply_mask(ones, m2, Half::A);
    for (std::int64_t c = 0; c < 2; ++c) {
        int on = 0;
        for (std::int64_t p = 0; p < 4; ++p) on += ha.data[std::size_t(c * 4 + p)] == 1.0 ? 1 : 0;
        CHECK(on == 2);
    }

    // 3d mask partition
    const CheckerboardMask m3 = CheckerboardMask::make_3d(3, 4, 4, 9);
    Tensor a3 = apply_mask(x, m3, Half::A);
    Tensor b3 = apply_mask(x, m3, Half::B);
    CHECK(max_abs_diff(add(a3, b3), x) == 0.0);

    CHECK_THROWS_AS(apply_mask(x, CheckerboardMask::make_2d(3, 3, 0), Half::A), ShapeError);
}

TEST_CASE("gather rows and patch counts") {
    Rng rng(7);
    Tensor x = normal_tensor(Shape(1, 3, 2, 2), rng);
    const CheckerboardMask m = CheckerboardMask::make_2d(2, 2, 0);
    Tensor g = gather_half(x, m, Half::A);
    CHECK(g.shape == Shape(1, 1, 2, 3));  // 2 positions x 3 channels

    Tensor x4 = normal_tensor(Shape(1, 2, 4, 4), rng);
    const CheckerboardMask m4 = CheckerboardMask::make_2d(4, 4, 0);
    const PatchGrid grid{2, 2};
    for (std::int64_t p = 0; p < 4; ++p) {
        Tensor gp = gather_half(x4, m4, Half::A, &grid, p);
        CHECK(gp.shape.h == 2);  // each 2x2 patch holds 2 half-A rows
    }

    const PatchGrid bad{3, 2};
    CHECK_THROWS_AS(gather_half(x4, m4, Half::A, &bad, 0), ShapeError);
}

TEST_CASE("gather/scatter round-trip is bit-exact over 200 cases") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(seed);
        const std::int64_t c = 1 + std::int64_t(rng.below(4));
        const std::int64_t h = 2 * (1 + std::int64_t(rng.below(3)));
        const std::int64_t w = 2 * (1 + std::int64_t(rng.below(3)));
        Tensor x = normal_tensor(Shape(2, c, h, w), rng);
        const bool use_3d = rng.uniform() < 0.3;
        const CheckerboardMask m =
            use_3d ? CheckerboardMask::make_3d(c, h, w, seed)
                   : CheckerboardMask::make_2d(h, w, int(seed % 2));
        const Half half = rng.uniform() < 0.5 ? Half::A : Half::B;
        Tensor rows = gather_half(x, m, half);
        Tensor back = scatter_half(rows, m, half, x.shape);
        Tensor expect = apply_mask(x, m, half);
        CHECK(max_abs_diff(back, expect) == 0.0);
        // scatter(gather(x)) + other half == x
        Tensor other = apply_mask(x, m, other_half(half));
        CHECK(max_abs_diff(add(back, other), x) == 0.0);
    }
}

TEST_CASE("pair_halves routes A values to B slots") {
    const CheckerboardMask m = CheckerboardMask::make_2d(2, 2, 0);
    // positions: A = {0, 3}, B = {1, 2} in canonical order
    Tensor v(Shape(1, 1, 2, 2), {10.0, 20.0, 30.0, 40.0});
    Tensor p = pair_halves(v, m);
    CHECK(p.data[0] == 10.0);  // A keeps its own value
    CHECK(p.data[3] == 40.0);
    CHECK(p.data[1] == 10.0);  // first B position gets first A value
    CHECK(p.data[2] == 40.0);  // second B position gets second A value
}

TEST_CASE("mask ops are differentiable") {
    Rng rng(11);
    const CheckerboardMask m = CheckerboardMask::make_2d(4, 4, 0);
    const PatchGrid grid{2, 2};
    Tensor x = normal_tensor(Shape(2, 3, 4, 4), rng);
    Tensor w_rows = normal_tensor(Shape(2, 1, 2, 2), rng);  // 2 rows x 2 cols per patch

    struct Case {
        const char* name;
        std::function<Tensor(const Tensor&)> fn;
        Tensor input;
    };
    std::vector<Case> cases;
    cases.push_back({"apply_mask", [&](const Tensor& t) { return apply_mask(t, m, Half::B); }, x});
    cases.push_back(
        {"gather", [&](const Tensor& t) { return gather_half(t, m, Half::A, &grid, 1, 1, 3); },
         x});
    cases.push_back({"scatter",
                     [&](const Tensor& t) {
                         return scatter_half(t, m, Half::B, Shape(2, 3, 4, 4), &grid, 2, 0, 2);
                     },
                     w_rows});
    cases.push_back({"pair_halves",
                     [&](const Tensor& t) { return pair_halves(t, m); },
                     normal_tensor(Shape(2, 1, 4, 4), rng)});

    for (auto& c : cases) {
        INFO(c.name);
        Tensor probe = c.fn(c.input);
        Tensor wgt = normal_tensor(probe.shape, rng);
        Tensor grad;
        {
            Tape tape;
            TapeScope scope(tape);
            tape.watch(c.input);
            Tensor loss = sum_all(mul(c.fn(c.input), wgt));
            tape.backward(loss);
            grad = tape.grad(c.input);
        }
        const double eps = 1e-5;
        double worst = 0.0;
        for (std::size_t i = 0; i < c.input.data.size(); ++i) {
            const double keep = c.input.data[i];
            c.input.data[i] = keep + eps;
            const double up = sum_all(mul(c.fn(c.input), wgt)).data[0];
            c.input.data[i] = keep - eps;
            const double dn = sum_all(mul(c.fn(c.input), wgt)).data[0];
            c.input.data[i] = keep;
            const double fd = (up - dn) / (2.0 * eps);
            worst = std::max(worst, std::fabs(fd - grad.data[i]));
        }
        CHECK(worst < 1e-9);
    }
}
