#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "attnflow/attention.hpp"
#include "attnflow/tape.hpp"
#include "attnflow/verify.hpp"

using namespace attnflow;

namespace {

verify::TransformFn layer_fn(FlowLayer& layer) {
    return [&layer](const Tensor& x) { return layer_forward(layer, x).first; };
}

void perturb_params(FlowLayer& layer, Rng& rng, double stddev) {
    ParamMap pm;
    layer.params(pm);
    for (auto& [name, t] : pm) {
        for (auto& v : t->data) v += stddev * rng.normal();
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// iMap

TEST_CASE("imap weights at zero parameters are 0.5 everywhere") {
    Rng rng(3);
    IMapAttention att("imap", 2, 4, 4, 0, rng);
    std::fill(att.g2_weight.data.begin(), att.g2_weight.data.end(), 0.0);
    Tensor x = normal_tensor(Shape(2, 2, 4, 4), rng);
    const auto w = att.weights(x);
    for (const double v : w.scales.data) CHECK(v == 0.5);
}

TEST_CASE("imap scales at half-A are independent of half-B inputs") {
    Rng rng(5);
    IMapAttention att("imap", 3, 4, 4, 0, rng);
    perturb_params(att, rng, 0.3);
    Tensor x = normal_tensor(Shape(1, 3, 4, 4), rng);
    const auto w0 = att.weights(x);

    // perturb every half-B position in every channel
    Tensor xp = x;
    const auto pos_b = att.mask().positions(Half::B);
    for (std::int64_t c = 0; c < 3; ++c) {
        for (const auto p : pos_b) xp.data[std::size_t(c * 16 + p)] += 2.0 * rng.normal();
    }
    const auto w1 = att.weights(xp);
    for (std::int64_t p = 0; p < 16; ++p) {
        CHECK(w0.scales.data[std::size_t(p)] == w1.scales.data[std::size_t(p)]);
    }
}

TEST_CASE("imap sigmoid saturation at large bias") {
    Rng rng(7);
    IMapAttention att("imap", 1, 2, 2, 0, rng);
    std::fill(att.bias_b.data.begin(), att.bias_b.data.end(), 10.0);
    Tensor x = normal_tensor(Shape(1, 1, 2, 2), rng);
    const auto w = att.weights(x);
    for (const auto p : att.mask().positions(Half::A)) {
        CHECK(std::fabs(w.scales.data[std::size_t(p)] - 0.99995) < 1e-4);
    }
}

TEST_CASE("imap forward at zero init halves the input") {
    Rng rng(9);
    IMapAttention att("imap", 1, 2, 2, 0, rng);
    std::fill(att.g2_weight.data.begin(), att.g2_weight.data.end(), 0.0);
    Tensor x = normal_tensor(Shape(1, 1, 2, 2), rng);
    auto [y, ld] = layer_forward(att, x);
    for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(y.data[i] == 0.5 * x.data[i]);
    CHECK(ld.data[0] == doctest::Approx(4.0 * std::log(0.5)).epsilon(1e-12));
    CHECK(ld.data[0] == doctest::Approx(-2.772588722239781).epsilon(1e-9));

    // identity-ish params: x = 2y through the inverse
    Tensor back = layer_inverse(att, y);
    CHECK(max_abs_diff(back, x) < 1e-14);
    for (std::size_t i = 0; i < y.data.size(); ++i) {
        CHECK(back.data[i] == doctest::Approx(2.0 * y.data[i]).epsilon(1e-12));
    }
}

TEST_CASE("imap logdet matches the dense FD oracle") {
    Rng rng(11);
    IMapAttention att("imap", 2, 4, 4, 0, rng);
    perturb_params(att, rng, 0.3);
    Tensor x = normal_tensor(Shape(1, 2, 4, 4), rng);
    const double fd = verify::fd_jacobian_logdet(layer_fn(att), x);
    const double an = layer_forward(att, x).second.data[0];
    CHECK(std::fabs(an - fd) / std::max(1.0, std::fabs(fd)) < 1e-6);
}

TEST_CASE("imap logdet doubles with channel count at fixed spatial scales") {
    Rng rng(13);
    IMapAttention a1("a1", 1, 4, 4, 0, rng);
    IMapAttention a2("a2", 2, 4, 4, 0, rng);
    // data-independent scales: zero scale_s, shared bias map
    Rng brng(99);
    Tensor bias = normal_tensor(Shape(1, 1, 4, 4), brng);
    a1.bias_b = bias;
    a2.bias_b = bias;
    a1.scale_s.data[0] = 0.0;
    a2.scale_s.data[0] = 0.0;
    Tensor x1 = normal_tensor(Shape(1, 1, 4, 4), rng);
    Tensor x2 = normal_tensor(Shape(1, 2, 4, 4), rng);
    const double ld1 = layer_forward(a1, x1).second.data[0];
    const double ld2 = layer_forward(a2, x2).second.data[0];
    CHECK(ld2 == doctest::Approx(2.0 * ld1).epsilon(1e-12));
}

TEST_CASE("imap round-trips over 100 random instances") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        IMapAttention att("imap", 2, 4, 4, int(seed % 2), rng);
        perturb_params(att, rng, 0.2);
        Tensor x = normal_tensor(Shape(2, 2, 4, 4), rng);
        auto [y, ld] = layer_forward(att, x);
        worst = std::max(worst, max_abs_diff(layer_inverse(att, y), x));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("imap inverse of inverse is the forward map") {
    Rng rng(17);
    IMapAttention att("imap", 2, 4, 4, 0, rng);
    perturb_params(att, rng, 0.2);
    Tensor w = normal_tensor(Shape(1, 2, 4, 4), rng);
    Tensor x = layer_inverse(att, w);
    Tensor w2 = layer_forward(att, x).first;
    CHECK(max_abs_diff(w, w2) < 1e-10);
}

TEST_CASE("imap output on half A is a constant-scale multiple of the input") {
    Rng rng(19);
    IMapAttention att("imap", 3, 4, 4, 0, rng);
    perturb_params(att, rng, 0.3);
    Tensor x = normal_tensor(Shape(1, 3, 4, 4), rng);
    Tensor y = layer_forward(att, x).first;
    for (std::int64_t c = 0; c < 3; ++c) {
        for (const auto p : att.mask().positions(Half::A)) {
            const double sc = 1.0 / (1.0 + std::exp(-att.bias_b.data[std::size_t(p)]));
            CHECK(y.data[std::size_t(c * 16 + p)] ==
                  doctest::Approx(sc * x.data[std::size_t(c * 16 + p)]).epsilon(1e-12));
        }
    }
}

// ---------------------------------------------------------------------------
// iSDP

TEST_CASE("isdp weights at zero convolutions form I + J/2") {
    Rng rng(23);
    ISdpAttention att("isdp", 3, 2, 2, 0, PatchGrid{1, 1}, 1, SdpActivation::Sigmoid, false, rng);
    for (auto& v : att.wq[0].data) v = 0.0;
    for (auto& v : att.wk[0].data) v = 0.0;
    Tensor x = normal_tensor(Shape(1, 3, 2, 2), rng);
    Tensor w = att.weights_block(x, 0, 0);
    CHECK(w.shape == Shape(1, 1, 2, 2));
    CHECK(w.data[0] == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(w.data[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(w.data[2] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(w.data[3] == doctest::Approx(1.5).epsilon(1e-12));
    // det(I + J/2) for m = 2 is 2
    CHECK(w.data[0] * w.data[3] - w.data[1] * w.data[2] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("isdp softmax rows sum to one") {
    Rng rng(29);
    ISdpAttention att("isdp", 2, 4, 4, 0, PatchGrid{2, 2}, 1, SdpActivation::Softmax, true, rng);
    Tensor x = normal_tensor(Shape(1, 2, 4, 4), rng);
    Tensor w = att.weights_block(x, 1, 0);
    for (std::int64_t i = 0; i < w.shape.h; ++i) {
        double row = 0.0;
        for (std::int64_t j = 0; j < w.shape.w; ++j) row += w.at(0, 0, i, j);
        CHECK(row == doctest::Approx(1.0).epsilon(1e-15));
    }
}

TEST_CASE("isdp weights are independent of half-B inputs") {
    Rng rng(31);
    ISdpAttention att("isdp", 2, 4, 4, 0, PatchGrid{2, 2}, 1, SdpActivation::Sigmoid, false, rng);
    Tensor x = normal_tensor(Shape(1, 2, 4, 4), rng);
    Tensor w0 = att.weights_block(x, 2, 0);
    Tensor xp = x;
    for (std::int64_t c = 0; c < 2; ++c) {
        for (const auto p : att.mask().positions(Half::B)) {
            xp.data[std::size_t(c * 16 + p)] += rng.normal();
        }
    }
    Tensor w1 = att.weights_block(xp, 2, 0);
    CHECK(max_abs_diff(w0, w1) == 0.0);
}

TEST_CASE("isdp closed-form logdet at zero convolutions") {
    Rng rng(37);
    // one 2x2 patch, m = 2, one head over 3 channels
    ISdpAttention att("isdp", 3, 2, 2, 0, PatchGrid{1, 1}, 1, SdpActivation::Sigmoid, false, rng);
    for (auto& v : att.wq[0].data) v = 0.0;
    for (auto& v : att.wk[0].data) v = 0.0;
    Tensor x = normal_tensor(Shape(1, 3, 2, 2), rng);
    auto [y, ld] = layer_forward(att, x);
    CHECK(ld.data[0] == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-12));
    CHECK(ld.data[0] == doctest::Approx(2.0794415416798357).epsilon(1e-9));
}

TEST_CASE("isdp logdet matches the dense FD oracle") {
    Rng rng(41);
    ISdpAttention att("isdp", 2, 4, 4, 0, PatchGrid{2, 2}, 1, SdpActivation::Sigmoid, false, rng);
    perturb_params(att, rng, 0.2);
    Tensor x = normal_tensor(Shape(1, 2, 4, 4), rng);
    const double fd = verify::fd_jacobian_logdet(layer_fn(att), x);
    const double an = layer_forward(att, x).second.data[0];
    CHECK(std::fabs(an - fd) / std::max(1.0, std::fabs(fd)) < 1e-5);
}

TEST_CASE("isdp per-sample logdets follow batch permutations") {
    Rng rng(43);
    ISdpAttention att("isdp", 2, 4, 4, 0, PatchGrid{2, 2}, 1, SdpActivation::Sigmoid, false, rng);
    perturb_params(att, rng, 0.2);
    Tensor x = normal_tensor(Shape(3, 2, 4, 4), rng);
    Tensor ld = layer_forward(att, x).second;
    // swap samples 0 and 2
    Tensor xs(x.shape);
    const std::int64_t per = 2 * 16;
    std::copy_n(x.data.data() + 2 * per, per, xs.data.data());
    std::copy_n(x.data.data() + per, per, xs.data.data() + per);
    std::copy_n(x.data.data(), per, xs.data.data() + 2 * per);
    Tensor lds = layer_forward(att, xs).second;
    CHECK(lds.data[0] == ld.data[2]);
    CHECK(lds.data[1] == ld.data[1]);
    CHECK(lds.data[2] == ld.data[0]);
}

TEST_CASE("isdp leaves half A unchanged") {
    Rng rng(47);
    ISdpAttention att("isdp", 2, 4, 4, 0, PatchGrid{2, 2}, 1, SdpActivation::Sigmoid, false, rng);
    perturb_params(att, rng, 0.3);
    Tensor x = normal_tensor(Shape(2, 2, 4, 4), rng);
    Tensor y = layer_forward(att, x).first;
    for (std::int64_t b = 0; b < 2; ++b) {
        for (std::int64_t c = 0; c < 2; ++c) {
            for (const auto p : att.mask().positions(Half::A)) {
                CHECK(y.data[std::size_t((b * 2 + c) * 16 + p)] ==
                      x.data[std::size_t((b * 2 + c) * 16 + p)]);
            }
        }
    }
}

TEST_CASE("isdp round-trips at zero init and over 100 random instances") {
    {
        Rng rng(53);
        ISdpAttention att("isdp", 3, 2, 2, 0, PatchGrid{1, 1}, 1, SdpActivation::Sigmoid, false,
                          rng);
        for (auto& v : att.wq[0].data) v = 0.0;
        for (auto& v : att.wk[0].data) v = 0.0;
        Tensor x = normal_tensor(Shape(1, 3, 2, 2), rng);
        auto [y, ld] = layer_forward(att, x);
        CHECK(max_abs_diff(layer_inverse(att, y), x) < 1e-10);
    }
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed + 1000);
        const int heads = seed % 2 == 0 ? 1 : 2;
        ISdpAttention att("isdp", 4, 4, 4, int(seed % 2), PatchGrid{2, 2}, heads,
                          SdpActivation::Sigmoid, false, rng);
        perturb_params(att, rng, 0.2);
        Tensor x = normal_tensor(Shape(2, 4, 4, 4), rng);
        auto [y, ld] = layer_forward(att, x);
        worst = std::max(worst, max_abs_diff(layer_inverse(att, y), x));
    }
    CHECK(worst < 1e-8);
}

TEST_CASE("pure eq6 at zero init is singular") {
    Rng rng(59);
    ISdpAttention att("isdp", 3, 2, 2, 0, PatchGrid{1, 1}, 1, SdpActivation::Sigmoid, true, rng);
    for (auto& v : att.wq[0].data) v = 0.0;
    for (auto& v : att.wk[0].data) v = 0.0;
    Tensor x = normal_tensor(Shape(1, 3, 2, 2), rng);
    CHECK_THROWS_AS(layer_forward(att, x), SingularMatrixError);
    try {
        layer_forward(att, x);
    } catch (const SingularMatrixError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("patch 0") != std::string::npos);
        CHECK(msg.find("head 0") != std::string::npos);
    }
}

TEST_CASE("multi-head with shared weights equals single head") {
    Rng rng(61);
    ISdpAttention one("one", 3, 2, 2, 0, PatchGrid{1, 1}, 1, SdpActivation::Sigmoid, false, rng);
    Rng rng2(61);
    ISdpAttention three("three", 3, 2, 2, 0, PatchGrid{1, 1}, 3, SdpActivation::Sigmoid, false,
                        rng2);
    perturb_params(one, rng, 0.3);
    for (int h = 0; h < 3; ++h) {
        three.wq[std::size_t(h)] = one.wq[0];
        three.wk[std::size_t(h)] = one.wk[0];
    }
    three.log_d = one.log_d;
    three.alpha_raw = one.alpha_raw;
    Tensor x = normal_tensor(Shape(2, 3, 2, 2), rng);
    auto [y1, ld1] = layer_forward(one, x);
    auto [y3, ld3] = layer_forward(three, x);
    CHECK(max_abs_diff(y1, y3) < 1e-12);
    CHECK(std::fabs(ld1.data[0] - ld3.data[0]) < 1e-10);
    CHECK(std::fabs(ld1.data[1] - ld3.data[1]) < 1e-10);
}

TEST_CASE("attention parameter gradients of the logdet pass gradcheck") {
    struct Case {
        const char* name;
        std::function<std::unique_ptr<FlowLayer>(Rng&)> make;
    };
    std::vector<Case> cases;
    cases.push_back({"imap", [](Rng& rng) {
                         return std::make_unique<IMapAttention>("imap", 2, 4, 4, 0, rng);
                     }});
    cases.push_back({"isdp", [](Rng& rng) {
                         return std::make_unique<ISdpAttention>("isdp", 2, 4, 4, 0,
                                                                PatchGrid{2, 2}, 2,
                                                                SdpActivation::Sigmoid, false,
                                                                rng);
                     }});
    for (auto& c : cases) {
        INFO(c.name);
        Rng rng(67);
        auto layer = c.make(rng);
        perturb_params(*layer, rng, 0.2);
        Tensor x = normal_tensor(Shape(2, 2, 4, 4), rng);

        ParamMap pm;
        layer->params(pm);
        auto loss_of = [&]() {
            return sum_all(layer_forward(*layer, x).second).data[0];
        };
        std::vector<Tensor> grads;
        {
            Tape tape;
            TapeScope scope(tape);
            for (auto& [name, t] : pm) tape.watch(*t);
            auto [y, ld] = layer_forward(*layer, x);
            Tensor loss = sum_all(ld);
            tape.backward(loss);
            for (auto& [name, t] : pm) grads.push_back(tape.grad(*t));
        }
        const double eps = 1e-5;
        double worst = 0.0;
        for (std::size_t p = 0; p < pm.size(); ++p) {
            for (std::size_t i = 0; i < pm[p].second->data.size(); ++i) {
                const double keep = pm[p].second->data[i];
                pm[p].second->data[i] = keep + eps;
                const double up = loss_of();
                pm[p].second->data[i] = keep - eps;
                const double dn = loss_of();
                pm[p].second->data[i] = keep;
                const double fd = (up - dn) / (2.0 * eps);
                const double an = grads[p].data[i];
                const double err = std::fabs(an - fd);
                if (err > 1e-8) {
                    worst = std::max(worst,
                                     err / std::max({std::fabs(an), std::fabs(fd), 1e-8}));
                }
            }
        }
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("patch grid fitting shrinks until halves balance") {
    const PatchGrid g44 = fit_patch_grid(4, 4, 4);
    CHECK(g44.rows == 2);
    CHECK(g44.cols == 2);
    const PatchGrid g22 = fit_patch_grid(2, 2, 4);  // 1x1 patches would be unbalanced
    CHECK(g22.rows == 1);
    CHECK(g22.cols == 1);
    const PatchGrid g88 = fit_patch_grid(8, 8, 16);
    CHECK(g88.rows == 4);
    CHECK(g88.cols == 4);
}
