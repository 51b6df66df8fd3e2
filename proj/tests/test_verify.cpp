#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "attnflow/verify.hpp"

using namespace attnflow;

TEST_CASE("fd oracle closed forms") {
    Rng rng(3);
    Tensor x = normal_tensor(Shape(1, 1, 2, 2), rng);
    auto doubling = [](const Tensor& in) {
        Tensor y(in.shape, in.data);
        for (auto& v : y.data) v *= 2.0;
        return y;
    };
    CHECK(verify::fd_jacobian_logdet(doubling, x) ==
          doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-9));
    CHECK(verify::fd_jacobian_logdet(doubling, x, 1e-5, true) ==
          doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-7));

    // volume-preserving permutation
    Tensor xs = normal_tensor(Shape(1, 1, 4, 4), rng);
    CHECK(std::fabs(verify::fd_jacobian_logdet(
              [](const Tensor& in) { return squeeze2x2(in); }, xs)) < 1e-8);
}

TEST_CASE("fd oracle rejects oversized and volume-changing maps") {
    Rng rng(5);
    Tensor big = normal_tensor(Shape(1, 2, 12, 12), rng);
    CHECK_THROWS_AS(verify::fd_jacobian_logdet([](const Tensor& t) { return t; }, big),
                    ShapeError);
    Tensor x = normal_tensor(Shape(1, 1, 2, 2), rng);
    CHECK_THROWS_AS(verify::fd_jacobian_logdet(
                        [](const Tensor& t) { return channel_concat(t, t); }, x),
                    ShapeError);
}

TEST_CASE("roundtrip oracle on identity and a real layer") {
    auto id = [](const Tensor& t) { return t; };
    const auto rep = verify::roundtrip_check("identity", id, id, Shape(1, 2, 4, 4), 5, 1e-8, 1);
    CHECK(rep.pass);
    CHECK(rep.measured == 0.0);

    Rng rng(7);
    Actnorm an("an", 3);
    an.set_initialized(true);
    for (auto& v : an.log_scale.data) v = 0.4 * rng.normal();
    for (auto& v : an.bias.data) v = rng.normal();
    const auto rep2 = verify::roundtrip_check(
        "actnorm", [&](const Tensor& t) { return layer_forward(an, t).first; },
        [&](const Tensor& t) { return layer_inverse(an, t); }, Shape(2, 3, 4, 4), 10, 1e-12, 2);
    CHECK(rep2.pass);
}

TEST_CASE("full-model roundtrip via the oracle") {
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.steps = 2;
    cfg.hidden_channels = 6;
    cfg.attention = AttentionKind::ISdp;
    cfg.attention_position = AttentionPosition::Pos4;
    cfg.input_height = 8;
    cfg.input_width = 8;
    cfg.seed = 11;
    FlowModel model = FlowModel::build(cfg);
    Rng rng(13);
    model.randomize_parameters(rng, 0.05);
    const auto rep = verify::roundtrip_check(
        "model_L2K2_isdp",
        [&](const Tensor& t) {
            FlowModel& m = model;
            return m.forward_flat(t);
        },
        [&](const Tensor& flat) {
            // unflatten into latents and invert
            const auto shapes = model.latent_shapes(flat.shape.b);
            std::vector<Tensor> latents;
            std::size_t off = 0;
            for (const auto& s : shapes) {
                Tensor z(s);
                std::copy_n(flat.data.data() + off, z.data.size(), z.data.data());
                off += z.data.size();
                latents.push_back(std::move(z));
            }
            return model.inverse_from_latents(std::move(latents));
        },
        Shape(1, 1, 8, 8), 10, 1e-7, 3);
    CHECK(rep.pass);
}

TEST_CASE("gradcheck on a linear-only model is near machine precision") {
    ModelConfig cfg;
    cfg.input_channels = 2;
    cfg.input_height = 2;
    cfg.input_width = 2;
    Rng rng(17);
    std::vector<std::unique_ptr<FlowLayer>> layers;
    layers.push_back(std::make_unique<InvConv1x1>("ic", 2, &rng));
    FlowModel model(cfg, std::move(layers));
    Tensor batch = normal_tensor(Shape(2, 2, 2, 2), rng);
    const auto reports = verify::gradcheck_all(model, batch);
    CHECK(!reports.empty());
    for (const auto& r : reports) {
        CHECK(r.pass);
        CHECK(r.measured < 1e-7);
    }
}

TEST_CASE("suite runs green, deterministically, and in parallel") {
    const auto reports = verify::run_suite("all", 7, 1);
    CHECK(verify::all_pass(reports));
    const auto again = verify::run_suite("all", 7, 2);
    REQUIRE(reports.size() == again.size());
    for (std::size_t i = 0; i < reports.size(); ++i) {
        CHECK(reports[i].subject == again[i].subject);
        CHECK(reports[i].measured == again[i].measured);
    }

    std::ostringstream csv;
    verify::write_reports_csv(csv, reports);
    const std::string text = csv.str();
    CHECK(text.rfind("subject,check,measured,tolerance,pass,seed\n", 0) == 0);
    CHECK(text.find("mutation_detected") != std::string::npos);

    CHECK_THROWS_AS(verify::run_suite("nope", 1, 1), ConfigError);
}

TEST_CASE("mutation checks prove the oracles have teeth") {
    const auto reports = verify::run_suite("mutation", 9, 1);
    CHECK(verify::all_pass(reports));
    int mutations = 0;
    for (const auto& r : reports) {
        if (r.check == "mutation_detected") ++mutations;
    }
    CHECK(mutations == 3);
}
