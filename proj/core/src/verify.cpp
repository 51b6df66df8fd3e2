#include "attnflow/verify.hpp"

#include <cmath>
#include <ostream>

#include "attnflow/dataio.hpp"
#include "attnflow/threading.hpp"
#include "attnflow/training.hpp"

namespace attnflow {
namespace verify {

double fd_jacobian_logdet(const TransformFn& f, const Tensor& x, double eps,
                          bool forward_difference) {
    if (x.shape.b != 1) throw ShapeError("fd_jacobian_logdet: single-sample input required");
    const std::int64_t d = x.numel();
    if (d > 256) {
        throw ShapeError("fd_jacobian_logdet: dimension " + std::to_string(d) + " exceeds 256");
    }
    const Tensor y0 = forward_difference ? f(x) : Tensor();
    std::vector<double> jac(std::size_t(d * d));
    for (std::int64_t j = 0; j < d; ++j) {
        Tensor xp(x.shape, x.data);
        xp.data[std::size_t(j)] += eps;
        const Tensor yp = f(xp);
        if (yp.numel() != d) {
            throw ShapeError("fd_jacobian_logdet: transform changed the volume");
        }
        std::vector<double> column(static_cast<std::size_t>(d));
        if (forward_difference) {
            for (std::int64_t i = 0; i < d; ++i) {
                column[std::size_t(i)] = (yp.data[std::size_t(i)] - y0.data[std::size_t(i)]) / eps;
            }
        } else {
            Tensor xm(x.shape, x.data);
            xm.data[std::size_t(j)] -= eps;
            const Tensor ym = f(xm);
            for (std::int64_t i = 0; i < d; ++i) {
                column[std::size_t(i)] =
                    (yp.data[std::size_t(i)] - ym.data[std::size_t(i)]) / (2.0 * eps);
            }
        }
        for (std::int64_t i = 0; i < d; ++i) jac[std::size_t(i * d + j)] = column[std::size_t(i)];
    }
    check_finite(jac, "fd_jacobian_logdet");
    return lu_logabsdet(lu_factor(int(d), jac));
}

OracleReport roundtrip_check(const std::string& subject, const TransformFn& fwd,
                             const TransformFn& inv, Shape input, int n_seeds, double tolerance,
                             std::uint64_t seed) {
    OracleReport rep{subject, "roundtrip", 0.0, tolerance, false, seed};
    double worst = 0.0;
    for (int s = 0; s < n_seeds; ++s) {
        Rng rng(derive_seed(seed, 0x2007, std::uint64_t(s)));
        Tensor x = normal_tensor(input, rng);
        try {
            const Tensor y = fwd(x);
            const Tensor back = inv(y);
            worst = std::max(worst, max_abs_diff(x, back));
        } catch (const Error&) {
            worst = std::numeric_limits<double>::infinity();
            break;
        }
    }
    rep.measured = worst;
    rep.pass = worst < tolerance;
    return rep;
}

OracleReport logdet_check(const std::string& subject, const TransformFn& fwd,
                          const std::function<double(const Tensor&)>& analytic, Shape input,
                          int n_seeds, double tolerance, std::uint64_t seed) {
    OracleReport rep{subject, "logdet_vs_fd", 0.0, tolerance, false, seed};
    double worst = 0.0;
    for (int s = 0; s < n_seeds; ++s) {
        Rng rng(derive_seed(seed, 0x10D3, std::uint64_t(s)));
        Tensor x = normal_tensor(input, rng);
        try {
            const double fd = fd_jacobian_logdet(fwd, x);
            const double an = analytic(x);
            worst = std::max(worst, std::fabs(an - fd) / std::max(1.0, std::fabs(fd)));
        } catch (const Error&) {
            worst = std::numeric_limits<double>::infinity();
            break;
        }
    }
    rep.measured = worst;
    rep.pass = worst < tolerance;
    return rep;
}

OracleReport block_structure_check(const std::string& subject, const TransformFn& f,
                                   const Tensor& x, const std::vector<std::int64_t>& cond_flat,
                                   double tolerance) {
    OracleReport rep{subject, "block_structure", 0.0, tolerance, false, 0};
    const std::int64_t d = x.numel();
    std::vector<bool> is_cond(std::size_t(d), false);
    for (const auto i : cond_flat) is_cond[std::size_t(i)] = true;

    const double eps = 1e-5;
    double worst = 0.0;
    try {
        for (std::int64_t j = 0; j < d; ++j) {
            if (is_cond[std::size_t(j)]) continue;  // columns: transformed inputs only
            Tensor xp(x.shape, x.data);
            xp.data[std::size_t(j)] += eps;
            Tensor xm(x.shape, x.data);
            xm.data[std::size_t(j)] -= eps;
            const Tensor yp = f(xp), ym = f(xm);
            for (std::int64_t i = 0; i < d; ++i) {
                if (!is_cond[std::size_t(i)]) continue;  // rows: conditioning outputs only
                const double v =
                    (yp.data[std::size_t(i)] - ym.data[std::size_t(i)]) / (2.0 * eps);
                worst = std::max(worst, std::fabs(v));
            }
        }
    } catch (const Error&) {
        worst = std::numeric_limits<double>::infinity();
    }
    rep.measured = worst;
    rep.pass = worst < tolerance;
    return rep;
}

std::vector<OracleReport> gradcheck_all(FlowModel& model, const Tensor& batch,
                                        const Tensor* conditions, double rel_tol,
                                        double abs_floor, std::uint64_t seed) {
    std::vector<OracleReport> reports;
    BatchGrads bg = batch_nll_and_grads(model, batch, conditions, nullptr);
    ParamMap params = model.parameters();
    const double eps = 1e-5;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor* t = params[p].second;
        OracleReport rep{params[p].first, "gradcheck", 0.0, rel_tol, false, seed};
        double worst = 0.0;
        for (std::size_t i = 0; i < t->data.size(); ++i) {
            const double keep = t->data[i];
            t->data[i] = keep + eps;
            const double up = batch_mean_nll(model, batch, conditions);
            t->data[i] = keep - eps;
            const double dn = batch_mean_nll(model, batch, conditions);
            t->data[i] = keep;
            const double fd = (up - dn) / (2.0 * eps);
            const double an = bg.grads[p][i];
            const double err = std::fabs(an - fd);
            const double scale = std::max(std::fabs(an), std::fabs(fd));
            const double rel = err <= abs_floor ? 0.0 : err / std::max(scale, abs_floor);
            worst = std::max(worst, rel);
        }
        rep.measured = worst;
        rep.pass = worst < rel_tol;
        reports.push_back(std::move(rep));
    }
    return reports;
}

// --------------------------------------------------------------------------
// Suite

namespace {

struct LayerCase {
    std::string name;
    Shape input;
    std::function<std::unique_ptr<FlowLayer>(Rng&)> make;
    // condition features fed to the layer, if any
    bool conditioned = false;
    Shape cond_shape;
};

void randomize_layer(FlowLayer& layer, Rng& rng, double stddev) {
    ParamMap pm;
    layer.params(pm);
    for (auto& [name, t] : pm) {
        for (auto& v : t->data) v += stddev * rng.normal();
    }
    if (auto* a = dynamic_cast<Actnorm*>(&layer)) a->set_initialized(true);
}

std::vector<LayerCase> layer_cases() {
    std::vector<LayerCase> cases;
    const Shape s444(1, 4, 4, 4);  // D = 64
    cases.push_back({"actnorm", s444,
                     [](Rng&) { return std::make_unique<Actnorm>("actnorm", 4); }});
    cases.push_back({"invconv1x1", s444, [](Rng& rng) {
                         return std::make_unique<InvConv1x1>("invconv", 4, &rng);
                     }});
    cases.push_back({"affine_coupling_channel", s444, [](Rng& rng) {
                         return std::make_unique<AffineCoupling>(
                             "affc", 4, 4, 4, 8,
                             make_split_spec(SplitRuleKind::ChannelHalves, 4, 4, 4, 0, 5), rng);
                     }});
    cases.push_back({"affine_coupling_checkerboard", s444, [](Rng& rng) {
                         return std::make_unique<AffineCoupling>(
                             "affcb", 4, 4, 4, 8,
                             make_split_spec(SplitRuleKind::Checkerboard2D, 4, 4, 4, 0, 5), rng);
                     }});
    cases.push_back({"affine_coupling_permuted3d", s444, [](Rng& rng) {
                         return std::make_unique<AffineCoupling>(
                             "affp3", 4, 4, 4, 8,
                             make_split_spec(SplitRuleKind::Permuted3D, 4, 4, 4, 0, 5), rng);
                     }});
    cases.push_back({"mixture_coupling_channel", s444, [](Rng& rng) {
                         return std::make_unique<MixtureCoupling>(
                             "mixc", 4, 4, 4, 8, 3,
                             make_split_spec(SplitRuleKind::ChannelHalves, 4, 4, 4, 0, 5), rng);
                     }});
    cases.push_back({"mixture_coupling_checkerboard", s444, [](Rng& rng) {
                         return std::make_unique<MixtureCoupling>(
                             "mixcb", 4, 4, 4, 8, 3,
                             make_split_spec(SplitRuleKind::Checkerboard2D, 4, 4, 4, 0, 5), rng);
                     }});
    LayerCase cond_coupling{"conditional_affine_coupling", s444, [](Rng& rng) {
                                return std::make_unique<AffineCoupling>(
                                    "ccoup", 4, 4, 4, 8,
                                    make_split_spec(SplitRuleKind::ChannelHalves, 4, 4, 4, 0, 5),
                                    rng, 3);
                            }};
    cond_coupling.conditioned = true;
    cond_coupling.cond_shape = Shape(1, 3, 4, 4);
    cases.push_back(std::move(cond_coupling));
    LayerCase injector{"conditional_affine_injector", s444, [](Rng& rng) {
                           return std::make_unique<CondInjector>("inj", 4, 8, 3, rng);
                       }};
    injector.conditioned = true;
    injector.cond_shape = Shape(1, 3, 4, 4);
    cases.push_back(std::move(injector));
    cases.push_back({"imap_attention", s444, [](Rng& rng) {
                         return std::make_unique<IMapAttention>("imap", 4, 4, 4, 0, rng);
                     }});
    cases.push_back({"isdp_attention", s444, [](Rng& rng) {
                         return std::make_unique<ISdpAttention>("isdp", 4, 4, 4, 0,
                                                                PatchGrid{2, 2}, 1,
                                                                SdpActivation::Sigmoid, false,
                                                                rng);
                     }});
    cases.push_back({"isdp_attention_3head_softmax", s444, [](Rng& rng) {
                         return std::make_unique<ISdpAttention>("isdp3", 4, 4, 4, 0,
                                                                PatchGrid{2, 2}, 3,
                                                                SdpActivation::Softmax, false,
                                                                rng);
                     }});
    return cases;
}

ModelConfig small_model_config(CouplingKind coupling, AttentionKind attention,
                               AttentionPosition pos, int heads, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.steps = 1;
    cfg.coupling = coupling;
    cfg.hidden_channels = 6;
    cfg.attention = attention;
    cfg.attention_position = pos;
    cfg.heads = heads;
    cfg.patches = 4;
    cfg.mixture_components = 3;
    cfg.input_channels = 1;
    cfg.input_height = 8;
    cfg.input_width = 8;
    cfg.seed = seed;
    return cfg;
}

using CheckFn = std::function<OracleReport()>;

void add_layer_roundtrips(std::vector<std::pair<std::string, CheckFn>>& checks,
                          std::uint64_t seed, int n_seeds) {
    for (const auto& lc : layer_cases()) {
        checks.emplace_back("roundtrip/" + lc.name, [lc, seed, n_seeds] {
            OracleReport rep{lc.name, "roundtrip", 0.0, 1e-8, false, seed};
            double worst = 0.0;
            for (int s = 0; s < n_seeds; ++s) {
                Rng rng(derive_seed(seed, 0xA11, std::uint64_t(s)));
                auto layer = lc.make(rng);
                randomize_layer(*layer, rng, 0.1);
                Tensor cond;
                const Tensor* cond_ptr = nullptr;
                if (lc.conditioned) {
                    cond = normal_tensor(lc.cond_shape, rng);
                    cond_ptr = &cond;
                }
                Tensor x = normal_tensor(lc.input, rng);
                try {
                    auto [y, ld] = layer_forward(*layer, x, cond_ptr);
                    Tensor back = layer_inverse(*layer, y, cond_ptr);
                    worst = std::max(worst, max_abs_diff(x, back));
                } catch (const Error&) {
                    worst = std::numeric_limits<double>::infinity();
                    break;
                }
            }
            rep.measured = worst;
            rep.pass = worst < rep.tolerance;
            return rep;
        });
    }
}

void add_layer_logdets(std::vector<std::pair<std::string, CheckFn>>& checks, std::uint64_t seed,
                       int n_seeds) {
    for (const auto& lc : layer_cases()) {
        checks.emplace_back("logdet/" + lc.name, [lc, seed, n_seeds] {
            OracleReport rep{lc.name, "logdet_vs_fd", 0.0, 1e-5, false, seed};
            double worst = 0.0;
            for (int s = 0; s < n_seeds; ++s) {
                Rng rng(derive_seed(seed, 0x10D, std::uint64_t(s)));
                auto layer = lc.make(rng);
                randomize_layer(*layer, rng, 0.1);
                Tensor cond;
                const Tensor* cond_ptr = nullptr;
                if (lc.conditioned) {
                    cond = normal_tensor(lc.cond_shape, rng);
                    cond_ptr = &cond;
                }
                Tensor x = normal_tensor(lc.input, rng);
                try {
                    const double fd = fd_jacobian_logdet(
                        [&](const Tensor& in) { return layer_forward(*layer, in, cond_ptr).first; },
                        x);
                    const double an = layer_forward(*layer, x, cond_ptr).second.data[0];
                    worst = std::max(worst, std::fabs(an - fd) / std::max(1.0, std::fabs(fd)));
                } catch (const Error&) {
                    worst = std::numeric_limits<double>::infinity();
                    break;
                }
            }
            rep.measured = worst;
            rep.pass = worst < rep.tolerance;
            return rep;
        });
    }
}

void add_block_checks(std::vector<std::pair<std::string, CheckFn>>& checks, std::uint64_t seed) {
    struct BlockCase {
        std::string name;
        std::function<std::unique_ptr<FlowLayer>(Rng&)> make;
    };
    std::vector<BlockCase> cases;
    cases.push_back({"affine_coupling_checkerboard", [](Rng& rng) {
                         return std::make_unique<AffineCoupling>(
                             "affcb", 4, 4, 4, 8,
                             make_split_spec(SplitRuleKind::Checkerboard2D, 4, 4, 4, 0, 5), rng);
                     }});
    cases.push_back({"imap_attention", [](Rng& rng) {
                         return std::make_unique<IMapAttention>("imap", 4, 4, 4, 0, rng);
                     }});
    cases.push_back({"isdp_attention", [](Rng& rng) {
                         return std::make_unique<ISdpAttention>("isdp", 4, 4, 4, 0,
                                                                PatchGrid{2, 2}, 1,
                                                                SdpActivation::Sigmoid, false,
                                                                rng);
                     }});
    for (const auto& bc : cases) {
        checks.emplace_back("block/" + bc.name, [bc, seed] {
            Rng rng(derive_seed(seed, 0xB10C));
            auto layer = bc.make(rng);
            randomize_layer(*layer, rng, 0.1);
            Tensor x = normal_tensor(Shape(1, 4, 4, 4), rng);
            // conditioning set: half-A positions over every channel
            const CheckerboardMask mask = CheckerboardMask::make_2d(4, 4, 0);
            std::vector<std::int64_t> cond;
            const std::int64_t P = 16;
            for (std::int64_t c = 0; c < 4; ++c) {
                for (const std::int64_t p : mask.positions(Half::A)) cond.push_back(c * P + p);
            }
            return block_structure_check(
                bc.name,
                [&](const Tensor& in) { return layer_forward(*layer, in, nullptr).first; }, x,
                cond);
        });
    }
}

void add_model_checks(std::vector<std::pair<std::string, CheckFn>>& checks, std::uint64_t seed) {
    struct MC {
        std::string name;
        ModelConfig cfg;
    };
    std::vector<MC> configs;
    for (const CouplingKind ck : {CouplingKind::Affine, CouplingKind::Mixture}) {
        for (const AttentionKind ak :
             {AttentionKind::None, AttentionKind::IMap, AttentionKind::ISdp}) {
            const std::string name = std::string(ck == CouplingKind::Affine ? "affine" : "mixture") +
                                     "_" +
                                     (ak == AttentionKind::None
                                          ? "none"
                                          : (ak == AttentionKind::IMap ? "imap" : "isdp"));
            configs.push_back({name, small_model_config(ck, ak, AttentionPosition::Pos4, 1, seed)});
        }
    }
    for (auto& mc : configs) {
        checks.emplace_back("model_roundtrip/" + mc.name, [mc, seed] {
            OracleReport rep{mc.name, "model_roundtrip", 0.0, 1e-7, false, seed};
            double worst = 0.0;
            for (int s = 0; s < 5; ++s) {
                Rng rng(derive_seed(seed, 0x30DE1, std::uint64_t(s)));
                FlowModel model = FlowModel::build(mc.cfg);
                model.randomize_parameters(rng, 0.05);
                Tensor x = normal_tensor(model.config().input_shape(1), rng);
                try {
                    worst = std::max(worst, model.reconstruct(x).max_abs_error);
                } catch (const Error&) {
                    worst = std::numeric_limits<double>::infinity();
                    break;
                }
            }
            rep.measured = worst;
            rep.pass = worst < rep.tolerance;
            return rep;
        });
    }
    // whole-model analytic logdet vs the dense FD oracle on a D=48 model
    checks.emplace_back("model_logdet/affine_isdp", [seed] {
        OracleReport rep{"model_L1_isdp_D48", "model_logdet_vs_fd", 0.0, 1e-4, false, seed};
        ModelConfig cfg = small_model_config(CouplingKind::Affine, AttentionKind::ISdp,
                                             AttentionPosition::Pos4, 1, seed);
        cfg.levels = 1;
        cfg.input_channels = 3;
        cfg.input_height = 4;
        cfg.input_width = 4;
        Rng rng(derive_seed(seed, 0x30DE2));
        FlowModel model = FlowModel::build(cfg);
        model.randomize_parameters(rng, 0.05);
        Tensor x = normal_tensor(model.config().input_shape(1), rng);
        try {
            const double fd = fd_jacobian_logdet(
                [&](const Tensor& in) { return model.forward_flat(in); }, x);
            const double an = model.forward(x).logdet.data[0];
            rep.measured = std::fabs(an - fd) / std::max(1.0, std::fabs(fd));
        } catch (const Error&) {
            rep.measured = std::numeric_limits<double>::infinity();
        }
        rep.pass = rep.measured < rep.tolerance;
        return rep;
    });
}

void add_gradchecks(std::vector<std::pair<std::string, CheckFn>>& checks, std::uint64_t seed) {
    for (const AttentionKind ak :
         {AttentionKind::None, AttentionKind::IMap, AttentionKind::ISdp}) {
        const std::string name =
            ak == AttentionKind::None ? "none" : (ak == AttentionKind::IMap ? "imap" : "isdp");
        checks.emplace_back("gradcheck/" + name, [ak, name, seed] {
            ModelConfig cfg = small_model_config(CouplingKind::Affine, ak,
                                                 AttentionPosition::Pos4, 1, seed);
            cfg.levels = 1;
            cfg.steps = 1;
            cfg.input_height = 4;
            cfg.input_width = 4;
            cfg.hidden_channels = 4;
            FlowModel model = FlowModel::build(cfg);
            Rng rng(derive_seed(seed, 0x94AD));
            model.randomize_parameters(rng, 0.1);
            Tensor batch = normal_tensor(model.config().input_shape(2), rng);
            const auto reports = gradcheck_all(model, batch, nullptr, 1e-5, 1e-8, seed);
            OracleReport rep{"model_" + name, "gradcheck", 0.0, 1e-5, true, seed};
            for (const auto& r : reports) {
                rep.measured = std::max(rep.measured, r.measured);
                rep.pass = rep.pass && r.pass;
            }
            return rep;
        });
    }
}

void add_mutation_checks(std::vector<std::pair<std::string, CheckFn>>& checks,
                         std::uint64_t seed) {
    // Each corrupted transform must make its oracle fail; the report passes
    // when the oracle detects the corruption.
    checks.emplace_back("mutation/sign_flipped_logdet", [seed] {
        Rng rng(derive_seed(seed, 0xDEAD1));
        Actnorm layer("actnorm", 4);
        randomize_layer(layer, rng, 0.3);
        Tensor x = normal_tensor(Shape(1, 4, 4, 4), rng);
        const double fd = fd_jacobian_logdet(
            [&](const Tensor& in) { return layer_forward(layer, in).first; }, x);
        const double an_flipped = -layer_forward(layer, x).second.data[0];
        const double err = std::fabs(an_flipped - fd) / std::max(1.0, std::fabs(fd));
        OracleReport rep{"sign_flipped_logdet", "mutation_detected", err, 1e-5, err > 1e-5, seed};
        return rep;
    });
    checks.emplace_back("mutation/skipped_inverse_half", [seed] {
        Rng rng(derive_seed(seed, 0xDEAD2));
        AffineCoupling layer("affcb", 4, 4, 4, 8,
                             make_split_spec(SplitRuleKind::Checkerboard2D, 4, 4, 4, 0, 5), rng);
        randomize_layer(layer, rng, 0.3);
        const CheckerboardMask mask = CheckerboardMask::make_2d(4, 4, 0);
        auto rep = roundtrip_check(
            "skipped_inverse_half",
            [&](const Tensor& in) { return layer_forward(layer, in).first; },
            [&](const Tensor& y) {
                // corrupted inverse: leaves the transformed half untouched
                Tensor good = layer_inverse(layer, y);
                return add(apply_mask(good, mask, Half::A), apply_mask(y, mask, Half::B));
            },
            Shape(1, 4, 4, 4), 3, 1e-8, seed);
        rep.subject = "skipped_inverse_half";
        rep.check = "mutation_detected";
        rep.pass = !rep.pass;  // detection means the round trip FAILED
        return rep;
    });
    checks.emplace_back("mutation/weights_from_transformed_half", [seed] {
        // diagonal scaling whose weights read the transformed half: the
        // block-structure oracle must flag it
        Rng rng(derive_seed(seed, 0xDEAD3));
        Tensor x = normal_tensor(Shape(1, 4, 4, 4), rng);
        const CheckerboardMask mask = CheckerboardMask::make_2d(4, 4, 0);
        std::vector<std::int64_t> cond;
        for (std::int64_t c = 0; c < 4; ++c) {
            for (const std::int64_t p : mask.positions(Half::A)) cond.push_back(c * 16 + p);
        }
        auto bad = [](const Tensor& in) {
            double mean = 0.0;
            for (const double v : in.data) mean += v;
            mean /= double(in.numel());
            const double sc = 1.0 / (1.0 + std::exp(-mean));
            Tensor y(in.shape, in.data);
            for (auto& v : y.data) v *= sc;
            return y;
        };
        OracleReport rep = block_structure_check("weights_from_transformed_half", bad, x, cond);
        rep.check = "mutation_detected";
        rep.pass = !rep.pass;
        return rep;
    });
    checks.emplace_back("oracle/fd_self_check", [seed] {
        // scaling map x -> 2x on D = 4 has logdet 4 log 2; central and
        // forward assemblies must both recover it
        Tensor x = normal_tensor(Shape(1, 1, 2, 2), *std::make_unique<Rng>(seed + 9));
        auto doubling = [](const Tensor& in) {
            Tensor y(in.shape, in.data);
            for (auto& v : y.data) v *= 2.0;
            return y;
        };
        const double expected = 4.0 * std::log(2.0);
        const double central = fd_jacobian_logdet(doubling, x);
        const double fwd = fd_jacobian_logdet(doubling, x, 1e-5, true);
        const double err =
            std::max(std::fabs(central - expected), std::fabs(fwd - expected));
        OracleReport rep{"fd_scaling_map", "oracle_self_check", err, 1e-8, err < 1e-8, seed};
        return rep;
    });
}

}  // namespace

std::vector<OracleReport> run_suite(const std::string& suite, std::uint64_t seed, int threads) {
    std::vector<std::pair<std::string, CheckFn>> checks;
    const bool all = suite == "all";
    if (all || suite == "roundtrip") add_layer_roundtrips(checks, seed, 10);
    if (all || suite == "logdet") add_layer_logdets(checks, seed, 5);
    if (all || suite == "block") add_block_checks(checks, seed);
    if (all || suite == "model") add_model_checks(checks, seed);
    if (all || suite == "gradcheck") add_gradchecks(checks, seed);
    if (all || suite == "mutation") add_mutation_checks(checks, seed);
    if (checks.empty()) {
        throw ConfigError("unknown verify suite '" + suite +
                          "' (roundtrip|logdet|block|model|gradcheck|mutation|all)");
    }
    std::vector<OracleReport> reports(checks.size());
    ThreadPool pool(threads);
    pool.parallel_for(std::int64_t(checks.size()),
                      [&](std::int64_t i) { reports[std::size_t(i)] = checks[std::size_t(i)].second(); });
    return reports;
}

void write_reports_csv(std::ostream& out, const std::vector<OracleReport>& reports) {
    out << "subject,check,measured,tolerance,pass,seed\n";
    for (const auto& r : reports) {
        out << r.subject << "," << r.check << "," << format_double(r.measured) << ","
            << format_double(r.tolerance) << "," << (r.pass ? "1" : "0") << "," << r.seed << "\n";
    }
}

bool all_pass(const std::vector<OracleReport>& reports) {
    for (const auto& r : reports) {
        if (!r.pass) return false;
    }
    return true;
}

}  // namespace verify
}  // namespace attnflow
