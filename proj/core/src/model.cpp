#include "attnflow/model.hpp"

#include <cmath>

namespace attnflow {

void ModelConfig::validate() const {
    if (levels < 1) throw ConfigError("levels must be >= 1");
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (hidden_channels < 1) throw ConfigError("hidden_channels must be >= 1");
    if (heads < 1) throw ConfigError("heads must be >= 1");
    if (patches < 1) throw ConfigError("patches must be >= 1");
    if (mixture_components < 1) throw ConfigError("mixture_components must be >= 1");
    if (mask_phase != 0 && mask_phase != 1) throw ConfigError("mask_phase must be 0 or 1");
    if (input_channels < 1 || input_height < 1 || input_width < 1) {
        throw ConfigError("input shape extents must be positive");
    }
    const std::int64_t div = std::int64_t(1) << levels;
    if (input_height % div != 0 || input_width % div != 0) {
        throw ConfigError("spatial dims (" + std::to_string(input_height) + "," +
                          std::to_string(input_width) + ") not divisible by 2^levels = " +
                          std::to_string(div));
    }
}

FlowModel::FlowModel(ModelConfig cfg, std::vector<std::unique_ptr<FlowLayer>> layers)
    : config_(std::move(cfg)), explicit_stack_(!layers.empty()) {
    for (auto& l : layers) layers_.push_back(Entry{std::move(l), 0});
}

FlowModel FlowModel::build(const ModelConfig& cfg) {
    cfg.validate();
    FlowModel model(cfg, {});
    Rng rng(cfg.seed);

    std::int64_t c = cfg.input_channels;
    std::int64_t h = cfg.input_height;
    std::int64_t w = cfg.input_width;

    if (cfg.conditional) {
        model.encoder_ = ConditionEncoder(cfg.condition_channels, cfg.hidden_channels, rng);
        model.has_encoder_ = true;
    }
    const std::int64_t cond_c_l0 = cfg.conditional ? cfg.hidden_channels : 0;

    for (int level = 0; level < cfg.levels; ++level) {
        const std::string lp = "l" + std::to_string(level);
        model.layers_.push_back(Entry{std::make_unique<Squeeze>(lp + ".squeeze"), level});
        c *= 4;
        h /= 2;
        w /= 2;
        const std::int64_t cond_c = cfg.conditional ? cond_c_l0 << (2 * (level + 1)) : 0;

        for (int step = 0; step < cfg.steps; ++step) {
            const std::string sp = lp + ".s" + std::to_string(step);
            auto add_attention = [&] {
                if (cfg.attention == AttentionKind::IMap) {
                    model.layers_.push_back(Entry{
                        std::make_unique<IMapAttention>(sp + ".attn", c, h, w, cfg.mask_phase,
                                                        rng),
                        level});
                } else if (cfg.attention == AttentionKind::ISdp) {
                    const PatchGrid grid = fit_patch_grid(h, w, cfg.patches);
                    model.layers_.push_back(Entry{
                        std::make_unique<ISdpAttention>(sp + ".attn", c, h, w, cfg.mask_phase,
                                                        grid, cfg.heads, cfg.isdp_activation,
                                                        cfg.isdp_pure_eq6, rng),
                        level});
                }
            };

            if (cfg.attention_position == AttentionPosition::Pos1) add_attention();
            model.layers_.push_back(Entry{std::make_unique<Actnorm>(sp + ".actnorm", c), level});
            if (cfg.attention_position == AttentionPosition::Pos2) add_attention();
            model.layers_.push_back(
                Entry{std::make_unique<InvConv1x1>(sp + ".invconv", c, &rng), level});
            if (cfg.attention_position == AttentionPosition::Pos3) add_attention();

            if (cfg.conditional) {
                model.layers_.push_back(Entry{
                    std::make_unique<CondInjector>(sp + ".injector", c, cfg.hidden_channels,
                                                   cond_c, rng),
                    level});
                SplitSpec spec = make_split_spec(
                    cfg.split_rule, c, h, w, cfg.mask_phase,
                    derive_seed(cfg.mask_seed, std::uint64_t(level), std::uint64_t(step), 3));
                model.layers_.push_back(Entry{
                    std::make_unique<AffineCoupling>(sp + ".coupling", c, h, w,
                                                     cfg.hidden_channels, std::move(spec), rng,
                                                     cond_c),
                    level});
            } else {
                SplitSpec spec = make_split_spec(
                    cfg.split_rule, c, h, w, cfg.mask_phase,
                    derive_seed(cfg.mask_seed, std::uint64_t(level), std::uint64_t(step), 3));
                if (cfg.coupling == CouplingKind::Affine) {
                    model.layers_.push_back(Entry{
                        std::make_unique<AffineCoupling>(sp + ".coupling", c, h, w,
                                                         cfg.hidden_channels, std::move(spec),
                                                         rng),
                        level});
                } else {
                    model.layers_.push_back(Entry{
                        std::make_unique<MixtureCoupling>(sp + ".coupling", c, h, w,
                                                          cfg.hidden_channels,
                                                          cfg.mixture_components,
                                                          std::move(spec), rng),
                        level});
                }
            }
            if (cfg.attention_position == AttentionPosition::Pos4) add_attention();
        }

        if (level + 1 < cfg.levels) {
            model.layers_.push_back(Entry{std::make_unique<SplitPrior>(lp + ".split", c), level});
            c /= 2;
        }
    }
    return model;
}

std::vector<Tensor> FlowModel::condition_features(const Tensor& c) const {
    std::vector<Tensor> features;
    Tensor f = encoder_.encode(c);
    for (int level = 0; level < config_.levels; ++level) {
        f = squeeze2x2(f);
        features.push_back(f);
    }
    return features;
}

ForwardResult FlowModel::forward(const Tensor& x, const Tensor* condition) {
    if (!(Shape(x.shape.b, config_.input_channels, config_.input_height, config_.input_width) ==
          x.shape)) {
        throw ShapeError("forward: input " + x.shape.str() + " does not match model input " +
                         config_.input_shape().str());
    }
    if (config_.conditional && !condition) {
        throw DataError("forward: conditional model requires a condition");
    }
    if (!config_.conditional && condition) {
        throw DataError("forward: unconditional model given a condition");
    }
    std::vector<Tensor> features;
    if (config_.conditional) features = condition_features(*condition);

    FlowState s;
    s.h = x;
    s.logdet = Tensor(Shape(x.shape.b, 1, 1, 1));
    s.logprior = Tensor(Shape(x.shape.b, 1, 1, 1));
    for (auto& e : layers_) {
        const Tensor* cond = features.empty() ? nullptr : &features[std::size_t(e.level)];
        e.layer->forward(s, cond);
    }
    s.logprior = add(s.logprior, gaussian_logprob_per_sample(s.h));
    s.latents.push_back(s.h);

    ForwardResult out;
    out.latents = std::move(s.latents);
    out.logdet = std::move(s.logdet);
    out.logprior = std::move(s.logprior);
    return out;
}

Tensor FlowModel::log_likelihood(const Tensor& x, const Tensor* condition) {
    return forward(x, condition).logp();
}

Tensor FlowModel::inverse_from_latents(std::vector<Tensor> latents,
                                       const Tensor* condition) const {
    if (latents.empty()) throw ShapeError("inverse: no latents");
    std::vector<Tensor> features;
    if (config_.conditional) {
        if (!condition) throw DataError("inverse: conditional model requires a condition");
        features = condition_features(*condition);
    }
    InverseState s;
    s.h = std::move(latents.back());
    latents.pop_back();
    s.latents = std::move(latents);
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
        const Tensor* cond = features.empty() ? nullptr : &features[std::size_t(it->level)];
        it->layer->inverse(s, cond);
    }
    return s.h;
}

Tensor FlowModel::sample(std::int64_t n, double temperature, Rng& rng,
                         const Tensor* condition) const {
    if (temperature < 0.0) throw DomainError("sample: temperature must be >= 0");
    std::vector<Tensor> features;
    if (config_.conditional) {
        if (!condition) throw DataError("sample: conditional model requires a condition");
        features = condition_features(*condition);
    }
    const std::vector<Shape> shapes = latent_shapes(n);
    InverseState s;
    s.sample_mode = true;
    s.temperature = temperature;
    s.rng = &rng;
    Tensor z(shapes.back());
    for (auto& v : z.data) v = temperature * rng.normal();
    s.h = std::move(z);
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
        const Tensor* cond = features.empty() ? nullptr : &features[std::size_t(it->level)];
        it->layer->inverse(s, cond);
    }
    return s.h;
}

FlowModel::Recon FlowModel::reconstruct(const Tensor& x, const Tensor* condition) {
    ForwardResult f = forward(x, condition);
    std::vector<Tensor> latents;
    latents.reserve(f.latents.size());
    for (const auto& t : f.latents) latents.push_back(detach(t));
    Tensor x_hat = inverse_from_latents(std::move(latents), condition);
    return Recon{x_hat, max_abs_diff(x, x_hat)};
}

ParamMap FlowModel::parameters() {
    ParamMap out;
    if (has_encoder_) encoder_.params("encoder", out);
    for (auto& e : layers_) e.layer->params(out);
    return out;
}

std::int64_t FlowModel::param_count() {
    std::int64_t n = 0;
    for (auto& [name, t] : parameters()) n += t->numel();
    return n;
}

std::vector<Shape> FlowModel::latent_shapes(std::int64_t batch) const {
    std::vector<Shape> shapes;
    std::int64_t c = config_.input_channels, h = config_.input_height, w = config_.input_width;
    if (explicit_stack_ || layers_.empty()) {
        // explicit stacks carry no squeeze/split structure
        shapes.push_back(Shape(batch, c, h, w));
        return shapes;
    }
    for (int level = 0; level < config_.levels; ++level) {
        c *= 4;
        h /= 2;
        w /= 2;
        if (level + 1 < config_.levels) {
            shapes.push_back(Shape(batch, c / 2, h, w));  // split latent
            c /= 2;
        }
    }
    shapes.push_back(Shape(batch, c, h, w));  // final z
    return shapes;
}

Tensor FlowModel::forward_flat(const Tensor& x, const Tensor* condition) {
    ForwardResult f = forward(x, condition);
    Tensor flat(Shape(x.shape.b, 1, 1, x.numel() / x.shape.b));
    std::size_t off = 0;
    for (const auto& z : f.latents) {
        std::copy(z.data.begin(), z.data.end(), flat.data.begin() + std::ptrdiff_t(off));
        off += z.data.size();
    }
    if (off != flat.data.size()) {
        throw ShapeError("forward_flat: latent volume does not match input volume");
    }
    return flat;
}

bool FlowModel::actnorm_initialized() const {
    for (const auto& e : layers_) {
        if (auto* a = dynamic_cast<const Actnorm*>(e.layer.get())) {
            if (!a->initialized()) return false;
        }
    }
    return true;
}

void FlowModel::set_actnorm_initialized(bool v) {
    for (auto& e : layers_) {
        if (auto* a = dynamic_cast<Actnorm*>(e.layer.get())) a->set_initialized(v);
    }
}

void FlowModel::set_actnorm_identity() {
    for (auto& e : layers_) {
        if (auto* a = dynamic_cast<Actnorm*>(e.layer.get())) {
            std::fill(a->log_scale.data.begin(), a->log_scale.data.end(), 0.0);
            std::fill(a->bias.data.begin(), a->bias.data.end(), 0.0);
            a->set_initialized(true);
        }
    }
}

void FlowModel::randomize_parameters(Rng& rng, double stddev) {
    for (auto& [name, t] : parameters()) {
        for (auto& v : t->data) v += stddev * rng.normal();
    }
    set_actnorm_initialized(true);
}

double bits_per_dim(double logp_nats, std::int64_t dims) {
    if (dims <= 0) throw DomainError("bits_per_dim: dims must be positive");
    return -logp_nats / (double(dims) * std::log(2.0)) + 8.0;
}

}  // namespace attnflow
