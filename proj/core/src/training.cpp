#include "attnflow/training.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>

#include "attnflow/checkpoint.hpp"

namespace attnflow {

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("lr must be positive");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (iters < 0) throw ConfigError("iters must be >= 0");
    if (grad_clip <= 0.0) throw ConfigError("grad_clip must be positive");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (warmup_iters < 0) throw ConfigError("warmup_iters must be >= 0");
}

void adamax_step(Tensor& param, const std::vector<double>& grad, AdamaxState::Moment& moment,
                 std::int64_t t, double lr, double beta1, double beta2, double eps) {
    const std::size_t n = param.data.size();
    if (grad.size() != n) throw ShapeError("adamax_step: gradient size mismatch");
    if (moment.m.empty()) {
        moment.m.assign(n, 0.0);
        moment.u.assign(n, 0.0);
    }
    const double corr = lr / (1.0 - std::pow(beta1, double(t)));
    for (std::size_t i = 0; i < n; ++i) {
        moment.m[i] = beta1 * moment.m[i] + (1.0 - beta1) * grad[i];
        moment.u[i] = std::max(beta2 * moment.u[i], std::fabs(grad[i]));
        param.data[i] -= corr * moment.m[i] / (moment.u[i] + eps);
    }
}

std::vector<std::int64_t> batch_indices(const Dataset& data, const TrainConfig& cfg,
                                        std::int64_t iter) {
    Rng rng(derive_seed(cfg.seed, 0xBA7C4, std::uint64_t(iter)));
    std::vector<std::int64_t> idx(std::size_t(cfg.batch));
    for (auto& i : idx) i = std::int64_t(rng.below(std::uint64_t(data.count())));
    return idx;
}

namespace {

// Per-sample forward/backward. Returns the sample's NLL and writes its
// per-parameter gradients; runs on its own tape so results do not depend on
// how samples are distributed over workers.
double sample_nll_and_grads(FlowModel& model, const Tensor& sample, const Tensor* condition,
                            std::vector<std::vector<double>>& grads_out) {
    Tape tape;
    TapeScope scope(tape);
    ParamMap params = model.parameters();
    for (auto& [name, t] : params) tape.watch(*t);
    Tensor logp = model.log_likelihood(sample, condition);
    Tensor nll = neg(logp);
    tape.backward(nll);
    grads_out.clear();
    grads_out.reserve(params.size());
    for (auto& [name, t] : params) grads_out.push_back(tape.grad(*t).data);
    return nll.data[0];
}

Tensor one_sample(const Tensor& batch, std::int64_t b) {
    const std::int64_t per = batch.shape.c * batch.shape.h * batch.shape.w;
    Tensor s(Shape(1, batch.shape.c, batch.shape.h, batch.shape.w));
    std::copy_n(batch.data.data() + b * per, per, s.data.data());
    return s;
}

}  // namespace

BatchGrads batch_nll_and_grads(FlowModel& model, const Tensor& batch, const Tensor* conditions,
                               ThreadPool* pool) {
    const std::int64_t B = batch.shape.b;
    ParamMap params = model.parameters();

    std::vector<double> nlls(static_cast<std::size_t>(B));
    std::vector<std::vector<std::vector<double>>> per_sample(static_cast<std::size_t>(B));
    auto run_one = [&](std::int64_t b) {
        Tensor s = one_sample(batch, b);
        Tensor c;
        if (conditions) c = one_sample(*conditions, b);
        nlls[std::size_t(b)] =
            sample_nll_and_grads(model, s, conditions ? &c : nullptr, per_sample[std::size_t(b)]);
    };
    if (pool) {
        pool->parallel_for(B, run_one);
    } else {
        for (std::int64_t b = 0; b < B; ++b) run_one(b);
    }

    // fixed-order reduction over samples, then one division by B
    BatchGrads out;
    out.grads.assign(params.size(), {});
    for (std::size_t p = 0; p < params.size(); ++p) {
        out.grads[p].assign(params[p].second->data.size(), 0.0);
    }
    double nll_sum = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        nll_sum += nlls[std::size_t(b)];
        for (std::size_t p = 0; p < params.size(); ++p) {
            const auto& g = per_sample[std::size_t(b)][p];
            for (std::size_t i = 0; i < g.size(); ++i) out.grads[p][i] += g[i];
        }
    }
    const double invb = 1.0 / double(B);
    out.mean_nll = nll_sum * invb;
    for (auto& g : out.grads) {
        for (auto& v : g) v *= invb;
    }
    return out;
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
    double norm_sq = 0.0;
    for (const auto& g : grads) {
        for (const double v : g) norm_sq += v * v;
    }
    const double norm = std::sqrt(norm_sq);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& g : grads) {
            for (auto& v : g) v *= scale;
        }
    }
    return norm;
}

double batch_mean_nll(FlowModel& model, const Tensor& batch, const Tensor* conditions) {
    const std::int64_t B = batch.shape.b;
    double sum = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        Tensor s = one_sample(batch, b);
        Tensor c;
        if (conditions) c = one_sample(*conditions, b);
        sum += -model.log_likelihood(s, conditions ? &c : nullptr).data[0];
    }
    return sum / double(B);
}

TrainResult train(FlowModel& model, const Dataset& data, const TrainConfig& cfg,
                  const std::string& out_dir, AdamaxState* state, std::int64_t start_iter,
                  const std::function<void(std::int64_t, FlowModel&)>& on_checkpoint) {
    cfg.validate();
    if (!(data.sample_shape() == model.config().input_shape())) {
        throw DataError("train: dataset samples " + data.sample_shape().str() +
                        " do not match model input " + model.config().input_shape().str());
    }
    if (model.config().conditional && !data.has_conditions) {
        throw DataError("train: conditional model but the dataset carries no conditions");
    }
    AdamaxState local_state;
    AdamaxState& opt = state ? *state : local_state;
    ThreadPool pool(cfg.threads);

    const std::filesystem::path dir(out_dir);
    const bool writing = !out_dir.empty();
    if (writing) std::filesystem::create_directories(dir);
    const std::string metrics_path = (dir / "metrics.csv").string();
    const std::vector<std::string> header{"iter", "nll", "bpd", "grad_norm", "wall_ms"};

    const std::int64_t dims =
        model.config().input_channels * model.config().input_height * model.config().input_width;
    ParamMap params = model.parameters();

    auto emit_checkpoint = [&](std::int64_t iter) {
        if (writing) {
            Checkpoint ck = Checkpoint::capture(model, iter, &opt);
            ck.save((dir / "ckpt_latest.afck").string());
        }
        if (on_checkpoint) on_checkpoint(iter, model);
    };

    TrainResult result;
    for (std::int64_t iter = start_iter; iter < start_iter + cfg.iters; ++iter) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto idx = batch_indices(data, cfg, iter);
        Tensor batch = data.batch(idx);
        Tensor cond;
        if (model.config().conditional) cond = data.condition_batch(idx);
        const Tensor* cond_ptr = model.config().conditional ? &cond : nullptr;

        // data-dependent actnorm initialization sees the whole first batch
        if (!model.actnorm_initialized()) {
            (void)model.log_likelihood(batch, cond_ptr);
        }

        BatchGrads bg;
        try {
            bg = batch_nll_and_grads(model, batch, cond_ptr, &pool);
        } catch (const NumericalError& e) {
            throw NumericalError("training aborted at iteration " + std::to_string(iter) + ": " +
                                 e.what());
        }
        if (!std::isfinite(bg.mean_nll)) {
            throw NumericalError("training aborted at iteration " + std::to_string(iter) +
                                 ": non-finite loss");
        }

        for (std::size_t p = 0; p < params.size(); ++p) {
            for (const double v : bg.grads[p]) {
                if (!std::isfinite(v)) {
                    throw NumericalError("NaN gradient for parameter " + params[p].first +
                                         " at iteration " + std::to_string(iter));
                }
            }
        }
        const double grad_norm = clip_global_norm(bg.grads, cfg.grad_clip);

        const double warm = cfg.warmup_iters > 0
                                ? std::min(1.0, double(iter + 1) / double(cfg.warmup_iters))
                                : 1.0;
        const double lr_t = cfg.lr * warm;
        opt.t += 1;
        for (std::size_t p = 0; p < params.size(); ++p) {
            adamax_step(*params[p].second, bg.grads[p], opt.moments[params[p].first], opt.t, lr_t,
                        cfg.beta1, cfg.beta2, cfg.eps);
        }

        const double wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        MetricsRow row{iter, bg.mean_nll, bits_per_dim(-bg.mean_nll, dims), grad_norm, wall_ms};
        result.metrics.push_back(row);
        if (writing) {
            csv_append(metrics_path, header,
                       {std::to_string(row.iter), format_double(row.nll), format_double(row.bpd),
                        format_double(row.grad_norm), format_double(row.wall_ms)});
        }
        result.iterations = iter + 1;
        if ((iter + 1) % cfg.checkpoint_every == 0) emit_checkpoint(iter + 1);
    }
    emit_checkpoint(start_iter + cfg.iters);
    return result;
}

}  // namespace attnflow
