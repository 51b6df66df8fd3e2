#pragma once

#include <functional>
#include <map>
#include <string>

#include "attnflow/dataio.hpp"
#include "attnflow/model.hpp"
#include "attnflow/threading.hpp"

namespace attnflow {

struct TrainConfig {
    double lr = 8e-4;
    int batch = 32;
    int iters = 1000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 50.0;
    std::uint64_t seed = 1;
    int checkpoint_every = 500;
    int warmup_iters = 500;
    int threads = 1;

    void validate() const;
};

// Exponentially-weighted first moment and infinity-norm second moment per
// parameter, keyed by parameter name.
struct AdamaxState {
    struct Moment {
        std::vector<double> m;
        std::vector<double> u;
    };
    std::map<std::string, Moment> moments;
    std::int64_t t = 0;  // completed steps
};

// One Adamax update: m <- b1*m + (1-b1)*g; u <- max(b2*u, |g|);
// theta <- theta - (lr/(1-b1^t)) * m/(u+eps). t is 1-based.
void adamax_step(Tensor& param, const std::vector<double>& grad, AdamaxState::Moment& moment,
                 std::int64_t t, double lr, double beta1, double beta2, double eps);

// Mean NLL (nats) of a batch and the per-parameter gradients, accumulated in
// fixed sample order so the result is bit-identical for any worker count.
struct BatchGrads {
    double mean_nll = 0.0;
    std::vector<std::vector<double>> grads;  // parallel to the ParamMap
};
BatchGrads batch_nll_and_grads(FlowModel& model, const Tensor& batch, const Tensor* conditions,
                               ThreadPool* pool);

// Mean NLL only (no tape).
double batch_mean_nll(FlowModel& model, const Tensor& batch, const Tensor* conditions);

// Scales all gradients by max_norm/norm when the global norm exceeds
// max_norm (a scaled copy, never a direction change); returns the pre-clip
// global norm.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

struct MetricsRow {
    std::int64_t iter;
    double nll;
    double bpd;
    double grad_norm;
    double wall_ms;
};

struct TrainResult {
    std::vector<MetricsRow> metrics;
    std::int64_t iterations = 0;
};

// NLL minimization loop. Writes metrics.csv and scheduled checkpoints into
// out_dir when non-empty; on a non-finite failure the last scheduled
// checkpoint is left in place and the error is rethrown.
// start_iter > 0 resumes counting from a loaded state.
TrainResult train(FlowModel& model, const Dataset& data, const TrainConfig& cfg,
                  const std::string& out_dir, AdamaxState* state = nullptr,
                  std::int64_t start_iter = 0,
                  const std::function<void(std::int64_t, FlowModel&)>& on_checkpoint = {});

// Deterministic minibatch of dataset rows for one iteration.
std::vector<std::int64_t> batch_indices(const Dataset& data, const TrainConfig& cfg,
                                        std::int64_t iter);

}  // namespace attnflow
