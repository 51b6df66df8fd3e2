// Command-line front end: train, sample, eval, reconstruct, verify.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "attnflow/checkpoint.hpp"
#include "attnflow/config.hpp"
#include "attnflow/dataio.hpp"
#include "attnflow/threading.hpp"
#include "attnflow/training.hpp"
#include "attnflow/verify.hpp"

namespace fs = std::filesystem;
using namespace attnflow;

namespace {

// exit codes: 1 usage, 2 data/format, 3 numerical
constexpr int kUsageError = 1;
constexpr int kDataError = 2;
constexpr int kNumericalError = 3;

Tensor dataset_condition_or_throw(const Dataset& data, const FlowModel& model,
                                  const std::vector<std::int64_t>& idx) {
    if (!model.config().conditional) return Tensor();
    if (!data.has_conditions) {
        throw DataError("model is conditional but the dataset carries no conditions "
                        "(set condition = downscale2 in [data])");
    }
    return data.condition_batch(idx);
}

std::vector<std::int64_t> all_indices(const Dataset& data, std::int64_t cap) {
    std::vector<std::int64_t> idx;
    const std::int64_t n = std::min<std::int64_t>(data.count(), cap);
    for (std::int64_t i = 0; i < n; ++i) idx.push_back(i);
    return idx;
}

int cmd_train(const std::string& config_path, const std::string& data_spec,
              const std::string& out_dir, std::int64_t seed_override, bool has_seed) {
    RunConfig cfg = parse_run_config_file(config_path);
    if (!data_spec.empty()) apply_data_spec(cfg.data, data_spec);
    if (has_seed) cfg.train.seed = std::uint64_t(seed_override);
    cfg.model.validate();
    cfg.train.validate();
    cfg.train.threads = resolve_thread_count();

    fs::create_directories(out_dir);
    {
        std::ofstream echo(fs::path(out_dir) / "config.echo.cfg");
        echo << run_config_text(cfg);
    }
    Dataset data = load_dataset(cfg.data);
    if (cfg.model.conditional && data.has_conditions) {
        cfg.model.condition_channels = data.conditions.shape.c;
    }
    FlowModel model = FlowModel::build(cfg.model);
    std::cout << "parameters: " << model.param_count() << "\n";

    auto write_samples = [&](std::int64_t iter, FlowModel& m) {
        if (m.config().conditional) return;  // sample grids need a condition source
        Rng rng(derive_seed(cfg.train.seed, 0x5A3, std::uint64_t(iter)));
        Tensor batch = m.sample(16, 0.8, rng);
        const fs::path p = fs::path(out_dir) / ("samples_" + std::to_string(iter) + ".pgm");
        pgm_write(tile_grid(batch), p.string());
    };
    AdamaxState opt;
    const TrainResult result = train(model, data, cfg.train, out_dir, &opt, 0, write_samples);
    std::cout << "trained " << result.iterations << " iterations; final nll = "
              << format_double(result.metrics.empty() ? 0.0 : result.metrics.back().nll) << "\n";
    return 0;
}

int cmd_sample(const std::string& ckpt_path, std::int64_t n, double temperature,
               const std::string& out_path, const std::string& data_spec) {
    const Checkpoint ck = Checkpoint::load(ckpt_path);
    FlowModel model = ck.rebuild();
    Rng rng(0);
    Tensor batch;
    if (model.config().conditional) {
        if (data_spec.empty()) {
            throw ConfigError("sampling a conditional model requires --data for the conditions");
        }
        DataConfig dc;
        apply_data_spec(dc, data_spec);
        dc.condition = "downscale2";
        Dataset data = load_dataset(dc);
        const auto idx = all_indices(data, n);
        Tensor cond = data.condition_batch(idx);
        batch = model.sample(std::int64_t(idx.size()), temperature, rng, &cond);
    } else {
        batch = model.sample(n, temperature, rng);
    }
    pgm_write(tile_grid(batch), out_path);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_spec) {
    const Checkpoint ck = Checkpoint::load(ckpt_path);
    FlowModel model = ck.rebuild();
    DataConfig dc;
    apply_data_spec(dc, data_spec);
    if (model.config().conditional) dc.condition = "downscale2";
    Dataset data = load_dataset(dc);
    if (!(data.sample_shape() == model.config().input_shape())) {
        throw DataError("dataset samples " + data.sample_shape().str() +
                        " do not match model input " + model.config().input_shape().str());
    }
    const auto idx = all_indices(data, 4096);
    Tensor batch = data.batch(idx);
    Tensor cond = dataset_condition_or_throw(data, model, idx);
    const double nll =
        batch_mean_nll(model, batch, model.config().conditional ? &cond : nullptr);
    const std::int64_t dims = model.config().input_channels * model.config().input_height *
                              model.config().input_width;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "bits/dim = %.9f", bits_per_dim(-nll, dims));
    std::cout << buf << "\n";
    return 0;
}

int cmd_reconstruct(const std::string& ckpt_path, const std::string& data_spec,
                    const std::string& out_path) {
    const Checkpoint ck = Checkpoint::load(ckpt_path);
    FlowModel model = ck.rebuild();
    DataConfig dc;
    apply_data_spec(dc, data_spec);
    if (model.config().conditional) dc.condition = "downscale2";
    Dataset data = load_dataset(dc);
    const auto idx = all_indices(data, 16);
    Tensor batch = data.batch(idx);
    Tensor cond = dataset_condition_or_throw(data, model, idx);
    const auto rec =
        model.reconstruct(batch, model.config().conditional ? &cond : nullptr);
    std::cout << "max-abs reconstruction error = " << format_double(rec.max_abs_error) << "\n";
    pgm_write(tile_grid(rec.x_hat), out_path);
    return 0;
}

int cmd_verify(const std::string& suite, std::uint64_t seed) {
    const auto reports = verify::run_suite(suite, seed, resolve_thread_count());
    verify::write_reports_csv(std::cout, reports);
    return verify::all_pass(reports) ? 0 : kNumericalError;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"attnflow: invertible-attention normalizing flows"};
    app.require_subcommand(1);

    std::string config_path, data_spec, out_path, ckpt_path, suite = "all";
    std::int64_t n = 16;
    double temperature = 0.8;
    std::int64_t seed = 0;
    std::uint64_t vseed = 7;

    auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
    train_cmd->add_option("--config", config_path, "run configuration file")->required();
    train_cmd->add_option("--data", data_spec, "dataset override spec");
    train_cmd->add_option("--out", out_path, "output directory")->required();
    auto* seed_opt = train_cmd->add_option("--seed", seed, "training seed override");

    auto* sample_cmd = app.add_subcommand("sample", "draw samples from a checkpoint");
    sample_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    sample_cmd->add_option("--n", n, "number of samples");
    sample_cmd->add_option("--temperature", temperature, "prior temperature (0 = deterministic)");
    sample_cmd->add_option("--out", out_path, "output PGM path")->required();
    sample_cmd->add_option("--data", data_spec, "condition source for conditional models");

    auto* eval_cmd = app.add_subcommand("eval", "report bits/dim on a dataset");
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    eval_cmd->add_option("--data", data_spec, "dataset spec")->required();

    auto* rec_cmd = app.add_subcommand("reconstruct", "round-trip a batch and report the error");
    rec_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    rec_cmd->add_option("--data", data_spec, "dataset spec")->required();
    rec_cmd->add_option("--out", out_path, "output PGM path")->required();

    auto* verify_cmd = app.add_subcommand("verify", "run the numerical oracle suites");
    verify_cmd->add_option("--suite", suite, "suite name or 'all'");
    verify_cmd->add_option("--seed", vseed, "oracle seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kUsageError;
    }

    try {
        if (train_cmd->parsed()) {
            return cmd_train(config_path, data_spec, out_path, seed, seed_opt->count() > 0);
        }
        if (sample_cmd->parsed()) return cmd_sample(ckpt_path, n, temperature, out_path, data_spec);
        if (eval_cmd->parsed()) return cmd_eval(ckpt_path, data_spec);
        if (rec_cmd->parsed()) return cmd_reconstruct(ckpt_path, data_spec, out_path);
        if (verify_cmd->parsed()) return cmd_verify(suite, vseed);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsageError;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumericalError;
    } catch (const DomainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumericalError;
    } catch (const Error& e) {
        // format, data, io, shape: data/format class
        std::cerr << "error: " << e.what() << "\n";
        return kDataError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kDataError;
    }
    return kUsageError;
}
