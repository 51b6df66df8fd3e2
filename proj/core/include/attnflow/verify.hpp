#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "attnflow/model.hpp"

namespace attnflow {
namespace verify {

struct OracleReport {
    std::string subject;
    std::string check;
    double measured = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    std::uint64_t seed = 0;
};

// Value-only map with output volume equal to input volume.
using TransformFn = std::function<Tensor(const Tensor&)>;

// Dense Jacobian log|det| by finite differences, column by column (central
// differences by default, one-sided when forward_difference is set).
// x must be a single sample with C*H*W <= 256.
double fd_jacobian_logdet(const TransformFn& f, const Tensor& x, double eps = 1e-5,
                          bool forward_difference = false);

// max over seeds of the max-abs round-trip error of inv(fwd(x)).
OracleReport roundtrip_check(const std::string& subject, const TransformFn& fwd,
                             const TransformFn& inv, Shape input, int n_seeds, double tolerance,
                             std::uint64_t seed);

// |analytic - fd| / max(1, |fd|) against `tolerance`, worst case over seeds.
// `analytic` returns the layer's per-sample logdet for the same input.
OracleReport logdet_check(const std::string& subject, const TransformFn& fwd,
                          const std::function<double(const Tensor&)>& analytic, Shape input,
                          int n_seeds, double tolerance, std::uint64_t seed);

// Asserts all FD-Jacobian entries dy[conditioning]/dx[transformed] vanish
// under the canonical conditioning-then-transformed ordering.
// `cond_flat` lists the flattened per-sample indices of the conditioning set.
OracleReport block_structure_check(const std::string& subject, const TransformFn& f,
                                   const Tensor& x, const std::vector<std::int64_t>& cond_flat,
                                   double tolerance = 1e-10);

// Backward adjoints of the mean batch NLL versus central differences for
// every parameter; relative tolerance with an absolute floor.
std::vector<OracleReport> gradcheck_all(FlowModel& model, const Tensor& batch,
                                        const Tensor* conditions = nullptr,
                                        double rel_tol = 1e-5, double abs_floor = 1e-8,
                                        std::uint64_t seed = 0);

// Named suites: "roundtrip", "logdet", "block", "gradcheck", "model",
// "mutation", or "all". Checks run independently (optionally in parallel) and
// reports are merged in declaration order.
std::vector<OracleReport> run_suite(const std::string& suite, std::uint64_t seed, int threads);

void write_reports_csv(std::ostream& out, const std::vector<OracleReport>& reports);
bool all_pass(const std::vector<OracleReport>& reports);

}  // namespace verify
}  // namespace attnflow
