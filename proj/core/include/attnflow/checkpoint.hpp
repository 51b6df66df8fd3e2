#pragma once

#include <string>
#include <utility>
#include <vector>

#include "attnflow/model.hpp"
#include "attnflow/training.hpp"

namespace attnflow {

// Versioned binary snapshot: magic "AFCK", the canonical model config text,
// iteration and optimizer state, and a named parameter table of little-endian
// 64-bit float payloads. save -> load -> save is byte-identical.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::string config_text;
    std::int64_t iteration = 0;
    bool actnorm_initialized = false;
    bool has_opt_state = false;
    std::int64_t adamax_t = 0;
    std::vector<std::pair<std::string, Tensor>> params;
    // m and u payloads, parallel to params, present when has_opt_state
    std::vector<std::pair<std::vector<double>, std::vector<double>>> moments;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

    static Checkpoint capture(FlowModel& model, std::int64_t iteration,
                              const AdamaxState* opt = nullptr);
    // Validates parameter names and shapes against the target model.
    void restore_into(FlowModel& model, AdamaxState* opt = nullptr) const;
    // Rebuilds the model from the embedded config and restores parameters.
    FlowModel rebuild(AdamaxState* opt = nullptr) const;
};

}  // namespace attnflow
