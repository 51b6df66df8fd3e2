#pragma once

#include <string>

#include "attnflow/model.hpp"
#include "attnflow/training.hpp"

namespace attnflow {

struct DataConfig {
    std::string kind = "toy2d";  // toy2d | idx
    std::string name = "checker-density";
    int resolution = 8;
    std::int64_t count = 2048;
    std::string path;
    int downscale = 1;
    std::string condition = "none";  // none | downscale2
    std::uint64_t seed = 11;
};

// Parsed `key = value` run configuration with [model], [train] and [data]
// sections. Every key has a default; unknown keys or sections are errors.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
};

RunConfig parse_run_config_text(const std::string& text);
RunConfig parse_run_config_file(const std::string& path);

// Canonical serializations: fixed key order, round-trippable numbers. The
// model section doubles as the checkpoint's embedded config.
std::string model_config_text(const ModelConfig& m);
std::string run_config_text(const RunConfig& c);
ModelConfig parse_model_config_text(const std::string& text);

Dataset load_dataset(const DataConfig& d);
// "idx:<path>[:downscale]", "toy2d:<name>:<resolution>:<count>[:seed]" or a
// bare IDX path; overrides the matching DataConfig fields.
void apply_data_spec(DataConfig& d, const std::string& spec);

}  // namespace attnflow
