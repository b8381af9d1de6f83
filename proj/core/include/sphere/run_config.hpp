#pragma once

// One flat key=value config file shared by every subcommand. Keys mirror the
// hyperparameter table field names; unknown keys are hard errors, and command
// line overrides win over file values. serialize() emits a resolved snapshot
// that reproduces the identical run when fed back in.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sphere/data.hpp"
#include "sphere/geometry.hpp"
#include "sphere/losses.hpp"
#include "sphere/network.hpp"
#include "sphere/sampling.hpp"
#include "sphere/training.hpp"

namespace sphere {

struct RunConfig {
    std::string model_name = "sphere-toy";
    ModelConfig model;
    TrainConfig train;
    NoisePolicy noise;
    LossWeights weights;
    SamplerPlan sampler;
    DatasetSpec dataset;

    std::filesystem::path checkpoint_dir = "runs/checkpoints";
    std::filesystem::path metrics_csv = "runs/metrics.csv";
    std::filesystem::path output_dir = "runs/out";
    int64_t checkpoint_every = 500;

    // ratio declared in the file, validated against the model dims (0 = unset)
    double declared_compression_ratio = 0.0;

    void validate() const;
    std::string serialize() const;

    static RunConfig defaults();
    static RunConfig from_kv(const std::map<std::string, std::string>& kv);
    static RunConfig from_file(const std::filesystem::path& path);
};

// key = value lines, '#' comments; duplicate keys are errors.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::map<std::string, std::string> parse_kv_file(const std::filesystem::path& path);

// "key=value" strings from the command line, applied over file values.
void apply_overrides(std::map<std::string, std::string>& kv,
                     const std::vector<std::string>& overrides);

}  // namespace sphere
