#pragma once

#include "mutualctr/data.hpp"
#include "mutualctr/models.hpp"
#include "mutualctr/training.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace mutualctr::cli {

struct DatasetBlock {
    std::string format = "synth"; // synth|criteo|avazu
    std::string path;             // required for criteo/avazu
    std::array<double, 3> split{0.8, 0.1, 0.1};
    std::uint32_t min_freq = 1;   // default 10 for real formats, 1 for synth
    data::SynthConfig synth;
};

struct ModelBlock {
    models::Architecture architecture = models::Architecture::deepfm;
    models::ModelConfig config;
    std::size_t instances = 1;   // expanded into this many seeded instances
    std::string checkpoint;      // pretrained checkpoint (mutual_finetune / kd teacher source)
};

struct OutputBlock {
    std::string dir = "out";
    std::vector<std::string> formats{"json", "csv", "txt"};
};

struct ExperimentBlock {
    std::size_t instances = 4;               // co-trained / independent instance count for RQ1-3
    std::vector<std::size_t> rq4_counts{5, 4, 3, 2};
    std::size_t parallel = 1;                // worker threads for independent pretraining runs
};

/// Fully validated experiment description. Unknown keys anywhere are an
/// error; absent keys take the documented defaults (training defaults
/// depend on the mode: finetuning runs 1 epoch at lr 7e-4, everything
/// else 10 epochs at 1e-3 with patience 1).
struct ExperimentConfig {
    DatasetBlock dataset;
    std::vector<ModelBlock> models;
    train::RunConfig training;
    std::string teacher; // kd teacher checkpoint path
    OutputBlock output;
    ExperimentBlock experiment;

    static ExperimentConfig parse_json(const std::string& text);
    static ExperimentConfig load_file(const std::string& path);

    /// Canonical JSON with every default materialized; parsing it back
    /// reproduces this config exactly.
    std::string effective_json() const;
};

/// Command-line overrides applied after parsing.
struct CliOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::size_t> parallel;
    std::optional<std::size_t> epochs;
    std::optional<double> lambda;
};

void apply_overrides(ExperimentConfig& cfg, const CliOverrides& ov);

} // namespace mutualctr::cli
