#pragma once

#include "mutualctr/config.hpp"
#include "mutualctr/data.hpp"
#include "mutualctr/eval.hpp"
#include "mutualctr/training.hpp"

#include <string>

namespace mutualctr::cli {

/// Builds the dataset (generating synthetic data when configured),
/// writes schema.json, examples.bin, split.json and the dataset
/// metadata under <out>/cache/. Idempotent: same config, same bytes.
void cmd_prepare(const ExperimentConfig& cfg);

/// Loads the prepared cache; throws with a "run prepare first" hint
/// when it is missing.
data::Dataset load_prepared(const ExperimentConfig& cfg);

/// Dispatches on training.mode and writes checkpoints + reports.
void cmd_train(const ExperimentConfig& cfg);

/// RQ presets 1-4. Each emits per-run reports plus a table under
/// <out>/tables/. Pretraining runs reuse checkpoints already on disk
/// (they are deterministic), so rq2-4 pick up rq1's work when present
/// and otherwise train what is missing.
void cmd_experiment(const ExperimentConfig& cfg, int rq);

/// AUC + logloss of a checkpoint on one dataset part; returns the
/// metrics JSON that is also printed.
std::string cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path, const std::string& part);

/// Re-emits tables from the experiment cell files under <out>/reports/.
void cmd_report(const ExperimentConfig& cfg);

} // namespace mutualctr::cli
