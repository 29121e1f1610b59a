#pragma once

#include "mutualctr/data.hpp"
#include "mutualctr/eval.hpp"
#include "mutualctr/models.hpp"
#include "mutualctr/tape.hpp"

#include <optional>
#include <string>
#include <vector>

namespace mutualctr::train {

// ---- losses ---------------------------------------------------------------

/// Mean binary cross entropy of probabilities against 0/1 labels.
/// Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
/// `probs` must be [B x 1] with B == labels.size().
ad::Var bce_loss(ad::Tape& tape, const std::vector<double>& labels, ad::Var probs);

/// Mean squared error between two equal-shape prediction vectors.
ad::Var mse_loss(ad::Tape& tape, ad::Var p1, ad::Var p2);

/// Mutual loss for one network: 1/(N-1) * sum over peers of the MSE
/// between the peer's predictions and its own. Peer predictions enter
/// as constants (already detached), so no gradient reaches them.
ad::Var mutual_term(ad::Tape& tape, ad::Var own, const std::vector<ad::Tensor>& peer_predictions);

/// Same formula with every prediction living on one tape, for
/// composite-graph use. When detach_peers is set (the default
/// convention), peer predictions are detached before the MSE.
ad::Var mutual_term_on_tape(ad::Tape& tape, std::span<const ad::Var> predictions, std::size_t n,
                            bool detach_peers);

// ---- optimizer and schedule ------------------------------------------------

/// Adam with bias correction. Moments are allocated on first use and
/// aligned with the parameter vector; `step` is shared by all
/// parameters of one model.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    std::vector<ad::Tensor> m;
    std::vector<ad::Tensor> v;
};

/// One update over all parameters. A NaN gradient aborts with an error
/// naming the parameter.
void adam_step(std::vector<ad::Parameter>& params, const ad::Gradients& grads, AdamState& state, double lr);

/// Exponential decay reaching one tenth after three epochs:
/// lr0 * 10^(-t/3) with t in fractional epochs.
double lr_at(double lr0, double t);

// ---- run configuration and report ------------------------------------------

enum class RunMode { independent, mutual_scratch, mutual_finetune, kd };

RunMode run_mode_from_string(const std::string& name);
std::string run_mode_name(RunMode mode);

struct RunConfig {
    RunMode mode = RunMode::independent;
    double lr0 = 1e-3;
    std::size_t epochs = 10;
    std::size_t patience = 1;  // epochs without dev-AUC improvement before stopping; 0 disables
    std::size_t batch_size = 4000;
    std::uint64_t seed = 42;
    double lambda = 1.0;       // mutual loss weight
    double l2_embedding = 1e-5;
    double l2_dense = 1e-7;
    double kd_alpha = 0.5;
    bool coupled_gradients = false; // experimentation flag: one joint loss, no detachment
    std::size_t max_steps = 0;      // 0 = unlimited; otherwise stop after this many optimizer steps
};

struct EpochMetrics {
    std::size_t epoch = 0;       // 1-based
    std::size_t model_index = 0;
    double train_loss = 0.0;     // optimization objective without the L2 term
    double dev_auc = 0.0;
    double dev_logloss = 0.0;
    double lr = 0.0;             // lr at the first step of the epoch
};

struct ModelFinal {
    std::string model_id;
    std::string architecture;
    std::size_t best_epoch = 0; // 0 when no epoch ran
    double dev_auc = 0.0;
    double dev_logloss = 0.0;
    double test_auc = 0.0;
    double test_logloss = 0.0;
    std::optional<double> pretrained_dev_auc;
    std::optional<double> pretrained_test_auc;
    std::optional<double> relaimp_dev;
    std::optional<double> relaimp_test;
};

/// Everything a run emits. Wall-clock time goes to the side log, never
/// into the serialized report, so reruns are byte-identical.
struct RunReport {
    std::string run_id;
    std::string dataset;
    std::string regime;
    std::uint64_t seed = 0;
    std::string config_echo; // effective config as canonical JSON, may be empty
    std::vector<EpochMetrics> epochs;
    std::vector<ModelFinal> finals;
    double wall_clock_sec = 0.0; // excluded from to_json()

    std::string to_json() const;
    std::string epochs_csv() const; // epoch,model_id,train_loss,dev_auc,dev_logloss,lr
};

struct TrainResult {
    std::vector<models::ModelInstance> models;
    RunReport report;
};

// ---- training regimes -------------------------------------------------------

/// Derived initialization seed for instance `index`; shared by the
/// independent and mutual trainers so trajectories line up.
std::uint64_t instance_init_seed(std::uint64_t seed, std::size_t index);

/// One model, BCE + L2, Adam with the exponential schedule, best-dev
/// checkpointing with early stopping.
TrainResult train_independent(models::Architecture arch, const models::ModelConfig& mcfg,
                              const data::Dataset& dataset, const RunConfig& cfg, std::size_t model_index = 0);

/// N fresh instances co-trained from scratch: every model sees the same
/// batch, losses use the pre-update predictions of all peers
/// (simultaneous update), each loss adds lambda * mutual_term.
TrainResult train_mutual_scratch(const std::vector<std::pair<models::Architecture, models::ModelConfig>>& specs,
                                 const data::Dataset& dataset, const RunConfig& cfg);

/// Mutual co-training starting from loaded checkpoints; reports
/// per-model RelaImp against each model's own pretrained dev/test AUC.
TrainResult finetune_mutual(std::vector<models::ModelInstance> pretrained, const data::Dataset& dataset,
                            const RunConfig& cfg);

/// Knowledge-distillation baseline: frozen teacher, student loss
/// alpha * BCE + (1 - alpha) * MSE(teacher, student) + L2.
TrainResult train_kd(const models::ModelInstance& teacher, models::Architecture student_arch,
                     const models::ModelConfig& student_cfg, const data::Dataset& dataset, const RunConfig& cfg);

/// Forward a model over a dataset part in source order; returns scores
/// plus labels for the metric functions.
eval::ScoredSet score_part(const models::ModelInstance& model, const data::Dataset& dataset,
                           const std::string& part, std::size_t batch_size = 4000);

} // namespace mutualctr::train
