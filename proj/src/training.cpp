#include "mutualctr/training.hpp"

#include "mutualctr/checkpoint.hpp"
#include "mutualctr/log.hpp"
#include "mutualctr/rng.hpp"
#include "vendor_json.hpp"

#include <chrono>
#include <cmath>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace mutualctr::train {

using ad::Gradients;
using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using models::ModelInstance;
using nlohmann::json;

namespace {

constexpr std::uint64_t kInitSalt = 0xA11CE000;
constexpr std::uint64_t kBatchSalt = 0xBA7C4;

} // namespace

std::uint64_t instance_init_seed(std::uint64_t seed, std::size_t index) {
    return mix_seed(seed, kInitSalt + index);
}

Var bce_loss(Tape& tape, const std::vector<double>& labels, Var probs) {
    const std::size_t b = labels.size();
    if (probs.shape() != std::vector<std::size_t>{b, 1}) {
        throw std::invalid_argument("bce_loss: probabilities shape " + ad::shape_str(probs.shape()) +
                                    " does not match " + std::to_string(b) + " labels");
    }
    for (double y : labels) {
        if (y != 0.0 && y != 1.0) throw std::invalid_argument("bce_loss: label " + std::to_string(y) + " not in {0,1}");
    }
    Var p = tape.clamp(probs, 1e-7, 1.0 - 1e-7);
    Var y = tape.constant(Tensor({b, 1}, labels));
    Var one = tape.constant(Tensor::full({b, 1}, 1.0));
    Var term = tape.add(tape.mul(y, tape.log(p)), tape.mul(tape.sub(one, y), tape.log(tape.sub(one, p))));
    return tape.scale(tape.mean(term), -1.0);
}

Var mse_loss(Tape& tape, Var p1, Var p2) {
    if (p1.shape() != p2.shape()) {
        throw std::invalid_argument("mse_loss: shape mismatch " + ad::shape_str(p1.shape()) + " vs " +
                                    ad::shape_str(p2.shape()));
    }
    return tape.mean(tape.square(tape.sub(p1, p2)));
}

Var mutual_term(Tape& tape, Var own, const std::vector<Tensor>& peer_predictions) {
    if (peer_predictions.empty()) {
        throw std::invalid_argument("mutual_term: needs at least one peer (N >= 2)");
    }
    Var acc{};
    bool have = false;
    for (const Tensor& peer : peer_predictions) {
        Var m = mse_loss(tape, tape.constant(peer), own);
        acc = have ? tape.add(acc, m) : m;
        have = true;
    }
    return tape.scale(acc, 1.0 / static_cast<double>(peer_predictions.size()));
}

Var mutual_term_on_tape(Tape& tape, std::span<const Var> predictions, std::size_t n, bool detach_peers) {
    if (predictions.size() < 2) {
        throw std::invalid_argument("mutual_term: needs at least 2 networks, got " +
                                    std::to_string(predictions.size()));
    }
    Var acc{};
    bool have = false;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (i == n) continue;
        Var peer = detach_peers ? tape.detach(predictions[i]) : predictions[i];
        Var m = mse_loss(tape, peer, predictions[n]);
        acc = have ? tape.add(acc, m) : m;
        have = true;
    }
    return tape.scale(acc, 1.0 / static_cast<double>(predictions.size() - 1));
}

void adam_step(std::vector<Parameter>& params, const Gradients& grads, AdamState& state, double lr) {
    if (state.m.empty()) {
        state.m.reserve(params.size());
        state.v.reserve(params.size());
        for (const Parameter& p : params) {
            state.m.push_back(Tensor::zeros(p.value.shape()));
            state.v.push_back(Tensor::zeros(p.value.shape()));
        }
    }
    if (state.m.size() != params.size()) {
        throw std::invalid_argument("adam_step: optimizer state sized for " + std::to_string(state.m.size()) +
                                    " parameters, got " + std::to_string(params.size()));
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        Tensor zero;
        const Tensor* g = grads.find(p);
        if (!g) {
            zero = Tensor::zeros(p.value.shape());
            g = &zero;
        }
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        for (std::size_t k = 0; k < p.value.numel(); ++k) {
            double gk = (*g)[k];
            if (std::isnan(gk)) {
                throw std::runtime_error("adam_step: NaN gradient in parameter '" + p.id + "' at flat index " +
                                         std::to_string(k));
            }
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
            double m_hat = m[k] / bc1;
            double v_hat = v[k] / bc2;
            p.value[k] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
    }
}

double lr_at(double lr0, double t) {
    if (t < 0.0) throw std::invalid_argument("lr_at: negative epoch time");
    return lr0 * std::pow(10.0, -t / 3.0);
}

RunMode run_mode_from_string(const std::string& name) {
    if (name == "independent") return RunMode::independent;
    if (name == "mutual_scratch") return RunMode::mutual_scratch;
    if (name == "mutual_finetune") return RunMode::mutual_finetune;
    if (name == "kd") return RunMode::kd;
    throw std::invalid_argument("unknown training mode '" + name +
                                "' (want independent|mutual_scratch|mutual_finetune|kd)");
}

std::string run_mode_name(RunMode mode) {
    switch (mode) {
        case RunMode::independent: return "independent";
        case RunMode::mutual_scratch: return "mutual_scratch";
        case RunMode::mutual_finetune: return "mutual_finetune";
        case RunMode::kd: return "kd";
    }
    throw std::logic_error("unreachable");
}

eval::ScoredSet score_part(const ModelInstance& model, const data::Dataset& dataset, const std::string& part,
                           std::size_t batch_size) {
    data::BatchStream stream(dataset.part(part), batch_size, std::nullopt, 0);
    eval::ScoredSet out;
    while (auto batch = stream.next()) {
        Tape tape;
        Var p = model.forward(tape, *batch);
        const Tensor& pv = p.value();
        for (std::size_t i = 0; i < batch->size(); ++i) {
            out.scores.push_back(pv[i]);
            out.labels.push_back(static_cast<int>(batch->labels[i]));
        }
    }
    return out;
}

namespace {

struct Pretrained {
    double dev_auc = 0.0;
    double test_auc = 0.0;
};

std::string model_id_of(const ModelInstance& m, std::size_t index) {
    return models::architecture_name(m.architecture()) + "#" + std::to_string(index);
}

void validate_for_dataset(const std::vector<ModelInstance>& ms, const data::Dataset& ds) {
    const std::string ds_hash = ds.schema.hash();
    for (const ModelInstance& m : ms) {
        models::require_schema_match(m, ds_hash, "training");
    }
}

/// Shared trainer behind every regime. `use_mutual` adds the lambda-weighted
/// mutual term; `teacher` switches on the KD blend.
TrainResult run_training(std::vector<ModelInstance> ms, const data::Dataset& dataset, const RunConfig& cfg,
                         bool use_mutual, const ModelInstance* teacher,
                         const std::vector<Pretrained>& pretrained, RunReport report) {
    auto t_start = std::chrono::steady_clock::now();
    const std::size_t n_models = ms.size();
    if (n_models == 0) throw std::invalid_argument("training: no models");
    if (cfg.batch_size < 1) throw std::invalid_argument("training: batch_size must be >= 1");
    if (cfg.lambda < 0.0) throw std::invalid_argument("training: lambda must be >= 0");
    validate_for_dataset(ms, dataset);
    if (use_mutual) {
        for (const ModelInstance& m : ms) {
            if (m.schema_hash() != ms[0].schema_hash()) {
                throw std::invalid_argument("mutual training: mixed schemas across models");
            }
        }
    }

    const bool mutual_active = use_mutual && cfg.lambda > 0.0 && n_models >= 2;
    const std::size_t steps_per_epoch =
        (dataset.train().size() + cfg.batch_size - 1) / cfg.batch_size;

    std::vector<AdamState> states(n_models);
    std::uint64_t steps_done = 0;
    bool out_of_steps = false;

    double best_mean_dev = -1.0;
    std::size_t best_epoch = 0;
    std::size_t epochs_since_best = 0;
    std::vector<std::vector<Tensor>> best_params;

    const std::uint64_t shuffle_seed = mix_seed(cfg.seed, kBatchSalt);

    for (std::size_t epoch = 1; epoch <= cfg.epochs && !out_of_steps; ++epoch) {
        data::BatchStream stream(dataset.train(), cfg.batch_size, shuffle_seed, epoch - 1);
        std::vector<double> loss_sum(n_models, 0.0);
        double example_count = 0.0;
        double epoch_lr = lr_at(cfg.lr0, static_cast<double>(steps_done) / static_cast<double>(steps_per_epoch));

        while (auto batch = stream.next()) {
            if (cfg.max_steps > 0 && steps_done >= cfg.max_steps) {
                out_of_steps = true;
                break;
            }
            const double lr = lr_at(cfg.lr0, static_cast<double>(steps_done) / static_cast<double>(steps_per_epoch));
            const double b_size = static_cast<double>(batch->size());

            if (cfg.coupled_gradients && mutual_active) {
                // joint loss on one tape: gradients flow through peers
                Tape tape;
                std::vector<Var> preds;
                preds.reserve(n_models);
                for (const ModelInstance& m : ms) preds.push_back(m.forward(tape, *batch));
                Var total{};
                bool have = false;
                for (std::size_t n = 0; n < n_models; ++n) {
                    Var obj = bce_loss(tape, batch->labels, preds[n]);
                    obj = tape.add(obj, tape.scale(mutual_term_on_tape(tape, preds, n, false), cfg.lambda));
                    loss_sum[n] += obj.value()[0] * b_size;
                    Var with_l2 = tape.add(obj, ms[n].l2_penalty(tape, cfg.l2_embedding, cfg.l2_dense));
                    total = have ? tape.add(total, with_l2) : with_l2;
                    have = true;
                }
                if (std::isnan(total.value()[0])) {
                    throw std::runtime_error("training: NaN loss at epoch " + std::to_string(epoch) + " step " +
                                             std::to_string(steps_done));
                }
                Gradients grads = tape.backward(total);
                for (std::size_t n = 0; n < n_models; ++n) adam_step(ms[n].params(), grads, states[n], lr);
            } else {
                // forward every model before any update; peers enter each
                // loss as constants captured from the pre-update predictions
                std::vector<std::unique_ptr<Tape>> tapes;
                std::vector<Var> preds;
                std::vector<Tensor> pred_values;
                tapes.reserve(n_models);
                preds.reserve(n_models);
                pred_values.reserve(n_models);
                for (const ModelInstance& m : ms) {
                    tapes.push_back(std::make_unique<Tape>());
                    preds.push_back(m.forward(*tapes.back(), *batch));
                    pred_values.push_back(preds.back().value());
                }
                Tensor teacher_pred;
                if (teacher) {
                    Tape teacher_tape;
                    teacher_pred = teacher->forward(teacher_tape, *batch).value();
                }
                for (std::size_t n = 0; n < n_models; ++n) {
                    Tape& tape = *tapes[n];
                    Var obj = bce_loss(tape, batch->labels, preds[n]);
                    if (teacher && cfg.kd_alpha < 1.0) {
                        Var distill = mse_loss(tape, tape.constant(teacher_pred), preds[n]);
                        obj = tape.add(tape.scale(obj, cfg.kd_alpha), tape.scale(distill, 1.0 - cfg.kd_alpha));
                    }
                    if (mutual_active) {
                        std::vector<Tensor> peers;
                        peers.reserve(n_models - 1);
                        for (std::size_t i = 0; i < n_models; ++i) {
                            if (i != n) peers.push_back(pred_values[i]);
                        }
                        obj = tape.add(obj, tape.scale(mutual_term(tape, preds[n], peers), cfg.lambda));
                    }
                    loss_sum[n] += obj.value()[0] * b_size;
                    Var total = tape.add(obj, ms[n].l2_penalty(tape, cfg.l2_embedding, cfg.l2_dense));
                    if (std::isnan(total.value()[0])) {
                        throw std::runtime_error("training: NaN loss at epoch " + std::to_string(epoch) + " step " +
                                                 std::to_string(steps_done) + " (model " + std::to_string(n) + ")");
                    }
                    Gradients grads = tape.backward(total);
                    adam_step(ms[n].params(), grads, states[n], lr);
                }
            }
            example_count += b_size;
            ++steps_done;
        }

        if (example_count == 0.0) break; // max_steps hit before the epoch started

        double mean_dev = 0.0;
        for (std::size_t n = 0; n < n_models; ++n) {
            eval::ScoredSet dev = score_part(ms[n], dataset, "dev", cfg.batch_size);
            EpochMetrics em;
            em.epoch = epoch;
            em.model_index = n;
            em.train_loss = loss_sum[n] / example_count;
            em.dev_auc = eval::auc(dev);
            em.dev_logloss = eval::logloss(dev);
            em.lr = epoch_lr;
            report.epochs.push_back(em);
            mean_dev += em.dev_auc;
        }
        mean_dev /= static_cast<double>(n_models);
        log_info(report.run_id + ": epoch " + std::to_string(epoch) + " mean dev AUC " + std::to_string(mean_dev));

        if (mean_dev > best_mean_dev) {
            best_mean_dev = mean_dev;
            best_epoch = epoch;
            epochs_since_best = 0;
            if (cfg.patience > 0) {
                best_params.clear();
                for (const ModelInstance& m : ms) {
                    std::vector<Tensor> snap;
                    snap.reserve(m.params().size());
                    for (const Parameter& p : m.params()) snap.push_back(p.value);
                    best_params.push_back(std::move(snap));
                }
            }
        } else {
            ++epochs_since_best;
            if (cfg.patience > 0 && epochs_since_best >= cfg.patience) break;
        }
    }

    if (cfg.patience > 0 && !best_params.empty()) {
        for (std::size_t n = 0; n < n_models; ++n) {
            for (std::size_t i = 0; i < ms[n].params().size(); ++i) ms[n].params()[i].value = best_params[n][i];
        }
    }

    for (std::size_t n = 0; n < n_models; ++n) {
        eval::ScoredSet dev = score_part(ms[n], dataset, "dev", cfg.batch_size);
        eval::ScoredSet test = score_part(ms[n], dataset, "test", cfg.batch_size);
        ModelFinal f;
        f.model_id = model_id_of(ms[n], n);
        f.architecture = models::architecture_name(ms[n].architecture());
        f.best_epoch = best_epoch;
        f.dev_auc = eval::auc(dev);
        f.dev_logloss = eval::logloss(dev);
        f.test_auc = eval::auc(test);
        f.test_logloss = eval::logloss(test);
        if (n < pretrained.size()) {
            f.pretrained_dev_auc = pretrained[n].dev_auc;
            f.pretrained_test_auc = pretrained[n].test_auc;
            if (pretrained[n].dev_auc > 0.5) {
                f.relaimp_dev = eval::relaimp(f.dev_auc, pretrained[n].dev_auc);
            } else {
                log_warn(f.model_id + ": pretrained dev AUC <= 0.5, RelaImp undefined");
            }
            if (pretrained[n].test_auc > 0.5) {
                f.relaimp_test = eval::relaimp(f.test_auc, pretrained[n].test_auc);
            } else {
                log_warn(f.model_id + ": pretrained test AUC <= 0.5, RelaImp undefined");
            }
        }
        report.finals.push_back(std::move(f));
    }

    report.seed = cfg.seed;
    report.dataset = dataset.name;
    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    return TrainResult{std::move(ms), std::move(report)};
}

} // namespace

TrainResult train_independent(models::Architecture arch, const models::ModelConfig& mcfg,
                              const data::Dataset& dataset, const RunConfig& cfg, std::size_t model_index) {
    std::vector<ModelInstance> ms;
    ms.emplace_back(arch, mcfg, dataset.schema, instance_init_seed(cfg.seed, model_index));
    RunReport report;
    report.regime = "independent";
    report.run_id = "independent_" + models::architecture_name(arch) + "_i" + std::to_string(model_index);
    return run_training(std::move(ms), dataset, cfg, false, nullptr, {}, std::move(report));
}

TrainResult train_mutual_scratch(const std::vector<std::pair<models::Architecture, models::ModelConfig>>& specs,
                                 const data::Dataset& dataset, const RunConfig& cfg) {
    if (specs.size() < 2) {
        throw std::invalid_argument("mutual training requires at least 2 models, got " +
                                    std::to_string(specs.size()));
    }
    std::vector<ModelInstance> ms;
    ms.reserve(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        ms.emplace_back(specs[i].first, specs[i].second, dataset.schema, instance_init_seed(cfg.seed, i));
    }
    RunReport report;
    report.regime = "mutual_scratch";
    report.run_id = "mutual_scratch_n" + std::to_string(specs.size());
    return run_training(std::move(ms), dataset, cfg, true, nullptr, {}, std::move(report));
}

TrainResult finetune_mutual(std::vector<ModelInstance> pretrained_models, const data::Dataset& dataset,
                            const RunConfig& cfg) {
    if (pretrained_models.size() < 2) {
        throw std::invalid_argument("mutual finetuning requires at least 2 checkpoints, got " +
                                    std::to_string(pretrained_models.size()));
    }
    validate_for_dataset(pretrained_models, dataset);
    std::vector<Pretrained> pre;
    pre.reserve(pretrained_models.size());
    for (const ModelInstance& m : pretrained_models) {
        Pretrained p;
        p.dev_auc = eval::auc(score_part(m, dataset, "dev", cfg.batch_size));
        p.test_auc = eval::auc(score_part(m, dataset, "test", cfg.batch_size));
        pre.push_back(p);
    }
    RunReport report;
    report.regime = "mutual_finetune";
    report.run_id = "mutual_finetune_n" + std::to_string(pretrained_models.size());
    return run_training(std::move(pretrained_models), dataset, cfg, true, nullptr, pre, std::move(report));
}

TrainResult train_kd(const ModelInstance& teacher, models::Architecture student_arch,
                     const models::ModelConfig& student_cfg, const data::Dataset& dataset, const RunConfig& cfg) {
    if (cfg.kd_alpha < 0.0 || cfg.kd_alpha > 1.0) {
        throw std::invalid_argument("kd: alpha must be in [0,1], got " + std::to_string(cfg.kd_alpha));
    }
    models::require_schema_match(teacher, dataset.schema.hash(), "kd teacher");
    {
        // calling with an untrained teacher is allowed; just flag the smell
        double teacher_dev = eval::auc(score_part(teacher, dataset, "dev", cfg.batch_size));
        if (teacher_dev < 0.55) {
            log_warn("kd: teacher dev AUC " + std::to_string(teacher_dev) + " looks untrained");
        }
    }
    std::vector<ModelInstance> ms;
    ms.emplace_back(student_arch, student_cfg, dataset.schema, instance_init_seed(cfg.seed, 0));
    RunReport report;
    report.regime = "kd";
    report.run_id = "kd_" + models::architecture_name(student_arch);
    return run_training(std::move(ms), dataset, cfg, false, &teacher, {}, std::move(report));
}

std::string RunReport::to_json() const {
    json j;
    j["run_id"] = run_id;
    j["dataset"] = dataset;
    j["regime"] = regime;
    j["seed"] = seed;
    if (!config_echo.empty()) j["config"] = json::parse(config_echo);
    j["epochs"] = json::array();
    for (const EpochMetrics& e : epochs) {
        json je;
        je["epoch"] = e.epoch;
        je["model_index"] = e.model_index;
        je["train_loss"] = e.train_loss;
        je["dev_auc"] = e.dev_auc;
        je["dev_logloss"] = e.dev_logloss;
        je["lr"] = e.lr;
        j["epochs"].push_back(std::move(je));
    }
    j["finals"] = json::array();
    for (const ModelFinal& f : finals) {
        json jf;
        jf["model_id"] = f.model_id;
        jf["architecture"] = f.architecture;
        jf["best_epoch"] = f.best_epoch;
        jf["dev_auc"] = f.dev_auc;
        jf["dev_logloss"] = f.dev_logloss;
        jf["test_auc"] = f.test_auc;
        jf["test_logloss"] = f.test_logloss;
        if (f.pretrained_dev_auc) jf["pretrained_dev_auc"] = *f.pretrained_dev_auc;
        if (f.pretrained_test_auc) jf["pretrained_test_auc"] = *f.pretrained_test_auc;
        if (f.relaimp_dev) jf["relaimp_dev"] = *f.relaimp_dev;
        if (f.relaimp_test) jf["relaimp_test"] = *f.relaimp_test;
        j["finals"].push_back(std::move(jf));
    }
    return j.dump(2);
}

std::string RunReport::epochs_csv() const {
    std::ostringstream os;
    os << "epoch,model_id,train_loss,dev_auc,dev_logloss,lr\n";
    for (const EpochMetrics& e : epochs) {
        std::string model_id =
            e.model_index < finals.size() ? finals[e.model_index].model_id : std::to_string(e.model_index);
        os << e.epoch << ',' << model_id << ',' << json(e.train_loss).dump() << ',' << json(e.dev_auc).dump() << ','
           << json(e.dev_logloss).dump() << ',' << json(e.lr).dump() << '\n';
    }
    return os.str();
}

} // namespace mutualctr::train
