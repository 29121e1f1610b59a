#include "mutualctr/config.hpp"

#include "vendor_json.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace mutualctr::cli {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) {
            throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
        }
    }
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

DatasetBlock parse_dataset(const json& j) {
    reject_unknown_keys(j, {"format", "path", "split", "min_freq", "synth"}, "dataset");
    DatasetBlock d;
    d.format = get_or<std::string>(j, "format", "synth");
    if (d.format != "synth" && d.format != "criteo" && d.format != "avazu") {
        throw std::invalid_argument("config: dataset.format '" + d.format + "' must be synth|criteo|avazu");
    }
    d.path = get_or<std::string>(j, "path", "");
    if (d.format != "synth" && d.path.empty()) {
        throw std::invalid_argument("config: dataset.path is required for format '" + d.format + "'");
    }
    if (j.contains("split")) {
        auto v = j.at("split").get<std::vector<double>>();
        if (v.size() != 3) throw std::invalid_argument("config: dataset.split must have 3 ratios");
        d.split = {v[0], v[1], v[2]};
    }
    d.min_freq = get_or<std::uint32_t>(j, "min_freq", d.format == "synth" ? 1u : 10u);
    if (j.contains("synth")) {
        const json& s = j.at("synth");
        reject_unknown_keys(
            s, {"rows", "cat_fields", "vocab", "latent_dim", "interaction_pairs", "noise", "bias", "seed"},
            "dataset.synth");
        d.synth.rows = get_or<std::size_t>(s, "rows", d.synth.rows);
        d.synth.cat_fields = get_or<std::size_t>(s, "cat_fields", d.synth.cat_fields);
        d.synth.vocab = get_or<std::size_t>(s, "vocab", d.synth.vocab);
        d.synth.latent_dim = get_or<std::size_t>(s, "latent_dim", d.synth.latent_dim);
        d.synth.interaction_pairs = get_or<std::size_t>(s, "interaction_pairs", d.synth.interaction_pairs);
        d.synth.noise = get_or<double>(s, "noise", d.synth.noise);
        d.synth.bias = get_or<double>(s, "bias", d.synth.bias);
        d.synth.seed = get_or<std::uint64_t>(s, "seed", d.synth.seed);
    }
    return d;
}

ModelBlock parse_model(const json& j, std::size_t index) {
    const std::string where = "models[" + std::to_string(index) + "]";
    reject_unknown_keys(
        j, {"architecture", "embedding_dim", "tower", "cross_depth", "senet_ratio", "instances", "checkpoint"},
        where);
    ModelBlock m;
    if (!j.contains("architecture")) throw std::invalid_argument("config: " + where + ".architecture is required");
    m.architecture = models::architecture_from_string(j.at("architecture").get<std::string>());
    m.config.embedding_dim = get_or<std::size_t>(j, "embedding_dim", 16);
    m.config.tower = get_or<std::vector<std::size_t>>(j, "tower", {400, 200, 100});
    m.config.cross_depth = get_or<std::size_t>(j, "cross_depth", 3);
    m.config.senet_ratio = get_or<std::size_t>(j, "senet_ratio", 3);
    m.instances = get_or<std::size_t>(j, "instances", 1);
    if (m.instances < 1) throw std::invalid_argument("config: " + where + ".instances must be >= 1");
    m.checkpoint = get_or<std::string>(j, "checkpoint", "");
    return m;
}

train::RunConfig parse_training(const json& j, std::string* teacher_out) {
    reject_unknown_keys(j,
                        {"mode", "lr0", "epochs", "patience", "batch_size", "seed", "lambda", "l2_embedding",
                         "l2_dense", "kd_alpha", "coupled_gradients", "max_steps", "teacher"},
                        "training");
    train::RunConfig t;
    t.mode = train::run_mode_from_string(get_or<std::string>(j, "mode", "independent"));
    const bool finetune = t.mode == train::RunMode::mutual_finetune;
    t.lr0 = get_or<double>(j, "lr0", finetune ? 7e-4 : 1e-3);
    t.epochs = get_or<std::size_t>(j, "epochs", finetune ? 1 : 10);
    t.patience = get_or<std::size_t>(j, "patience", finetune ? 0 : 1);
    t.batch_size = get_or<std::size_t>(j, "batch_size", 4000);
    t.seed = get_or<std::uint64_t>(j, "seed", 42);
    t.lambda = get_or<double>(j, "lambda", 1.0);
    t.l2_embedding = get_or<double>(j, "l2_embedding", 1e-5);
    t.l2_dense = get_or<double>(j, "l2_dense", 1e-7);
    t.kd_alpha = get_or<double>(j, "kd_alpha", 0.5);
    t.coupled_gradients = get_or<bool>(j, "coupled_gradients", false);
    t.max_steps = get_or<std::size_t>(j, "max_steps", 0);
    *teacher_out = get_or<std::string>(j, "teacher", "");

    if (!(t.lr0 > 0.0)) throw std::invalid_argument("config: training.lr0 must be positive");
    if (t.batch_size < 1) throw std::invalid_argument("config: training.batch_size must be >= 1");
    if (t.lambda < 0.0) throw std::invalid_argument("config: training.lambda must be >= 0");
    if (t.kd_alpha < 0.0 || t.kd_alpha > 1.0) throw std::invalid_argument("config: training.kd_alpha must be in [0,1]");
    return t;
}

OutputBlock parse_output(const json& j) {
    reject_unknown_keys(j, {"dir", "formats"}, "output");
    OutputBlock o;
    o.dir = get_or<std::string>(j, "dir", "out");
    o.formats = get_or<std::vector<std::string>>(j, "formats", {"json", "csv", "txt"});
    for (const std::string& f : o.formats) {
        if (f != "json" && f != "csv" && f != "txt") {
            throw std::invalid_argument("config: output.formats entry '" + f + "' must be json|csv|txt");
        }
    }
    return o;
}

ExperimentBlock parse_experiment(const json& j) {
    reject_unknown_keys(j, {"instances", "rq4_counts", "parallel"}, "experiment");
    ExperimentBlock e;
    e.instances = get_or<std::size_t>(j, "instances", 4);
    e.rq4_counts = get_or<std::vector<std::size_t>>(j, "rq4_counts", {5, 4, 3, 2});
    e.parallel = get_or<std::size_t>(j, "parallel", 1);
    if (e.instances < 2) throw std::invalid_argument("config: experiment.instances must be >= 2");
    if (e.parallel < 1) throw std::invalid_argument("config: experiment.parallel must be >= 1");
    for (std::size_t c : e.rq4_counts) {
        if (c < 2) throw std::invalid_argument("config: experiment.rq4_counts entries must be >= 2");
    }
    if (e.rq4_counts.empty()) throw std::invalid_argument("config: experiment.rq4_counts must not be empty");
    return e;
}

} // namespace

ExperimentConfig ExperimentConfig::parse_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    reject_unknown_keys(j, {"dataset", "models", "training", "output", "experiment"}, "the config root");

    ExperimentConfig cfg;
    cfg.dataset = j.contains("dataset") ? parse_dataset(j.at("dataset")) : DatasetBlock{};
    if (j.contains("models")) {
        const json& jm = j.at("models");
        if (!jm.is_array() || jm.empty()) throw std::invalid_argument("config: models must be a non-empty array");
        for (std::size_t i = 0; i < jm.size(); ++i) cfg.models.push_back(parse_model(jm[i], i));
    } else {
        cfg.models.push_back(ModelBlock{});
    }
    cfg.training = j.contains("training") ? parse_training(j.at("training"), &cfg.teacher) : train::RunConfig{};
    cfg.output = j.contains("output") ? parse_output(j.at("output")) : OutputBlock{};
    cfg.experiment = j.contains("experiment") ? parse_experiment(j.at("experiment")) : ExperimentBlock{};

    // mode-level structural checks
    std::size_t expanded = 0;
    for (const ModelBlock& m : cfg.models) expanded += m.instances;
    if ((cfg.training.mode == train::RunMode::mutual_scratch ||
         cfg.training.mode == train::RunMode::mutual_finetune) &&
        expanded < 2) {
        throw std::invalid_argument("config: mode '" + train::run_mode_name(cfg.training.mode) +
                                    "' requires at least 2 model instances, got " + std::to_string(expanded));
    }
    if (cfg.training.mode == train::RunMode::mutual_finetune) {
        for (std::size_t i = 0; i < cfg.models.size(); ++i) {
            if (cfg.models[i].checkpoint.empty()) {
                throw std::invalid_argument("config: models[" + std::to_string(i) +
                                            "].checkpoint is required for mutual_finetune");
            }
        }
    }
    if (cfg.training.mode == train::RunMode::kd && cfg.teacher.empty()) {
        throw std::invalid_argument("config: training.teacher checkpoint is required for kd mode");
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_json(ss.str());
}

std::string ExperimentConfig::effective_json() const {
    json j;
    json& jd = j["dataset"];
    jd["format"] = dataset.format;
    jd["path"] = dataset.path;
    jd["split"] = std::vector<double>{dataset.split[0], dataset.split[1], dataset.split[2]};
    jd["min_freq"] = dataset.min_freq;
    jd["synth"] = {{"rows", dataset.synth.rows},
                   {"cat_fields", dataset.synth.cat_fields},
                   {"vocab", dataset.synth.vocab},
                   {"latent_dim", dataset.synth.latent_dim},
                   {"interaction_pairs", dataset.synth.interaction_pairs},
                   {"noise", dataset.synth.noise},
                   {"bias", dataset.synth.bias},
                   {"seed", dataset.synth.seed}};
    j["models"] = json::array();
    for (const ModelBlock& m : models) {
        json jm;
        jm["architecture"] = models::architecture_name(m.architecture);
        jm["embedding_dim"] = m.config.embedding_dim;
        jm["tower"] = m.config.tower;
        jm["cross_depth"] = m.config.cross_depth;
        jm["senet_ratio"] = m.config.senet_ratio;
        jm["instances"] = m.instances;
        if (!m.checkpoint.empty()) jm["checkpoint"] = m.checkpoint;
        j["models"].push_back(std::move(jm));
    }
    json& jt = j["training"];
    jt["mode"] = train::run_mode_name(training.mode);
    jt["lr0"] = training.lr0;
    jt["epochs"] = training.epochs;
    jt["patience"] = training.patience;
    jt["batch_size"] = training.batch_size;
    jt["seed"] = training.seed;
    jt["lambda"] = training.lambda;
    jt["l2_embedding"] = training.l2_embedding;
    jt["l2_dense"] = training.l2_dense;
    jt["kd_alpha"] = training.kd_alpha;
    jt["coupled_gradients"] = training.coupled_gradients;
    jt["max_steps"] = training.max_steps;
    if (!teacher.empty()) jt["teacher"] = teacher;
    json& jo = j["output"];
    jo["dir"] = output.dir;
    jo["formats"] = output.formats;
    json& je = j["experiment"];
    je["instances"] = experiment.instances;
    je["rq4_counts"] = experiment.rq4_counts;
    je["parallel"] = experiment.parallel;
    return j.dump(2);
}

void apply_overrides(ExperimentConfig& cfg, const CliOverrides& ov) {
    if (ov.seed) cfg.training.seed = *ov.seed;
    if (ov.out_dir) cfg.output.dir = *ov.out_dir;
    if (ov.parallel) cfg.experiment.parallel = *ov.parallel;
    if (ov.epochs) cfg.training.epochs = *ov.epochs;
    if (ov.lambda) cfg.training.lambda = *ov.lambda;
}

} // namespace mutualctr::cli
