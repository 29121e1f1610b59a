#include "mutualctr/experiment.hpp"

#include "mutualctr/checkpoint.hpp"
#include "mutualctr/log.hpp"
#include "vendor_json.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

namespace mutualctr::cli {

namespace fs = std::filesystem;
using models::ModelInstance;
using nlohmann::json;

namespace {

void write_file(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path cache_dir(const ExperimentConfig& cfg) { return fs::path(cfg.output.dir) / "cache"; }
fs::path reports_dir(const ExperimentConfig& cfg) { return fs::path(cfg.output.dir) / "reports"; }
fs::path tables_dir(const ExperimentConfig& cfg) { return fs::path(cfg.output.dir) / "tables"; }
fs::path checkpoints_dir(const ExperimentConfig& cfg) { return fs::path(cfg.output.dir) / "checkpoints"; }

void write_run_artifacts(const ExperimentConfig& cfg, const train::TrainResult& result) {
    const train::RunReport& rep = result.report;
    write_file(reports_dir(cfg) / (rep.run_id + ".json"), rep.to_json());
    write_file(reports_dir(cfg) / (rep.run_id + ".csv"), rep.epochs_csv());
    for (std::size_t i = 0; i < result.models.size(); ++i) {
        fs::path ckpt = checkpoints_dir(cfg) / (rep.run_id + "_m" + std::to_string(i) + ".ckpt");
        fs::create_directories(ckpt.parent_path());
        models::save_checkpoint(result.models[i], ckpt.string());
    }
    // wall clock stays out of the deterministic report
    std::ofstream log(fs::path(cfg.output.dir) / "run.log", std::ios::app);
    log << rep.run_id << " wall_clock_sec=" << rep.wall_clock_sec << '\n';
}

void write_table(const ExperimentConfig& cfg, const std::string& name, const eval::ResultTable& table) {
    bool want_csv = false, want_txt = false;
    for (const std::string& f : cfg.output.formats) {
        want_csv |= f == "csv";
        want_txt |= f == "txt";
    }
    if (want_csv) write_file(tables_dir(cfg) / (name + ".csv"), table.to_csv());
    if (want_txt) write_file(tables_dir(cfg) / (name + ".txt"), table.to_text());
}

/// Cells persisted so `report` can rebuild tables without rerunning.
void write_cells(const ExperimentConfig& cfg, const std::string& name, const std::vector<eval::RunCell>& cells,
                 const std::string& baseline_regime) {
    json j;
    j["table"] = name;
    j["baseline_regime"] = baseline_regime;
    j["cells"] = json::array();
    for (const eval::RunCell& c : cells) {
        j["cells"].push_back({{"model", c.model}, {"regime", c.regime}, {"dataset", c.dataset}, {"auc", c.auc}});
    }
    write_file(reports_dir(cfg) / ("experiment_" + name + ".json"), j.dump(2));
}

std::vector<std::pair<models::Architecture, models::ModelConfig>> expand_specs(const ExperimentConfig& cfg) {
    std::vector<std::pair<models::Architecture, models::ModelConfig>> specs;
    for (const ModelBlock& m : cfg.models) {
        for (std::size_t i = 0; i < m.instances; ++i) specs.emplace_back(m.architecture, m.config);
    }
    return specs;
}

/// Runs `jobs` with up to `parallel` worker threads. Jobs only touch
/// their own slot, so results are independent of the thread count.
void run_parallel(std::size_t parallel, const std::vector<std::function<void()>>& jobs) {
    if (parallel <= 1 || jobs.size() <= 1) {
        for (const auto& job : jobs) job();
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            try {
                jobs[i]();
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < std::min(parallel, jobs.size()); ++t) threads.emplace_back(worker);
    for (std::thread& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

struct PretrainedInstance {
    ModelInstance model;
    double dev_auc;
    double test_auc;
};

/// Checkpoint-or-train for one independent pretraining run. Training is
/// deterministic, so an existing checkpoint with the right schema hash
/// is equivalent to rerunning it.
PretrainedInstance ensure_pretrained(const ExperimentConfig& cfg, const data::Dataset& ds,
                                     const ModelBlock& block, std::size_t instance,
                                     const std::string& run_prefix) {
    train::RunConfig rcfg = cfg.training;
    rcfg.mode = train::RunMode::independent;
    const std::string run_id =
        run_prefix + "_indep_" + models::architecture_name(block.architecture) + "_i" + std::to_string(instance);
    fs::path ckpt = checkpoints_dir(cfg) / (run_id + "_m0.ckpt");

    if (fs::exists(ckpt)) {
        ModelInstance m = models::load_checkpoint(ckpt.string());
        if (m.schema_hash() == ds.schema.hash() && m.architecture() == block.architecture) {
            log_info("reusing pretrained checkpoint " + ckpt.string());
            double dev = eval::auc(train::score_part(m, ds, "dev", rcfg.batch_size));
            double test = eval::auc(train::score_part(m, ds, "test", rcfg.batch_size));
            return PretrainedInstance{std::move(m), dev, test};
        }
        log_warn("checkpoint " + ckpt.string() + " does not match the dataset, retraining");
    }

    train::TrainResult result = train_independent(block.architecture, block.config, ds, rcfg, instance);
    result.report.run_id = run_id;
    result.report.config_echo = cfg.effective_json();
    write_run_artifacts(cfg, result);
    double dev = result.report.finals[0].dev_auc;
    double test = result.report.finals[0].test_auc;
    return PretrainedInstance{std::move(result.models[0]), dev, test};
}

std::vector<PretrainedInstance> ensure_pretrained_set(const ExperimentConfig& cfg, const data::Dataset& ds,
                                                      const ModelBlock& block, std::size_t count,
                                                      const std::string& run_prefix) {
    std::vector<std::optional<PretrainedInstance>> slots(count);
    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < count; ++i) {
        jobs.push_back([&, i] { slots[i] = ensure_pretrained(cfg, ds, block, i, run_prefix); });
    }
    run_parallel(cfg.experiment.parallel, jobs);
    std::vector<PretrainedInstance> out;
    out.reserve(count);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

train::RunConfig finetune_config(const ExperimentConfig& cfg) {
    train::RunConfig rcfg = cfg.training;
    rcfg.mode = train::RunMode::mutual_finetune;
    // finetuning defaults per the protocol: one epoch at the lower rate
    if (cfg.training.mode != train::RunMode::mutual_finetune) {
        rcfg.lr0 = 7e-4;
        rcfg.epochs = 1;
        rcfg.patience = 0;
    }
    return rcfg;
}

std::vector<ModelBlock> distinct_architecture_blocks(const ExperimentConfig& cfg) {
    std::vector<ModelBlock> blocks;
    for (const ModelBlock& m : cfg.models) {
        bool seen = false;
        for (const ModelBlock& b : blocks) seen |= b.architecture == m.architecture;
        if (!seen) blocks.push_back(m);
    }
    return blocks;
}

} // namespace

void cmd_prepare(const ExperimentConfig& cfg) {
    fs::path dir = cache_dir(cfg);
    fs::create_directories(dir);

    data::Dataset ds;
    if (cfg.dataset.format == "synth") {
        data::SynthResult synth = data::synth_generate(cfg.dataset.synth);
        write_file(dir / "synth.csv", data::synth_to_csv(synth));
        write_file(dir / "synth_meta.json", data::synth_meta_json(synth));
        log_info("synthetic data: " + std::to_string(synth.rows.size()) +
                 " rows, Bayes AUC " + std::to_string(synth.bayes_auc));
        ds = data::dataset_from_synth(synth, cfg.dataset.split);
    } else {
        data::LoadOptions opts;
        opts.ratios = cfg.dataset.split;
        opts.min_freq = cfg.dataset.min_freq;
        ds = data::load_clicklog_file(cfg.dataset.path, cfg.dataset.format, opts);
    }

    write_file(dir / "schema.json", ds.schema.to_json());
    data::save_example_cache((dir / "examples.bin").string(), ds);
    json split;
    split["train"] = ds.split.train;
    split["dev"] = ds.split.dev;
    split["test"] = ds.split.test;
    split["ratios"] = std::vector<double>{cfg.dataset.split[0], cfg.dataset.split[1], cfg.dataset.split[2]};
    write_file(dir / "split.json", split.dump(2));
    json meta;
    meta["format"] = cfg.dataset.format;
    meta["schema_hash"] = ds.schema.hash();
    write_file(dir / "dataset_meta.json", meta.dump(2));
    write_file(fs::path(cfg.output.dir) / "effective_config.json", cfg.effective_json());
    log_info("prepared " + std::to_string(ds.examples.size()) + " examples (train " +
             std::to_string(ds.split.train) + ", dev " + std::to_string(ds.split.dev) + ", test " +
             std::to_string(ds.split.test) + "), schema hash " + ds.schema.hash());
}

data::Dataset load_prepared(const ExperimentConfig& cfg) {
    fs::path dir = cache_dir(cfg);
    if (!fs::exists(dir / "schema.json") || !fs::exists(dir / "examples.bin")) {
        throw std::runtime_error("no prepared cache under " + dir.string() + " (run `prepare` first)");
    }
    data::Dataset ds;
    ds.schema = data::FeatureSchema::from_json(read_file(dir / "schema.json"));
    json meta = json::parse(read_file(dir / "dataset_meta.json"));
    ds.name = meta.at("format").get<std::string>();
    data::load_example_cache((dir / "examples.bin").string(), ds);
    return ds;
}

namespace {

std::vector<ModelInstance> load_finetune_checkpoints(const ExperimentConfig& cfg, const data::Dataset& ds) {
    std::vector<ModelInstance> loaded;
    for (std::size_t i = 0; i < cfg.models.size(); ++i) {
        const ModelBlock& m = cfg.models[i];
        if (m.instances != 1) {
            throw std::invalid_argument("config: models[" + std::to_string(i) +
                                        "].instances must be 1 for mutual_finetune; list one block per checkpoint");
        }
        ModelInstance inst = models::load_checkpoint(m.checkpoint);
        models::require_schema_match(inst, ds.schema.hash(), m.checkpoint);
        loaded.push_back(std::move(inst));
    }
    return loaded;
}

} // namespace

void cmd_train(const ExperimentConfig& cfg) {
    data::Dataset ds = load_prepared(cfg);
    write_file(fs::path(cfg.output.dir) / "effective_config.json", cfg.effective_json());
    const std::string echo = cfg.effective_json();

    switch (cfg.training.mode) {
        case train::RunMode::independent: {
            std::size_t index = 0;
            for (const ModelBlock& m : cfg.models) {
                for (std::size_t i = 0; i < m.instances; ++i, ++index) {
                    train::TrainResult result = train::train_independent(m.architecture, m.config, ds, cfg.training, index);
                    result.report.config_echo = echo;
                    write_run_artifacts(cfg, result);
                }
            }
            break;
        }
        case train::RunMode::mutual_scratch: {
            train::TrainResult result = train::train_mutual_scratch(expand_specs(cfg), ds, cfg.training);
            result.report.config_echo = echo;
            write_run_artifacts(cfg, result);
            break;
        }
        case train::RunMode::mutual_finetune: {
            std::vector<ModelInstance> loaded = load_finetune_checkpoints(cfg, ds);
            train::TrainResult result = train::finetune_mutual(std::move(loaded), ds, cfg.training);
            result.report.config_echo = echo;
            write_run_artifacts(cfg, result);
            break;
        }
        case train::RunMode::kd: {
            ModelInstance teacher = models::load_checkpoint(cfg.teacher);
            models::require_schema_match(teacher, ds.schema.hash(), cfg.teacher);
            const ModelBlock& student = cfg.models.front();
            train::TrainResult result = train::train_kd(teacher, student.architecture, student.config, ds, cfg.training);
            result.report.config_echo = echo;
            write_run_artifacts(cfg, result);
            break;
        }
    }
}

namespace {

void run_rq1(const ExperimentConfig& cfg, const data::Dataset& ds) {
    std::vector<eval::RunCell> cells;
    for (const ModelBlock& block : distinct_architecture_blocks(cfg)) {
        const std::string arch = models::architecture_name(block.architecture);
        std::vector<PretrainedInstance> indep =
            ensure_pretrained_set(cfg, ds, block, cfg.experiment.instances, "rq1");
        for (const PretrainedInstance& p : indep) {
            cells.push_back({arch, "independent", ds.name, p.test_auc});
        }

        std::vector<std::pair<models::Architecture, models::ModelConfig>> specs(cfg.experiment.instances,
                                                                                {block.architecture, block.config});
        train::RunConfig rcfg = cfg.training;
        rcfg.mode = train::RunMode::mutual_scratch;
        train::TrainResult mutual = train::train_mutual_scratch(specs, ds, rcfg);
        mutual.report.run_id = "rq1_mutual_" + arch;
        mutual.report.config_echo = cfg.effective_json();
        write_run_artifacts(cfg, mutual);
        for (const train::ModelFinal& f : mutual.report.finals) {
            cells.push_back({arch, "mutual_scratch", ds.name, f.test_auc});
        }
    }
    write_cells(cfg, "rq1", cells, "independent");
    write_table(cfg, "rq1", eval::assemble_table(cells, "independent"));
}

void run_rq2(const ExperimentConfig& cfg, const data::Dataset& ds) {
    std::vector<eval::RunCell> cells;
    for (const ModelBlock& block : distinct_architecture_blocks(cfg)) {
        const std::string arch = models::architecture_name(block.architecture);
        std::vector<PretrainedInstance> indep =
            ensure_pretrained_set(cfg, ds, block, cfg.experiment.instances, "rq1");
        std::vector<ModelInstance> loaded;
        for (PretrainedInstance& p : indep) {
            cells.push_back({arch, "pretrained", ds.name, p.test_auc});
            loaded.push_back(std::move(p.model));
        }
        train::TrainResult ft = train::finetune_mutual(std::move(loaded), ds, finetune_config(cfg));
        ft.report.run_id = "rq2_finetune_" + arch;
        ft.report.config_echo = cfg.effective_json();
        write_run_artifacts(cfg, ft);
        for (const train::ModelFinal& f : ft.report.finals) {
            cells.push_back({arch, "mutual_finetune", ds.name, f.test_auc});
        }
    }
    write_cells(cfg, "rq2", cells, "pretrained");
    write_table(cfg, "rq2", eval::assemble_table(cells, "pretrained"));
}

void run_rq3(const ExperimentConfig& cfg, const data::Dataset& ds) {
    std::vector<ModelBlock> blocks = distinct_architecture_blocks(cfg);
    if (blocks.size() != 4) {
        throw std::invalid_argument("rq3 co-finetunes the four architectures; configure exactly 4 distinct "
                                    "architectures, got " +
                                    std::to_string(blocks.size()));
    }
    std::vector<eval::RunCell> cells;
    std::vector<ModelInstance> best_models;
    for (const ModelBlock& block : blocks) {
        const std::string arch = models::architecture_name(block.architecture);
        std::vector<PretrainedInstance> indep =
            ensure_pretrained_set(cfg, ds, block, cfg.experiment.instances, "rq1");
        // best pretrained instance by dev AUC joins the co-finetune pool
        std::size_t best = 0;
        for (std::size_t i = 1; i < indep.size(); ++i) {
            if (indep[i].dev_auc > indep[best].dev_auc) best = i;
        }
        cells.push_back({arch, "pretrained", ds.name, indep[best].test_auc});
        best_models.push_back(std::move(indep[best].model));
    }
    train::TrainResult ft = train::finetune_mutual(std::move(best_models), ds, finetune_config(cfg));
    ft.report.run_id = "rq3_cross_architecture";
    ft.report.config_echo = cfg.effective_json();
    write_run_artifacts(cfg, ft);
    for (const train::ModelFinal& f : ft.report.finals) {
        cells.push_back({f.architecture, "mutual_finetune_diff", ds.name, f.test_auc});
    }
    write_cells(cfg, "rq3", cells, "pretrained");
    write_table(cfg, "rq3", eval::assemble_table(cells, "pretrained"));
}

/// Table-3 layout: one row per co-trained count, pretrained cells then
/// finetuned cells, short rows padded with '-'.
void run_rq4(const ExperimentConfig& cfg, const data::Dataset& ds) {
    const ModelBlock& block = cfg.models.front();
    const std::string arch = models::architecture_name(block.architecture);
    std::vector<std::size_t> counts = cfg.experiment.rq4_counts;
    std::sort(counts.begin(), counts.end(), std::greater<>());
    const std::size_t max_count = counts.front();

    std::vector<PretrainedInstance> pool = ensure_pretrained_set(cfg, ds, block, max_count, "rq4");
    // drop the worst-pretrained first: order by dev AUC descending
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return pool[a].dev_auc > pool[b].dev_auc; });

    json table;
    table["architecture"] = arch;
    table["dataset"] = ds.name;
    table["rows"] = json::array();
    std::ostringstream csv;
    csv << "count";
    for (std::size_t i = 1; i <= max_count; ++i) csv << ",pretrained_" << i;
    for (std::size_t i = 1; i <= max_count; ++i) csv << ",finetuned_" << i;
    csv << '\n';

    for (std::size_t count : counts) {
        std::vector<ModelInstance> members;
        std::vector<double> pre_test;
        for (std::size_t r = 0; r < count; ++r) {
            const PretrainedInstance& p = pool[order[r]];
            pre_test.push_back(p.test_auc);
            ModelInstance copy = models::load_checkpoint(
                (checkpoints_dir(cfg) / ("rq4_indep_" + arch + "_i" + std::to_string(order[r]) + "_m0.ckpt"))
                    .string());
            members.push_back(std::move(copy));
        }
        train::TrainResult ft = train::finetune_mutual(std::move(members), ds, finetune_config(cfg));
        ft.report.run_id = "rq4_finetune_n" + std::to_string(count);
        ft.report.config_echo = cfg.effective_json();
        write_run_artifacts(cfg, ft);

        json row;
        row["count"] = count;
        row["pretrained"] = pre_test;
        std::vector<double> ft_test;
        for (const train::ModelFinal& f : ft.report.finals) ft_test.push_back(f.test_auc);
        row["finetuned"] = ft_test;
        table["rows"].push_back(std::move(row));

        csv << count;
        for (std::size_t i = 0; i < max_count; ++i) {
            csv << ',';
            if (i < pre_test.size()) csv << json(pre_test[i]).dump();
            else csv << '-';
        }
        for (std::size_t i = 0; i < max_count; ++i) {
            csv << ',';
            if (i < ft_test.size()) csv << json(ft_test[i]).dump();
            else csv << '-';
        }
        csv << '\n';
    }
    write_file(reports_dir(cfg) / "experiment_rq4.json", table.dump(2));
    write_file(tables_dir(cfg) / "rq4.csv", csv.str());
    // aligned text mirror
    std::ostringstream txt;
    txt << "co-trained models: " << arch << " on " << ds.name << "\n";
    for (const json& row : table["rows"]) {
        txt << "  n=" << row["count"].get<std::size_t>() << "  pretrained:";
        for (const json& v : row["pretrained"]) txt << ' ' << v.dump();
        txt << "  finetuned:";
        for (const json& v : row["finetuned"]) txt << ' ' << v.dump();
        txt << '\n';
    }
    write_file(tables_dir(cfg) / "rq4.txt", txt.str());
}

} // namespace

void cmd_experiment(const ExperimentConfig& cfg, int rq) {
    data::Dataset ds = load_prepared(cfg);
    write_file(fs::path(cfg.output.dir) / "effective_config.json", cfg.effective_json());
    switch (rq) {
        case 1: run_rq1(cfg, ds); break;
        case 2: run_rq2(cfg, ds); break;
        case 3: run_rq3(cfg, ds); break;
        case 4: run_rq4(cfg, ds); break;
        default: throw std::invalid_argument("experiment: rq must be 1, 2, 3 or 4");
    }
}

std::string cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path, const std::string& part) {
    data::Dataset ds = load_prepared(cfg);
    ModelInstance model = models::load_checkpoint(checkpoint_path);
    models::require_schema_match(model, ds.schema.hash(), checkpoint_path);
    eval::ScoredSet scored = train::score_part(model, ds, part, cfg.training.batch_size);
    json j;
    j["checkpoint"] = checkpoint_path;
    j["part"] = part;
    j["auc"] = eval::auc(scored);
    j["logloss"] = eval::logloss(scored);
    j["examples"] = scored.scores.size();
    return j.dump(2);
}

void cmd_report(const ExperimentConfig& cfg) {
    bool found = false;
    for (int rq = 1; rq <= 3; ++rq) {
        fs::path cell_file = reports_dir(cfg) / ("experiment_rq" + std::to_string(rq) + ".json");
        if (!fs::exists(cell_file)) continue;
        found = true;
        json j = json::parse(read_file(cell_file));
        std::vector<eval::RunCell> cells;
        for (const json& c : j.at("cells")) {
            cells.push_back({c.at("model").get<std::string>(), c.at("regime").get<std::string>(),
                             c.at("dataset").get<std::string>(), c.at("auc").get<double>()});
        }
        write_table(cfg, j.at("table").get<std::string>(),
                    eval::assemble_table(cells, j.at("baseline_regime").get<std::string>()));
        log_info("rebuilt tables for rq" + std::to_string(rq));
    }
    if (fs::exists(reports_dir(cfg) / "experiment_rq4.json")) {
        found = true;
        json t = json::parse(read_file(reports_dir(cfg) / "experiment_rq4.json"));
        std::size_t max_count = 0;
        for (const json& row : t.at("rows")) max_count = std::max(max_count, row.at("pretrained").size());
        std::ostringstream csv;
        csv << "count";
        for (std::size_t i = 1; i <= max_count; ++i) csv << ",pretrained_" << i;
        for (std::size_t i = 1; i <= max_count; ++i) csv << ",finetuned_" << i;
        csv << '\n';
        for (const json& row : t.at("rows")) {
            csv << row.at("count").get<std::size_t>();
            for (std::size_t i = 0; i < max_count; ++i) {
                csv << ',';
                if (i < row.at("pretrained").size()) csv << row.at("pretrained")[i].dump();
                else csv << '-';
            }
            for (std::size_t i = 0; i < max_count; ++i) {
                csv << ',';
                if (i < row.at("finetuned").size()) csv << row.at("finetuned")[i].dump();
                else csv << '-';
            }
            csv << '\n';
        }
        write_file(tables_dir(cfg) / "rq4.csv", csv.str());
        log_info("rebuilt tables for rq4");
    }
    if (!found) throw std::runtime_error("report: no experiment cell files under " + reports_dir(cfg).string());
}

} // namespace mutualctr::cli
