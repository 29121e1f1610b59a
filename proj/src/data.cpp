#include "mutualctr/data.hpp"

#include "mutualctr/eval.hpp"
#include "mutualctr/log.hpp"
#include "mutualctr/rng.hpp"
#include "vendor_json.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <unordered_map>

namespace mutualctr::data {

using nlohmann::json;

namespace {

constexpr std::size_t kCriteoNumeric = 13;
constexpr std::size_t kCriteoCategorical = 26;
constexpr std::size_t kAvazuCategorical = 22;

std::vector<std::string> split_line(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        std::size_t pos = line.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    // tolerate a trailing \r from CRLF files
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
    return out;
}

int parse_label(const std::string& cell, std::size_t line_no) {
    if (cell == "0") return 0;
    if (cell == "1") return 1;
    throw ParseError(line_no, "unparseable label '" + cell + "' (expected 0 or 1)");
}

std::optional<double> parse_numeric_cell(const std::string& cell, std::size_t line_no, std::size_t col) {
    if (cell.empty()) return std::nullopt;
    char* end = nullptr;
    double v = std::strtod(cell.c_str(), &end);
    if (end == cell.c_str() || *end != '\0' || !std::isfinite(v)) {
        throw ParseError(line_no, "unparseable numeric value '" + cell + "' in column " + std::to_string(col + 1));
    }
    return v;
}

} // namespace

std::size_t FeatureSchema::cat_field_count() const {
    std::size_t n = 0;
    for (const FieldSpec& f : fields) n += static_cast<std::size_t>(f.kind == FieldKind::categorical);
    return n;
}

std::size_t FeatureSchema::num_field_count() const { return fields.size() - cat_field_count(); }

std::vector<std::uint32_t> FeatureSchema::cat_vocab_sizes() const {
    std::vector<std::uint32_t> out;
    for (const FieldSpec& f : fields)
        if (f.kind == FieldKind::categorical) out.push_back(f.vocab_size());
    return out;
}

std::string FeatureSchema::to_json() const {
    json j;
    j["min_freq"] = min_freq;
    j["fields"] = json::array();
    for (const FieldSpec& f : fields) {
        json jf;
        jf["name"] = f.name;
        if (f.kind == FieldKind::categorical) {
            jf["kind"] = "categorical";
            json vocab = json::object();
            for (const auto& [tok, idx] : f.vocab) vocab[tok] = idx;
            jf["vocab"] = std::move(vocab);
        } else {
            jf["kind"] = "numeric";
            jf["mean"] = f.mean;
            jf["stdev"] = f.stdev;
        }
        j["fields"].push_back(std::move(jf));
    }
    return j.dump(2);
}

FeatureSchema FeatureSchema::from_json(const std::string& text) {
    json j = json::parse(text);
    FeatureSchema schema;
    schema.min_freq = j.at("min_freq").get<std::uint32_t>();
    for (const json& jf : j.at("fields")) {
        FieldSpec f;
        f.name = jf.at("name").get<std::string>();
        std::string kind = jf.at("kind").get<std::string>();
        if (kind == "categorical") {
            f.kind = FieldKind::categorical;
            for (const auto& [tok, idx] : jf.at("vocab").items()) {
                f.vocab[tok] = idx.get<std::uint32_t>();
            }
        } else if (kind == "numeric") {
            f.kind = FieldKind::numeric;
            f.mean = jf.at("mean").get<double>();
            f.stdev = jf.at("stdev").get<double>();
        } else {
            throw std::runtime_error("schema: unknown field kind '" + kind + "'");
        }
        schema.fields.push_back(std::move(f));
    }
    return schema;
}

std::string FeatureSchema::hash() const {
    std::string canonical = to_json();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

RawRow parse_criteo(const std::string& line, std::size_t line_no) {
    std::vector<std::string> cells = split_line(line, '\t');
    const std::size_t expected = 1 + kCriteoNumeric + kCriteoCategorical;
    if (cells.size() != expected) {
        throw ParseError(line_no, "expected " + std::to_string(expected) + " tab-separated columns, got " +
                                      std::to_string(cells.size()));
    }
    RawRow row;
    row.label = parse_label(cells[0], line_no);
    row.nums.reserve(kCriteoNumeric);
    for (std::size_t i = 0; i < kCriteoNumeric; ++i) row.nums.push_back(parse_numeric_cell(cells[1 + i], line_no, 1 + i));
    row.cats.reserve(kCriteoCategorical);
    for (std::size_t i = 0; i < kCriteoCategorical; ++i) {
        const std::string& c = cells[1 + kCriteoNumeric + i];
        if (c.empty()) row.cats.push_back(std::nullopt);
        else row.cats.push_back(c);
    }
    return row;
}

RawRow parse_avazu(const std::string& line, std::size_t line_no) {
    std::vector<std::string> cells = split_line(line, ',');
    const std::size_t expected = 2 + kAvazuCategorical;
    if (cells.size() != expected) {
        throw ParseError(line_no, "expected " + std::to_string(expected) + " comma-separated columns, got " +
                                      std::to_string(cells.size()));
    }
    RawRow row;
    row.label = parse_label(cells[1], line_no); // cells[0] is the instance id, dropped
    row.cats.reserve(kAvazuCategorical);
    for (std::size_t i = 0; i < kAvazuCategorical; ++i) {
        const std::string& c = cells[2 + i];
        if (c.empty()) row.cats.push_back(std::nullopt);
        else row.cats.push_back(c);
    }
    return row;
}

RawRow parse_synth(const std::string& line, std::size_t line_no, std::size_t cat_fields) {
    std::vector<std::string> cells = split_line(line, ',');
    if (cells.size() != cat_fields + 1) {
        throw ParseError(line_no, "expected " + std::to_string(cat_fields + 1) + " comma-separated columns, got " +
                                      std::to_string(cells.size()));
    }
    RawRow row;
    row.label = parse_label(cells[0], line_no);
    for (std::size_t i = 0; i < cat_fields; ++i) {
        if (cells[1 + i].empty()) row.cats.push_back(std::nullopt);
        else row.cats.push_back(cells[1 + i]);
    }
    return row;
}

std::vector<std::pair<std::string, FieldKind>> criteo_field_layout() {
    std::vector<std::pair<std::string, FieldKind>> layout;
    for (std::size_t i = 1; i <= kCriteoNumeric; ++i) layout.emplace_back("I" + std::to_string(i), FieldKind::numeric);
    for (std::size_t i = 1; i <= kCriteoCategorical; ++i)
        layout.emplace_back("C" + std::to_string(i), FieldKind::categorical);
    return layout;
}

std::vector<std::pair<std::string, FieldKind>> avazu_field_layout(const std::string& header_line) {
    std::vector<std::string> cells = split_line(header_line, ',');
    if (cells.size() != 2 + kAvazuCategorical || cells[0] != "id" || cells[1] != "click") {
        throw std::runtime_error("avazu: malformed header (expected 'id,click,<22 feature columns>', got " +
                                 std::to_string(cells.size()) + " columns)");
    }
    std::vector<std::pair<std::string, FieldKind>> layout;
    for (std::size_t i = 2; i < cells.size(); ++i) layout.emplace_back(cells[i], FieldKind::categorical);
    return layout;
}

std::vector<std::pair<std::string, FieldKind>> synth_field_layout(std::size_t cat_fields) {
    std::vector<std::pair<std::string, FieldKind>> layout;
    for (std::size_t i = 1; i <= cat_fields; ++i) layout.emplace_back("c" + std::to_string(i), FieldKind::categorical);
    return layout;
}

FeatureSchema build_schema(std::span<const RawRow> train_rows,
                           const std::vector<std::pair<std::string, FieldKind>>& layout, std::uint32_t min_freq) {
    if (train_rows.empty()) throw std::runtime_error("build_schema: empty source");
    if (min_freq < 1) throw std::invalid_argument("build_schema: min_freq must be >= 1");

    FeatureSchema schema;
    schema.min_freq = min_freq;

    std::size_t cat_pos = 0, num_pos = 0;
    for (const auto& [name, kind] : layout) {
        FieldSpec f;
        f.name = name;
        f.kind = kind;
        if (kind == FieldKind::categorical) {
            std::unordered_map<std::string, std::uint32_t> freq;
            std::vector<std::string> first_seen;
            for (const RawRow& row : train_rows) {
                const auto& cell = row.cats.at(cat_pos);
                if (!cell) continue;
                auto [it, inserted] = freq.try_emplace(*cell, 0);
                if (inserted) first_seen.push_back(*cell);
                ++it->second;
            }
            std::uint32_t next = 1; // 0 is OOV/missing
            for (const std::string& tok : first_seen) {
                if (freq[tok] >= min_freq) f.vocab.emplace(tok, next++);
            }
            ++cat_pos;
        } else {
            double sum = 0.0, sumsq = 0.0;
            std::size_t count = 0;
            for (const RawRow& row : train_rows) {
                const auto& cell = row.nums.at(num_pos);
                if (!cell) continue;
                sum += *cell;
                sumsq += *cell * *cell;
                ++count;
            }
            if (count > 0) {
                f.mean = sum / static_cast<double>(count);
                double var = sumsq / static_cast<double>(count) - f.mean * f.mean;
                f.stdev = var > 0.0 ? std::sqrt(var) : 1.0;
            } else {
                f.mean = 0.0;
                f.stdev = 1.0;
            }
            ++num_pos;
        }
        schema.fields.push_back(std::move(f));
    }
    return schema;
}

Example encode(const RawRow& row, const FeatureSchema& schema) {
    Example ex;
    ex.label = static_cast<std::uint8_t>(row.label);
    std::size_t cat_pos = 0, num_pos = 0;
    for (const FieldSpec& f : schema.fields) {
        if (f.kind == FieldKind::categorical) {
            const auto& cell = row.cats.at(cat_pos++);
            std::uint32_t idx = 0;
            if (cell) {
                auto it = f.vocab.find(*cell);
                if (it != f.vocab.end()) idx = it->second;
            }
            ex.cat.push_back(idx);
        } else {
            const auto& cell = row.nums.at(num_pos++);
            ex.num.push_back(cell ? (*cell - f.mean) / f.stdev : 0.0);
        }
    }
    return ex;
}

SplitSizes split_sizes(std::size_t n, const std::array<double, 3>& ratios) {
    double rsum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(rsum - 1.0) > 1e-9) {
        throw std::invalid_argument("split: ratios sum to " + std::to_string(rsum) + ", expected 1");
    }
    if (n < 10) throw std::invalid_argument("split: need at least 10 examples, got " + std::to_string(n));
    SplitSizes s;
    s.train = static_cast<std::size_t>(std::floor(ratios[0] * static_cast<double>(n)));
    s.dev = static_cast<std::size_t>(std::floor(ratios[1] * static_cast<double>(n)));
    s.test = n - s.train - s.dev;
    return s;
}

BatchStream::BatchStream(std::span<const Example> examples, std::size_t batch_size,
                         std::optional<std::uint64_t> shuffle_seed, std::uint64_t epoch)
    : examples_(examples), batch_size_(batch_size) {
    if (batch_size_ < 1) throw std::invalid_argument("batches: batch_size must be >= 1");
    order_.resize(examples.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<std::uint32_t>(i);
    if (shuffle_seed) {
        Rng rng(mix_seed(*shuffle_seed, epoch));
        rng.shuffle(order_);
    }
}

std::size_t BatchStream::batches_per_epoch() const {
    return (examples_.size() + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> BatchStream::next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    std::size_t take = std::min(batch_size_, order_.size() - cursor_);
    const Example& first = examples_[order_[cursor_]];
    Batch b;
    b.labels.reserve(take);
    b.cat.assign(first.cat.size(), {});
    for (auto& col : b.cat) col.reserve(take);
    b.num.assign(first.num.size(), {});
    for (auto& col : b.num) col.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        const Example& ex = examples_[order_[cursor_ + i]];
        b.labels.push_back(static_cast<double>(ex.label));
        for (std::size_t f = 0; f < ex.cat.size(); ++f) b.cat[f].push_back(ex.cat[f]);
        for (std::size_t f = 0; f < ex.num.size(); ++f) b.num[f].push_back(ex.num[f]);
    }
    cursor_ += take;
    return b;
}

std::span<const Example> Dataset::part(const std::string& part_name) const {
    if (part_name == "train") return train();
    if (part_name == "dev") return dev();
    if (part_name == "test") return test();
    throw std::invalid_argument("dataset: unknown split part '" + part_name + "' (want train|dev|test)");
}

SynthResult synth_generate(const SynthConfig& cfg) {
    if (cfg.rows == 0 || cfg.cat_fields == 0 || cfg.vocab == 0 || cfg.latent_dim == 0) {
        throw std::invalid_argument("synth: rows, cat_fields, vocab and latent_dim must be positive");
    }
    const std::size_t max_pairs = cfg.cat_fields * (cfg.cat_fields - 1) / 2;
    if (cfg.interaction_pairs > max_pairs) {
        throw std::invalid_argument("synth: interaction_pairs " + std::to_string(cfg.interaction_pairs) +
                                    " exceeds the " + std::to_string(max_pairs) + " available field pairs");
    }

    Rng weight_rng(mix_seed(cfg.seed, 0x77));
    // per-field token weights: first-order scalar + latent vector
    std::vector<std::vector<double>> first_order(cfg.cat_fields);
    std::vector<std::vector<double>> latent(cfg.cat_fields);
    for (std::size_t f = 0; f < cfg.cat_fields; ++f) {
        first_order[f].resize(cfg.vocab);
        latent[f].resize(cfg.vocab * cfg.latent_dim);
        for (std::size_t v = 0; v < cfg.vocab; ++v) first_order[f][v] = weight_rng.normal(0.0, 0.35);
        double latent_scale = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));
        for (double& w : latent[f]) w = weight_rng.normal(0.0, latent_scale);
    }

    // designated interacting field pairs, drawn without replacement
    std::vector<std::pair<std::size_t, std::size_t>> all_pairs;
    for (std::size_t i = 0; i < cfg.cat_fields; ++i)
        for (std::size_t j = i + 1; j < cfg.cat_fields; ++j) all_pairs.emplace_back(i, j);
    weight_rng.shuffle(all_pairs);
    all_pairs.resize(cfg.interaction_pairs);

    Rng row_rng(mix_seed(cfg.seed, 0x5d));
    SynthResult out;
    out.config = cfg;
    out.rows.reserve(cfg.rows);
    out.bayes_scores.reserve(cfg.rows);

    std::vector<std::size_t> tokens(cfg.cat_fields);
    for (std::size_t r = 0; r < cfg.rows; ++r) {
        double score = cfg.bias;
        for (std::size_t f = 0; f < cfg.cat_fields; ++f) {
            tokens[f] = static_cast<std::size_t>(row_rng.bounded(cfg.vocab));
            score += first_order[f][tokens[f]];
        }
        for (const auto& [i, j] : all_pairs) {
            const double* ui = latent[i].data() + tokens[i] * cfg.latent_dim;
            const double* uj = latent[j].data() + tokens[j] * cfg.latent_dim;
            double dot = 0.0;
            for (std::size_t k = 0; k < cfg.latent_dim; ++k) dot += ui[k] * uj[k];
            score += dot;
        }
        double noisy = score + (cfg.noise > 0.0 ? cfg.noise * row_rng.normal() : 0.0);
        double p = 1.0 / (1.0 + std::exp(-noisy));
        int label = row_rng.bernoulli(p) ? 1 : 0;

        RawRow row;
        row.label = label;
        row.cats.reserve(cfg.cat_fields);
        for (std::size_t f = 0; f < cfg.cat_fields; ++f) row.cats.push_back("t" + std::to_string(tokens[f]));
        out.rows.push_back(std::move(row));
        out.bayes_scores.push_back(score);
    }

    eval::ScoredSet scored;
    scored.scores = out.bayes_scores;
    scored.labels.reserve(cfg.rows);
    for (const RawRow& row : out.rows) scored.labels.push_back(row.label);
    out.bayes_auc = eval::auc(scored);
    return out;
}

std::string synth_to_csv(const SynthResult& synth) {
    std::ostringstream os;
    os << "label";
    for (std::size_t f = 1; f <= synth.config.cat_fields; ++f) os << ",c" << f;
    os << '\n';
    for (const RawRow& row : synth.rows) {
        os << row.label;
        for (const auto& cell : row.cats) os << ',' << (cell ? *cell : "");
        os << '\n';
    }
    return os.str();
}

std::string synth_meta_json(const SynthResult& synth) {
    json j;
    j["seed"] = synth.config.seed;
    j["rows"] = synth.config.rows;
    j["cat_fields"] = synth.config.cat_fields;
    j["vocab"] = synth.config.vocab;
    j["latent_dim"] = synth.config.latent_dim;
    j["interaction_pairs"] = synth.config.interaction_pairs;
    j["noise"] = synth.config.noise;
    j["bias"] = synth.config.bias;
    j["bayes_auc"] = synth.bayes_auc;
    return j.dump(2);
}

Dataset load_clicklog_file(const std::string& path, const std::string& format, const LoadOptions& opts) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);

    std::vector<std::pair<std::string, FieldKind>> layout;
    std::string line;
    std::size_t line_no = 0;
    bool is_criteo = false;
    if (format == "criteo") {
        is_criteo = true;
        layout = criteo_field_layout();
    } else if (format == "avazu") {
        if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
        ++line_no;
        layout = avazu_field_layout(line);
    } else {
        throw std::invalid_argument("unknown click-log format '" + format + "' (want criteo|avazu)");
    }

    std::vector<RawRow> rows;
    std::size_t bad_lines = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            rows.push_back(is_criteo ? parse_criteo(line, line_no) : parse_avazu(line, line_no));
        } catch (const ParseError& e) {
            ++bad_lines;
            log_warn(std::string("skipping malformed row: ") + e.what());
            if (bad_lines > opts.max_bad_lines) {
                throw std::runtime_error(path + ": more than " + std::to_string(opts.max_bad_lines) +
                                         " malformed lines, aborting");
            }
        }
    }
    if (rows.empty()) throw std::runtime_error(path + ": no data rows");

    Dataset ds;
    ds.name = format;
    ds.split = split_sizes(rows.size(), opts.ratios);
    ds.schema = build_schema({rows.data(), ds.split.train}, layout, opts.min_freq);
    ds.examples.reserve(rows.size());
    for (const RawRow& row : rows) ds.examples.push_back(encode(row, ds.schema));
    return ds;
}

Dataset dataset_from_synth(const SynthResult& synth, const std::array<double, 3>& ratios) {
    Dataset ds;
    ds.name = "synth";
    ds.split = split_sizes(synth.rows.size(), ratios);
    ds.schema = build_schema({synth.rows.data(), ds.split.train}, synth_field_layout(synth.config.cat_fields), 1);
    ds.examples.reserve(synth.rows.size());
    for (const RawRow& row : synth.rows) ds.examples.push_back(encode(row, ds.schema));
    return ds;
}

namespace {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) {
        throw std::runtime_error(path + ": truncated example cache");
    }
    return v;
}

} // namespace

void save_example_cache(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os.write("MCEX", 4);
    write_pod<std::uint8_t>(os, 1);
    std::uint32_t f_cat = static_cast<std::uint32_t>(ds.schema.cat_field_count());
    std::uint32_t f_num = static_cast<std::uint32_t>(ds.schema.num_field_count());
    write_pod(os, f_cat);
    write_pod(os, f_num);
    write_pod<std::uint64_t>(os, ds.split.train);
    write_pod<std::uint64_t>(os, ds.split.dev);
    write_pod<std::uint64_t>(os, ds.split.test);
    for (const Example& ex : ds.examples) {
        write_pod(os, ex.label);
        for (std::uint32_t c : ex.cat) write_pod(os, c);
        for (double v : ex.num) write_pod(os, v);
    }
    if (!os) throw std::runtime_error("write failed for " + path);
}

void load_example_cache(const std::string& path, Dataset& ds) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MCEX", 4) != 0) {
        throw std::runtime_error(path + ": not an example cache (bad magic)");
    }
    auto version = read_pod<std::uint8_t>(is, path);
    if (version != 1) throw std::runtime_error(path + ": unsupported cache version " + std::to_string(version));
    auto f_cat = read_pod<std::uint32_t>(is, path);
    auto f_num = read_pod<std::uint32_t>(is, path);
    if (f_cat != ds.schema.cat_field_count() || f_num != ds.schema.num_field_count()) {
        throw std::runtime_error(path + ": cache field counts (" + std::to_string(f_cat) + " cat, " +
                                 std::to_string(f_num) + " num) do not match the schema");
    }
    ds.split.train = read_pod<std::uint64_t>(is, path);
    ds.split.dev = read_pod<std::uint64_t>(is, path);
    ds.split.test = read_pod<std::uint64_t>(is, path);
    std::size_t total = ds.split.train + ds.split.dev + ds.split.test;
    ds.examples.clear();
    ds.examples.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        Example ex;
        ex.label = read_pod<std::uint8_t>(is, path);
        ex.cat.resize(f_cat);
        for (std::uint32_t& c : ex.cat) c = read_pod<std::uint32_t>(is, path);
        ex.num.resize(f_num);
        for (double& v : ex.num) {
            v = read_pod<double>(is, path);
            if (!std::isfinite(v)) throw std::runtime_error(path + ": non-finite numeric value in cache");
        }
        ds.examples.push_back(std::move(ex));
    }
}

} // namespace mutualctr::data
