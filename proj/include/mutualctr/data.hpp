#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mutualctr::data {

enum class FieldKind { categorical, numeric };

/// One input column. Categorical fields carry a token -> index map with
/// index 0 reserved for out-of-vocabulary / missing; numeric fields
/// carry train-split standardization statistics.
struct FieldSpec {
    std::string name;
    FieldKind kind = FieldKind::categorical;
    std::map<std::string, std::uint32_t> vocab; // kept tokens only; OOV is implicit index 0
    double mean = 0.0;
    double stdev = 1.0;

    /// Vocabulary size including the OOV slot.
    std::uint32_t vocab_size() const { return static_cast<std::uint32_t>(vocab.size()) + 1; }
};

struct FeatureSchema {
    std::vector<FieldSpec> fields;
    std::uint32_t min_freq = 1;

    std::size_t cat_field_count() const;
    std::size_t num_field_count() const;
    std::vector<std::uint32_t> cat_vocab_sizes() const;

    std::string to_json() const;
    static FeatureSchema from_json(const std::string& text);

    /// FNV-1a over the canonical JSON form, hex encoded. Stored in
    /// checkpoints and caches to reject mismatched artifacts.
    std::string hash() const;
};

/// A parsed but not yet encoded click-log row. Missing cells are empty
/// optionals.
struct RawRow {
    int label = 0;
    std::vector<std::optional<std::string>> cats;
    std::vector<std::optional<double>> nums;
};

/// Thrown by the line parsers; carries the 1-based line number.
struct ParseError : std::runtime_error {
    ParseError(std::size_t line_no, const std::string& what)
        : std::runtime_error("line " + std::to_string(line_no) + ": " + what), line(line_no) {}
    std::size_t line;
};

/// Criteo TSV: 40 columns, no header: label, 13 integer columns (may be
/// empty), 26 hex token columns (may be empty).
RawRow parse_criteo(const std::string& line, std::size_t line_no);

/// Avazu CSV data line: 24 columns: id, click, 22 categorical tokens.
/// The id column is dropped.
RawRow parse_avazu(const std::string& line, std::size_t line_no);

/// Synthetic CSV data line: label plus `cat_fields` tokens.
RawRow parse_synth(const std::string& line, std::size_t line_no, std::size_t cat_fields);

/// Field layouts matching the three file formats (I1..I13/C1..C26 for
/// Criteo; header-named categorical fields for Avazu; c1..cF for synth).
std::vector<std::pair<std::string, FieldKind>> criteo_field_layout();
std::vector<std::pair<std::string, FieldKind>> avazu_field_layout(const std::string& header_line);
std::vector<std::pair<std::string, FieldKind>> synth_field_layout(std::size_t cat_fields);

/// Builds the schema from train-split rows only. Tokens below min_freq
/// encode to OOV; numeric mean/stdev use present values (population
/// stdev; zero-variance columns get stdev 1).
FeatureSchema build_schema(std::span<const RawRow> train_rows,
                           const std::vector<std::pair<std::string, FieldKind>>& layout,
                           std::uint32_t min_freq);

/// One encoded example: label plus per-field indices / standardized values.
struct Example {
    std::uint8_t label = 0;
    std::vector<std::uint32_t> cat; // one index per categorical field
    std::vector<double> num;        // one standardized value per numeric field
};

/// Total: unknown tokens and missing cells map to OOV / 0.0.
Example encode(const RawRow& row, const FeatureSchema& schema);

/// Sequential split sizes: train = floor(r0*n), dev = floor(r1*n),
/// test = remainder.
struct SplitSizes {
    std::size_t train = 0;
    std::size_t dev = 0;
    std::size_t test = 0;
};

/// Order-preserving 3-way split. Ratios must sum to 1; fewer than 10
/// examples is an error.
SplitSizes split_sizes(std::size_t n, const std::array<double, 3>& ratios);

/// Column layout of one mini-batch (the [B x F] matrices stored
/// field-major so each field's column is contiguous for embedding
/// lookups).
struct Batch {
    std::vector<double> labels;                   // [B]
    std::vector<std::vector<std::uint32_t>> cat;  // F_cat x [B]
    std::vector<std::vector<double>> num;         // F_num x [B]

    std::size_t size() const { return labels.size(); }
};

/// Deterministic mini-batch sequence over a slice of examples. With a
/// shuffle seed the permutation is a pure function of (seed, epoch);
/// without one, source order. The last batch may be short.
class BatchStream {
public:
    BatchStream(std::span<const Example> examples, std::size_t batch_size,
                std::optional<std::uint64_t> shuffle_seed, std::uint64_t epoch);

    std::optional<Batch> next();
    std::size_t batches_per_epoch() const;

private:
    std::span<const Example> examples_;
    std::size_t batch_size_;
    std::vector<std::uint32_t> order_;
    std::size_t cursor_ = 0;
};

/// Fully prepared dataset: schema plus encoded examples plus the split.
struct Dataset {
    FeatureSchema schema;
    std::vector<Example> examples;
    SplitSizes split;
    std::string name; // "synth", "criteo", "avazu"

    std::span<const Example> train() const { return {examples.data(), split.train}; }
    std::span<const Example> dev() const { return {examples.data() + split.train, split.dev}; }
    std::span<const Example> test() const { return {examples.data() + split.train + split.dev, split.test}; }
    std::span<const Example> part(const std::string& part_name) const;
};

// ---- synthetic data ------------------------------------------------------

struct SynthConfig {
    std::size_t rows = 100000;
    std::size_t cat_fields = 8;
    std::size_t vocab = 100;
    std::size_t latent_dim = 4;
    std::size_t interaction_pairs = 8;
    double noise = 0.5;
    double bias = -1.0;
    std::uint64_t seed = 1;
};

struct SynthResult {
    std::vector<RawRow> rows;
    std::vector<double> bayes_scores; // noiseless score per row; Bayes-optimal ranking
    double bayes_auc = 0.0;           // AUC of bayes_scores against the sampled labels
    SynthConfig config;
};

/// Token latent vectors + first-order weights drive the click
/// probability sigmoid(bias + first order + designated pairwise dot
/// products + noise); labels are Bernoulli draws. Same seed, same bytes.
SynthResult synth_generate(const SynthConfig& cfg);

/// CSV with "label,c1..cF" header.
std::string synth_to_csv(const SynthResult& synth);

/// Sidecar metadata (seed, config echo, Bayes AUC) as JSON.
std::string synth_meta_json(const SynthResult& synth);

// ---- file ingestion ------------------------------------------------------

struct LoadOptions {
    std::array<double, 3> ratios{0.8, 0.1, 0.1};
    std::uint32_t min_freq = 10;
    std::size_t max_bad_lines = 100; // abort threshold for malformed rows
};

/// Reads a Criteo/Avazu file, builds the schema on the train part,
/// encodes everything. Malformed lines are reported to stderr with line
/// numbers; more than max_bad_lines aborts.
Dataset load_clicklog_file(const std::string& path, const std::string& format, const LoadOptions& opts);

/// Builds a Dataset from generated synthetic rows (min_freq 1).
Dataset dataset_from_synth(const SynthResult& synth, const std::array<double, 3>& ratios);

// ---- encoded example cache -----------------------------------------------

/// Binary cache layout (version 1, all integers little-endian):
///   magic "MCEX", u8 version, u32 F_cat, u32 F_num,
///   u64 n_train, u64 n_dev, u64 n_test,
///   then per example: u8 label, F_cat x u32, F_num x f64.
void save_example_cache(const std::string& path, const Dataset& ds);
void load_example_cache(const std::string& path, Dataset& ds); // fills examples + split

} // namespace mutualctr::data
