#pragma once

#include <optional>
#include <string>
#include <vector>

namespace mutualctr::eval {

/// Predicted scores with their binary labels.
struct ScoredSet {
    std::vector<double> scores;
    std::vector<int> labels; // 0 or 1
};

/// Rank-based AUC in O(n log n); tied scores count half a pair.
/// Throws std::domain_error when one class is empty (message carries
/// both class counts).
double auc(const ScoredSet& set);

/// Literal double loop over positive x negative pairs, ties half.
/// Test oracle; intentionally shares nothing with auc().
double auc_bruteforce(const ScoredSet& set);

/// Relative AUC improvement over a baseline after removing the 0.5
/// random-ranking floor: (auc_test - 0.5) / (auc_baseline - 0.5) - 1.
/// Throws std::domain_error when the baseline is not above 0.5.
double relaimp(double auc_test, double auc_baseline);

/// Mean binary cross entropy of the set; scores clamped to
/// [1e-7, 1 - 1e-7] first.
double logloss(const ScoredSet& set);

/// One row of a result table: AUC cells for a (model, regime, dataset)
/// group plus derived statistics.
struct TableRow {
    std::string model;
    std::string regime;
    std::string dataset;
    std::vector<double> aucs;
    double mean = 0.0;
    double stdev = 0.0; // population
    std::optional<double> relaimp; // vs. the baseline row, absent for baselines
};

struct ResultTable {
    std::vector<TableRow> rows;

    std::string to_csv() const;
    std::string to_text() const; // aligned columns
};

/// Input cell group for assemble_table.
struct RunCell {
    std::string model;
    std::string regime;
    std::string dataset;
    double auc = 0.0;
};

/// Groups cells into rows keyed by (model, regime, dataset), computes
/// mean/stdev, and fills RelaImp against each model's row with
/// `baseline_regime` on the same dataset. Rows appear in first-seen
/// order. Throws std::runtime_error if a non-baseline row has no
/// matching baseline, or when compared rows disagree on the dataset.
ResultTable assemble_table(const std::vector<RunCell>& cells, const std::string& baseline_regime);

} // namespace mutualctr::eval
