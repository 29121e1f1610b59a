#include "mutualctr/eval.hpp"

#include "vendor_json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mutualctr::eval {

namespace {

void require_both_classes(const ScoredSet& set, const char* op) {
    if (set.scores.size() != set.labels.size()) {
        throw std::invalid_argument(std::string(op) + ": scores and labels differ in length");
    }
    std::size_t pos = 0;
    for (int y : set.labels) pos += static_cast<std::size_t>(y != 0);
    std::size_t neg = set.labels.size() - pos;
    if (pos == 0 || neg == 0) {
        throw std::domain_error(std::string(op) + ": need both classes, got " + std::to_string(pos) +
                                " positives and " + std::to_string(neg) + " negatives");
    }
}

std::string fmt_num(double v) {
    return nlohmann::json(v).dump(); // shortest round-trip, deterministic
}

} // namespace

double auc(const ScoredSet& set) {
    require_both_classes(set, "auc");
    const std::size_t n = set.scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return set.scores[a] < set.scores[b]; });

    // average ranks over tie groups, then the Mann-Whitney identity
    double pos_rank_sum = 0.0;
    std::size_t pos = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && set.scores[order[j]] == set.scores[order[i]]) ++j;
        double avg_rank = 0.5 * static_cast<double>(i + 1 + j); // ranks are 1-based
        for (std::size_t k = i; k < j; ++k) {
            if (set.labels[order[k]] != 0) {
                pos_rank_sum += avg_rank;
                ++pos;
            }
        }
        i = j;
    }
    const double p = static_cast<double>(pos);
    const double m = static_cast<double>(n - pos);
    return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * m);
}

double auc_bruteforce(const ScoredSet& set) {
    require_both_classes(set, "auc_bruteforce");
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < set.scores.size(); ++i) {
        if (set.labels[i] == 0) continue;
        for (std::size_t j = 0; j < set.scores.size(); ++j) {
            if (set.labels[j] != 0) continue;
            ++pairs;
            if (set.scores[j] < set.scores[i]) {
                wins += 1.0;
            } else if (set.scores[j] == set.scores[i]) {
                wins += 0.5;
            }
        }
    }
    return wins / static_cast<double>(pairs);
}

double relaimp(double auc_test, double auc_baseline) {
    if (!(auc_baseline > 0.5)) {
        throw std::domain_error("relaimp: baseline AUC " + std::to_string(auc_baseline) +
                                " must exceed 0.5");
    }
    return (auc_test - 0.5) / (auc_baseline - 0.5) - 1.0;
}

double logloss(const ScoredSet& set) {
    if (set.scores.size() != set.labels.size()) {
        throw std::invalid_argument("logloss: scores and labels differ in length");
    }
    if (set.scores.empty()) throw std::invalid_argument("logloss: empty set");
    double acc = 0.0;
    for (std::size_t i = 0; i < set.scores.size(); ++i) {
        double p = std::min(std::max(set.scores[i], 1e-7), 1.0 - 1e-7);
        acc -= set.labels[i] != 0 ? std::log(p) : std::log(1.0 - p);
    }
    return acc / static_cast<double>(set.scores.size());
}

ResultTable assemble_table(const std::vector<RunCell>& cells, const std::string& baseline_regime) {
    ResultTable table;
    for (const RunCell& c : cells) {
        TableRow* row = nullptr;
        for (TableRow& r : table.rows) {
            if (r.model == c.model && r.regime == c.regime && r.dataset == c.dataset) {
                row = &r;
                break;
            }
        }
        if (!row) {
            table.rows.push_back(TableRow{c.model, c.regime, c.dataset, {}, 0.0, 0.0, std::nullopt});
            row = &table.rows.back();
        }
        row->aucs.push_back(c.auc);
    }

    for (TableRow& r : table.rows) {
        double sum = std::accumulate(r.aucs.begin(), r.aucs.end(), 0.0);
        r.mean = sum / static_cast<double>(r.aucs.size());
        double ss = 0.0;
        for (double a : r.aucs) ss += (a - r.mean) * (a - r.mean);
        r.stdev = std::sqrt(ss / static_cast<double>(r.aucs.size()));
    }

    for (TableRow& r : table.rows) {
        if (r.regime == baseline_regime) continue;
        const TableRow* base = nullptr;
        for (const TableRow& b : table.rows) {
            if (b.model == r.model && b.regime == baseline_regime) {
                if (b.dataset != r.dataset) {
                    throw std::runtime_error("assemble_table: rows for model '" + r.model +
                                             "' compare different datasets ('" + b.dataset + "' vs '" +
                                             r.dataset + "')");
                }
                base = &b;
                break;
            }
        }
        if (!base) {
            throw std::runtime_error("assemble_table: no baseline row (regime '" + baseline_regime +
                                     "') for model '" + r.model + "'");
        }
        r.relaimp = relaimp(r.mean, base->mean);
    }
    return table;
}

std::string ResultTable::to_csv() const {
    std::size_t max_cells = 0;
    for (const TableRow& r : rows) max_cells = std::max(max_cells, r.aucs.size());
    std::ostringstream os;
    os << "model,regime,dataset";
    for (std::size_t i = 1; i <= max_cells; ++i) os << ",auc_" << i;
    os << ",mean,stdev,relaimp\n";
    for (const TableRow& r : rows) {
        os << r.model << ',' << r.regime << ',' << r.dataset;
        for (std::size_t i = 0; i < max_cells; ++i) {
            os << ',';
            if (i < r.aucs.size()) os << fmt_num(r.aucs[i]);
            else os << '-';
        }
        os << ',' << fmt_num(r.mean) << ',' << fmt_num(r.stdev) << ',';
        if (r.relaimp) os << fmt_num(*r.relaimp);
        else os << '-';
        os << '\n';
    }
    return os.str();
}

std::string ResultTable::to_text() const {
    std::size_t max_cells = 0;
    for (const TableRow& r : rows) max_cells = std::max(max_cells, r.aucs.size());

    auto fmt_cell = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.5f", v);
        return std::string(buf);
    };
    auto fmt_pct = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%+.3f%%", v * 100.0);
        return std::string(buf);
    };

    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header = {"model", "regime", "dataset"};
    for (std::size_t i = 1; i <= max_cells; ++i) header.push_back("auc_" + std::to_string(i));
    header.push_back("mean");
    header.push_back("stdev");
    header.push_back("relaimp");
    grid.push_back(header);
    for (const TableRow& r : rows) {
        std::vector<std::string> line = {r.model, r.regime, r.dataset};
        for (std::size_t i = 0; i < max_cells; ++i) line.push_back(i < r.aucs.size() ? fmt_cell(r.aucs[i]) : "-");
        line.push_back(fmt_cell(r.mean));
        line.push_back(fmt_cell(r.stdev));
        line.push_back(r.relaimp ? fmt_pct(*r.relaimp) : "-");
        grid.push_back(std::move(line));
    }

    std::vector<std::size_t> widths(grid[0].size(), 0);
    for (const auto& line : grid)
        for (std::size_t i = 0; i < line.size(); ++i) widths[i] = std::max(widths[i], line[i].size());

    std::ostringstream os;
    for (const auto& line : grid) {
        for (std::size_t i = 0; i < line.size(); ++i) {
            os << line[i] << std::string(widths[i] - line[i].size() + 2, ' ');
        }
        os << '\n';
    }
    return os.str();
}

} // namespace mutualctr::eval
