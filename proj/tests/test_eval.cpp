#include "doctest.h"

#include "mutualctr/eval.hpp"
#include "mutualctr/rng.hpp"

#include <cmath>

using namespace mutualctr;
using namespace mutualctr::eval;

namespace {

ScoredSet random_set(Rng& rng, std::size_t n, bool quantize) {
    ScoredSet s;
    s.scores.resize(n);
    s.labels.resize(n);
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < n; ++i) {
        double score = rng.uniform();
        if (quantize) score = std::round(score * 8.0) / 8.0; // force ties
        s.scores[i] = score;
        s.labels[i] = rng.bernoulli(0.4) ? 1 : 0;
        has_pos |= s.labels[i] == 1;
        has_neg |= s.labels[i] == 0;
    }
    if (!has_pos) s.labels[0] = 1;
    if (!has_neg) s.labels[n > 1 ? 1 : 0] = 0;
    return s;
}

} // namespace

TEST_CASE("auc hand cases") {
    CHECK(auc({{0.9, 0.1}, {1, 0}}) == 1.0);
    CHECK(auc({{0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}}) == 0.5);
    CHECK(auc_bruteforce({{0.8, 0.5, 0.5}, {1, 0, 0}}) == 1.0);
    CHECK(auc_bruteforce({{0.5, 0.5}, {1, 0}}) == 0.5);
    CHECK(auc_bruteforce({{0.9, 0.2, 0.5}, {1, 1, 0}}) == 0.5);
    CHECK(auc({{0.9, 0.2, 0.5}, {1, 1, 0}}) == 0.5);

    CHECK_THROWS_WITH_AS(auc({{0.1, 0.2}, {1, 1}}), doctest::Contains("0 negatives"), std::domain_error);
    CHECK_THROWS_AS(auc_bruteforce({{0.1, 0.2}, {0, 0}}), std::domain_error);
}

TEST_CASE("auc equals the brute-force pairwise oracle") {
    Rng rng(101);
    for (int trial = 0; trial < 60; ++trial) {
        std::size_t n = 2 + rng.bounded(500);
        ScoredSet s = random_set(rng, n, trial % 2 == 0);
        CHECK(std::abs(auc(s) - auc_bruteforce(s)) <= 1e-12);
    }
}

TEST_CASE("auc is invariant under strictly increasing transforms") {
    Rng rng(103);
    ScoredSet s = random_set(rng, 400, true);
    double base = auc(s);
    ScoredSet affine = s, expd = s;
    for (double& v : affine.scores) v = 3.7 * v + 11.0;
    for (double& v : expd.scores) v = std::exp(v);
    CHECK(auc(affine) == base);
    CHECK(auc(expd) == base);
}

TEST_CASE("auc complement identity for tie-free scores") {
    Rng rng(107);
    for (int trial = 0; trial < 20; ++trial) {
        ScoredSet s;
        std::size_t n = 50 + rng.bounded(200);
        for (std::size_t i = 0; i < n; ++i) {
            s.scores.push_back(rng.uniform() + 1e-9 * static_cast<double>(i)); // unique
            s.labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
        }
        s.labels[0] = 1;
        s.labels[1] = 0;
        ScoredSet flipped = s;
        for (int& y : flipped.labels) y = 1 - y;
        CHECK(std::abs(auc(s) + auc(flipped) - 1.0) <= 1e-12);
    }
}

TEST_CASE("relaimp: identities and the published table cells") {
    CHECK(relaimp(0.8, 0.8) == 0.0);
    CHECK(std::abs(relaimp(0.79837, 0.79743) - 0.0031604) < 1e-6);
    CHECK(std::abs(relaimp(0.81330, 0.81251) - 0.0025270) < 1e-6);
    CHECK(relaimp(0.82, 0.7) > relaimp(0.81, 0.7)); // strictly increasing in auc_test
    CHECK_THROWS_AS(relaimp(0.7, 0.5), std::domain_error);
    CHECK_THROWS_AS(relaimp(0.7, 0.49), std::domain_error);
}

TEST_CASE("logloss hand cases") {
    CHECK(logloss({{0.5, 0.5}, {1, 0}}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // perfect predictions survive only up to the clamp
    CHECK(logloss({{1.0, 0.0}, {1, 0}}) == doctest::Approx(-std::log(1.0 - 1e-7)).epsilon(1e-6));
    CHECK(logloss({{0.9, 0.2, 0.6}, {1, 0, 1}}) == doctest::Approx(0.27977656357934223).epsilon(1e-12));
}

TEST_CASE("assemble_table: grouping, relaimp column, degenerate row") {
    std::vector<RunCell> cells;
    for (double a : {0.81, 0.82, 0.80, 0.83}) cells.push_back({"deepfm", "independent", "synth", a});
    for (double a : {0.825, 0.835, 0.815, 0.845}) cells.push_back({"deepfm", "mutual_scratch", "synth", a});
    ResultTable table = assemble_table(cells, "independent");
    REQUIRE(table.rows.size() == 2);
    CHECK(table.rows[0].aucs.size() == 4);
    CHECK(table.rows[0].mean == doctest::Approx(0.815));
    CHECK_FALSE(table.rows[0].relaimp.has_value());
    REQUIRE(table.rows[1].relaimp.has_value());
    CHECK(*table.rows[1].relaimp == doctest::Approx((0.83 - 0.5) / (0.815 - 0.5) - 1.0).epsilon(1e-12));

    // single report: one row, stdev 0
    ResultTable single = assemble_table({{"dcn", "independent", "synth", 0.8}}, "independent");
    REQUIRE(single.rows.size() == 1);
    CHECK(single.rows[0].stdev == 0.0);

    // missing baseline row
    CHECK_THROWS_AS(assemble_table({{"dcn", "mutual_scratch", "synth", 0.8}}, "independent"),
                    std::runtime_error);
    // compared rows must share the dataset
    CHECK_THROWS_AS(assemble_table({{"dcn", "independent", "synth", 0.8},
                                    {"dcn", "mutual_scratch", "criteo", 0.8}},
                                   "independent"),
                    std::runtime_error);

    CHECK(table.to_csv().find("model,regime,dataset") == 0);
    CHECK(table.to_text().find("deepfm") != std::string::npos);
}
