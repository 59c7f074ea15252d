#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "tileforge/common.hpp"
#include "tileforge/metrics.hpp"

using namespace tileforge;

namespace {

// O(n^2) Mann-Whitney oracle: fraction of (pos, neg) pairs ranked correctly,
// ties counted half.
double pairwise_auc(const std::vector<int>& labels, const std::vector<double>& s) {
    double wins = 0;
    int64_t pairs = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 1) continue;
        for (size_t j = 0; j < labels.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (s[i] > s[j]) wins += 1;
            else if (s[i] == s[j]) wins += 0.5;
        }
    }
    return wins / double(pairs);
}

ConfusionMatrix from_counts(int64_t tn, int64_t fp, int64_t fn, int64_t tp) {
    ConfusionMatrix cm;
    cm.tn = tn; cm.fp = fp; cm.fn = fn; cm.tp = tp;
    return cm;
}

} // namespace

TEST_CASE("published confusion fixture reproduces the published scores") {
    // Independently recomputed from the counts with integer arithmetic:
    //   accuracy  = 39656 / 40514   = 0.9788221...
    //   precision = 19883 / 20367   = 0.9762360...
    //   recall    = 19883 / 20257   = 0.9815382...
    //   f1        = 2PR/(P+R)       = 0.9788834...
    auto sc = scores(from_counts(19773, 484, 374, 19883));
    REQUIRE(sc.accuracy);
    CHECK(*sc.accuracy == doctest::Approx(0.97882).epsilon(0).scale(0).epsilon(5e-6));
    CHECK(*sc.precision == doctest::Approx(0.97624).scale(0).epsilon(5e-6));
    CHECK(*sc.recall == doctest::Approx(0.98154).scale(0).epsilon(5e-6));
    CHECK(*sc.f1 == doctest::Approx(0.97888).scale(0).epsilon(5e-6));
}

TEST_CASE("confusion counts and threshold boundary") {
    std::vector<int> y{1, 0, 1, 0, 1};
    std::vector<double> p{0.5, 0.5, 0.9, 0.1, 0.2};
    auto cm = confusion(y, p, 0.5);
    // prob exactly at the threshold counts as positive
    CHECK(cm.tp == 2);
    CHECK(cm.fp == 1);
    CHECK(cm.tn == 1);
    CHECK(cm.fn == 1);
    CHECK(cm.total() == 5);

    CHECK_THROWS_AS(confusion({1}, {0.5, 0.5}), LengthMismatch);
    CHECK_THROWS_AS(confusion({}, {}), EmptyInput);
}

TEST_CASE("confusion counts always sum to n") {
    RngStream rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        int n = 1 + int(rng.next_below(50));
        std::vector<int> y(n);
        std::vector<double> p(n);
        for (int i = 0; i < n; ++i) {
            y[i] = int(rng.next_below(2));
            p[i] = rng.next_unit();
        }
        CHECK(confusion(y, p).total() == n);
    }
}

TEST_CASE("degenerate denominators are undefined, not zero") {
    auto sc = scores(from_counts(10, 0, 0, 0)); // no positives anywhere
    CHECK(sc.accuracy);
    CHECK(*sc.accuracy == doctest::Approx(1.0));
    CHECK_FALSE(sc.precision); // tp+fp == 0
    CHECK_FALSE(sc.recall);    // tp+fn == 0
    CHECK_FALSE(sc.f1);

    auto sc2 = scores(from_counts(0, 0, 0, 0));
    CHECK_FALSE(sc2.accuracy);

    auto sc3 = scores(from_counts(0, 5, 5, 0)); // P and R both defined but zero
    CHECK(sc3.precision);
    CHECK(*sc3.precision == 0.0);
    CHECK_FALSE(sc3.f1); // P+R == 0
}

TEST_CASE("auc on perfectly separated and anti-separated data") {
    std::vector<int> y{0, 0, 1, 1};
    CHECK(roc_auc(y, {0.1, 0.2, 0.8, 0.9}).auc == doctest::Approx(1.0));
    CHECK(roc_auc(y, {0.9, 0.8, 0.2, 0.1}).auc == doctest::Approx(0.0));
    CHECK(roc_auc(y, {0.5, 0.5, 0.5, 0.5}).auc == doctest::Approx(0.5));
}

TEST_CASE("tied score straddling both classes credits half") {
    // one positive and one negative share the score
    std::vector<int> y{0, 1};
    std::vector<double> s{0.4, 0.4};
    CHECK(roc_auc(y, s).auc == doctest::Approx(0.5));
}

TEST_CASE("trapezoid auc equals pair counting on random data") {
    RngStream rng(0xA0C);
    for (int trial = 0; trial < 100; ++trial) {
        int n = 2 + int(rng.next_below(199));
        std::vector<int> y(n);
        std::vector<double> s(n);
        bool has0 = false, has1 = false;
        for (int i = 0; i < n; ++i) {
            y[i] = int(rng.next_below(2));
            (y[i] ? has1 : has0) = true;
            // coarse quantization forces plenty of ties
            s[i] = double(rng.next_below(10)) / 10.0;
        }
        if (!has0) y[0] = 0;
        if (!has1) y[n - 1] = 1;
        double trap = roc_auc(y, s).auc;
        double pairs = pairwise_auc(y, s);
        CHECK(std::abs(trap - pairs) < 1e-12);
    }
}

TEST_CASE("auc is invariant under monotone score transforms") {
    std::vector<int> y{0, 1, 0, 1, 1, 0, 0, 1, 0, 1};
    std::vector<double> s{0.12, 0.8, 0.33, 0.47, 0.92, 0.05, 0.61, 0.61, 0.29, 0.74};
    double base = roc_auc(y, s).auc;
    std::vector<double> t(s.size());
    std::transform(s.begin(), s.end(), t.begin(), [](double v) { return std::exp(3 * v); });
    CHECK(roc_auc(y, t).auc == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("auc label-swap symmetry: auc(y, s) == 1 - auc(1-y, s) with no ties") {
    std::vector<int> y{0, 1, 0, 1, 1, 0, 1, 0};
    std::vector<double> s{0.1, 0.83, 0.31, 0.44, 0.95, 0.02, 0.67, 0.58};
    std::vector<int> flipped(y.size());
    std::transform(y.begin(), y.end(), flipped.begin(), [](int v) { return 1 - v; });
    CHECK(roc_auc(y, s).auc == doctest::Approx(1.0 - roc_auc(flipped, s).auc).epsilon(1e-12));
}

TEST_CASE("roc curve shape and one-class error") {
    std::vector<int> y{0, 1, 0, 1};
    std::vector<double> s{0.2, 0.9, 0.4, 0.6};
    auto roc = roc_auc(y, s);
    REQUIRE(roc.points.size() >= 2);
    CHECK(roc.points.front().fpr == 0.0);
    CHECK(roc.points.front().tpr == 0.0);
    CHECK(roc.points.back().fpr == 1.0);
    CHECK(roc.points.back().tpr == 1.0);
    // both coordinates are non-decreasing along the curve
    for (size_t i = 1; i < roc.points.size(); ++i) {
        CHECK(roc.points[i].fpr >= roc.points[i - 1].fpr);
        CHECK(roc.points[i].tpr >= roc.points[i - 1].tpr);
    }

    CHECK_THROWS_AS(roc_auc({1, 1}, {0.2, 0.4}), OneClassOnly);
    CHECK_THROWS_AS(roc_auc({0, 0}, {0.2, 0.4}), OneClassOnly);
    CHECK_THROWS_AS(roc_auc({}, {}), EmptyInput);
    CHECK_THROWS_AS(roc_auc({1}, {0.2, 0.4}), LengthMismatch);
}

TEST_CASE("roc csv lists a header and one row per point") {
    auto roc = roc_auc({0, 1, 0, 1}, {0.2, 0.9, 0.4, 0.6});
    auto path = std::filesystem::temp_directory_path() / "tf_roc_test.csv";
    write_roc_csv(path, roc);
    std::ifstream in(path);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "threshold,fpr,tpr");
    size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == roc.points.size());
    std::filesystem::remove(path);
}
