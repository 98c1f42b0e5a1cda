#include <cmath>

#include "doctest.h"
#include "dila/metrics.hpp"
#include "metric_fixtures.hpp"
#include "oracles.hpp"

using namespace dila;

namespace {

std::vector<double> column(const Matrix& m, std::size_t j) {
    std::vector<double> out;
    for (std::size_t r = 0; r < m.rows(); ++r) out.push_back(m(r, j));
    return out;
}

}  // namespace

TEST_CASE("confusion_counts: four-example fixture") {
    const auto fx = fixtures::metric_fixtures().front();
    const auto counts = confusion_counts(threshold_scores(fx.scores, 0.5), fx.targets);
    REQUIRE(counts.size() == 2);
    CHECK(counts[0] == CodeCounts{1, 1, 1, 1});
    CHECK(counts[1] == CodeCounts{2, 0, 0, 2});
    CHECK_THROWS_AS(confusion_counts(Matrix(2, 2), Matrix(2, 3)), ShapeError);
}

TEST_CASE("f1_from_counts") {
    CHECK(f1_from_counts(0, 0, 0) == 0.0);
    CHECK(f1_from_counts(3, 0, 0) == 1.0);
    CHECK(f1_from_counts(0, 4, 2) == 0.0);
    CHECK(f1_from_counts(1, 1, 1) == doctest::Approx(0.5));
    CHECK(f1_from_counts(2, 1, 3) == doctest::Approx(0.5));
}

TEST_CASE("micro_macro_f1: macro 0.5 when one of two codes is never right") {
    const std::vector<CodeCounts> counts = {{5, 0, 0, 5}, {0, 3, 2, 5}};
    const F1Scores f = micro_macro_f1(counts);
    CHECK(f.macro == doctest::Approx(0.5));
    CHECK(f.micro == doctest::Approx(10.0 / 15.0));
    CHECK(micro_macro_f1({}).micro == 0.0);
}

TEST_CASE("evaluate: frozen fixtures") {
    for (const auto& fx : fixtures::metric_fixtures()) {
        CAPTURE(fx.name);
        const EvalResult r = evaluate(fx.scores, fx.targets, fx.threshold);
        CHECK(std::abs(r.micro_f1 - fx.micro_f1) < 1e-12);
        CHECK(std::abs(r.macro_f1 - fx.macro_f1) < 1e-12);
        REQUIRE(r.micro_auc.has_value() == fx.micro_auc.has_value());
        if (fx.micro_auc) CHECK(std::abs(*r.micro_auc - *fx.micro_auc) < 1e-12);
        REQUIRE(r.macro_auc.has_value() == fx.macro_auc.has_value());
        if (fx.macro_auc) CHECK(std::abs(*r.macro_auc - *fx.macro_auc) < 1e-12);
        CHECK(r.macro_auc_skipped == fx.skipped);
        CHECK(r.n_examples == fx.scores.rows());
        CHECK(r.threshold == fx.threshold);
    }
}

TEST_CASE("evaluate: codes never correct") {
    const auto fx = fixtures::metric_fixtures()[3];
    CHECK(evaluate(fx.scores, fx.targets, 0.5).codes_never_correct == 1);
}

TEST_CASE("binary_auc: agrees with all-pairs counting") {
    oracle::Gen g(50);
    for (int rep = 0; rep < 200; ++rep) {
        const std::size_t n = g.between(2, 30);
        std::vector<double> s(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = std::round(g.uniform(0, 1) * 8) / 8;  // coarse grid forces ties
            y[i] = g.coin() ? 1.0 : 0.0;
        }
        const double ref = oracle::pair_auc(s, y);
        const auto got = binary_auc(s, y);
        if (ref < 0) {
            CHECK_FALSE(got.has_value());
        } else {
            REQUIRE(got.has_value());
            CHECK(std::abs(*got - ref) < 1e-12);
        }
    }
}

TEST_CASE("binary_auc: constant scores give one half") {
    const std::vector<double> s(6, 0.4), y = {1, 0, 1, 0, 0, 1};
    CHECK(*binary_auc(s, y) == doctest::Approx(0.5));
    const std::vector<double> ones = {1, 1};
    CHECK_FALSE(binary_auc(std::vector<double>{0.1, 0.2}, ones).has_value());
    CHECK_THROWS_AS(binary_auc(ones, std::vector<double>{1}), ShapeError);
}

TEST_CASE("auc_roc: invariant under strictly increasing transforms") {
    oracle::Gen g(51);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t n = g.between(4, 20), c = g.between(1, 4);
        const Matrix s = g.matrix(n, c, 0.0, 1.0);
        Matrix y(n, c);
        for (double& v : y.values()) v = g.coin() ? 1.0 : 0.0;
        Matrix t = s;
        for (double& v : t.values()) v = std::exp(3.0 * v) - 7.0;
        for (AucMode mode : {AucMode::Micro, AucMode::Macro}) {
            const AucResult a = auc_roc(s, y, mode), b = auc_roc(t, y, mode);
            REQUIRE(a.value.has_value() == b.value.has_value());
            if (a.value) CHECK(std::abs(*a.value - *b.value) < 1e-12);
            CHECK(a.skipped_codes == b.skipped_codes);
        }
    }
}

TEST_CASE("auc_roc: macro is the mean over defined codes") {
    oracle::Gen g(52);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t n = g.between(2, 12), c = g.between(1, 5);
        const Matrix s = g.matrix(n, c, 0.0, 1.0);
        Matrix y(n, c);
        for (double& v : y.values()) v = g.coin(0.3) ? 1.0 : 0.0;
        double sum = 0;
        std::vector<std::size_t> skipped;
        for (std::size_t j = 0; j < c; ++j) {
            const double a = oracle::pair_auc(column(s, j), column(y, j));
            if (a < 0) skipped.push_back(j);
            else sum += a;
        }
        const AucResult r = auc_roc(s, y, AucMode::Macro);
        CHECK(r.skipped_codes == skipped);
        if (skipped.size() == c) {
            CHECK_FALSE(r.value.has_value());
        } else {
            REQUIRE(r.value.has_value());
            CHECK(std::abs(*r.value - sum / static_cast<double>(c - skipped.size())) < 1e-12);
        }
    }
}

TEST_CASE("threshold_scores: inclusive threshold") {
    const Matrix s = Matrix::from_rows({{0.3, 0.29999, 0.9}});
    CHECK(threshold_scores(s, 0.3) == Matrix::from_rows({{1, 0, 1}}));
}

TEST_CASE("evaluate: counts cover every cell and micro F1 matches them") {
    oracle::Gen g(53);
    for (int rep = 0; rep < 30; ++rep) {
        const std::size_t n = g.between(1, 15), c = g.between(1, 4);
        const Matrix s = g.matrix(n, c, 0.0, 1.0);
        Matrix y(n, c);
        for (double& v : y.values()) v = g.coin() ? 1.0 : 0.0;
        const EvalResult r = evaluate(s, y, g.uniform(0.05, 0.95));
        std::uint64_t total = 0, tp = 0, fp = 0, fn = 0;
        for (const auto& k : r.counts) {
            total += k.tp + k.fp + k.fn + k.tn;
            tp += k.tp;
            fp += k.fp;
            fn += k.fn;
        }
        CHECK(total == n * c);
        CHECK(std::abs(r.micro_f1 - oracle::f1(tp, fp, fn)) < 1e-12);
        CHECK(r.micro_f1 >= 0.0);
        CHECK(r.micro_f1 <= 1.0);
    }
}
