#pragma once

// Hand-checked multilabel fixtures with frozen expected metrics.

#include <optional>
#include <string>
#include <vector>

#include "dila/numerics.hpp"

namespace fixtures {

struct MetricFixture {
    std::string name;
    dila::Matrix scores;
    dila::Matrix targets;
    double threshold;
    double micro_f1;
    double macro_f1;
    std::optional<double> micro_auc;
    std::optional<double> macro_auc;
    std::vector<std::size_t> skipped;
};

inline std::vector<MetricFixture> metric_fixtures() {
    using dila::Matrix;
    return {
        {"four examples two codes", Matrix::from_rows({{0.9, 0.2}, {0.4, 0.8}, {0.6, 0.1}, {0.1, 0.7}}),
         Matrix::from_rows({{1, 0}, {1, 1}, {0, 0}, {0, 1}}), 0.5, 0.75, 0.75, 0.9375, 0.875, {}},
        {"all correct", Matrix::from_rows({{0.9, 0.1}, {0.2, 0.8}}), Matrix::from_rows({{1, 0}, {0, 1}}), 0.5, 1.0,
         1.0, 1.0, 1.0, {}},
        {"all wrong", Matrix::from_rows({{0.1, 0.9}, {0.8, 0.2}}), Matrix::from_rows({{1, 0}, {0, 1}}), 0.5, 0.0, 0.0,
         0.0, 0.0, {}},
        {"one perfect code one silent code", Matrix::from_rows({{0.9, 0.1}, {0.1, 0.2}, {0.8, 0.3}}),
         Matrix::from_rows({{1, 1}, {0, 0}, {1, 1}}), 0.5, 2.0 / 3.0, 0.5, 0.8125, 0.75, {}},
        {"ties in scores", Matrix::from_rows({{0.5}, {0.5}, {0.5}, {0.2}}), Matrix::from_rows({{1}, {0}, {1}, {0}}),
         0.5, 0.8, 0.8, 0.75, 0.75, {}},
        {"threshold at the score", Matrix::from_rows({{0.3, 0.3}, {0.29, 0.31}}), Matrix::from_rows({{1, 0}, {0, 1}}),
         0.3, 0.8, 5.0 / 6.0, 0.875, 1.0, {}},
        {"code with no positives", Matrix::from_rows({{0.7, 0.1, 0.6}, {0.2, 0.4, 0.3}, {0.9, 0.2, 0.8}}),
         Matrix::from_rows({{1, 0, 1}, {0, 0, 0}, {1, 0, 0}}), 0.5, 6.0 / 7.0, 5.0 / 9.0, 8.0 / 9.0, 0.75, {1}},
        {"no predictions at all", Matrix::from_rows({{0.1, 0.1}, {0.2, 0.2}}), Matrix::from_rows({{1, 0}, {0, 1}}),
         0.5, 0.0, 0.0, 0.5, 0.5, {}},
        {"three codes mixed",
         Matrix::from_rows({{0.8, 0.6, 0.1}, {0.3, 0.9, 0.7}, {0.6, 0.2, 0.4}, {0.1, 0.5, 0.95}, {0.55, 0.45, 0.2}}),
         Matrix::from_rows({{1, 1, 0}, {0, 1, 1}, {1, 0, 0}, {0, 0, 1}, {0, 1, 0}}), 0.5, 0.8, 37.0 / 45.0,
         27.0 / 28.0, 17.0 / 18.0, {}},
        {"single example", Matrix::from_rows({{0.7, 0.2, 0.4}}), Matrix::from_rows({{1, 0, 1}}), 0.35, 1.0,
         2.0 / 3.0, 1.0, std::nullopt, {0, 1, 2}},
    };
}

}  // namespace fixtures
