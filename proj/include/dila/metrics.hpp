#pragma once

// Multilabel evaluation. Predictions, targets and scores are n×c matrices
// (one row per example, one column per code); targets and predictions hold 0/1.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dila/model.hpp"
#include "dila/numerics.hpp"

namespace dila {

struct CodeCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    bool operator==(const CodeCounts&) const = default;
};

std::vector<CodeCounts> confusion_counts(const Matrix& predictions, const Matrix& targets);

// 2tp / (2tp + fp + fn), with 0/0 = 0.
double f1_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn);

struct F1Scores {
    double micro = 0;
    double macro = 0;
};

F1Scores micro_macro_f1(std::span<const CodeCounts> counts);

enum class AucMode { Micro, Macro };

struct AucResult {
    std::optional<double> value;             // empty when undefined
    std::vector<std::size_t> skipped_codes;  // macro: codes lacking a positive or a negative
};

// Mann-Whitney U / (n_pos · n_neg) with average ranks for ties; empty when
// either class is missing.
std::optional<double> binary_auc(std::span<const double> scores, std::span<const double> labels);

AucResult auc_roc(const Matrix& scores, const Matrix& targets, AucMode mode);

Matrix threshold_scores(const Matrix& scores, double threshold);

struct EvalResult {
    double micro_f1 = 0;
    double macro_f1 = 0;
    std::optional<double> micro_auc;
    std::optional<double> macro_auc;
    std::vector<std::size_t> macro_auc_skipped;
    std::vector<CodeCounts> counts;
    std::size_t codes_never_correct = 0;  // codes with zero true positives
    std::size_t n_examples = 0;
    double threshold = 0;
};

EvalResult evaluate(const Matrix& scores, const Matrix& targets, double threshold);

struct ScoredNotes {
    Matrix scores;   // n×c probabilities
    Matrix targets;  // n×c
};

ScoredNotes score_notes(const DilaModel& model, std::span<const LabeledNote> notes);
EvalResult evaluate_model(const DilaModel& model, std::span<const LabeledNote> notes, double threshold);

}  // namespace dila
