#include "dila/metrics.hpp"

#include <algorithm>
#include <numeric>

namespace dila {

namespace {

bool is_positive(double v) { return v > 0.5; }

}  // namespace

std::vector<CodeCounts> confusion_counts(const Matrix& predictions, const Matrix& targets) {
    if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
        throw ShapeError("confusion_counts: predictions " + predictions.shape() + " vs targets " + targets.shape());
    }
    std::vector<CodeCounts> counts(targets.cols());
    for (std::size_t n = 0; n < targets.rows(); ++n) {
        for (std::size_t j = 0; j < targets.cols(); ++j) {
            const bool p = is_positive(predictions(n, j));
            const bool y = is_positive(targets(n, j));
            CodeCounts& c = counts[j];
            if (p && y) ++c.tp;
            else if (p) ++c.fp;
            else if (y) ++c.fn;
            else ++c.tn;
        }
    }
    return counts;
}

double f1_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
    const std::uint64_t denom = 2 * tp + fp + fn;
    if (denom == 0) return 0.0;
    return static_cast<double>(2 * tp) / static_cast<double>(denom);
}

F1Scores micro_macro_f1(std::span<const CodeCounts> counts) {
    F1Scores out;
    if (counts.empty()) return out;
    std::uint64_t tp = 0, fp = 0, fn = 0;
    double macro_sum = 0.0;
    for (const auto& c : counts) {
        tp += c.tp;
        fp += c.fp;
        fn += c.fn;
        macro_sum += f1_from_counts(c.tp, c.fp, c.fn);
    }
    out.micro = f1_from_counts(tp, fp, fn);
    out.macro = macro_sum / static_cast<double>(counts.size());
    return out;
}

std::optional<double> binary_auc(std::span<const double> scores, std::span<const double> labels) {
    if (scores.size() != labels.size()) throw ShapeError("binary_auc: scores/labels length mismatch");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double pos_rank_sum = 0.0;
    std::size_t n_pos = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        // Ranks i+1..j+1 share their average.
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) {
            if (is_positive(labels[order[k]])) {
                pos_rank_sum += avg_rank;
                ++n_pos;
            }
        }
        i = j + 1;
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;
    const double np = static_cast<double>(n_pos);
    const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
    return u / (np * static_cast<double>(n_neg));
}

AucResult auc_roc(const Matrix& scores, const Matrix& targets, AucMode mode) {
    if (scores.rows() != targets.rows() || scores.cols() != targets.cols()) {
        throw ShapeError("auc_roc: scores " + scores.shape() + " vs targets " + targets.shape());
    }
    AucResult out;
    if (mode == AucMode::Micro) {
        out.value = binary_auc(scores.values(), targets.values());
        return out;
    }
    double sum = 0.0;
    std::size_t used = 0;
    std::vector<double> s(scores.rows()), y(scores.rows());
    for (std::size_t j = 0; j < scores.cols(); ++j) {
        for (std::size_t n = 0; n < scores.rows(); ++n) {
            s[n] = scores(n, j);
            y[n] = targets(n, j);
        }
        if (auto a = binary_auc(s, y)) {
            sum += *a;
            ++used;
        } else {
            out.skipped_codes.push_back(j);
        }
    }
    if (used > 0) out.value = sum / static_cast<double>(used);
    return out;
}

Matrix threshold_scores(const Matrix& scores, double threshold) {
    Matrix out(scores.rows(), scores.cols());
    auto sv = scores.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < sv.size(); ++i) ov[i] = sv[i] >= threshold ? 1.0 : 0.0;
    return out;
}

EvalResult evaluate(const Matrix& scores, const Matrix& targets, double threshold) {
    EvalResult r;
    r.threshold = threshold;
    r.n_examples = targets.rows();
    r.counts = confusion_counts(threshold_scores(scores, threshold), targets);
    const F1Scores f1 = micro_macro_f1(r.counts);
    r.micro_f1 = f1.micro;
    r.macro_f1 = f1.macro;
    r.micro_auc = auc_roc(scores, targets, AucMode::Micro).value;
    AucResult macro = auc_roc(scores, targets, AucMode::Macro);
    r.macro_auc = macro.value;
    r.macro_auc_skipped = std::move(macro.skipped_codes);
    r.codes_never_correct = static_cast<std::size_t>(
        std::count_if(r.counts.begin(), r.counts.end(), [](const CodeCounts& c) { return c.tp == 0; }));
    return r;
}

ScoredNotes score_notes(const DilaModel& model, std::span<const LabeledNote> notes) {
    ScoredNotes out{Matrix(notes.size(), model.num_codes()), Matrix(notes.size(), model.num_codes())};
    for (std::size_t n = 0; n < notes.size(); ++n) {
        if (notes[n].target.size() != model.num_codes()) {
            throw ShapeError("note '" + notes[n].id + "' has " + std::to_string(notes[n].target.size()) + " targets, model has " +
                             std::to_string(model.num_codes()) + " codes");
        }
        const auto p = forward(model, notes[n].embeddings).probabilities;
        for (std::size_t j = 0; j < p.size(); ++j) {
            out.scores(n, j) = p[j];
            out.targets(n, j) = notes[n].target[j];
        }
    }
    return out;
}

EvalResult evaluate_model(const DilaModel& model, std::span<const LabeledNote> notes, double threshold) {
    const ScoredNotes s = score_notes(model, notes);
    return evaluate(s.scores, s.targets, threshold);
}

}  // namespace dila
