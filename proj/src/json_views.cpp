#include "dila/json_views.hpp"

namespace dila {

using nlohmann::json;

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json matrix_rows(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    return rows;
}

}  // namespace

json context_json(const ContextToken& c) {
    return {{"token", c.token}, {"doc", c.doc}, {"pos", c.pos}, {"act", c.act}, {"window", c.window}};
}

json entry_json(const DictionaryEntry& e) {
    json contexts = json::array();
    for (const auto& c : e.contexts) contexts.push_back(context_json(c));
    json classes = json::array();
    for (const auto& c : e.classes) classes.push_back({{"code", c.code}, {"drop", c.drop}});
    return {{"feature", e.feature},
            {"contexts", contexts},
            {"summary", e.summary ? json(*e.summary) : json(nullptr)},
            {"verdict", to_string(e.verdict)},
            {"provenance", to_string(e.provenance)},
            {"classes", classes}};
}

json entry_brief_json(const DictionaryEntry& e) {
    return {{"feature", e.feature},
            {"summary", e.summary ? json(*e.summary) : json(nullptr)},
            {"verdict", to_string(e.verdict)},
            {"provenance", to_string(e.provenance)},
            {"n_contexts", e.contexts.size()},
            {"top_token", e.contexts.empty() ? json(nullptr) : json(e.contexts.front().token)},
            {"top_act", e.contexts.empty() ? json(nullptr) : json(e.contexts.front().act)}};
}

json counts_json(const CodeCounts& c) { return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}}; }

json eval_json(const EvalResult& r, const std::vector<CodeEntry>& codes) {
    json per_code = json::array();
    for (std::size_t j = 0; j < r.counts.size(); ++j) {
        json c = counts_json(r.counts[j]);
        c["code"] = j < codes.size() ? json(codes[j].code) : json(j);
        per_code.push_back(c);
    }
    return {{"micro_f1", r.micro_f1},
            {"macro_f1", r.macro_f1},
            {"micro_auc", optional_json(r.micro_auc)},
            {"macro_auc", optional_json(r.macro_auc)},
            {"macro_auc_skipped", r.macro_auc_skipped},
            {"codes_never_correct", r.codes_never_correct},
            {"n_examples", r.n_examples},
            {"threshold", r.threshold},
            {"per_code", per_code}};
}

json prediction_json(const Prediction& p, bool with_attention) {
    json j = {{"probabilities", p.probabilities}, {"predicted", p.predicted}, {"threshold", p.threshold}};
    if (with_attention) j["a_laat"] = matrix_rows(p.a_laat);
    return j;
}

json ablation_report_json(const AblationReport& r) {
    return {{"note", r.note_id},
            {"code", r.code},
            {"code_id", r.code_id},
            {"kind", to_string(r.kind)},
            {"before", r.before},
            {"after", r.after},
            {"delta", r.delta},
            {"target_before", r.target_before},
            {"target_after", r.target_after},
            {"other_abs_delta", r.other_abs_delta},
            {"duration_ms", r.duration_ms},
            {"tokens", r.tokens},
            {"features", r.features},
            {"noop", r.noop},
            {"degenerate", r.degenerate}};
}

}  // namespace dila
