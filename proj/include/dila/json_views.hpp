#pragma once

// JSON payloads shared by the CLI reports and the HTTP server. Doubles are
// emitted with round-trip precision.

#include "dila/ablation.hpp"
#include "dila/dictionary.hpp"
#include "dila/metrics.hpp"
#include "dila/model.hpp"
#include "json.hpp"

namespace dila {

nlohmann::json context_json(const ContextToken& c);
nlohmann::json entry_json(const DictionaryEntry& e);
// Listing view: no contexts, just the headline fields.
nlohmann::json entry_brief_json(const DictionaryEntry& e);
nlohmann::json counts_json(const CodeCounts& c);
nlohmann::json eval_json(const EvalResult& r, const std::vector<CodeEntry>& codes);
nlohmann::json prediction_json(const Prediction& p, bool with_attention = false);
nlohmann::json ablation_report_json(const AblationReport& r);

}  // namespace dila
