#pragma once

// Visualization payloads over A_ficd: heatmap slices, per-code ranked feature
// bars and a 2-D projection of the dictionary embeddings.

#include <optional>
#include <string>
#include <vector>

#include "dila/dictionary.hpp"
#include "dila/metrics.hpp"
#include "dila/model.hpp"

namespace dila {

// Accepts code ids ("C03") or plain indices ("3"); throws std::out_of_range
// naming the first unknown entry.
std::vector<std::size_t> resolve_codes(const DilaModel& model, const std::vector<std::string>& selection);
std::vector<std::size_t> resolve_features(const DilaModel& model, const std::vector<std::string>& selection);

// feature -> summary lookup over a loaded dictionary.
class SummaryIndex {
public:
    SummaryIndex() = default;
    explicit SummaryIndex(const std::vector<DictionaryEntry>& entries);
    std::optional<std::string> summary(std::size_t feature) const;

private:
    std::vector<std::pair<std::size_t, std::string>> summaries_;
};

struct HeatmapSlice {
    std::vector<std::size_t> features;
    std::vector<std::size_t> codes;
    std::vector<std::string> code_ids;
    Matrix values;  // features×codes, copied from A_ficd
    std::vector<std::optional<std::string>> summaries;
};

// Empty selections mean "all".
HeatmapSlice export_heatmap(const DilaModel& model, const std::vector<std::size_t>& features,
                            const std::vector<std::size_t>& codes, const SummaryIndex& summaries = {});

struct RankedFeature {
    std::size_t feature = 0;
    double weight = 0;
    std::optional<std::string> summary;
};

// Top `k` entries of A_ficd column `code` by |weight|, ties by feature index.
std::vector<RankedFeature> top_features(const DilaModel& model, std::size_t code, std::size_t k,
                                        const SummaryIndex& summaries = {});

// Top `k` codes of A_ficd row `feature` by |weight|.
std::vector<std::pair<std::size_t, double>> top_codes(const DilaModel& model, std::size_t feature, std::size_t k);

std::string heatmap_json(const HeatmapSlice& slice, int indent = -1);
std::string heatmap_csv(const HeatmapSlice& slice);
std::string bars_json(const DilaModel& model, const std::vector<std::size_t>& codes, std::size_t k,
                      const SummaryIndex& summaries = {}, int indent = -1);
std::string bars_csv(const DilaModel& model, const std::vector<std::size_t>& codes, std::size_t k,
                     const SummaryIndex& summaries = {});
// PCA of the decoder rows (dictionary embeddings).
std::string pca2_json(const SaeParams& sae, std::uint64_t seed = 7, int indent = -1);
std::string pca2_csv(const SaeParams& sae, std::uint64_t seed = 7);

// Per-code confusion table: code,tp,fp,fn,tn,f1.
std::string eval_csv(const EvalResult& result, const std::vector<CodeEntry>& codes);

// Shortest decimal that parses back to the same double.
std::string format_double(double v);

}  // namespace dila
