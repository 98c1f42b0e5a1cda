#include "dila/exports.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace dila {

using nlohmann::json;

namespace {

std::optional<std::size_t> parse_index(const std::string& s) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty()) return std::nullopt;
    return v;
}

json optional_json(const std::optional<std::string>& s) { return s ? json(*s) : json(nullptr); }

std::string csv_text(const std::optional<std::string>& s) {
    if (!s) return "";
    std::string out = "\"";
    for (char ch : *s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    return out + "\"";
}

}  // namespace

std::string format_double(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return ec == std::errc() ? std::string(buf, p) : std::string("nan");
}

std::vector<std::size_t> resolve_codes(const DilaModel& model, const std::vector<std::string>& selection) {
    std::vector<std::size_t> out;
    for (const auto& s : selection) {
        if (const auto idx = model.code_index(s)) {
            out.push_back(*idx);
        } else if (const auto n = parse_index(s); n && *n < model.num_codes()) {
            out.push_back(*n);
        } else {
            throw std::out_of_range("unknown code '" + s + "'");
        }
    }
    return out;
}

std::vector<std::size_t> resolve_features(const DilaModel& model, const std::vector<std::string>& selection) {
    std::vector<std::size_t> out;
    for (const auto& s : selection) {
        const auto n = parse_index(s);
        if (!n || *n >= model.dict_size()) throw std::out_of_range("unknown feature '" + s + "'");
        out.push_back(*n);
    }
    return out;
}

SummaryIndex::SummaryIndex(const std::vector<DictionaryEntry>& entries) {
    for (const auto& e : entries)
        if (e.summary) summaries_.emplace_back(e.feature, *e.summary);
    std::sort(summaries_.begin(), summaries_.end());
}

std::optional<std::string> SummaryIndex::summary(std::size_t feature) const {
    const auto it = std::lower_bound(summaries_.begin(), summaries_.end(), feature,
                                     [](const auto& p, std::size_t f) { return p.first < f; });
    if (it == summaries_.end() || it->first != feature) return std::nullopt;
    return it->second;
}

HeatmapSlice export_heatmap(const DilaModel& model, const std::vector<std::size_t>& features,
                            const std::vector<std::size_t>& codes, const SummaryIndex& summaries) {
    HeatmapSlice s;
    s.features = features;
    s.codes = codes;
    if (s.features.empty())
        for (std::size_t i = 0; i < model.dict_size(); ++i) s.features.push_back(i);
    if (s.codes.empty())
        for (std::size_t j = 0; j < model.num_codes(); ++j) s.codes.push_back(j);
    for (std::size_t i : s.features)
        if (i >= model.dict_size()) throw std::out_of_range("unknown feature " + std::to_string(i));
    for (std::size_t j : s.codes)
        if (j >= model.num_codes()) throw std::out_of_range("unknown code " + std::to_string(j));

    s.values = Matrix(s.features.size(), s.codes.size());
    for (std::size_t r = 0; r < s.features.size(); ++r)
        for (std::size_t c = 0; c < s.codes.size(); ++c) s.values(r, c) = model.a_ficd(s.features[r], s.codes[c]);
    for (std::size_t j : s.codes) s.code_ids.push_back(model.codes[j].code);
    for (std::size_t i : s.features) s.summaries.push_back(summaries.summary(i));
    return s;
}

std::vector<RankedFeature> top_features(const DilaModel& model, std::size_t code, std::size_t k,
                                        const SummaryIndex& summaries) {
    if (code >= model.num_codes()) throw std::out_of_range("unknown code " + std::to_string(code));
    std::vector<std::size_t> order(model.dict_size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const auto by_magnitude = [&](std::size_t a, std::size_t b) {
        const double wa = std::abs(model.a_ficd(a, code)), wb = std::abs(model.a_ficd(b, code));
        return wa != wb ? wa > wb : a < b;
    };
    k = std::min(k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), by_magnitude);
    std::vector<RankedFeature> out;
    for (std::size_t r = 0; r < k; ++r) out.push_back({order[r], model.a_ficd(order[r], code), summaries.summary(order[r])});
    return out;
}

std::vector<std::pair<std::size_t, double>> top_codes(const DilaModel& model, std::size_t feature, std::size_t k) {
    if (feature >= model.dict_size()) throw std::out_of_range("unknown feature " + std::to_string(feature));
    std::vector<std::size_t> order(model.num_codes());
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(model.a_ficd(feature, a)) > std::abs(model.a_ficd(feature, b));
    });
    std::vector<std::pair<std::size_t, double>> out;
    for (std::size_t r = 0; r < std::min(k, order.size()); ++r) out.emplace_back(order[r], model.a_ficd(feature, order[r]));
    return out;
}

std::string heatmap_json(const HeatmapSlice& s, int indent) {
    json rows = json::array();
    for (std::size_t r = 0; r < s.values.rows(); ++r) {
        const auto row = s.values.row(r);
        rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    json summaries = json::array();
    for (const auto& x : s.summaries) summaries.push_back(optional_json(x));
    return json{{"features", s.features},
                {"codes", s.codes},
                {"code_ids", s.code_ids},
                {"summaries", summaries},
                {"values", rows}}
        .dump(indent);
}

std::string heatmap_csv(const HeatmapSlice& s) {
    std::string out = "feature,summary";
    for (const auto& id : s.code_ids) out += "," + id;
    out += "\n";
    for (std::size_t r = 0; r < s.features.size(); ++r) {
        out += std::to_string(s.features[r]) + "," + csv_text(s.summaries[r]);
        for (std::size_t c = 0; c < s.codes.size(); ++c) out += "," + format_double(s.values(r, c));
        out += "\n";
    }
    return out;
}

std::string bars_json(const DilaModel& model, const std::vector<std::size_t>& codes, std::size_t k,
                      const SummaryIndex& summaries, int indent) {
    json arr = json::array();
    for (std::size_t j : codes) {
        json bars = json::array();
        for (const auto& f : top_features(model, j, k, summaries))
            bars.push_back({{"feature", f.feature}, {"weight", f.weight}, {"summary", optional_json(f.summary)}});
        arr.push_back({{"code", j}, {"code_id", model.codes[j].code}, {"description", model.codes[j].description},
                       {"features", bars}});
    }
    return arr.dump(indent);
}

std::string bars_csv(const DilaModel& model, const std::vector<std::size_t>& codes, std::size_t k,
                     const SummaryIndex& summaries) {
    std::string out = "code,rank,feature,weight,summary\n";
    for (std::size_t j : codes) {
        const auto top = top_features(model, j, k, summaries);
        for (std::size_t r = 0; r < top.size(); ++r) {
            out += model.codes[j].code + "," + std::to_string(r + 1) + "," + std::to_string(top[r].feature) + "," +
                   format_double(top[r].weight) + "," + csv_text(top[r].summary) + "\n";
        }
    }
    return out;
}

std::string pca2_json(const SaeParams& sae, std::uint64_t seed, int indent) {
    const Pca2Result p = pca2(sae.w_dec, seed);
    json points = json::array();
    for (std::size_t i = 0; i < p.coords.rows(); ++i) points.push_back({{"feature", i}, {"x", p.coords(i, 0)}, {"y", p.coords(i, 1)}});
    return json{{"points", points},
                {"variance", {p.variance[0], p.variance[1]}},
                {"total_variance", p.total_variance},
                {"degenerate", p.degenerate}}
        .dump(indent);
}

std::string pca2_csv(const SaeParams& sae, std::uint64_t seed) {
    const Pca2Result p = pca2(sae.w_dec, seed);
    std::string out = "feature,x,y\n";
    for (std::size_t i = 0; i < p.coords.rows(); ++i)
        out += std::to_string(i) + "," + format_double(p.coords(i, 0)) + "," + format_double(p.coords(i, 1)) + "\n";
    return out;
}

std::string eval_csv(const EvalResult& result, const std::vector<CodeEntry>& codes) {
    std::string out = "code,tp,fp,fn,tn,f1\n";
    for (std::size_t j = 0; j < result.counts.size(); ++j) {
        const CodeCounts& c = result.counts[j];
        out += (j < codes.size() ? codes[j].code : std::to_string(j)) + "," + std::to_string(c.tp) + "," +
               std::to_string(c.fp) + "," + std::to_string(c.fn) + "," + std::to_string(c.tn) + "," +
               format_double(f1_from_counts(c.tp, c.fp, c.fn)) + "\n";
    }
    return out;
}

}  // namespace dila
