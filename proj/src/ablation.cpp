#include "dila/ablation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "dila/io.hpp"
#include "dila/json_views.hpp"
#include "dila/random.hpp"
#include "json.hpp"

namespace dila {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

void check_code(const DilaModel& model, std::size_t code) {
    if (code >= model.num_codes()) {
        throw std::out_of_range("code index " + std::to_string(code) + " out of range (" +
                                std::to_string(model.num_codes()) + " codes)");
    }
}

AblationReport make_report(const DilaModel& model, const std::string& note_id, std::size_t code, Intervention kind,
                           std::vector<double> before, std::vector<double> after) {
    AblationReport r;
    r.note_id = note_id;
    r.code = code;
    r.code_id = model.codes[code].code;
    r.kind = kind;
    r.delta.resize(before.size());
    for (std::size_t j = 0; j < before.size(); ++j) {
        r.delta[j] = after[j] - before[j];
        if (j != code) r.other_abs_delta += std::abs(r.delta[j]);
    }
    r.target_before = before[code];
    r.target_after = after[code];
    r.before = std::move(before);
    r.after = std::move(after);
    return r;
}

Intervention intervention_for(TokenMode mode) {
    switch (mode) {
        case TokenMode::Ablate: return Intervention::TokenAblate;
        case TokenMode::Noise: return Intervention::TokenNoise;
        case TokenMode::Replace: return Intervention::TokenReplace;
    }
    return Intervention::TokenAblate;
}

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
}

void fnv_matrix(std::uint64_t& h, const Matrix& m) {
    const std::uint64_t shape[2] = {m.rows(), m.cols()};
    fnv_bytes(h, shape, sizeof shape);
    fnv_bytes(h, m.values().data(), m.values().size() * sizeof(double));
}

TimingStat summarize(const std::vector<double>& samples) {
    TimingStat s;
    if (samples.empty()) return s;
    double sum = 0;
    s.min_ms = samples.front();
    s.max_ms = samples.front();
    for (double v : samples) {
        sum += v;
        s.min_ms = std::min(s.min_ms, v);
        s.max_ms = std::max(s.max_ms, v);
    }
    s.mean_ms = sum / static_cast<double>(samples.size());
    double var = 0;
    for (double v : samples) var += (v - s.mean_ms) * (v - s.mean_ms);
    s.stddev_ms = samples.size() > 1 ? std::sqrt(var / static_cast<double>(samples.size() - 1)) : 0.0;
    return s;
}

json stat_json(const TimingStat& s) {
    return {{"mean_ms", s.mean_ms}, {"stddev_ms", s.stddev_ms}, {"min_ms", s.min_ms}, {"max_ms", s.max_ms}};
}

}  // namespace

const char* to_string(Intervention kind) {
    switch (kind) {
        case Intervention::WeightAblate: return "weight-ablate";
        case Intervention::TokenAblate: return "token-ablate";
        case Intervention::TokenNoise: return "token-noise";
        case Intervention::TokenReplace: return "token-replace";
        case Intervention::FeatureCodeEdit: return "feature-code-edit";
    }
    return "?";
}

TokenMode parse_token_mode(const std::string& s) {
    if (s == "ablate") return TokenMode::Ablate;
    if (s == "noise") return TokenMode::Noise;
    if (s == "replace") return TokenMode::Replace;
    throw std::invalid_argument("unknown token mode '" + s + "' (expected ablate, noise or replace)");
}

void AblationReport::validate() const {
    if (before.size() != after.size() || delta.size() != before.size()) {
        throw std::logic_error("ablation report: vector lengths differ");
    }
    for (std::size_t j = 0; j < delta.size(); ++j) {
        if (std::abs((after[j] - before[j]) - delta[j]) > 1e-12) {
            throw std::logic_error("ablation report: delta inconsistent at code " + std::to_string(j));
        }
    }
    if (duration_ms < 0) throw std::logic_error("ablation report: negative duration");
}

double sample_quantile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("sample_quantile: no values");
    if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("sample_quantile: q outside [0, 1]");
    std::sort(values.begin(), values.end());
    const double h = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<std::size_t> relevant_tokens(const Prediction& prediction, std::size_t code, double q) {
    const Matrix& a = prediction.a_laat;
    if (code >= a.cols()) throw std::out_of_range("relevant_tokens: code " + std::to_string(code) + " out of range");
    if (a.rows() == 0) return {};
    std::vector<double> column(a.rows());
    for (std::size_t t = 0; t < a.rows(); ++t) column[t] = a(t, code);
    const double cut = sample_quantile(column, q);
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < column.size(); ++t)
        if (column[t] > cut) out.push_back(t);
    return out;
}

AblationReport ablate_code_weights(const DilaModel& model, const std::string& note_id, const Matrix& x_note,
                                   std::size_t code) {
    check_code(model, code);
    const Matrix f = encode(model.sae, x_note);
    const auto before = forward_with_features(model, x_note, f).probabilities;

    const auto start = Clock::now();
    DilaModel ablated = model;
    std::vector<std::size_t> features;
    for (std::size_t i = 0; i < f.cols(); ++i) {
        for (std::size_t t = 0; t < f.rows(); ++t)
            if (f(t, i) > 0.0) {
                features.push_back(i);
                ablated.a_ficd(i, code) = 0.0;
                break;
            }
    }
    auto after = forward_with_features(ablated, x_note, f).probabilities;
    const double elapsed = ms_since(start);

    AblationReport r = make_report(model, note_id, code, Intervention::WeightAblate, before, std::move(after));
    r.features = std::move(features);
    r.noop = r.features.empty();
    r.duration_ms = elapsed;
    return r;
}

AblationReport token_perturb(const DilaModel& model, const std::string& note_id, const Matrix& x_note,
                             std::size_t code, TokenMode mode, const TokenPerturbOptions& options) {
    check_code(model, code);
    const Prediction base = forward(model, x_note);
    return token_perturb(model, note_id, x_note, code, mode, relevant_tokens(base, code), options);
}

AblationReport token_perturb(const DilaModel& model, const std::string& note_id, const Matrix& x_note,
                             std::size_t code, TokenMode mode, const std::vector<std::size_t>& tokens,
                             const TokenPerturbOptions& options) {
    check_code(model, code);
    for (std::size_t t : tokens)
        if (t >= x_note.rows()) throw std::out_of_range("token_perturb: token " + std::to_string(t) + " out of range");
    const auto before = forward(model, x_note).probabilities;
    const Intervention kind = intervention_for(mode);

    if (tokens.empty()) {
        AblationReport r = make_report(model, note_id, code, kind, before, before);
        r.noop = true;
        return r;
    }

    const auto start = Clock::now();
    std::vector<char> chosen(x_note.rows(), 0);
    for (std::size_t t : tokens) chosen[t] = 1;
    Matrix x;
    switch (mode) {
        case TokenMode::Ablate: {
            const std::size_t keep = x_note.rows() - static_cast<std::size_t>(std::count(chosen.begin(), chosen.end(), 1));
            if (keep == 0) {
                AblationReport r = make_report(model, note_id, code, kind, before, before);
                r.tokens = tokens;
                r.degenerate = true;
                return r;
            }
            x = Matrix(keep, x_note.cols());
            std::size_t r = 0;
            for (std::size_t t = 0; t < x_note.rows(); ++t) {
                if (chosen[t]) continue;
                std::copy(x_note.row(t).begin(), x_note.row(t).end(), x.row(r++).begin());
            }
            break;
        }
        case TokenMode::Noise: {
            std::vector<double> sigma(x_note.cols(), options.sigma.value_or(0.0));
            if (!options.sigma) {
                const auto mean = column_means(x_note);
                for (std::size_t k = 0; k < x_note.cols(); ++k) {
                    double v = 0;
                    for (std::size_t t = 0; t < x_note.rows(); ++t) v += (x_note(t, k) - mean(0, k)) * (x_note(t, k) - mean(0, k));
                    sigma[k] = std::sqrt(v / static_cast<double>(x_note.rows()));
                }
            }
            x = x_note;
            CounterRng rng(options.seed, {hash_string("perturb.noise"), hash_string(note_id), code});
            for (std::size_t t : tokens)
                for (std::size_t k = 0; k < x.cols(); ++k) x(t, k) += sigma[k] * rng.gaussian();
            break;
        }
        case TokenMode::Replace: {
            if (options.replacement_pool.rows() == 0) throw std::invalid_argument("token_perturb: empty replacement pool");
            if (options.replacement_pool.cols() != x_note.cols()) throw ShapeError("token_perturb: replacement pool width mismatch");
            x = x_note;
            CounterRng rng(options.seed, {hash_string("perturb.replace"), hash_string(note_id), code});
            for (std::size_t t : tokens) {
                const auto src = options.replacement_pool.row(rng.below(options.replacement_pool.rows()));
                std::copy(src.begin(), src.end(), x.row(t).begin());
            }
            break;
        }
    }
    auto after = forward(model, x).probabilities;
    const double elapsed = ms_since(start);
    AblationReport r = make_report(model, note_id, code, kind, before, std::move(after));
    r.tokens = tokens;
    r.duration_ms = elapsed;
    return r;
}

Matrix filler_replacement_pool(const PlantedWorld& world) {
    return embed_tokens(world, world.filler, "replacement-pool");
}

bool EditSet::contains(std::size_t feature, std::size_t code) const {
    return std::find(edits.begin(), edits.end(), std::pair{feature, code}) != edits.end();
}

bool EditSet::add(std::size_t feature, std::size_t code) {
    if (contains(feature, code)) return false;
    edits.emplace_back(feature, code);
    return true;
}

bool EditSet::remove(std::size_t feature, std::size_t code) {
    const auto it = std::find(edits.begin(), edits.end(), std::pair{feature, code});
    if (it == edits.end()) return false;
    edits.erase(it);
    return true;
}

std::vector<std::size_t> EditSet::affected_codes() const {
    std::vector<std::size_t> out;
    for (const auto& [f, c] : edits) out.push_back(c);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

void EditSet::validate(std::size_t dict_size, std::size_t num_codes) const {
    for (std::size_t k = 0; k < edits.size(); ++k) {
        const auto [f, c] = edits[k];
        if (f >= dict_size) throw std::out_of_range("edit " + std::to_string(k) + ": feature " + std::to_string(f) + " out of range");
        if (c >= num_codes) throw std::out_of_range("edit " + std::to_string(k) + ": code " + std::to_string(c) + " out of range");
        for (std::size_t l = 0; l < k; ++l)
            if (edits[l] == edits[k]) throw std::invalid_argument("edit " + std::to_string(k) + " duplicates edit " + std::to_string(l));
    }
}

DilaModel apply_edit(const DilaModel& model, const EditSet& edits) {
    edits.validate(model.dict_size(), model.num_codes());
    DilaModel out = model;
    for (const auto& [f, c] : edits.edits) out.a_ficd(f, c) = 0.0;
    return out;
}

std::optional<std::size_t> entry_concept(const DictionaryEntry& entry, const PlantedWorld& world) {
    const auto top = top_contexts(entry, std::min(kEvalContexts, entry.contexts.size())).contexts;
    std::vector<std::size_t> count(world.num_concepts(), 0);
    for (const auto& c : top) {
        const int k = world.concept_of(c.token);
        if (k != kFillerTag) ++count[static_cast<std::size_t>(k)];
    }
    const auto best = std::max_element(count.begin(), count.end());
    if (best == count.end() || 2 * *best <= top.size()) return std::nullopt;
    return static_cast<std::size_t>(best - count.begin());
}

std::vector<std::size_t> plant_miswire(DilaModel& model, const std::vector<DictionaryEntry>& dictionary,
                                       const PlantedWorld& world, const LabelConfound& confound, double weight) {
    check_code(model, confound.code);
    std::vector<std::size_t> features;
    for (const auto& e : dictionary) {
        if (e.feature >= model.dict_size()) continue;
        const auto k = entry_concept(e, world);
        if (k && *k == confound.concept_index) {
            model.a_ficd(e.feature, confound.code) = weight;
            features.push_back(e.feature);
        }
    }
    return features;
}

EditSet confound_repair(const DilaModel& model, const std::vector<DictionaryEntry>& dictionary,
                        const PlantedWorld& world, const LabelConfound& confound) {
    check_code(model, confound.code);
    EditSet edits;
    edits.note = "repair: concept " + world.concept_names.at(confound.concept_index) + " -> code " +
                 world.code_ids.at(confound.code);
    for (const auto& e : dictionary) {
        if (e.feature >= model.dict_size() || !(model.a_ficd(e.feature, confound.code) > 0.0)) continue;
        const auto top = top_contexts(e, std::min(kEvalContexts, e.contexts.size())).contexts;
        const bool shows = std::any_of(top.begin(), top.end(), [&](const ContextToken& c) {
            return world.concept_of(c.token) == static_cast<int>(confound.concept_index);
        });
        if (shows) edits.add(e.feature, confound.code);
    }
    return edits;
}

std::string edit_set_json(const EditSet& edits) {
    json arr = json::array();
    for (const auto& [f, c] : edits.edits) arr.push_back({f, c});
    return json{{"edits", arr}, {"note", edits.note}}.dump(1);
}

EditSet parse_edit_set(const std::string& text) {
    try {
        const json j = json::parse(text);
        EditSet e;
        for (const auto& pos : j.at("edits")) {
            if (!pos.is_array() || pos.size() != 2) throw FormatError("edit position must be [feature, code]");
            e.edits.emplace_back(pos[0].get<std::size_t>(), pos[1].get<std::size_t>());
        }
        e.note = j.value("note", std::string{});
        return e;
    } catch (const json::exception& ex) {
        throw FormatError(std::string("edit set: ") + ex.what());
    }
}

EditSet load_edit_set(const std::string& path) { return parse_edit_set(read_file(path)); }

void save_edit_set(const std::string& path, const EditSet& edits) { write_file(path, edit_set_json(edits) + "\n"); }

std::string edit_log_line(const EditSet& edits, std::uint64_t base_fingerprint, std::uint64_t edited_fingerprint) {
    json arr = json::array();
    for (const auto& [f, c] : edits.edits) arr.push_back({f, c});
    return json{{"edits", arr},
                {"note", edits.note},
                {"base", base_fingerprint},
                {"edited", edited_fingerprint},
                {"affected_codes", edits.affected_codes()}}
        .dump();
}

std::uint64_t model_fingerprint(const DilaModel& model) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    fnv_matrix(h, model.sae.w_enc);
    fnv_matrix(h, model.sae.b_enc);
    fnv_matrix(h, model.sae.w_dec);
    fnv_matrix(h, model.sae.b_dec);
    fnv_matrix(h, model.a_ficd);
    fnv_matrix(h, model.decision_w);
    fnv_matrix(h, model.decision_b);
    for (const auto& c : model.codes) {
        fnv_bytes(h, c.code.data(), c.code.size() + 1);
        fnv_bytes(h, c.description.data(), c.description.size() + 1);
    }
    return h;
}

TimingReport measure_timing(const DilaModel& model, const Matrix& x_note, std::size_t repeats) {
    TimingReport out;
    out.repeats = repeats;
    out.tokens = x_note.rows();
    std::vector<double> f_ms, a_ms, read_ms;
    volatile double sink = 0;
    for (std::size_t r = 0; r < repeats; ++r) {
        auto start = Clock::now();
        const Matrix f = encode(model.sae, x_note);
        f_ms.push_back(ms_since(start));

        start = Clock::now();
        const Matrix a = softmax_over_rows(matmul(f, model.a_ficd));
        a_ms.push_back(ms_since(start));

        start = Clock::now();
        Matrix column(model.dict_size(), 1);
        for (std::size_t i = 0; i < model.dict_size(); ++i) column(i, 0) = model.a_ficd(i, r % model.num_codes());
        read_ms.push_back(ms_since(start));
        sink = sink + a(0, 0) + column(0, 0);
    }
    out.f_note = summarize(f_ms);
    out.a_laat = summarize(a_ms);
    out.a_ficd_read = summarize(read_ms);
    return out;
}

std::string report_json(const AblationReport& r, int indent) { return ablation_report_json(r).dump(indent); }

std::string timing_json(const TimingReport& r, int indent) {
    json j = {{"repeats", r.repeats},
              {"tokens", r.tokens},
              {"f_note", stat_json(r.f_note)},
              {"a_laat", stat_json(r.a_laat)},
              {"a_ficd_read", stat_json(r.a_ficd_read)}};
    return j.dump(indent);
}

}  // namespace dila
