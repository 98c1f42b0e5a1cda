#include "dila/dictionary.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>

#include "dila/io.hpp"
#include "json.hpp"

namespace dila {

using nlohmann::json;

bool ranks_before(const ContextToken& a, const ContextToken& b) {
    if (a.act != b.act) return a.act > b.act;
    if (a.doc != b.doc) return a.doc < b.doc;
    return a.pos < b.pos;
}

const char* to_string(Verdict v) {
    switch (v) {
        case Verdict::Identified: return "identified";
        case Verdict::Unidentified: return "unidentified";
        case Verdict::InsufficientContexts: return "insufficient-contexts";
    }
    return "?";
}

const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::Oracle: return "oracle";
        case Provenance::Llm: return "llm";
        case Provenance::HumanImport: return "human-import";
    }
    return "?";
}

Verdict parse_verdict(const std::string& s) {
    if (s == "identified") return Verdict::Identified;
    if (s == "unidentified") return Verdict::Unidentified;
    if (s == "insufficient-contexts") return Verdict::InsufficientContexts;
    throw std::invalid_argument("unknown verdict '" + s + "'");
}

Provenance parse_provenance(const std::string& s) {
    if (s == "oracle") return Provenance::Oracle;
    if (s == "llm") return Provenance::Llm;
    if (s == "human-import") return Provenance::HumanImport;
    throw std::invalid_argument("unknown provenance '" + s + "'");
}

Verdict context_verdict(std::size_t n_contexts) {
    return n_contexts < kEvalContexts ? Verdict::InsufficientContexts : Verdict::Unidentified;
}

void DictionaryEntry::validate() const {
    if (contexts.size() > kMaxContexts) {
        throw std::invalid_argument("feature " + std::to_string(feature) + ": more than " +
                                    std::to_string(kMaxContexts) + " contexts");
    }
    for (std::size_t i = 0; i < contexts.size(); ++i) {
        if (!(contexts[i].act > 0.0)) {
            throw std::invalid_argument("feature " + std::to_string(feature) + ": non-positive activation");
        }
        if (i > 0 && contexts[i].act > contexts[i - 1].act) {
            throw std::invalid_argument("feature " + std::to_string(feature) + ": contexts not sorted by activation");
        }
    }
    const bool insufficient = contexts.size() < kEvalContexts;
    if (insufficient != (verdict == Verdict::InsufficientContexts)) {
        throw std::invalid_argument("feature " + std::to_string(feature) + ": verdict '" + to_string(verdict) +
                                    "' inconsistent with " + std::to_string(contexts.size()) + " contexts");
    }
}

bool is_pad_token(const std::string& token, const std::vector<std::string>& pad_tokens) {
    return std::find(pad_tokens.begin(), pad_tokens.end(), token) != pad_tokens.end();
}

std::string context_window(std::span<const std::string> tokens, std::size_t pos, std::size_t radius,
                           const std::vector<std::string>& pad_tokens) {
    const std::size_t lo = pos >= radius ? pos - radius : 0;
    const std::size_t hi = std::min(tokens.size(), pos + radius + 1);
    std::string window;
    for (std::size_t k = lo; k < hi; ++k) {
        if (is_pad_token(tokens[k], pad_tokens)) continue;
        if (!window.empty()) window += ' ';
        window += tokens[k];
    }
    return window;
}

DictionaryBuilder::DictionaryBuilder(const SaeParams& sae, DictionaryOptions options)
    : sae_(&sae), options_(std::move(options)), top_(sae.dict_size()) {}

void DictionaryBuilder::offer(std::size_t feature, ContextToken&& ctx) {
    auto& list = top_[feature];
    if (list.size() == kMaxContexts && !ranks_before(ctx, list.back())) return;
    const auto at = std::upper_bound(list.begin(), list.end(), ctx, ranks_before);
    list.insert(at, std::move(ctx));
    if (list.size() > kMaxContexts) list.pop_back();
}

void DictionaryBuilder::add_document(const std::string& doc, std::span<const std::string> tokens,
                                     const Matrix& embeddings) {
    if (embeddings.cols() != sae_->input_dim()) {
        throw ShapeError("build_dictionary: document '" + doc + "' has embedding width " +
                         std::to_string(embeddings.cols()) + ", expected " + std::to_string(sae_->input_dim()));
    }
    if (embeddings.rows() != tokens.size()) {
        throw ShapeError("build_dictionary: document '" + doc + "' has " + std::to_string(tokens.size()) +
                         " tokens and " + std::to_string(embeddings.rows()) + " embedding rows");
    }
    const Matrix f = encode(*sae_, embeddings);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (is_pad_token(tokens[t], options_.pad_tokens)) continue;
        ++tokens_seen_;
        std::string window;
        for (std::size_t i = 0; i < f.cols(); ++i) {
            const double act = f(t, i);
            if (!(act > 0.0)) continue;
            if (top_[i].size() == kMaxContexts && act < top_[i].back().act) continue;
            if (window.empty()) window = context_window(tokens, t, options_.window_radius, options_.pad_tokens);
            offer(i, ContextToken{tokens[t], doc, t, act, window});
        }
    }
}

void DictionaryBuilder::merge(const DictionaryBuilder& other) {
    if (other.top_.size() != top_.size()) throw ShapeError("DictionaryBuilder::merge: dictionary sizes differ");
    for (std::size_t i = 0; i < top_.size(); ++i)
        for (const auto& ctx : other.top_[i]) offer(i, ContextToken(ctx));
    tokens_seen_ += other.tokens_seen_;
}

std::vector<DictionaryEntry> DictionaryBuilder::finish() const {
    std::vector<DictionaryEntry> out;
    for (std::size_t i = 0; i < top_.size(); ++i) {
        if (top_[i].empty()) continue;
        DictionaryEntry e;
        e.feature = i;
        e.contexts = top_[i];
        e.verdict = context_verdict(e.contexts.size());
        e.provenance = Provenance::Oracle;
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<DictionaryEntry> build_dictionary(const SaeParams& sae, const std::vector<SynthNote>& corpus,
                                              const DictionaryOptions& options) {
    DictionaryBuilder builder(sae, options);
    for (const auto& note : corpus) builder.add_document(note.id, note.tokens, note.embeddings);
    return builder.finish();
}

TopContexts top_contexts(const DictionaryEntry& entry, std::size_t k) {
    if (k > kMaxContexts) throw std::invalid_argument("top_contexts: k exceeds " + std::to_string(kMaxContexts));
    TopContexts out;
    const std::size_t n = std::min(k, entry.contexts.size());
    out.contexts.assign(entry.contexts.begin(), entry.contexts.begin() + static_cast<std::ptrdiff_t>(n));
    out.shortfall = entry.contexts.size() < k;
    return out;
}

void attach_code_drops(std::vector<DictionaryEntry>& entries, const DilaModel& model,
                       const EmbeddingProvider& embeddings, std::size_t k) {
    struct Cached {
        Matrix x;
        Matrix f;
        std::vector<double> base;
    };
    std::map<std::string, Cached> cache;
    const auto note = [&](const std::string& id) -> const Cached& {
        auto it = cache.find(id);
        if (it == cache.end()) {
            Cached c;
            c.x = embeddings.embed(id);
            c.f = encode(model.sae, c.x);
            c.base = forward_with_features(model, c.x, c.f).probabilities;
            it = cache.emplace(id, std::move(c)).first;
        }
        return it->second;
    };

    for (auto& entry : entries) {
        if (entry.feature >= model.dict_size()) {
            throw std::out_of_range("attach_code_drops: feature " + std::to_string(entry.feature) + " out of range");
        }
        std::vector<double> best(model.num_codes(), 0.0);
        std::vector<std::string> seen;
        for (const auto& ctx : entry.contexts) {
            if (std::find(seen.begin(), seen.end(), ctx.doc) != seen.end()) continue;
            seen.push_back(ctx.doc);
            const Cached& c = note(ctx.doc);
            Matrix f = c.f;
            for (std::size_t t = 0; t < f.rows(); ++t) f(t, entry.feature) = 0.0;
            const auto ablated = forward_with_features(model, c.x, f).probabilities;
            for (std::size_t j = 0; j < best.size(); ++j) best[j] = std::max(best[j], c.base[j] - ablated[j]);
        }
        std::vector<std::size_t> order(best.size());
        for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return best[a] > best[b]; });
        entry.classes.clear();
        for (std::size_t r = 0; r < order.size() && entry.classes.size() < k; ++r) {
            if (best[order[r]] <= 0.0) break;
            entry.classes.push_back({model.codes[order[r]].code, best[order[r]]});
        }
    }
}

std::string dictionary_line(const DictionaryEntry& e) {
    json contexts = json::array();
    for (const auto& c : e.contexts) {
        contexts.push_back({{"token", c.token}, {"doc", c.doc}, {"pos", c.pos}, {"act", c.act}, {"window", c.window}});
    }
    json j = {{"feature", e.feature},
              {"contexts", contexts},
              {"summary", e.summary ? json(*e.summary) : json(nullptr)},
              {"verdict", to_string(e.verdict)},
              {"provenance", to_string(e.provenance)}};
    if (!e.classes.empty()) {
        json classes = json::array();
        for (const auto& c : e.classes) classes.push_back({{"code", c.code}, {"drop", c.drop}});
        j["classes"] = classes;
    }
    return j.dump();
}

DictionaryEntry parse_dictionary_line(const std::string& line) {
    const json j = json::parse(line);
    DictionaryEntry e;
    e.feature = j.at("feature").get<std::size_t>();
    for (const auto& c : j.at("contexts")) {
        e.contexts.push_back({c.at("token").get<std::string>(), c.at("doc").get<std::string>(),
                              c.at("pos").get<std::size_t>(), c.at("act").get<double>(),
                              c.value("window", std::string{})});
    }
    if (j.contains("summary") && !j.at("summary").is_null()) e.summary = j.at("summary").get<std::string>();
    e.verdict = parse_verdict(j.at("verdict").get<std::string>());
    e.provenance = parse_provenance(j.at("provenance").get<std::string>());
    if (j.contains("classes")) {
        for (const auto& c : j.at("classes")) e.classes.push_back({c.at("code").get<std::string>(), c.at("drop").get<double>()});
    }
    e.validate();
    return e;
}

void save_dictionary(const std::string& path, const std::vector<DictionaryEntry>& entries) {
    std::string out;
    for (const auto& e : entries) out += dictionary_line(e) + "\n";
    write_file(path, out);
}

std::vector<DictionaryEntry> load_dictionary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<DictionaryEntry> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(parse_dictionary_line(line));
        } catch (const std::exception& e) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace dila
