#include "dila/server.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "dila/exports.hpp"
#include "dila/json_views.hpp"
#include "httplib.h"

namespace dila {

using nlohmann::json;

namespace {

ApiResponse error(int status, const std::string& message, json fields = json::object()) {
    json body = {{"error", message}};
    if (!fields.empty()) body["fields"] = std::move(fields);
    return {status, std::move(body)};
}

std::optional<std::size_t> parse_size(const std::string& s) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
    return v;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    for (std::string item; std::getline(in, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

json top_codes_json(const DilaModel& model, std::size_t feature, std::size_t k) {
    json arr = json::array();
    for (const auto& [j, w] : top_codes(model, feature, k))
        arr.push_back({{"code", j}, {"code_id", model.codes[j].code}, {"weight", w}});
    return arr;
}

json ranked_json(const std::vector<RankedFeature>& ranked) {
    json arr = json::array();
    for (const auto& f : ranked)
        arr.push_back({{"feature", f.feature}, {"weight", f.weight}, {"summary", f.summary ? json(*f.summary) : json(nullptr)}});
    return arr;
}

json edits_payload(const SessionSnapshot& s) {
    json arr = json::array();
    for (const auto& [f, c] : s.edits.edits) arr.push_back({f, c});
    return {{"version", s.version}, {"edits", arr}, {"edit_codes", s.edits.affected_codes()}};
}

// Reads an optional non-negative integer field; records a field error otherwise.
std::optional<std::size_t> size_field(const json& body, const char* name, json& fields, bool required) {
    if (!body.contains(name)) {
        if (required) fields[name] = "required";
        return std::nullopt;
    }
    const json& v = body.at(name);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
        fields[name] = "must be a non-negative integer";
        return std::nullopt;
    }
    return v.get<std::size_t>();
}

}  // namespace

Session::Session(std::shared_ptr<const DilaModel> base) : base_(std::move(base)), edited_(base_) {}

SessionSnapshot Session::snapshot() const {
    std::shared_lock lock(mutex_);
    return {version_, edits_, edited_};
}

Session::MutationResult Session::mutate(Op op, std::size_t feature, std::size_t code,
                                        std::optional<std::uint64_t> expected_version) {
    std::unique_lock lock(mutex_);
    MutationResult out;
    if (expected_version && *expected_version != version_) {
        out.conflict = true;
        out.state = {version_, edits_, edited_};
        return out;
    }
    EditSet next = edits_;
    bool changed = false;
    switch (op) {
        case Op::Add:
            if (feature >= base_->dict_size()) throw std::out_of_range("feature " + std::to_string(feature) + " out of range");
            if (code >= base_->num_codes()) throw std::out_of_range("code " + std::to_string(code) + " out of range");
            changed = next.add(feature, code);
            out.affected_codes = {code};
            break;
        case Op::Remove:
            changed = next.remove(feature, code);
            out.affected_codes = {code};
            break;
        case Op::Clear:
            out.affected_codes = next.affected_codes();
            changed = !next.edits.empty();
            next.edits.clear();
            break;
    }
    if (changed) {
        edited_ = next.edits.empty() ? base_ : std::make_shared<const DilaModel>(apply_edit(*base_, next));
        edits_ = std::move(next);
        ++version_;
    }
    out.state = {version_, edits_, edited_};
    return out;
}

DebugServer::DebugServer(DilaModel model, std::vector<DictionaryEntry> dictionary, Dataset corpus, ServerConfig config)
    : base_(std::make_shared<const DilaModel>(std::move(model))),
      dictionary_(std::move(dictionary)),
      corpus_(std::move(corpus)),
      config_(std::move(config)),
      session_(base_) {
    std::sort(dictionary_.begin(), dictionary_.end(),
              [](const DictionaryEntry& a, const DictionaryEntry& b) { return a.feature < b.feature; });
    if (corpus_.world) replacement_pool_ = filler_replacement_pool(*corpus_.world);
}

DebugServer::~DebugServer() { stop(); }

ApiResponse DebugServer::features(std::size_t limit, std::size_t offset, const std::string& verdict) const {
    std::optional<Verdict> filter;
    if (!verdict.empty()) {
        try {
            filter = parse_verdict(verdict);
        } catch (const std::invalid_argument& e) {
            return error(400, "invalid query", {{"verdict", e.what()}});
        }
    }
    if (limit == 0 || limit > 1000) return error(400, "invalid query", {{"limit", "must be in 1..1000"}});
    json items = json::array();
    std::size_t total = 0;
    for (const auto& e : dictionary_) {
        if (filter && e.verdict != *filter) continue;
        if (total >= offset && items.size() < limit) items.push_back(entry_brief_json(e));
        ++total;
    }
    return {200, {{"total", total}, {"offset", offset}, {"limit", limit}, {"items", items}}};
}

ApiResponse DebugServer::feature(const std::string& id) const {
    const auto i = parse_size(id);
    if (!i || *i >= base_->dict_size()) return error(404, "unknown feature '" + id + "'");
    const auto it = std::lower_bound(dictionary_.begin(), dictionary_.end(), *i,
                                     [](const DictionaryEntry& e, std::size_t f) { return e.feature < f; });
    if (it == dictionary_.end() || it->feature != *i) return error(404, "feature " + id + " has no dictionary entry");
    const SessionSnapshot snap = session_.snapshot();
    json body = entry_json(*it);
    body["top_codes"] = {{"base", top_codes_json(*base_, *i, 5)}, {"edited", top_codes_json(*snap.edited, *i, 5)}};
    body["version"] = snap.version;
    return {200, body};
}

ApiResponse DebugServer::code_top_features(const std::string& code, std::size_t k) const {
    std::size_t j;
    try {
        j = resolve_codes(*base_, {code}).front();
    } catch (const std::out_of_range& e) {
        return error(404, e.what());
    }
    if (k == 0) return error(400, "invalid query", {{"k", "must be positive"}});
    const SessionSnapshot snap = session_.snapshot();
    const SummaryIndex summaries(dictionary_);
    return {200,
            {{"code", j},
             {"code_id", base_->codes[j].code},
             {"description", base_->codes[j].description},
             {"version", snap.version},
             {"base", ranked_json(top_features(*base_, j, k, summaries))},
             {"edited", ranked_json(top_features(*snap.edited, j, k, summaries))}}};
}

ApiResponse DebugServer::heatmap(const std::vector<std::string>& codes, const std::vector<std::string>& features,
                                 const std::string& which) const {
    if (which != "base" && which != "edited") return error(400, "invalid query", {{"model", "must be base or edited"}});
    std::vector<std::size_t> js, is;
    try {
        js = resolve_codes(*base_, codes);
        is = resolve_features(*base_, features);
    } catch (const std::out_of_range& e) {
        return error(404, e.what());
    }
    const std::size_t rows = is.empty() ? base_->dict_size() : is.size();
    const std::size_t cols = js.empty() ? base_->num_codes() : js.size();
    if (rows * cols > config_.max_heatmap_cells) {
        return error(400, "selection too large", {{"features", "at most " + std::to_string(config_.max_heatmap_cells) + " cells"}});
    }
    const SessionSnapshot snap = session_.snapshot();
    const DilaModel& model = which == "base" ? *base_ : *snap.edited;
    json body = json::parse(heatmap_json(export_heatmap(model, is, js, SummaryIndex(dictionary_))));
    body["model"] = which;
    body["version"] = snap.version;
    return {200, body};
}

std::optional<std::size_t> DebugServer::note_index(const std::string& id) const { return corpus_.find(id); }

ApiResponse DebugServer::predict(const json& body) const {
    if (!body.is_object()) return error(400, "body must be a JSON object");
    Matrix x;
    std::string note_id;
    std::vector<std::string> tokens;
    if (body.contains("note")) {
        if (!body.at("note").is_string()) return error(400, "invalid payload", {{"note", "must be a string"}});
        note_id = body.at("note").get<std::string>();
        const auto idx = note_index(note_id);
        if (!idx) return error(404, "unknown note '" + note_id + "'");
        x = corpus_.embeddings->embed(note_id);
        tokens = corpus_.records[*idx].tokens;
    } else if (body.contains("tokens")) {
        if (!body.at("tokens").is_array() || body.at("tokens").empty())
            return error(400, "invalid payload", {{"tokens", "must be a non-empty array of strings"}});
        if (!corpus_.world) return error(400, "invalid payload", {{"tokens", "raw tokens need a planted world to embed"}});
        for (const auto& t : body.at("tokens")) {
            if (!t.is_string()) return error(400, "invalid payload", {{"tokens", "must be a non-empty array of strings"}});
            tokens.push_back(t.get<std::string>());
        }
        x = embed_tokens(*corpus_.world, tokens, "request");
    } else {
        return error(400, "invalid payload", {{"note", "note id or tokens required"}});
    }
    const bool attention = body.value("attention", false);
    const SessionSnapshot snap = session_.snapshot();
    const Prediction base = forward(*base_, x, config_.threshold);
    const Prediction edited = forward(*snap.edited, x, config_.threshold);
    std::vector<double> delta(base.probabilities.size());
    std::vector<std::size_t> changed;
    for (std::size_t j = 0; j < delta.size(); ++j) {
        delta[j] = edited.probabilities[j] - base.probabilities[j];
        if (edited.probabilities[j] != base.probabilities[j]) changed.push_back(j);
    }
    json code_ids = json::array();
    for (const auto& c : base_->codes) code_ids.push_back(c.code);
    return {200,
            {{"note", note_id.empty() ? json(nullptr) : json(note_id)},
             {"tokens", tokens},
             {"code_ids", code_ids},
             {"version", snap.version},
             {"base", prediction_json(base, attention)},
             {"edited", prediction_json(edited, attention)},
             {"delta", delta},
             {"changed_codes", changed}}};
}

ApiResponse DebugServer::edits(const json& body) {
    if (!body.is_object()) return error(400, "body must be a JSON object");
    json fields = json::object();
    const std::string op = body.value("op", std::string{});
    Session::Op kind;
    if (op == "add")
        kind = Session::Op::Add;
    else if (op == "remove")
        kind = Session::Op::Remove;
    else if (op == "clear")
        kind = Session::Op::Clear;
    else
        return error(400, "invalid payload", {{"op", "must be add, remove or clear"}});

    std::size_t feature = 0, code = 0;
    if (kind != Session::Op::Clear) {
        const auto f = size_field(body, "feature", fields, true);
        std::optional<std::size_t> c;
        if (body.contains("code") && body.at("code").is_string()) {
            try {
                c = resolve_codes(*base_, {body.at("code").get<std::string>()}).front();
            } catch (const std::out_of_range& e) {
                return error(404, e.what());
            }
        } else {
            c = size_field(body, "code", fields, true);
        }
        if (!fields.empty()) return error(400, "invalid payload", fields);
        if (*f >= base_->dict_size()) return error(404, "unknown feature " + std::to_string(*f));
        if (*c >= base_->num_codes()) return error(404, "unknown code " + std::to_string(*c));
        feature = *f;
        code = *c;
    }
    std::optional<std::uint64_t> expected;
    if (body.contains("version")) {
        if (!body.at("version").is_number_unsigned() && !body.at("version").is_number_integer())
            return error(400, "invalid payload", {{"version", "must be an integer"}});
        expected = body.at("version").get<std::uint64_t>();
    }
    const auto result = session_.mutate(kind, feature, code, expected);
    json payload = edits_payload(result.state);
    if (result.conflict) {
        payload["error"] = "stale version";
        return {409, payload};
    }
    payload["affected_codes"] = result.affected_codes;
    return {200, payload};
}

ApiResponse DebugServer::current_edits() const { return {200, edits_payload(session_.snapshot())}; }

ApiResponse DebugServer::what_if(const json& body) const {
    if (!body.is_object()) return error(400, "body must be a JSON object");
    json fields = json::object();
    if (!body.contains("note") || !body.at("note").is_string()) fields["note"] = "required string";
    if (!body.contains("code")) fields["code"] = "required";
    const std::string mode = body.value("mode", std::string("weights"));
    if (mode != "weights" && mode != "ablate" && mode != "noise" && mode != "replace")
        fields["mode"] = "must be weights, ablate, noise or replace";
    if (body.contains("sigma") && !body.at("sigma").is_number()) fields["sigma"] = "must be a number";
    if (!fields.empty()) return error(400, "invalid payload", fields);

    const std::string note_id = body.at("note").get<std::string>();
    if (!note_index(note_id)) return error(404, "unknown note '" + note_id + "'");
    std::size_t code;
    try {
        const json& c = body.at("code");
        code = resolve_codes(*base_, {c.is_string() ? c.get<std::string>() : std::to_string(c.get<long long>())}).front();
    } catch (const std::exception& e) {
        return error(404, e.what());
    }
    if (mode == "replace" && replacement_pool_.rows() == 0)
        return error(400, "invalid payload", {{"mode", "no replacement pool for this corpus"}});

    const SessionSnapshot snap = session_.snapshot();
    const Matrix x = corpus_.embeddings->embed(note_id);
    AblationReport report;
    if (mode == "weights") {
        report = ablate_code_weights(*snap.edited, note_id, x, code);
    } else {
        TokenPerturbOptions opts;
        if (body.contains("sigma")) opts.sigma = body.at("sigma").get<double>();
        opts.replacement_pool = replacement_pool_;
        opts.seed = config_.seed;
        report = token_perturb(*snap.edited, note_id, x, code, parse_token_mode(mode), opts);
    }
    json out = ablation_report_json(report);
    out["version"] = snap.version;
    return {200, out};
}

std::vector<LabeledNote> DebugServer::split_notes(const std::string& split) const {
    const std::size_t cut = corpus_.split_point(config_.eval_fraction);
    if (split == "train") return corpus_.labeled_range(0, cut);
    if (split == "eval") return corpus_.labeled_range(cut, corpus_.records.size());
    return corpus_.labeled_range(0, corpus_.records.size());
}

EvalResult DebugServer::base_eval(const std::string& split) const {
    {
        std::lock_guard lock(eval_mutex_);
        const auto it = base_eval_cache_.find(split);
        if (it != base_eval_cache_.end()) return it->second;
    }
    const auto notes = split_notes(split);
    EvalResult r = evaluate_model(*base_, notes, config_.threshold);
    std::lock_guard lock(eval_mutex_);
    base_eval_cache_.emplace(split, r);
    return r;
}

ApiResponse DebugServer::eval(const std::string& split) const {
    if (split != "train" && split != "eval" && split != "all")
        return error(400, "invalid query", {{"split", "must be train, eval or all"}});
    const SessionSnapshot snap = session_.snapshot();
    if (split_notes(split).empty()) return error(400, "invalid query", {{"split", "split is empty"}});
    const EvalResult base = base_eval(split);
    std::optional<EvalResult> edited;
    {
        std::lock_guard lock(eval_mutex_);
        const auto it = edited_eval_cache_.find(split);
        if (it != edited_eval_cache_.end() && it->second.first == snap.version) edited = it->second.second;
    }
    if (!edited) {
        edited = snap.edits.edits.empty() ? base : evaluate_model(*snap.edited, split_notes(split), config_.threshold);
        std::lock_guard lock(eval_mutex_);
        edited_eval_cache_[split] = {snap.version, *edited};
    }
    json diff = json::array();
    for (std::size_t j = 0; j < base.counts.size(); ++j) {
        const auto& b = base.counts[j];
        const auto& e = edited->counts[j];
        diff.push_back({{"code", base_->codes[j].code},
                        {"fp_delta", static_cast<long long>(e.fp) - static_cast<long long>(b.fp)},
                        {"fn_delta", static_cast<long long>(e.fn) - static_cast<long long>(b.fn)},
                        {"tp_delta", static_cast<long long>(e.tp) - static_cast<long long>(b.tp)},
                        {"tn_delta", static_cast<long long>(e.tn) - static_cast<long long>(b.tn)}});
    }
    return {200,
            {{"split", split},
             {"version", snap.version},
             {"base", eval_json(base, base_->codes)},
             {"edited", eval_json(*edited, base_->codes)},
             {"diff", diff}}};
}

void DebugServer::register_routes() {
    auto& s = *http_;
    const auto send = [](httplib::Response& res, const ApiResponse& r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    const auto parse_body = [](const httplib::Request& req, json& out) -> std::optional<ApiResponse> {
        try {
            out = json::parse(req.body.empty() ? "{}" : req.body);
            return std::nullopt;
        } catch (const json::exception& e) {
            return error(400, std::string("malformed JSON: ") + e.what());
        }
    };
    const auto query_size = [](const httplib::Request& req, const char* name, std::size_t fallback,
                               json& fields) -> std::size_t {
        if (!req.has_param(name)) return fallback;
        const auto v = parse_size(req.get_param_value(name));
        if (!v) {
            fields[name] = "must be a non-negative integer";
            return fallback;
        }
        return *v;
    };

    s.set_default_headers({{"Access-Control-Allow-Origin", config_.cors_origin},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
    s.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    s.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            send(res, error(500, e.what()));
        } catch (...) {
            send(res, error(500, "unknown error"));
        }
    });
    s.set_error_handler([send](const httplib::Request& req, httplib::Response& res) {
        if (res.body.empty() && res.status == 404) send(res, error(404, "no route for " + req.path));
    });

    s.Get("/health", [send](const httplib::Request&, httplib::Response& res) { send(res, {200, {{"ok", true}}}); });
    s.Get("/features", [this, send, query_size](const httplib::Request& req, httplib::Response& res) {
        json fields = json::object();
        const std::size_t limit = query_size(req, "limit", 50, fields);
        const std::size_t offset = query_size(req, "offset", 0, fields);
        if (!fields.empty()) return send(res, error(400, "invalid query", fields));
        send(res, features(limit, offset, req.get_param_value("verdict")));
    });
    s.Get(R"(/features/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
        send(res, feature(req.matches[1]));
    });
    s.Get(R"(/codes/([^/]+)/top-features)", [this, send, query_size](const httplib::Request& req, httplib::Response& res) {
        json fields = json::object();
        const std::size_t k = query_size(req, "k", 5, fields);
        if (!fields.empty()) return send(res, error(400, "invalid query", fields));
        send(res, code_top_features(req.matches[1], k));
    });
    s.Get("/heatmap", [this, send](const httplib::Request& req, httplib::Response& res) {
        const std::string which = req.has_param("model") ? req.get_param_value("model") : "edited";
        send(res, heatmap(split_list(req.get_param_value("codes")), split_list(req.get_param_value("features")), which));
    });
    s.Post("/predict", [this, send, parse_body](const httplib::Request& req, httplib::Response& res) {
        json body;
        if (auto err = parse_body(req, body)) return send(res, *err);
        send(res, predict(body));
    });
    s.Get("/edits", [this, send](const httplib::Request&, httplib::Response& res) { send(res, current_edits()); });
    s.Post("/edits", [this, send, parse_body](const httplib::Request& req, httplib::Response& res) {
        json body;
        if (auto err = parse_body(req, body)) return send(res, *err);
        send(res, edits(body));
    });
    s.Post("/ablate/what-if", [this, send, parse_body](const httplib::Request& req, httplib::Response& res) {
        json body;
        if (auto err = parse_body(req, body)) return send(res, *err);
        send(res, what_if(body));
    });
    s.Get("/eval", [this, send](const httplib::Request& req, httplib::Response& res) {
        send(res, eval(req.has_param("split") ? req.get_param_value("split") : "eval"));
    });
}

bool DebugServer::bind() {
    http_ = std::make_unique<httplib::Server>();
    register_routes();
    if (config_.port == 0) {
        bound_port_ = http_->bind_to_any_port(config_.host);
    } else {
        bound_port_ = http_->bind_to_port(config_.host, config_.port) ? config_.port : -1;
    }
    return bound_port_ > 0;
}

void DebugServer::listen() {
    if (!http_) throw std::logic_error("DebugServer::listen before bind");
    http_->listen_after_bind();
}

void DebugServer::stop() {
    if (http_) http_->stop();
}

}  // namespace dila
