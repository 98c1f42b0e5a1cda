#include "dila/interpret.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <map>
#include <regex>
#include <sstream>
#include <thread>

#include "dila/io.hpp"
#include "dila/random.hpp"
#include "httplib.h"
#include "json.hpp"

namespace dila {

using nlohmann::json;

namespace {

constexpr const char* kSystemPrompt =
    "You are a careful annotator helping to interpret features learned by a text model.";
constexpr const char* kIdentifyHeader =
    "Each numbered line below is one highlighted token from a text corpus. Four of the five tokens "
    "strongly activate the same hidden feature of a model. The remaining one was sampled at random "
    "and does not activate it.";
constexpr const char* kIdentifyFooter =
    "Which line is the random one? End your reply with a line of the form \"Answer: <n>\" where <n> "
    "is a number from 1 to 5. You may add a line \"Confidence: <k>\" where k runs from 1 (unsure) "
    "to 4 (certain).";
constexpr const char* kReprompt = "Please reply with a single line of the form \"Answer: <n>\" where <n> is 1 to 5.";
constexpr const char* kSummaryHeader =
    "The contexts below all strongly activate the same hidden feature of a model. The highlighted "
    "token is shown in brackets before each context.";
constexpr const char* kSummaryFooter =
    "Describe the concept these contexts share in at most 8 words. Reply with the description only.";

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

std::string call_with_retry(ChatEndpoint& endpoint, const ChatRequest& request, const RetryPolicy& retry) {
    const int attempts = std::max(1, retry.attempts);
    for (int attempt = 0;; ++attempt) {
        try {
            return endpoint.complete(request);
        } catch (const TransportError&) {
            if (attempt + 1 >= attempts) throw;
            const auto delay = retry.base_delay * (1LL << attempt);
            if (retry.sleep)
                retry.sleep(delay);
            else
                std::this_thread::sleep_for(delay);
        }
    }
}

json request_json(const ChatRequest& r) {
    json messages = json::array();
    for (const auto& m : r.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
    return {{"model", r.model}, {"messages", messages}, {"temperature", r.temperature}};
}

ChatRequest request_from_json(const json& j) {
    ChatRequest r;
    r.model = j.at("model").get<std::string>();
    r.temperature = j.value("temperature", 0.0);
    for (const auto& m : j.at("messages")) r.messages.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
    return r;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    return out + "\"";
}

const IdentificationTask& task_for(const std::map<std::string, const IdentificationTask*>& by_id,
                                   const AnnotatorResponse& r) {
    const auto it = by_id.find(r.task_id);
    if (it == by_id.end()) throw std::invalid_argument("response for unknown task '" + r.task_id + "'");
    return *it->second;
}

std::map<std::string, const IdentificationTask*> index_tasks(const std::vector<IdentificationTask>& tasks) {
    std::map<std::string, const IdentificationTask*> by_id;
    for (const auto& t : tasks) by_id[t.id] = &t;
    return by_id;
}

bool is_correct(const AnnotatorResponse& r, const IdentificationTask& t) {
    return r.choice && static_cast<std::size_t>(*r.choice) == t.outlier;
}

}  // namespace

std::vector<PoolContext> sample_outlier_pool(const SaeParams& sae, const std::vector<CorpusRecord>& records,
                                             const EmbeddingProvider& embeddings, std::size_t n, std::uint64_t seed,
                                             const DictionaryOptions& options) {
    if (records.empty()) throw std::invalid_argument("sample_outlier_pool: empty corpus");
    CounterRng rng(seed, {hash_string("outlier.pool")});
    std::vector<PoolContext> pool;
    std::size_t misses = 0;
    while (pool.size() < n) {
        const CorpusRecord& r = records[rng.below(records.size())];
        if (r.tokens.empty()) {
            if (++misses > 100 * (n + 1)) break;
            continue;
        }
        const std::size_t pos = rng.below(r.tokens.size());
        if (is_pad_token(r.tokens[pos], options.pad_tokens)) {
            if (++misses > 100 * (n + 1)) break;
            continue;
        }
        const Matrix x = embeddings.embed(r.id);
        if (x.rows() != r.tokens.size()) throw ShapeError("sample_outlier_pool: note '" + r.id + "' row count mismatch");
        Matrix row(1, x.cols());
        std::copy(x.row(pos).begin(), x.row(pos).end(), row.row(0).begin());
        const Matrix f = encode(sae, row);
        PoolContext pc;
        pc.context = {r.tokens[pos], r.id, pos, 0.0, context_window(r.tokens, pos, options.window_radius, options.pad_tokens)};
        for (std::size_t i = 0; i < f.cols(); ++i)
            if (f(0, i) > 0.0) pc.active_features.push_back(i);
        pool.push_back(std::move(pc));
    }
    return pool;
}

std::vector<IdentificationTask> make_identification_tasks(const std::vector<DictionaryEntry>& entries,
                                                          const std::vector<PoolContext>& pool, std::size_t n,
                                                          std::uint64_t seed) {
    std::vector<IdentificationTask> tasks;
    std::vector<const DictionaryEntry*> eligible;
    for (const auto& e : entries) {
        if (e.contexts.size() < kEvalContexts) continue;
        try {
            tasks.push_back(make_identification_task(e, pool, seed));
            eligible.push_back(&e);
        } catch (const std::invalid_argument&) {
            // active on every pooled token: no outlier exists
        }
        if (tasks.size() == n) return tasks;
    }
    if (eligible.empty()) return tasks;
    for (std::uint64_t round = 1; tasks.size() < n; ++round)
        for (const auto* e : eligible) {
            if (tasks.size() == n) break;
            tasks.push_back(make_identification_task(*e, pool, seed + round));
        }
    return tasks;
}

std::string identification_prompt(const std::vector<ContextToken>& contexts) {
    std::string p = kIdentifyHeader;
    p += "\n\n";
    for (std::size_t i = 0; i < contexts.size(); ++i) p += std::to_string(i + 1) + ". " + contexts[i].token + "\n";
    p += "\n";
    p += kIdentifyFooter;
    return p;
}

std::string summary_prompt(const DictionaryEntry& entry) {
    std::string p = kSummaryHeader;
    p += "\n\n";
    const TopContexts top = top_contexts(entry, std::min(kEvalContexts, entry.contexts.size()));
    for (std::size_t i = 0; i < top.contexts.size(); ++i) {
        p += std::to_string(i + 1) + ". [" + top.contexts[i].token + "] " + top.contexts[i].window + "\n";
    }
    p += "\n";
    p += kSummaryFooter;
    return p;
}

IdentificationTask make_identification_task(const DictionaryEntry& entry, const std::vector<PoolContext>& pool,
                                            std::uint64_t seed) {
    if (entry.contexts.size() < kEvalContexts) {
        throw InsufficientContexts("feature " + std::to_string(entry.feature) + " has " +
                                   std::to_string(entry.contexts.size()) + " contexts, need " +
                                   std::to_string(kEvalContexts));
    }
    const std::vector<ContextToken> genuine = top_contexts(entry, kEvalContexts).contexts;
    std::vector<const ContextToken*> candidates;
    for (const auto& pc : pool) {
        if (std::binary_search(pc.active_features.begin(), pc.active_features.end(), entry.feature)) continue;
        const bool clash = std::any_of(genuine.begin(), genuine.end(), [&](const ContextToken& g) {
            return g.token == pc.context.token || (g.doc == pc.context.doc && g.pos == pc.context.pos);
        });
        if (!clash) candidates.push_back(&pc.context);
    }
    if (candidates.empty()) {
        throw std::invalid_argument("no outlier candidate in pool for feature " + std::to_string(entry.feature));
    }

    CounterRng rng(seed, {hash_string("identify"), entry.feature});
    std::vector<ContextToken> five = genuine;
    five.push_back(*candidates[rng.below(candidates.size())]);
    std::vector<std::size_t> order{0, 1, 2, 3, 4};
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

    IdentificationTask task;
    task.id = "task-" + std::to_string(entry.feature) + "-" + std::to_string(seed);
    task.feature = entry.feature;
    task.seed = seed;
    for (std::size_t p = 0; p < order.size(); ++p) {
        task.contexts.push_back(five[order[p]]);
        if (order[p] == kEvalContexts) task.outlier = p + 1;
    }
    task.prompt = identification_prompt(task.contexts);
    return task;
}

std::optional<int> parse_answer(const std::string& reply) {
    static const std::regex re(R"(Answer:\s*([1-5])(?![0-9]))");
    std::smatch m;
    if (!std::regex_search(reply, m, re)) return std::nullopt;
    return m[1].str()[0] - '0';
}

std::optional<int> parse_confidence(const std::string& reply) {
    static const std::regex re(R"(Confidence:\s*([1-4])(?![0-9]))");
    std::smatch m;
    if (!std::regex_search(reply, m, re)) return std::nullopt;
    return m[1].str()[0] - '0';
}

std::string request_key(const ChatRequest& request) { return request_json(request).dump(); }

HttpEndpointConfig HttpEndpointConfig::from_env() {
    HttpEndpointConfig c;
    if (const char* v = std::getenv("DILA_LLM_BASE_URL")) c.base_url = v;
    if (const char* v = std::getenv("DILA_LLM_API_KEY")) c.api_key = v;
    if (const char* v = std::getenv("DILA_LLM_MODEL")) c.model = v;
    return c;
}

HttpChatEndpoint::HttpChatEndpoint(HttpEndpointConfig config) : config_(std::move(config)) {
    if (config_.base_url.empty()) throw std::invalid_argument("chat endpoint: base URL is empty");
    if (config_.model.empty()) throw std::invalid_argument("chat endpoint: model name is empty");
}

std::string HttpChatEndpoint::complete(const ChatRequest& request) {
    static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(config_.base_url, m, url_re)) {
        throw std::invalid_argument("chat endpoint: cannot parse base URL '" + config_.base_url + "'");
    }
    std::string path = m[2].matched ? m[2].str() : "";
    while (!path.empty() && path.back() == '/') path.pop_back();
    path += "/chat/completions";

    httplib::Client client(m[1].str());
    client.set_connection_timeout(config_.timeout);
    client.set_read_timeout(config_.timeout);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

    ChatRequest req = request;
    if (req.model.empty()) req.model = config_.model;
    const auto res = client.Post(path, headers, request_json(req).dump(), "application/json");
    if (!res) throw TransportError("chat endpoint: " + httplib::to_string(res.error()));
    if (res->status != 200) {
        throw TransportError("chat endpoint: HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    }
    try {
        const json j = json::parse(res->body);
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
        throw TransportError(std::string("chat endpoint: malformed response: ") + e.what());
    }
}

ScriptedEndpoint::ScriptedEndpoint(std::string model, Script script)
    : model_(std::move(model)), script_(std::move(script)) {}

std::string ScriptedEndpoint::complete(const ChatRequest& request) {
    std::size_t call;
    {
        std::lock_guard lock(mutex_);
        call = calls_++;
    }
    return script_(request, call);
}

std::size_t ScriptedEndpoint::calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
}

std::string PlantedWorldEndpoint::complete(const ChatRequest& request) {
    const std::string& prompt = request.messages.at(1).content;
    static const std::regex line_re(R"(^(\d+)\. (\[([^\]]*)\]|(\S+)))");
    std::vector<int> concepts;
    std::istringstream in(prompt);
    std::string line;
    while (std::getline(in, line)) {
        std::smatch m;
        if (!std::regex_search(line, m, line_re)) continue;
        concepts.push_back(world_->concept_of(m[3].matched ? m[3].str() : m[4].str()));
    }
    std::map<int, std::size_t> count;
    for (int c : concepts) ++count[c];
    int majority = kFillerTag;
    std::size_t best = 0;
    for (const auto& [c, n] : count)
        if (c != kFillerTag && n > best) {
            best = n;
            majority = c;
        }

    if (starts_with(prompt, kSummaryHeader)) {
        return majority == kFillerTag ? "unclear" : world_->concept_names[static_cast<std::size_t>(majority)];
    }
    for (std::size_t i = 0; i < concepts.size(); ++i)
        if (concepts[i] != majority) return "Answer: " + std::to_string(i + 1) + "\nConfidence: 4";
    return "Answer: 1\nConfidence: 1";
}

RecordingEndpoint::RecordingEndpoint(ChatEndpoint& inner, std::string cassette_path)
    : inner_(&inner), path_(std::move(cassette_path)) {}

std::string RecordingEndpoint::complete(const ChatRequest& request) {
    std::string reply = inner_->complete(request);
    std::lock_guard lock(mutex_);
    interactions_.emplace_back(request, reply);
    return reply;
}

void RecordingEndpoint::save() const {
    std::lock_guard lock(mutex_);
    json arr = json::array();
    for (const auto& [req, reply] : interactions_) arr.push_back({{"request", request_json(req)}, {"response", reply}});
    write_file(path_, json{{"version", 1}, {"model", inner_->model()}, {"interactions", arr}}.dump(1) + "\n");
}

ReplayEndpoint::ReplayEndpoint(const std::string& cassette_path) {
    try {
        const json j = json::parse(read_file(cassette_path));
        if (j.at("version").get<int>() != 1) throw FormatError("unsupported cassette version");
        model_ = j.value("model", std::string("replay"));
        for (const auto& it : j.at("interactions")) {
            const std::string key = request_key(request_from_json(it.at("request")));
            const auto found = std::find_if(replies_.begin(), replies_.end(), [&](const auto& p) { return p.first == key; });
            if (found == replies_.end())
                replies_.push_back({key, {it.at("response").get<std::string>()}});
            else
                found->second.push_back(it.at("response").get<std::string>());
        }
    } catch (const json::exception& e) {
        throw FormatError("cassette '" + cassette_path + "': " + e.what());
    }
    cursor_.assign(replies_.size(), 0);
}

std::string ReplayEndpoint::complete(const ChatRequest& request) {
    const std::string key = request_key(request);
    std::lock_guard lock(mutex_);
    for (std::size_t i = 0; i < replies_.size(); ++i) {
        if (replies_[i].first != key) continue;
        const auto& list = replies_[i].second;
        const std::size_t at = std::min(cursor_[i], list.size() - 1);
        ++cursor_[i];
        return list[at];
    }
    throw std::runtime_error("cassette has no recorded reply for this request");
}

AnnotatorResponse TruthOracle::annotate(const IdentificationTask& task) {
    return {task.id, static_cast<int>(task.outlier), "Answer: " + std::to_string(task.outlier), id(), 4, std::nullopt};
}

AnnotatorResponse UniformRandomAnnotator::annotate(const IdentificationTask& task) {
    CounterRng rng(seed_, {hash_string("annotator.random"), hash_string(task.id)});
    const int choice = static_cast<int>(rng.below(kTaskContexts)) + 1;
    return {task.id, choice, "Answer: " + std::to_string(choice), id(), std::nullopt, std::nullopt};
}

AnnotatorResponse EndpointAnnotator::annotate(const IdentificationTask& task) {
    return run_identification(task, *endpoint_, retry_);
}

AnnotatorResponse run_identification(const IdentificationTask& task, ChatEndpoint& endpoint, const RetryPolicy& retry) {
    AnnotatorResponse out;
    out.task_id = task.id;
    out.annotator = endpoint.model();
    ChatRequest request{endpoint.model(), {{"system", kSystemPrompt}, {"user", task.prompt}}, 0.0};
    for (int round = 0; round < 2; ++round) {
        std::string reply;
        try {
            reply = call_with_retry(endpoint, request, retry);
        } catch (const TransportError& e) {
            out.error = e.what();
            return out;
        }
        out.raw = out.raw.empty() ? reply : out.raw + "\n" + reply;
        if (const auto choice = parse_answer(reply)) {
            out.choice = choice;
            out.confidence = parse_confidence(reply);
            return out;
        }
        request.messages.push_back({"assistant", reply});
        request.messages.push_back({"user", kReprompt});
    }
    out.error = "no parsable answer after reprompt";
    return out;
}

std::vector<AnnotatorResponse> run_identification_batch(const std::vector<IdentificationTask>& tasks,
                                                        Annotator& annotator, std::size_t max_in_flight) {
    std::vector<AnnotatorResponse> out(tasks.size());
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) {
            try {
                out[i] = annotator.annotate(tasks[i]);
            } catch (const std::exception& e) {
                out[i] = {tasks[i].id, std::nullopt, "", annotator.id(), std::nullopt, std::string(e.what())};
            }
        }
    };
    const std::size_t n_threads = std::min(std::max<std::size_t>(1, max_in_flight), tasks.size());
    std::vector<std::thread> threads;
    for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
    worker();
    for (auto& th : threads) th.join();
    return out;
}

std::pair<std::string, bool> limit_words(const std::string& text, std::size_t limit) {
    std::istringstream in(text);
    std::vector<std::string> words;
    for (std::string w; in >> w;) words.push_back(w);
    const bool truncated = words.size() > limit;
    if (truncated) words.resize(limit);
    std::string out;
    for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
    return {out, truncated};
}

SummaryResult summarize_feature(DictionaryEntry& entry, ChatEndpoint& endpoint, const RetryPolicy& retry) {
    if (entry.verdict != Verdict::Identified) {
        throw std::invalid_argument("feature " + std::to_string(entry.feature) + " is " + to_string(entry.verdict) +
                                    ", only identified features are summarized");
    }
    SummaryResult out;
    ChatRequest request{endpoint.model(), {{"system", kSystemPrompt}, {"user", summary_prompt(entry)}}, 0.0};
    for (int round = 0; round < 2; ++round) {
        std::string reply;
        try {
            reply = call_with_retry(endpoint, request, retry);
        } catch (const TransportError& e) {
            out.error = e.what();
            return out;
        }
        out.raw = out.raw.empty() ? reply : out.raw + "\n" + reply;
        std::string first;
        std::istringstream in(reply);
        for (std::string line; std::getline(in, line);) {
            first = trim(line);
            if (!first.empty()) break;
        }
        if (!first.empty()) {
            std::tie(out.text, out.truncated) = limit_words(first);
            entry.summary = out.text;
            return out;
        }
        request.messages.push_back({"assistant", reply});
        request.messages.push_back({"user", kSummaryFooter});
    }
    out.error = "empty summary after reprompt";
    return out;
}

double identification_accuracy(const std::vector<AnnotatorResponse>& responses,
                               const std::vector<IdentificationTask>& tasks) {
    if (responses.empty()) throw std::invalid_argument("identification_accuracy: no responses");
    const auto by_id = index_tasks(tasks);
    std::size_t correct = 0;
    for (const auto& r : responses)
        if (is_correct(r, task_for(by_id, r))) ++correct;
    return static_cast<double>(correct) / static_cast<double>(responses.size());
}

Similarity response_similarity(const std::vector<AnnotatorResponse>& a, const std::vector<AnnotatorResponse>& b,
                               const std::vector<IdentificationTask>& tasks) {
    std::map<std::string, const AnnotatorResponse*> b_by_id;
    for (const auto& r : b) b_by_id[r.task_id] = &r;
    if (a.empty() || a.size() != b.size()) throw std::invalid_argument("response_similarity: task sets differ");
    const auto by_id = index_tasks(tasks);
    std::size_t same = 0, both = 0, either = 0;
    for (const auto& ra : a) {
        const auto it = b_by_id.find(ra.task_id);
        if (it == b_by_id.end()) throw std::invalid_argument("response_similarity: task '" + ra.task_id + "' missing");
        const AnnotatorResponse& rb = *it->second;
        if (ra.choice && rb.choice && *ra.choice == *rb.choice) ++same;
        const IdentificationTask& t = task_for(by_id, ra);
        const bool ca = is_correct(ra, t), cb = is_correct(rb, t);
        if (ca && cb) ++both;
        if (ca || cb) ++either;
    }
    Similarity s;
    s.cosine = static_cast<double>(same) / static_cast<double>(a.size());
    s.jaccard = either == 0 ? 1.0 : static_cast<double>(both) / static_cast<double>(either);
    return s;
}

void apply_verdicts(std::vector<DictionaryEntry>& entries, const std::vector<IdentificationTask>& tasks,
                    const std::vector<AnnotatorResponse>& responses, Provenance provenance) {
    const auto by_id = index_tasks(tasks);
    for (const auto& r : responses) {
        const IdentificationTask& t = task_for(by_id, r);
        for (auto& e : entries) {
            if (e.feature != t.feature || e.verdict == Verdict::InsufficientContexts) continue;
            e.verdict = is_correct(r, t) ? Verdict::Identified : Verdict::Unidentified;
            e.provenance = provenance;
        }
    }
}

std::string responses_csv(const std::vector<AnnotatorResponse>& responses, const std::vector<IdentificationTask>& tasks) {
    const auto by_id = index_tasks(tasks);
    std::string out = "task_id,annotator,choice,correct,confidence\n";
    for (const auto& r : responses) {
        const IdentificationTask& t = task_for(by_id, r);
        out += csv_field(r.task_id) + "," + csv_field(r.annotator) + "," + (r.choice ? std::to_string(*r.choice) : "") +
               "," + (is_correct(r, t) ? "1" : "0") + "," + (r.confidence ? std::to_string(*r.confidence) : "") + "\n";
    }
    return out;
}

std::string tasks_jsonl(const std::vector<IdentificationTask>& tasks) {
    std::string out;
    for (const auto& t : tasks) {
        json contexts = json::array();
        for (const auto& c : t.contexts) contexts.push_back({{"token", c.token}, {"doc", c.doc}, {"pos", c.pos}});
        out += json{{"id", t.id}, {"feature", t.feature}, {"outlier", t.outlier}, {"seed", t.seed}, {"contexts", contexts},
                    {"prompt", t.prompt}}
                   .dump() +
               "\n";
    }
    return out;
}

std::string responses_jsonl(const std::vector<AnnotatorResponse>& responses) {
    std::string out;
    for (const auto& r : responses) {
        out += json{{"task_id", r.task_id},
                    {"choice", r.choice ? json(*r.choice) : json(nullptr)},
                    {"raw", r.raw},
                    {"annotator", r.annotator},
                    {"confidence", r.confidence ? json(*r.confidence) : json(nullptr)},
                    {"error", r.error ? json(*r.error) : json(nullptr)}}
                   .dump() +
               "\n";
    }
    return out;
}

}  // namespace dila
