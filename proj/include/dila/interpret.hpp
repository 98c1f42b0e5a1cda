#pragma once

// Auto-interpretability: the five-context identification test, feature
// summaries, and agreement metrics. Annotators are pluggable: a chat-completion
// endpoint (live, scripted or replayed from a cassette) or a mock.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dila/dataset.hpp"
#include "dila/dictionary.hpp"
#include "dila/synth.hpp"

namespace dila {

inline constexpr std::size_t kTaskContexts = 5;
inline constexpr std::size_t kSummaryWordLimit = 8;
inline constexpr const char* kPromptVersion = "v1";

// A random corpus token together with the features active on it, so the
// outlier can be guaranteed not to activate the feature under test.
struct PoolContext {
    ContextToken context;
    std::vector<std::size_t> active_features;  // sorted
};

std::vector<PoolContext> sample_outlier_pool(const SaeParams& sae, const std::vector<CorpusRecord>& records,
                                             const EmbeddingProvider& embeddings, std::size_t n, std::uint64_t seed,
                                             const DictionaryOptions& options = {});

struct IdentificationTask {
    std::string id;
    std::size_t feature = 0;
    std::vector<ContextToken> contexts;  // kTaskContexts, shuffled
    std::size_t outlier = 0;             // 1-based position, hidden from annotators
    std::string prompt;
    std::uint64_t seed = 0;
    bool operator==(const IdentificationTask&) const = default;
};

class InsufficientContexts : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

IdentificationTask make_identification_task(const DictionaryEntry& entry, const std::vector<PoolContext>& pool,
                                            std::uint64_t seed);
// Up to `n` tasks, cycling over the entries that have enough contexts and
// an outlier candidate; pass r over the entries uses seed + r.
std::vector<IdentificationTask> make_identification_tasks(const std::vector<DictionaryEntry>& entries,
                                                          const std::vector<PoolContext>& pool, std::size_t n,
                                                          std::uint64_t seed);
std::string identification_prompt(const std::vector<ContextToken>& contexts);
std::string summary_prompt(const DictionaryEntry& entry);

struct AnnotatorResponse {
    std::string task_id;
    std::optional<int> choice;      // 1..5, empty = abstain
    std::string raw;
    std::string annotator;
    std::optional<int> confidence;  // 1..4
    std::optional<std::string> error;
    bool operator==(const AnnotatorResponse&) const = default;
};

// Strict "Answer: <n>" with n in 1..5.
std::optional<int> parse_answer(const std::string& reply);
std::optional<int> parse_confidence(const std::string& reply);

// ---- chat endpoints ----

struct ChatMessage {
    std::string role;
    std::string content;
    bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
    std::string model;
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
};

std::string request_key(const ChatRequest& request);

class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ChatEndpoint {
public:
    virtual ~ChatEndpoint() = default;
    // Returns the assistant message text; throws TransportError on failure.
    virtual std::string complete(const ChatRequest& request) = 0;
    virtual std::string model() const = 0;
};

struct HttpEndpointConfig {
    std::string base_url;  // e.g. http://localhost:8000/v1
    std::string api_key;
    std::string model;
    std::chrono::seconds timeout{60};

    // DILA_LLM_BASE_URL, DILA_LLM_API_KEY, DILA_LLM_MODEL.
    static HttpEndpointConfig from_env();
};

// OpenAI-compatible POST {base_url}/chat/completions.
class HttpChatEndpoint final : public ChatEndpoint {
public:
    explicit HttpChatEndpoint(HttpEndpointConfig config);
    std::string complete(const ChatRequest& request) override;
    std::string model() const override { return config_.model; }

private:
    HttpEndpointConfig config_;
};

class ScriptedEndpoint final : public ChatEndpoint {
public:
    using Script = std::function<std::string(const ChatRequest&, std::size_t call)>;
    ScriptedEndpoint(std::string model, Script script);
    std::string complete(const ChatRequest& request) override;
    std::string model() const override { return model_; }
    std::size_t calls() const;

private:
    std::string model_;
    Script script_;
    mutable std::mutex mutex_;
    std::size_t calls_ = 0;
};

// Answers like a perfect reader of the planted world: the odd concept out for
// identification prompts and the majority concept's name for summaries.
class PlantedWorldEndpoint final : public ChatEndpoint {
public:
    explicit PlantedWorldEndpoint(const PlantedWorld& world) : world_(&world) {}
    std::string complete(const ChatRequest& request) override;
    std::string model() const override { return "planted-world"; }

private:
    const PlantedWorld* world_;
};

// Cassette: {"version": 1, "interactions": [{"key", "request", "response"}]}.
// Replay matches on request_key, so concurrent or reordered calls are fine.
class RecordingEndpoint final : public ChatEndpoint {
public:
    RecordingEndpoint(ChatEndpoint& inner, std::string cassette_path);
    std::string complete(const ChatRequest& request) override;
    std::string model() const override { return inner_->model(); }
    void save() const;

private:
    ChatEndpoint* inner_;
    std::string path_;
    mutable std::mutex mutex_;
    std::vector<std::pair<ChatRequest, std::string>> interactions_;
};

class ReplayEndpoint final : public ChatEndpoint {
public:
    explicit ReplayEndpoint(const std::string& cassette_path);
    std::string complete(const ChatRequest& request) override;
    std::string model() const override { return model_; }

private:
    std::string model_;
    std::mutex mutex_;
    std::vector<std::pair<std::string, std::vector<std::string>>> replies_;
    std::vector<std::size_t> cursor_;
};

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds base_delay{250};
    std::function<void(std::chrono::milliseconds)> sleep;  // defaults to this_thread::sleep_for
};

// ---- annotators ----

class Annotator {
public:
    virtual ~Annotator() = default;
    virtual AnnotatorResponse annotate(const IdentificationTask& task) = 0;
    virtual std::string id() const = 0;
    virtual Provenance provenance() const = 0;
};

// Reads the hidden answer.
class TruthOracle final : public Annotator {
public:
    AnnotatorResponse annotate(const IdentificationTask& task) override;
    std::string id() const override { return "oracle"; }
    Provenance provenance() const override { return Provenance::Oracle; }
};

// Uniform choice keyed by (seed, task id): independent of call order.
class UniformRandomAnnotator final : public Annotator {
public:
    explicit UniformRandomAnnotator(std::uint64_t seed) : seed_(seed) {}
    AnnotatorResponse annotate(const IdentificationTask& task) override;
    std::string id() const override { return "random"; }
    Provenance provenance() const override { return Provenance::Oracle; }

private:
    std::uint64_t seed_;
};

class EndpointAnnotator final : public Annotator {
public:
    EndpointAnnotator(ChatEndpoint& endpoint, RetryPolicy retry = {}) : endpoint_(&endpoint), retry_(std::move(retry)) {}
    AnnotatorResponse annotate(const IdentificationTask& task) override;
    std::string id() const override { return endpoint_->model(); }
    Provenance provenance() const override { return Provenance::Llm; }

private:
    ChatEndpoint* endpoint_;
    RetryPolicy retry_;
};

// One chat exchange with the reprompt/retry protocol.
AnnotatorResponse run_identification(const IdentificationTask& task, ChatEndpoint& endpoint,
                                     const RetryPolicy& retry = {});

// Responses come back in task order whatever the completion order.
std::vector<AnnotatorResponse> run_identification_batch(const std::vector<IdentificationTask>& tasks,
                                                        Annotator& annotator, std::size_t max_in_flight = 4);

struct SummaryResult {
    std::string text;
    bool truncated = false;
    std::string raw;
    std::optional<std::string> error;
};

// Requires an identified entry; stores the summary on success.
SummaryResult summarize_feature(DictionaryEntry& entry, ChatEndpoint& endpoint, const RetryPolicy& retry = {});
std::pair<std::string, bool> limit_words(const std::string& text, std::size_t limit = kSummaryWordLimit);

double identification_accuracy(const std::vector<AnnotatorResponse>& responses,
                               const std::vector<IdentificationTask>& tasks);

struct Similarity {
    double cosine = 0;
    double jaccard = 0;
};

Similarity response_similarity(const std::vector<AnnotatorResponse>& a, const std::vector<AnnotatorResponse>& b,
                               const std::vector<IdentificationTask>& tasks);

// Marks each tasked entry identified or unidentified by its response.
void apply_verdicts(std::vector<DictionaryEntry>& entries, const std::vector<IdentificationTask>& tasks,
                    const std::vector<AnnotatorResponse>& responses, Provenance provenance);

std::string responses_csv(const std::vector<AnnotatorResponse>& responses, const std::vector<IdentificationTask>& tasks);

std::string tasks_jsonl(const std::vector<IdentificationTask>& tasks);
std::string responses_jsonl(const std::vector<AnnotatorResponse>& responses);

}  // namespace dila
