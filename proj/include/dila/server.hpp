#pragma once

// HTTP JSON API over a trained model, its dictionary and a corpus, for the
// debugger UI. One session: a base model that never changes plus a single
// EditSet. Reads run concurrently; EditSet mutations go through one writer.

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "dila/ablation.hpp"
#include "dila/dataset.hpp"
#include "dila/dictionary.hpp"
#include "dila/metrics.hpp"
#include "dila/model.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace dila {

struct ServerConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::string cors_origin = "*";
    double threshold = kDefaultThreshold;
    double eval_fraction = 0.2;
    std::size_t max_heatmap_cells = 200000;
    std::uint64_t seed = 0;
};

struct SessionSnapshot {
    std::uint64_t version = 0;
    EditSet edits;
    std::shared_ptr<const DilaModel> edited;
};

class Session {
public:
    explicit Session(std::shared_ptr<const DilaModel> base);

    const DilaModel& base() const { return *base_; }
    SessionSnapshot snapshot() const;

    enum class Op { Add, Remove, Clear };
    struct MutationResult {
        bool conflict = false;
        SessionSnapshot state;
        std::vector<std::size_t> affected_codes;
    };
    // `expected_version`, when given, must equal the current version.
    MutationResult mutate(Op op, std::size_t feature, std::size_t code, std::optional<std::uint64_t> expected_version);

private:
    std::shared_ptr<const DilaModel> base_;
    mutable std::shared_mutex mutex_;
    std::uint64_t version_ = 0;
    EditSet edits_;
    std::shared_ptr<const DilaModel> edited_;
};

struct ApiResponse {
    int status = 200;
    nlohmann::json body;
};

class DebugServer {
public:
    DebugServer(DilaModel model, std::vector<DictionaryEntry> dictionary, Dataset corpus, ServerConfig config = {});
    ~DebugServer();

    // Transport-independent entry points, one per route.
    ApiResponse features(std::size_t limit, std::size_t offset, const std::string& verdict) const;
    ApiResponse feature(const std::string& id) const;
    ApiResponse code_top_features(const std::string& code, std::size_t k) const;
    ApiResponse heatmap(const std::vector<std::string>& codes, const std::vector<std::string>& features,
                        const std::string& which) const;
    ApiResponse predict(const nlohmann::json& body) const;
    ApiResponse edits(const nlohmann::json& body);
    ApiResponse current_edits() const;
    ApiResponse what_if(const nlohmann::json& body) const;
    ApiResponse eval(const std::string& split) const;

    // Binds and serves until stop(); returns false if the bind failed.
    bool bind();
    int port() const { return bound_port_; }
    void listen();
    void stop();

    Session& session() { return session_; }

private:
    void register_routes();
    std::optional<std::size_t> note_index(const std::string& id) const;
    std::vector<LabeledNote> split_notes(const std::string& split) const;
    EvalResult base_eval(const std::string& split) const;

    std::shared_ptr<const DilaModel> base_;
    std::vector<DictionaryEntry> dictionary_;
    Dataset corpus_;
    ServerConfig config_;
    Session session_;
    Matrix replacement_pool_;
    std::unique_ptr<httplib::Server> http_;
    int bound_port_ = -1;

    mutable std::mutex eval_mutex_;
    mutable std::map<std::string, EvalResult> base_eval_cache_;
    mutable std::map<std::string, std::pair<std::uint64_t, EvalResult>> edited_eval_cache_;
};

}  // namespace dila
