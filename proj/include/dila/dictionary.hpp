#pragma once

// Human-readable dictionary: for each feature, the highest-activating token
// occurrences over a corpus. A bounded top-10 list is kept per feature while
// streaming; only the first 4 are shown to annotators.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dila/model.hpp"
#include "dila/sae.hpp"
#include "dila/synth.hpp"

namespace dila {

inline constexpr std::size_t kMaxContexts = 10;
inline constexpr std::size_t kEvalContexts = 4;

struct ContextToken {
    std::string token;
    std::string doc;
    std::size_t pos = 0;
    double act = 0;
    std::string window;
    bool operator==(const ContextToken&) const = default;
};

// Strict ranking: activation descending, then (doc, pos) ascending.
bool ranks_before(const ContextToken& a, const ContextToken& b);

enum class Verdict { Identified, Unidentified, InsufficientContexts };
enum class Provenance { Oracle, Llm, HumanImport };

const char* to_string(Verdict v);
const char* to_string(Provenance p);
Verdict parse_verdict(const std::string& s);
Provenance parse_provenance(const std::string& s);

// Codes whose probability falls the most when the feature is zeroed.
struct CodeDrop {
    std::string code;
    double drop = 0;
    bool operator==(const CodeDrop&) const = default;
};

struct DictionaryEntry {
    std::size_t feature = 0;
    std::vector<ContextToken> contexts;  // ranked, at most kMaxContexts
    std::optional<std::string> summary;
    Verdict verdict = Verdict::InsufficientContexts;
    Provenance provenance = Provenance::Oracle;
    std::vector<CodeDrop> classes;

    // Throws std::invalid_argument if ordering, bounds or verdict rules are broken.
    void validate() const;
    bool operator==(const DictionaryEntry&) const = default;
};

Verdict context_verdict(std::size_t n_contexts);

struct DictionaryOptions {
    std::size_t window_radius = 10;
    std::vector<std::string> pad_tokens{"<pad>", "[PAD]"};
};

// Tokens within `radius` of `pos`, pads dropped, space-joined.
std::string context_window(std::span<const std::string> tokens, std::size_t pos, std::size_t radius,
                           const std::vector<std::string>& pad_tokens);
bool is_pad_token(const std::string& token, const std::vector<std::string>& pad_tokens);

class DictionaryBuilder {
public:
    DictionaryBuilder(const SaeParams& sae, DictionaryOptions options = {});

    void add_document(const std::string& doc, std::span<const std::string> tokens, const Matrix& embeddings);
    // Combines another shard built over a disjoint part of the corpus.
    void merge(const DictionaryBuilder& other);
    std::vector<DictionaryEntry> finish() const;

    std::size_t tokens_seen() const { return tokens_seen_; }

private:
    void offer(std::size_t feature, ContextToken&& ctx);

    const SaeParams* sae_;
    DictionaryOptions options_;
    std::vector<std::vector<ContextToken>> top_;
    std::size_t tokens_seen_ = 0;
};

std::vector<DictionaryEntry> build_dictionary(const SaeParams& sae, const std::vector<SynthNote>& corpus,
                                              const DictionaryOptions& options = {});

struct TopContexts {
    std::vector<ContextToken> contexts;
    bool shortfall = false;  // fewer than k stored
};

TopContexts top_contexts(const DictionaryEntry& entry, std::size_t k = kEvalContexts);

// Fills entry.classes with the top `k` codes by probability drop when the
// feature is zeroed in F_note, over the notes its contexts come from.
void attach_code_drops(std::vector<DictionaryEntry>& entries, const DilaModel& model,
                       const EmbeddingProvider& embeddings, std::size_t k = 3);

std::string dictionary_line(const DictionaryEntry& entry);
DictionaryEntry parse_dictionary_line(const std::string& line);
void save_dictionary(const std::string& path, const std::vector<DictionaryEntry>& entries);
std::vector<DictionaryEntry> load_dictionary(const std::string& path);

}  // namespace dila
