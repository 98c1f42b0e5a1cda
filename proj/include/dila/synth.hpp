#pragma once

// Planted-concept ground truth. A world fixes m* unit concept directions in
// R^d, a disjoint token vocabulary per concept, a pool of filler tokens and
// a concept→code map. Notes are token sequences whose concept tokens embed
// as amplitude·direction + noise and whose filler tokens embed as pure noise,
// so every downstream claim (recovery, contexts, labels) has an exact oracle.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "dila/model.hpp"
#include "dila/numerics.hpp"

namespace dila {

inline constexpr int kFillerTag = -1;

struct WorldOptions {
    std::size_t vocab_per_concept = 6;
    std::size_t filler_pool = 48;
    // Rejection threshold on pairwise |cos| between concept directions.
    double max_coherence = 0.5;
    // Gram-Schmidt orthonormal directions (requires m* <= d).
    bool orthogonal = false;
    // Concepts beyond the first c link to one random code with this probability.
    double extra_link_prob = 0.3;
    double min_amplitude = 0.75;
    double max_amplitude = 1.25;
};

struct PlantedWorld {
    std::size_t d = 0;
    double noise = 0;
    std::uint64_t seed = 0;
    Matrix directions;                              // m*×d, unit rows
    Matrix concept_code;                            // m*×c, nonnegative
    std::vector<std::string> concept_names;
    std::vector<std::vector<std::string>> vocab;    // per concept
    std::vector<std::vector<double>> amplitudes;    // per concept, per vocab token
    std::vector<std::string> filler;
    std::vector<std::string> code_ids;

    std::size_t num_concepts() const { return directions.rows(); }
    std::size_t num_codes() const { return concept_code.cols(); }

    // Token text -> concept index, or kFillerTag for filler/unknown tokens.
    int concept_of(const std::string& token) const;
    const std::unordered_map<std::string, std::pair<int, std::size_t>>& token_index() const;

    // Target vector for a set of present concepts: code j is positive when the
    // summed concept→code weight reaches 0.5.
    std::vector<double> targets_for(const std::vector<std::size_t>& concepts) const;

    // Per-token noise floor E‖noise‖² = d σ².
    double noise_floor() const { return static_cast<double>(d) * noise * noise; }

    void rebuild_index();

private:
    std::unordered_map<std::string, std::pair<int, std::size_t>> token_index_;
};

PlantedWorld gen_world(std::size_t d, std::size_t num_concepts, std::size_t num_codes, double noise,
                       std::uint64_t seed, const WorldOptions& options = {});

struct SynthNote {
    std::string id;
    std::vector<std::string> tokens;
    std::vector<int> tags;         // concept per token, kFillerTag for fillers
    Matrix embeddings;             // s×d
    std::vector<double> target;    // length c
    std::vector<std::size_t> concepts;
};

struct CorpusOptions {
    std::size_t min_concepts = 1;
    std::size_t max_concepts = 4;
    double concept_token_prob = 0.5;
    std::string id_prefix = "note-";
};

std::vector<SynthNote> gen_corpus(const PlantedWorld& world, std::size_t n_notes, std::size_t s_min,
                                  std::size_t s_max, std::uint64_t seed, const CorpusOptions& options = {});

// Deterministic embeddings for a token sequence keyed by (world seed, stream id, position).
Matrix embed_tokens(const PlantedWorld& world, const std::vector<std::string>& tokens, const std::string& stream_id);

struct CodeDescriptions {
    std::vector<CodeEntry> codes;
    std::vector<std::vector<std::string>> tokens;
    std::vector<Matrix> embeddings;
};

// Code j is described by the first tokens of its primary concept j.
CodeDescriptions code_descriptions(const PlantedWorld& world, std::size_t tokens_per_code = 3);

// Spurious training label: notes mentioning `concept` also get `code`.
struct LabelConfound {
    std::size_t concept_index = 0;
    std::size_t code = 0;
    double rate = 1.0;
};

// First concept beyond the primary ones with no link to some code, paired
// with the lowest such code.
LabelConfound pick_confound(const PlantedWorld& world);
void apply_label_confound(std::vector<SynthNote>& notes, const LabelConfound& confound, std::uint64_t seed);

std::vector<LabeledNote> to_labeled(const std::vector<SynthNote>& notes);

// Stacks every token row of the corpus.
Matrix stack_embeddings(const std::vector<SynthNote>& notes);

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual Matrix embed(const std::string& note_id) const = 0;
    virtual std::size_t dim() const = 0;
};

// Lookup table of note embeddings; backs both the synthetic corpus and EMB1 imports.
class TableEmbeddingProvider final : public EmbeddingProvider {
public:
    TableEmbeddingProvider(std::size_t d, std::vector<std::pair<std::string, Matrix>> entries);
    static TableEmbeddingProvider from_corpus(const std::vector<SynthNote>& notes);
    static TableEmbeddingProvider from_emb1(const std::string& path);

    Matrix embed(const std::string& note_id) const override;
    std::size_t dim() const override { return d_; }
    const std::vector<std::pair<std::string, Matrix>>& entries() const { return entries_; }

private:
    std::size_t d_;
    std::vector<std::pair<std::string, Matrix>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace dila
