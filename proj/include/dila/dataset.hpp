#pragma once

// A dataset directory as written by `dila synth-gen` (or assembled by hand
// for imported corpora):
//
//   corpus.jsonl        {"id", "tokens", "tags", "codes"} per line
//   embeddings.emb1     note embeddings keyed by id
//   codes.json          ordered code table [{"code", "description"}]
//   descriptions.emb1   description-token embeddings keyed by code id
//   world.json          planted world (synthetic data only)
//   confound.json       planted label confound, if any

#include <optional>
#include <string>
#include <vector>

#include "dila/dictionary.hpp"
#include "dila/model.hpp"
#include "dila/synth.hpp"

namespace dila {

struct CorpusRecord {
    std::string id;
    std::vector<std::string> tokens;
    std::vector<int> tags;            // empty for imported corpora
    std::vector<std::string> codes;   // positive code ids
};

std::string corpus_record_line(const CorpusRecord& record);
void write_corpus_jsonl(const std::string& path, const std::vector<CorpusRecord>& records);
std::vector<CorpusRecord> read_corpus_jsonl(const std::string& path);
std::vector<CorpusRecord> to_records(const std::vector<SynthNote>& notes, const PlantedWorld& world);

void save_world(const std::string& path, const PlantedWorld& world);
PlantedWorld load_world(const std::string& path);

void save_confound(const std::string& path, const LabelConfound& confound);
LabelConfound load_confound(const std::string& path);

void save_code_table(const std::string& path, const std::vector<CodeEntry>& codes);
std::vector<CodeEntry> load_code_table(const std::string& path);

struct Dataset {
    std::string dir;
    std::vector<CorpusRecord> records;
    std::vector<CodeEntry> codes;
    std::vector<Matrix> description_embeddings;   // aligned with codes
    std::optional<TableEmbeddingProvider> embeddings;
    std::optional<PlantedWorld> world;
    std::optional<LabelConfound> confound;

    std::vector<double> target_of(const CorpusRecord& record) const;
    LabeledNote labeled(std::size_t index) const;
    std::vector<LabeledNote> labeled_range(std::size_t begin, std::size_t end) const;
    // Every note's token rows, stacked.
    Matrix all_token_rows() const;
    // Train notes are the first (1 - eval_fraction) of the corpus, eval the rest.
    std::size_t split_point(double eval_fraction) const;
    std::optional<std::size_t> find(const std::string& note_id) const;
};

void save_dataset(const std::string& dir, const PlantedWorld& world, const std::vector<SynthNote>& notes);
Dataset load_dataset(const std::string& dir);

// Dictionary over notes [begin, end) of the corpus.
std::vector<DictionaryEntry> build_dictionary(const SaeParams& sae, const Dataset& dataset, std::size_t begin,
                                              std::size_t end, const DictionaryOptions& options = {});

}  // namespace dila
