#pragma once

// Interventions on a trained model: zeroing feature→code weights, perturbing
// the tokens a code attends to, and persistent weight edits for debugging.
// Every operation works on copies; the input model is never modified.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dila/dictionary.hpp"
#include "dila/model.hpp"
#include "dila/synth.hpp"

namespace dila {

enum class Intervention { WeightAblate, TokenAblate, TokenNoise, TokenReplace, FeatureCodeEdit };
enum class TokenMode { Ablate, Noise, Replace };

const char* to_string(Intervention kind);
TokenMode parse_token_mode(const std::string& s);

struct AblationReport {
    std::string note_id;
    std::size_t code = 0;
    std::string code_id;
    Intervention kind = Intervention::WeightAblate;
    std::vector<double> before;
    std::vector<double> after;
    std::vector<double> delta;      // after - before
    double target_before = 0;
    double target_after = 0;
    double other_abs_delta = 0;     // Σ|Δ| over codes ≠ code
    double duration_ms = 0;
    std::vector<std::size_t> tokens;    // perturbed token positions
    std::vector<std::size_t> features;  // features whose weight was zeroed
    bool noop = false;                  // nothing to intervene on
    bool degenerate = false;            // intervention would leave an empty note

    // Throws std::logic_error if deltas disagree with before/after beyond 1e-12.
    void validate() const;
};

// Linear-interpolated sample quantile of `values` (sorted copy), q in [0, 1].
double sample_quantile(std::vector<double> values, double q);

// Token positions whose attention to `code` is strictly above the column's
// `q` quantile.
std::vector<std::size_t> relevant_tokens(const Prediction& prediction, std::size_t code, double q = 0.95);

// Zeroes A_ficd[i, code] for every feature active anywhere in the note.
AblationReport ablate_code_weights(const DilaModel& model, const std::string& note_id, const Matrix& x_note,
                                   std::size_t code);

struct TokenPerturbOptions {
    std::optional<double> sigma;  // default: per-dimension std of the note's embeddings
    Matrix replacement_pool;      // k×d rows used by Replace
    std::uint64_t seed = 0;
};

AblationReport token_perturb(const DilaModel& model, const std::string& note_id, const Matrix& x_note,
                             std::size_t code, TokenMode mode, const TokenPerturbOptions& options = {});
// Same with an explicit token set instead of relevant_tokens.
AblationReport token_perturb(const DilaModel& model, const std::string& note_id, const Matrix& x_note,
                             std::size_t code, TokenMode mode, const std::vector<std::size_t>& tokens,
                             const TokenPerturbOptions& options);

// Filler-token embeddings of a planted world, for Replace.
Matrix filler_replacement_pool(const PlantedWorld& world);

struct EditSet {
    std::vector<std::pair<std::size_t, std::size_t>> edits;  // (feature, code)
    std::string note;

    bool contains(std::size_t feature, std::size_t code) const;
    // Returns false if already present / absent.
    bool add(std::size_t feature, std::size_t code);
    bool remove(std::size_t feature, std::size_t code);
    std::vector<std::size_t> affected_codes() const;
    // Throws std::out_of_range or std::invalid_argument on bad or duplicate positions.
    void validate(std::size_t dict_size, std::size_t num_codes) const;
    bool operator==(const EditSet&) const = default;
};

DilaModel apply_edit(const DilaModel& model, const EditSet& edits);

// Majority planted concept among an entry's top-4 context tokens, if any.
std::optional<std::size_t> entry_concept(const DictionaryEntry& entry, const PlantedWorld& world);

// Plants the confound's mis-wired weights before stage-2 training: sets
// A_ficd[i, code] = weight for every feature whose dictionary entry is
// dominated by the confound concept. Returns the features touched.
std::vector<std::size_t> plant_miswire(DilaModel& model, const std::vector<DictionaryEntry>& dictionary,
                                       const PlantedWorld& world, const LabelConfound& confound,
                                       double weight = 5.0);

// The debugging repair for a label confound: zero the confounded code's
// weight for every feature that links positively to it and whose top-4
// dictionary contexts include the concept.
EditSet confound_repair(const DilaModel& model, const std::vector<DictionaryEntry>& dictionary,
                        const PlantedWorld& world, const LabelConfound& confound);

std::string edit_set_json(const EditSet& edits);
EditSet parse_edit_set(const std::string& text);
EditSet load_edit_set(const std::string& path);
void save_edit_set(const std::string& path, const EditSet& edits);
std::string edit_log_line(const EditSet& edits, std::uint64_t base_fingerprint, std::uint64_t edited_fingerprint);

// FNV-1a over every parameter's bit pattern and the code table.
std::uint64_t model_fingerprint(const DilaModel& model);

struct TimingStat {
    double mean_ms = 0;
    double stddev_ms = 0;
    double min_ms = 0;
    double max_ms = 0;
};

struct TimingReport {
    TimingStat f_note;
    TimingStat a_laat;
    TimingStat a_ficd_read;
    std::size_t repeats = 0;
    std::size_t tokens = 0;
};

TimingReport measure_timing(const DilaModel& model, const Matrix& x_note, std::size_t repeats = 10);

std::string report_json(const AblationReport& report, int indent = -1);
std::string timing_json(const TimingReport& report, int indent = -1);

}  // namespace dila
