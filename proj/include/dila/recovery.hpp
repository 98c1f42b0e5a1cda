#pragma once

// Scoring a trained SAE and its dictionary against a planted world.

#include <cstddef>
#include <optional>
#include <vector>

#include "dila/dictionary.hpp"
#include "dila/sae.hpp"
#include "dila/synth.hpp"

namespace dila {

struct Recovery {
    std::vector<std::optional<std::size_t>> feature_concept;  // best planted match with |cos| >= min_cos
    std::vector<double> concept_best_cos;                     // best |cos| over decoder rows, per concept
    std::size_t directions_recovered = 0;                     // concepts with best |cos| >= min_cos
    double min_cos = 0;
};

Recovery match_features(const SaeParams& sae, const PlantedWorld& world, double min_cos = 0.9);

// Mean over rows of ||x - decode(encode(x))||².
double reconstruction_mse(const SaeParams& sae, const Matrix& x);

struct Purity {
    std::size_t recovered = 0;  // matched features with a dictionary entry
    std::size_t pure = 0;       // of those, top-4 contexts all from the matched concept
    double fraction() const { return recovered == 0 ? 0.0 : static_cast<double>(pure) / static_cast<double>(recovered); }
};

Purity context_purity(const std::vector<DictionaryEntry>& entries, const Recovery& recovery, const PlantedWorld& world);

}  // namespace dila
