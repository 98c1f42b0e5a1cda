#pragma once

// Dictionary label attention head.
//
//   F_note = encode(X_note)                 s×m
//   A_laat = softmax_over_rows(F A_ficd)    s×c, each code normalized over tokens
//   X_att  = A_laatᵀ X_note                 c×d
//   p_j    = sigmoid(w_j · X_att_j + b_j)
//
// Code j only ever reads column j of A_ficd and row j of the decision layer,
// so edits to one code cannot move another code's probability.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dila/numerics.hpp"
#include "dila/random.hpp"
#include "dila/sae.hpp"

namespace dila {

inline constexpr double kDefaultThreshold = 0.3;
inline constexpr double kBceClamp = 1e-7;

struct CodeEntry {
    std::string code;
    std::string description;
    bool operator==(const CodeEntry&) const = default;
};

struct DilaModel {
    SaeParams sae;
    Matrix a_ficd;      // m×c
    Matrix decision_w;  // c×d
    Matrix decision_b;  // 1×c
    std::vector<CodeEntry> codes;

    std::size_t num_codes() const { return a_ficd.cols(); }
    std::size_t input_dim() const { return sae.input_dim(); }
    std::size_t dict_size() const { return sae.dict_size(); }
    std::optional<std::size_t> code_index(const std::string& code) const;

    void validate() const;
    bool operator==(const DilaModel&) const = default;
};

// Column j = mean over description tokens of encode(description_embeddings[j]).
Matrix init_a_ficd(const SaeParams& sae, std::span<const Matrix> description_embeddings,
                   std::span<const CodeEntry> codes);

// Builds the stage-2 starting point: A_ficd from descriptions, decision
// weights ~ U(±1/√d), decision bias 0.
DilaModel make_model(SaeParams sae, std::vector<CodeEntry> codes, std::span<const Matrix> description_embeddings,
                     std::uint64_t seed);

struct Prediction {
    std::vector<double> probabilities;     // length c
    Matrix a_laat;                         // s×c
    Matrix f_note;                         // s×m
    std::vector<std::size_t> predicted;    // codes with probability >= threshold
    double threshold = kDefaultThreshold;
};

// Eval-mode forward pass.
Prediction forward(const DilaModel& model, const Matrix& x_note, double threshold = kDefaultThreshold);

// Train-mode forward pass: inverted dropout with `dropout_rate` on X_note.
Prediction forward_train(const DilaModel& model, const Matrix& x_note, double dropout_rate, CounterRng& rng,
                         double threshold = kDefaultThreshold);

// Forward pass with caller-supplied features in place of encode(x_note).
Prediction forward_with_features(const DilaModel& model, const Matrix& x_note, const Matrix& f_note,
                                 double threshold = kDefaultThreshold);

std::vector<std::size_t> predict(const DilaModel& model, const Matrix& x_note, double threshold = kDefaultThreshold);

// Mean over codes of binary cross entropy, probabilities clamped to [1e-7, 1-1e-7].
double bce_loss(std::span<const double> probabilities, std::span<const double> target);

struct CombinedLossBreakdown {
    double total = 0;
    double bce = 0;
    double saenc = 0;
    double lambda_saenc = 0;
    SaeLossBreakdown sae;
};

struct LossWeights {
    double lambda_saenc = 1e-6;
    double lambda_l1 = 1e-4;
    double lambda_l2 = 1e-5;
};

// λ_saenc · L_saenc(X_note) + L_BCE, eval mode.
CombinedLossBreakdown combined_loss(const DilaModel& model, const Matrix& x_note, std::span<const double> target,
                                    const LossWeights& weights);

struct DilaGrads {
    SaeGrads sae;
    Matrix a_ficd;
    Matrix decision_w;
    Matrix decision_b;
};

DilaGrads zero_grads(const DilaModel& model);

// Accumulates `scale` × ∂combined_loss/∂θ into `grads`; x_note is used as
// given (apply dropout beforehand for training). Returns the loss.
CombinedLossBreakdown accumulate_grads(const DilaModel& model, const Matrix& x_note, std::span<const double> target,
                                       const LossWeights& weights, double scale, DilaGrads& grads);

DilaGrads combined_grads(const DilaModel& model, const Matrix& x_note, std::span<const double> target,
                         const LossWeights& weights);

struct LabeledNote {
    std::string id;
    Matrix embeddings;            // s×d
    std::vector<double> target;   // length c, entries 0/1
};

struct DilaTrainConfig {
    double lr = 5e-5;
    std::size_t batch_size = 8;
    std::size_t epochs = 20;
    double dropout = 0.2;
    double threshold = kDefaultThreshold;
    double warmup_fraction = 0.1;
    LossWeights weights{};
    AdamWConfig adamw{};
    std::uint64_t seed = 1234;
};

struct DilaEpochStats {
    std::size_t epoch = 0;
    double mean_loss = 0;
    double mean_bce = 0;
    double train_micro_f1 = 0;
    std::optional<double> eval_micro_f1;
    std::size_t negative_a_ficd = 0;   // entries of A_ficd below zero after the epoch
    double min_a_ficd = 0;
};

struct DilaTrainResult {
    DilaModel model;
    std::vector<DilaEpochStats> history;
};

// End-to-end stage-2 training of every parameter with AdamW + linear warmup.
DilaTrainResult train_dila(DilaModel model, std::span<const LabeledNote> train, const DilaTrainConfig& config,
                           std::span<const LabeledNote> eval = {});

// Dense label attention baseline: A = softmax_over_rows(tanh(X W_z) W_c).
struct DenseLaatBaseline {
    Matrix w_z;         // d×d_a
    Matrix w_c;         // d_a×c
    Matrix decision_w;  // c×d
    Matrix decision_b;  // 1×c
};

DenseLaatBaseline make_dense_baseline(std::size_t d, std::size_t d_a, std::size_t c, std::uint64_t seed);

struct DensePrediction {
    std::vector<double> probabilities;
    Matrix a_laat;  // s×c
    Matrix z;       // s×d_a
};

DensePrediction dense_laat_forward(const DenseLaatBaseline& baseline, const Matrix& x_note);

}  // namespace dila
