#pragma once

// Elastic-net sparse autoencoder over token embeddings.
//
//   x̄ = x - b_dec
//   f = ReLU(x̄ W_enc + b_enc)
//   x̂ = f W_dec + b_dec
//   L = mean_rows ‖x - x̂‖² + λ1 · mean_rows ‖f‖₁ + λ2 · mean_rows ‖f‖₂²
//
// Rows of W_dec are the dictionary embeddings and are kept at unit norm by
// training.

#include <cstdint>
#include <vector>

#include "dila/numerics.hpp"

namespace dila {

struct SaeParams {
    Matrix w_enc;  // d×m
    Matrix b_enc;  // 1×m
    Matrix w_dec;  // m×d
    Matrix b_dec;  // 1×d

    std::size_t input_dim() const { return w_enc.rows(); }
    std::size_t dict_size() const { return w_enc.cols(); }

    // Throws ShapeError on inconsistent shapes, NumericError on non-finite weights.
    void validate() const;
    bool operator==(const SaeParams&) const = default;
};

// W_enc ~ U(±1/√d), W_dec rows random unit vectors, b_enc = 0,
// b_dec = column mean of first_batch (zero when first_batch is empty).
SaeParams init_sae(std::size_t d, std::size_t m, const Matrix& first_batch, std::uint64_t seed);

Matrix encode(const SaeParams& params, const Matrix& x);
Matrix decode(const SaeParams& params, const Matrix& f);

struct SaeLossBreakdown {
    double reconstruction = 0;
    double l1 = 0;
    double l2 = 0;
    double total = 0;
    double lambda_l1 = 0;
    double lambda_l2 = 0;
};

SaeLossBreakdown sae_loss(const SaeParams& params, const Matrix& batch, double lambda_l1, double lambda_l2);

struct SaeGrads {
    Matrix w_enc, b_enc, w_dec, b_dec;
};

SaeGrads sae_grads(const SaeParams& params, const Matrix& batch, double lambda_l1, double lambda_l2);

// Cached forward pass; shared with the attention head's backward pass.
struct SaeForward {
    Matrix centered;  // x̄
    Matrix pre;       // x̄ W_enc + b_enc
    Matrix features;  // f
    Matrix recon;     // x̂
};

SaeForward sae_forward(const SaeParams& params, const Matrix& x);

// Parameter gradients given upstream gradients w.r.t. x̂ and f. The ReLU
// subgradient at zero is zero.
SaeGrads sae_backward(const SaeParams& params, const SaeForward& fwd, const Matrix& d_recon,
                      const Matrix& d_features);

// Gradient of the elastic loss w.r.t. (x̂, f), scaled by `weight`.
void sae_loss_upstream(const SaeForward& fwd, const Matrix& x, double lambda_l1, double lambda_l2,
                       double weight, Matrix& d_recon, Matrix& d_features);

void normalize_decoder_rows(SaeParams& params);

double mean_l0(const SaeParams& params, const Matrix& x, double threshold = 0.0);

// Features with at least one activation above `threshold` over x.
std::vector<std::size_t> active_features(const SaeParams& params, const Matrix& x, double threshold = 1e-6);

struct SaeTrainConfig {
    double lr = 5e-5;
    double lambda_l1 = 1e-4;
    double lambda_l2 = 1e-5;
    std::size_t batch_size = 8;
    std::size_t epochs = 20;
    double warmup_fraction = 0.1;
    AdamWConfig adamw{};
    std::uint64_t seed = 1234;
    // 0 = epochs × batches_per_epoch.
    std::uint64_t max_steps = 0;
};

struct SaeTrainResult {
    SaeParams params;
    std::vector<SaeLossBreakdown> history;  // one entry per optimizer step
};

// Trains on the rows of `tokens` (one token embedding per row), shuffled
// each epoch. Throws NumericError naming the step if the loss diverges.
SaeTrainResult train_sae(SaeParams params, const Matrix& tokens, const SaeTrainConfig& config);

// Initializes from the first shuffled batch, then trains.
SaeTrainResult train_sae(std::size_t m, const Matrix& tokens, const SaeTrainConfig& config);

Matrix gather_rows(const Matrix& src, std::span<const std::size_t> idx);

}  // namespace dila
