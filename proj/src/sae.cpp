#include "dila/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dila/random.hpp"

namespace dila {

void SaeParams::validate() const {
    const std::size_t d = w_enc.rows();
    const std::size_t m = w_enc.cols();
    if (b_enc.rows() != 1 || b_enc.cols() != m || w_dec.rows() != m || w_dec.cols() != d ||
        b_dec.rows() != 1 || b_dec.cols() != d) {
        throw ShapeError("SaeParams: inconsistent shapes w_enc " + w_enc.shape() + ", b_enc " + b_enc.shape() +
                         ", w_dec " + w_dec.shape() + ", b_dec " + b_dec.shape());
    }
    if (!w_enc.all_finite() || !b_enc.all_finite() || !w_dec.all_finite() || !b_dec.all_finite()) {
        throw NumericError("SaeParams: non-finite weights");
    }
}

SaeParams init_sae(std::size_t d, std::size_t m, const Matrix& first_batch, std::uint64_t seed) {
    if (d == 0 || m == 0) throw ShapeError("init_sae: zero dimension");
    SaeParams p;
    p.w_enc = Matrix(d, m);
    p.b_enc = Matrix(1, m);
    p.w_dec = Matrix(m, d);
    p.b_dec = Matrix(1, d);

    CounterRng enc_rng(seed, {hash_string("sae.w_enc")});
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& v : p.w_enc.values()) v = enc_rng.uniform(-bound, bound);

    CounterRng dec_rng(seed, {hash_string("sae.w_dec")});
    for (double& v : p.w_dec.values()) v = dec_rng.gaussian();
    normalize_decoder_rows(p);

    if (!first_batch.empty()) {
        if (first_batch.cols() != d) {
            throw ShapeError("init_sae: first batch has width " + std::to_string(first_batch.cols()) +
                             ", expected " + std::to_string(d));
        }
        p.b_dec = column_means(first_batch);
    }
    return p;
}

SaeForward sae_forward(const SaeParams& params, const Matrix& x) {
    if (x.cols() != params.input_dim()) {
        throw ShapeError("encode: input " + x.shape() + " does not match d=" + std::to_string(params.input_dim()));
    }
    SaeForward fwd;
    fwd.centered = sub_row(x, params.b_dec);
    fwd.pre = add_row(matmul(fwd.centered, params.w_enc), params.b_enc);
    fwd.features = relu(fwd.pre);
    fwd.recon = add_row(matmul(fwd.features, params.w_dec), params.b_dec);
    return fwd;
}

Matrix encode(const SaeParams& params, const Matrix& x) {
    if (x.cols() != params.input_dim()) {
        throw ShapeError("encode: input " + x.shape() + " does not match d=" + std::to_string(params.input_dim()));
    }
    return relu(add_row(matmul(sub_row(x, params.b_dec), params.w_enc), params.b_enc));
}

Matrix decode(const SaeParams& params, const Matrix& f) {
    if (f.cols() != params.dict_size()) {
        throw ShapeError("decode: features " + f.shape() + " do not match m=" + std::to_string(params.dict_size()));
    }
    return add_row(matmul(f, params.w_dec), params.b_dec);
}

namespace {

SaeLossBreakdown breakdown_from(const SaeForward& fwd, const Matrix& x, double lambda_l1, double lambda_l2) {
    const double n = static_cast<double>(x.rows());
    SaeLossBreakdown b;
    b.lambda_l1 = lambda_l1;
    b.lambda_l2 = lambda_l2;
    auto xv = x.values();
    auto rv = fwd.recon.values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double diff = xv[i] - rv[i];
        b.reconstruction += diff * diff;
    }
    for (double f : fwd.features.values()) {
        b.l1 += std::abs(f);
        b.l2 += f * f;
    }
    b.reconstruction /= n;
    b.l1 /= n;
    b.l2 /= n;
    b.total = b.reconstruction + lambda_l1 * b.l1 + lambda_l2 * b.l2;
    return b;
}

}  // namespace

SaeLossBreakdown sae_loss(const SaeParams& params, const Matrix& batch, double lambda_l1, double lambda_l2) {
    if (batch.rows() == 0) throw std::invalid_argument("sae_loss: empty batch");
    return breakdown_from(sae_forward(params, batch), batch, lambda_l1, lambda_l2);
}

void sae_loss_upstream(const SaeForward& fwd, const Matrix& x, double lambda_l1, double lambda_l2,
                       double weight, Matrix& d_recon, Matrix& d_features) {
    const double n = static_cast<double>(x.rows());
    auto xv = x.values();
    auto rv = fwd.recon.values();
    auto dr = d_recon.values();
    for (std::size_t i = 0; i < xv.size(); ++i) dr[i] += weight * 2.0 * (rv[i] - xv[i]) / n;
    auto fv = fwd.features.values();
    auto df = d_features.values();
    for (std::size_t i = 0; i < fv.size(); ++i) {
        if (fv[i] > 0.0) df[i] += weight * (lambda_l1 + 2.0 * lambda_l2 * fv[i]) / n;
    }
}

SaeGrads sae_backward(const SaeParams& params, const SaeForward& fwd, const Matrix& d_recon,
                      const Matrix& d_features) {
    SaeGrads g;
    g.w_dec = matmul_tn(fwd.features, d_recon);
    g.b_dec = column_sums(d_recon);

    Matrix d_pre = add(d_features, matmul_nt(d_recon, params.w_dec));
    auto pre = fwd.pre.values();
    auto dp = d_pre.values();
    for (std::size_t i = 0; i < dp.size(); ++i)
        if (!(pre[i] > 0.0)) dp[i] = 0.0;

    g.w_enc = matmul_tn(fwd.centered, d_pre);
    g.b_enc = column_sums(d_pre);
    // Centering path: x̄ = x - b_dec.
    const Matrix d_centered_sum = column_sums(matmul_nt(d_pre, params.w_enc));
    for (std::size_t j = 0; j < g.b_dec.cols(); ++j) g.b_dec(0, j) -= d_centered_sum(0, j);
    return g;
}

SaeGrads sae_grads(const SaeParams& params, const Matrix& batch, double lambda_l1, double lambda_l2) {
    if (batch.rows() == 0) throw std::invalid_argument("sae_grads: empty batch");
    const SaeForward fwd = sae_forward(params, batch);
    Matrix d_recon(batch.rows(), batch.cols());
    Matrix d_features(batch.rows(), params.dict_size());
    sae_loss_upstream(fwd, batch, lambda_l1, lambda_l2, 1.0, d_recon, d_features);
    SaeGrads g = sae_backward(params, fwd, d_recon, d_features);
    if (!g.w_enc.all_finite() || !g.b_enc.all_finite() || !g.w_dec.all_finite() || !g.b_dec.all_finite()) {
        throw NumericError("sae_grads: non-finite gradient");
    }
    return g;
}

void normalize_decoder_rows(SaeParams& params) {
    for (std::size_t i = 0; i < params.w_dec.rows(); ++i) {
        auto r = params.w_dec.row(i);
        const double norm = std::sqrt(dot(r, r));
        // Rows already unit-norm up to rounding are left bit-for-bit alone.
        if (norm > 0.0 && std::abs(norm - 1.0) > 1e-12)
            for (double& v : r) v /= norm;
    }
}

double mean_l0(const SaeParams& params, const Matrix& x, double threshold) {
    if (x.rows() == 0) return 0.0;
    const Matrix f = encode(params, x);
    std::size_t count = 0;
    for (double v : f.values())
        if (v > threshold) ++count;
    return static_cast<double>(count) / static_cast<double>(x.rows());
}

std::vector<std::size_t> active_features(const SaeParams& params, const Matrix& x, double threshold) {
    std::vector<bool> seen(params.dict_size(), false);
    if (x.rows() > 0) {
        const Matrix f = encode(params, x);
        for (std::size_t r = 0; r < f.rows(); ++r)
            for (std::size_t i = 0; i < f.cols(); ++i)
                if (f(r, i) > threshold) seen[i] = true;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < seen.size(); ++i)
        if (seen[i]) out.push_back(i);
    return out;
}

Matrix gather_rows(const Matrix& src, std::span<const std::size_t> idx) {
    Matrix out(idx.size(), src.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const auto from = src.row(idx[r]);
        std::copy(from.begin(), from.end(), out.row(r).begin());
    }
    return out;
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(seed, {hash_string("sae.shuffle"), epoch});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

}  // namespace

SaeTrainResult train_sae(SaeParams params, const Matrix& tokens, const SaeTrainConfig& config) {
    params.validate();
    if (tokens.rows() == 0) throw std::invalid_argument("train_sae: no training rows");
    if (tokens.cols() != params.input_dim()) {
        throw ShapeError("train_sae: token width " + std::to_string(tokens.cols()) + " != d=" +
                         std::to_string(params.input_dim()));
    }
    if (config.batch_size == 0) throw std::invalid_argument("train_sae: batch_size must be positive");

    const std::size_t per_epoch = (tokens.rows() + config.batch_size - 1) / config.batch_size;
    const std::uint64_t total = config.max_steps ? config.max_steps : per_epoch * config.epochs;
    const auto warmup = static_cast<std::uint64_t>(std::llround(config.warmup_fraction * static_cast<double>(total)));

    AdamWConfig opt = config.adamw;
    opt.lr = config.lr;
    AdamWState s_we(params.w_enc, opt), s_be(params.b_enc, opt), s_wd(params.w_dec, opt), s_bd(params.b_dec, opt);

    SaeTrainResult result;
    result.history.reserve(total);
    std::uint64_t step = 0;
    for (std::uint64_t epoch = 0; step < total; ++epoch) {
        const auto order = epoch_order(tokens.rows(), config.seed, epoch);
        for (std::size_t start = 0; start < order.size() && step < total; start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const Matrix batch = gather_rows(tokens, std::span(order).subspan(start, end - start));

            const SaeForward fwd = sae_forward(params, batch);
            const SaeLossBreakdown loss = breakdown_from(fwd, batch, config.lambda_l1, config.lambda_l2);
            if (!std::isfinite(loss.total)) {
                throw NumericError("train_sae: loss diverged at step " + std::to_string(step));
            }
            result.history.push_back(loss);

            Matrix d_recon(batch.rows(), batch.cols());
            Matrix d_features(batch.rows(), params.dict_size());
            sae_loss_upstream(fwd, batch, config.lambda_l1, config.lambda_l2, 1.0, d_recon, d_features);
            const SaeGrads g = sae_backward(params, fwd, d_recon, d_features);

            const double lr = linear_warmup_lr(std::min(step + 1, total), warmup, total, config.lr);
            for (AdamWState* s : {&s_we, &s_be, &s_wd, &s_bd}) s->hyper.lr = lr;
            adamw_step(params.w_enc, g.w_enc, s_we);
            adamw_step(params.b_enc, g.b_enc, s_be);
            adamw_step(params.w_dec, g.w_dec, s_wd);
            adamw_step(params.b_dec, g.b_dec, s_bd);
            normalize_decoder_rows(params);
            ++step;
        }
    }
    result.params = std::move(params);
    return result;
}

SaeTrainResult train_sae(std::size_t m, const Matrix& tokens, const SaeTrainConfig& config) {
    if (tokens.rows() == 0) throw std::invalid_argument("train_sae: no training rows");
    const auto order = epoch_order(tokens.rows(), config.seed, 0);
    const std::size_t first = std::min(tokens.rows(), std::max<std::size_t>(config.batch_size, 1));
    const Matrix first_batch = gather_rows(tokens, std::span(order).first(first));
    return train_sae(init_sae(tokens.cols(), m, first_batch, config.seed), tokens, config);
}

}  // namespace dila
