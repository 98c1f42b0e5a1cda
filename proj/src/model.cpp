#include "dila/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dila/metrics.hpp"

namespace dila {

std::optional<std::size_t> DilaModel::code_index(const std::string& code) const {
    for (std::size_t j = 0; j < codes.size(); ++j)
        if (codes[j].code == code) return j;
    return std::nullopt;
}

void DilaModel::validate() const {
    sae.validate();
    const std::size_t m = sae.dict_size();
    const std::size_t d = sae.input_dim();
    const std::size_t c = a_ficd.cols();
    if (a_ficd.rows() != m || decision_w.rows() != c || decision_w.cols() != d || decision_b.rows() != 1 ||
        decision_b.cols() != c) {
        throw ShapeError("DilaModel: inconsistent shapes a_ficd " + a_ficd.shape() + ", decision_w " +
                         decision_w.shape() + ", decision_b " + decision_b.shape() + " for d=" + std::to_string(d) +
                         " m=" + std::to_string(m));
    }
    if (codes.size() != c) {
        throw ShapeError("DilaModel: code table has " + std::to_string(codes.size()) + " entries, A_ficd has " +
                         std::to_string(c) + " columns");
    }
    if (!a_ficd.all_finite() || !decision_w.all_finite() || !decision_b.all_finite()) {
        throw NumericError("DilaModel: non-finite weights");
    }
}

Matrix init_a_ficd(const SaeParams& sae, std::span<const Matrix> description_embeddings,
                   std::span<const CodeEntry> codes) {
    if (description_embeddings.size() != codes.size()) {
        throw ShapeError("init_a_ficd: " + std::to_string(description_embeddings.size()) + " descriptions for " +
                         std::to_string(codes.size()) + " codes");
    }
    Matrix a(sae.dict_size(), codes.size());
    for (std::size_t j = 0; j < codes.size(); ++j) {
        const Matrix& desc = description_embeddings[j];
        if (desc.rows() == 0) {
            throw std::invalid_argument("init_a_ficd: code '" + codes[j].code + "' has an empty description");
        }
        const Matrix pooled = column_means(encode(sae, desc));
        for (std::size_t i = 0; i < a.rows(); ++i) a(i, j) = pooled(0, i);
    }
    return a;
}

DilaModel make_model(SaeParams sae, std::vector<CodeEntry> codes, std::span<const Matrix> description_embeddings,
                     std::uint64_t seed) {
    DilaModel model;
    model.a_ficd = init_a_ficd(sae, description_embeddings, codes);
    const std::size_t d = sae.input_dim();
    const std::size_t c = codes.size();
    model.decision_w = Matrix(c, d);
    CounterRng rng(seed, {hash_string("dila.decision_w")});
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& v : model.decision_w.values()) v = rng.uniform(-bound, bound);
    model.decision_b = Matrix(1, c);
    model.sae = std::move(sae);
    model.codes = std::move(codes);
    model.validate();
    return model;
}

namespace {

struct HeadForward {
    Matrix logits;  // F A_ficd
    Matrix a_laat;
    Matrix x_att;
    std::vector<double> probabilities;
};

HeadForward head_forward(const DilaModel& model, const Matrix& x, const Matrix& f) {
    if (x.rows() == 0) throw ShapeError("forward: note has no tokens");
    HeadForward h;
    h.logits = matmul(f, model.a_ficd);
    h.a_laat = softmax_over_rows(h.logits);
    h.x_att = matmul_tn(h.a_laat, x);
    const std::size_t c = model.num_codes();
    h.probabilities.resize(c);
    for (std::size_t j = 0; j < c; ++j) {
        h.probabilities[j] = sigmoid(dot(model.decision_w.row(j), h.x_att.row(j)) + model.decision_b(0, j));
    }
    return h;
}

Prediction to_prediction(HeadForward&& h, Matrix&& f, double threshold) {
    Prediction p;
    p.threshold = threshold;
    p.probabilities = std::move(h.probabilities);
    p.a_laat = std::move(h.a_laat);
    p.f_note = std::move(f);
    for (std::size_t j = 0; j < p.probabilities.size(); ++j)
        if (p.probabilities[j] >= threshold) p.predicted.push_back(j);
    return p;
}

Matrix apply_dropout(const Matrix& x, double rate, CounterRng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) return Matrix(x.rows(), x.cols());
    Matrix out = x;
    const double keep_scale = 1.0 / (1.0 - rate);
    for (double& v : out.values()) v = rng.uniform() < rate ? 0.0 : v * keep_scale;
    return out;
}

void check_input(const DilaModel& model, const Matrix& x) {
    if (x.cols() != model.input_dim()) {
        throw ShapeError("forward: note " + x.shape() + " does not match d=" + std::to_string(model.input_dim()));
    }
}

}  // namespace

Prediction forward(const DilaModel& model, const Matrix& x_note, double threshold) {
    check_input(model, x_note);
    Matrix f = encode(model.sae, x_note);
    return to_prediction(head_forward(model, x_note, f), std::move(f), threshold);
}

Prediction forward_train(const DilaModel& model, const Matrix& x_note, double dropout_rate, CounterRng& rng,
                         double threshold) {
    check_input(model, x_note);
    const Matrix x = apply_dropout(x_note, dropout_rate, rng);
    Matrix f = encode(model.sae, x);
    return to_prediction(head_forward(model, x, f), std::move(f), threshold);
}

Prediction forward_with_features(const DilaModel& model, const Matrix& x_note, const Matrix& f_note,
                                 double threshold) {
    check_input(model, x_note);
    if (f_note.rows() != x_note.rows() || f_note.cols() != model.dict_size()) {
        throw ShapeError("forward_with_features: features " + f_note.shape() + " for note " + x_note.shape());
    }
    Matrix f = f_note;
    return to_prediction(head_forward(model, x_note, f), std::move(f), threshold);
}

std::vector<std::size_t> predict(const DilaModel& model, const Matrix& x_note, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw std::invalid_argument("predict: threshold must lie in (0, 1)");
    }
    return forward(model, x_note, threshold).predicted;
}

double bce_loss(std::span<const double> probabilities, std::span<const double> target) {
    if (probabilities.size() != target.size()) throw ShapeError("bce_loss: length mismatch");
    if (probabilities.empty()) return 0.0;
    double sum = 0.0;
    for (std::size_t j = 0; j < probabilities.size(); ++j) {
        const double p = std::clamp(probabilities[j], kBceClamp, 1.0 - kBceClamp);
        const double y = target[j];
        sum -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    }
    return sum / static_cast<double>(probabilities.size());
}

DilaGrads zero_grads(const DilaModel& model) {
    DilaGrads g;
    g.sae.w_enc = Matrix(model.sae.w_enc.rows(), model.sae.w_enc.cols());
    g.sae.b_enc = Matrix(1, model.sae.b_enc.cols());
    g.sae.w_dec = Matrix(model.sae.w_dec.rows(), model.sae.w_dec.cols());
    g.sae.b_dec = Matrix(1, model.sae.b_dec.cols());
    g.a_ficd = Matrix(model.a_ficd.rows(), model.a_ficd.cols());
    g.decision_w = Matrix(model.decision_w.rows(), model.decision_w.cols());
    g.decision_b = Matrix(1, model.decision_b.cols());
    return g;
}

namespace {

void add_into(Matrix& acc, const Matrix& g) {
    auto a = acc.values();
    auto v = g.values();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += v[i];
}

CombinedLossBreakdown loss_from(const SaeForward& sfwd, const HeadForward& h, const Matrix& x,
                                std::span<const double> target, const LossWeights& w) {
    CombinedLossBreakdown out;
    const double n = static_cast<double>(x.rows());
    SaeLossBreakdown& s = out.sae;
    s.lambda_l1 = w.lambda_l1;
    s.lambda_l2 = w.lambda_l2;
    auto xv = x.values();
    auto rv = sfwd.recon.values();
    for (std::size_t i = 0; i < xv.size(); ++i) s.reconstruction += (xv[i] - rv[i]) * (xv[i] - rv[i]);
    for (double f : sfwd.features.values()) {
        s.l1 += std::abs(f);
        s.l2 += f * f;
    }
    s.reconstruction /= n;
    s.l1 /= n;
    s.l2 /= n;
    s.total = s.reconstruction + w.lambda_l1 * s.l1 + w.lambda_l2 * s.l2;
    out.saenc = s.total;
    out.lambda_saenc = w.lambda_saenc;
    out.bce = bce_loss(h.probabilities, target);
    out.total = w.lambda_saenc * out.saenc + out.bce;
    return out;
}

}  // namespace

CombinedLossBreakdown combined_loss(const DilaModel& model, const Matrix& x_note, std::span<const double> target,
                                    const LossWeights& weights) {
    check_input(model, x_note);
    if (target.size() != model.num_codes()) throw ShapeError("combined_loss: target length mismatch");
    const SaeForward sfwd = sae_forward(model.sae, x_note);
    const HeadForward h = head_forward(model, x_note, sfwd.features);
    return loss_from(sfwd, h, x_note, target, weights);
}

CombinedLossBreakdown accumulate_grads(const DilaModel& model, const Matrix& x_note, std::span<const double> target,
                                       const LossWeights& weights, double scale_by, DilaGrads& grads) {
    check_input(model, x_note);
    const std::size_t c = model.num_codes();
    if (target.size() != c) throw ShapeError("accumulate_grads: target length mismatch");
    const SaeForward sfwd = sae_forward(model.sae, x_note);
    const HeadForward h = head_forward(model, x_note, sfwd.features);
    const CombinedLossBreakdown loss = loss_from(sfwd, h, x_note, target, weights);

    // BCE -> scores.
    Matrix d_xatt(c, x_note.cols());
    for (std::size_t j = 0; j < c; ++j) {
        const double p = h.probabilities[j];
        double dz = 0.0;
        if (p > kBceClamp && p < 1.0 - kBceClamp) dz = scale_by * (p - target[j]) / static_cast<double>(c);
        grads.decision_b(0, j) += dz;
        auto gw = grads.decision_w.row(j);
        const auto xa = h.x_att.row(j);
        const auto w = model.decision_w.row(j);
        auto dxa = d_xatt.row(j);
        for (std::size_t k = 0; k < gw.size(); ++k) {
            gw[k] += dz * xa[k];
            dxa[k] = dz * w[k];
        }
    }

    // X_att = A_laatᵀ X  ->  dA_laat = X dX_attᵀ.
    const Matrix d_alaat = matmul_nt(x_note, d_xatt);
    // Column softmax backward.
    Matrix d_logits(h.a_laat.rows(), c);
    for (std::size_t j = 0; j < c; ++j) {
        double inner = 0.0;
        for (std::size_t t = 0; t < h.a_laat.rows(); ++t) inner += h.a_laat(t, j) * d_alaat(t, j);
        for (std::size_t t = 0; t < h.a_laat.rows(); ++t) d_logits(t, j) = h.a_laat(t, j) * (d_alaat(t, j) - inner);
    }
    add_into(grads.a_ficd, matmul_tn(sfwd.features, d_logits));

    Matrix d_features = matmul_nt(d_logits, model.a_ficd);
    Matrix d_recon(x_note.rows(), x_note.cols());
    sae_loss_upstream(sfwd, x_note, weights.lambda_l1, weights.lambda_l2, scale_by * weights.lambda_saenc, d_recon,
                      d_features);
    const SaeGrads sg = sae_backward(model.sae, sfwd, d_recon, d_features);
    add_into(grads.sae.w_enc, sg.w_enc);
    add_into(grads.sae.b_enc, sg.b_enc);
    add_into(grads.sae.w_dec, sg.w_dec);
    add_into(grads.sae.b_dec, sg.b_dec);
    return loss;
}

DilaGrads combined_grads(const DilaModel& model, const Matrix& x_note, std::span<const double> target,
                         const LossWeights& weights) {
    DilaGrads g = zero_grads(model);
    accumulate_grads(model, x_note, target, weights, 1.0, g);
    return g;
}

DilaTrainResult train_dila(DilaModel model, std::span<const LabeledNote> train, const DilaTrainConfig& config,
                           std::span<const LabeledNote> eval) {
    model.validate();
    if (train.empty()) throw std::invalid_argument("train_dila: empty training set");
    if (config.batch_size == 0) throw std::invalid_argument("train_dila: batch_size must be positive");
    for (const auto& note : train) {
        if (note.target.size() != model.num_codes()) {
            throw ShapeError("train_dila: note '" + note.id + "' has " + std::to_string(note.target.size()) +
                             " targets, model has " + std::to_string(model.num_codes()) + " codes");
        }
    }

    const std::size_t per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
    const std::uint64_t total = per_epoch * config.epochs;
    const auto warmup = static_cast<std::uint64_t>(std::llround(config.warmup_fraction * static_cast<double>(total)));

    AdamWConfig opt = config.adamw;
    opt.lr = config.lr;
    AdamWState s_we(model.sae.w_enc, opt), s_be(model.sae.b_enc, opt), s_wd(model.sae.w_dec, opt),
        s_bd(model.sae.b_dec, opt), s_a(model.a_ficd, opt), s_w(model.decision_w, opt), s_b(model.decision_b, opt);
    AdamWState* states[] = {&s_we, &s_be, &s_wd, &s_bd, &s_a, &s_w, &s_b};

    const auto micro_f1_on = [&](std::span<const LabeledNote> notes) {
        Matrix scores(notes.size(), model.num_codes());
        Matrix targets(notes.size(), model.num_codes());
        for (std::size_t n = 0; n < notes.size(); ++n) {
            const Prediction p = forward(model, notes[n].embeddings, config.threshold);
            std::copy(p.probabilities.begin(), p.probabilities.end(), scores.row(n).begin());
            std::copy(notes[n].target.begin(), notes[n].target.end(), targets.row(n).begin());
        }
        return evaluate(scores, targets, config.threshold).micro_f1;
    };

    DilaTrainResult result;
    std::uint64_t step = 0;
    std::vector<std::size_t> order(train.size());
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        CounterRng shuffle(config.seed, {hash_string("dila.shuffle"), epoch});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

        double loss_sum = 0.0, bce_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const double scale_by = 1.0 / static_cast<double>(end - start);
            DilaGrads g = zero_grads(model);
            for (std::size_t k = start; k < end; ++k) {
                const LabeledNote& note = train[order[k]];
                CounterRng drop(config.seed, {hash_string("dila.dropout"), epoch, order[k]});
                const Matrix x = apply_dropout(note.embeddings, config.dropout, drop);
                const CombinedLossBreakdown loss = accumulate_grads(model, x, note.target, config.weights, scale_by, g);
                if (!std::isfinite(loss.total)) {
                    throw NumericError("train_dila: loss diverged at step " + std::to_string(step));
                }
                loss_sum += loss.total;
                bce_sum += loss.bce;
            }
            const double lr = linear_warmup_lr(std::min(step + 1, total), warmup, total, config.lr);
            for (AdamWState* s : states) s->hyper.lr = lr;
            adamw_step(model.sae.w_enc, g.sae.w_enc, s_we);
            adamw_step(model.sae.b_enc, g.sae.b_enc, s_be);
            adamw_step(model.sae.w_dec, g.sae.w_dec, s_wd);
            adamw_step(model.sae.b_dec, g.sae.b_dec, s_bd);
            adamw_step(model.a_ficd, g.a_ficd, s_a);
            adamw_step(model.decision_w, g.decision_w, s_w);
            adamw_step(model.decision_b, g.decision_b, s_b);
            normalize_decoder_rows(model.sae);
            ++step;
        }

        DilaEpochStats stats;
        stats.epoch = epoch;
        stats.mean_loss = loss_sum / static_cast<double>(train.size());
        stats.mean_bce = bce_sum / static_cast<double>(train.size());
        stats.train_micro_f1 = micro_f1_on(train);
        if (!eval.empty()) stats.eval_micro_f1 = micro_f1_on(eval);
        stats.min_a_ficd = model.a_ficd.empty() ? 0.0 : *std::min_element(model.a_ficd.values().begin(),
                                                                           model.a_ficd.values().end());
        stats.negative_a_ficd = static_cast<std::size_t>(std::count_if(
            model.a_ficd.values().begin(), model.a_ficd.values().end(), [](double v) { return v < 0.0; }));
        result.history.push_back(stats);
    }
    result.model = std::move(model);
    return result;
}

DenseLaatBaseline make_dense_baseline(std::size_t d, std::size_t d_a, std::size_t c, std::uint64_t seed) {
    DenseLaatBaseline b;
    b.w_z = Matrix(d, d_a);
    b.w_c = Matrix(d_a, c);
    b.decision_w = Matrix(c, d);
    b.decision_b = Matrix(1, c);
    CounterRng rng(seed, {hash_string("laat")});
    const double bz = 1.0 / std::sqrt(static_cast<double>(d));
    const double bc = 1.0 / std::sqrt(static_cast<double>(d_a));
    for (double& v : b.w_z.values()) v = rng.uniform(-bz, bz);
    for (double& v : b.w_c.values()) v = rng.uniform(-bc, bc);
    for (double& v : b.decision_w.values()) v = rng.uniform(-bz, bz);
    return b;
}

DensePrediction dense_laat_forward(const DenseLaatBaseline& baseline, const Matrix& x_note) {
    if (x_note.rows() == 0) throw ShapeError("dense_laat_forward: note has no tokens");
    if (x_note.cols() != baseline.w_z.rows()) {
        throw ShapeError("dense_laat_forward: note " + x_note.shape() + " vs W_z " + baseline.w_z.shape());
    }
    DensePrediction out;
    out.z = matmul(x_note, baseline.w_z);
    for (double& v : out.z.values()) v = std::tanh(v);
    out.a_laat = softmax_over_rows(matmul(out.z, baseline.w_c));
    const Matrix x_att = matmul_tn(out.a_laat, x_note);
    const std::size_t c = baseline.w_c.cols();
    out.probabilities.resize(c);
    for (std::size_t j = 0; j < c; ++j) {
        out.probabilities[j] = sigmoid(dot(baseline.decision_w.row(j), x_att.row(j)) + baseline.decision_b(0, j));
    }
    return out;
}

}  // namespace dila
