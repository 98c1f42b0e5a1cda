// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "confound_fixture.hpp"
#include "dila/ablation.hpp"
#include "dila/dataset.hpp"
#include "dila/dictionary.hpp"
#include "dila/interpret.hpp"
#include "dila/metrics.hpp"
#include "dila/model.hpp"
#include "dila/recovery.hpp"
#include "dila/sae.hpp"
#include "dila/synth.hpp"
#include "metric_fixtures.hpp"
#include "oracles.hpp"
#include "tmpdir.hpp"

using namespace dila;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    std::string name;
    double time_limit_s;
    std::function<Outcome()> check;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// ---- shared fixtures -------------------------------------------------------

SaeTrainConfig stage1_config() {
    SaeTrainConfig c;
    c.lr = 1e-3;
    c.lambda_l1 = 0.1;
    c.batch_size = 64;
    c.epochs = 5;
    return c;
}

Dataset to_dataset(const PlantedWorld& world, const std::vector<SynthNote>& notes) {
    testing::TempDir dir;
    save_dataset(dir.str(), world, notes);
    return load_dataset(dir.str());
}

// c=8 separable task shared by the end-to-end, locality, identification and
// timing criteria.
struct EndToEnd {
    PlantedWorld world;
    std::vector<SynthNote> corpus;
    std::vector<LabeledNote> train, eval;
    SaeParams sae;
    DilaModel model;
    EvalResult result;
    std::size_t epochs = 0;
};

const EndToEnd& end_to_end() {
    static const EndToEnd e = [] {
        EndToEnd e;
        e.world = gen_world(16, 16, 8, 0.05, 7);
        e.corpus = gen_corpus(e.world, 1000, 16, 32, 11);
        const auto labeled = to_labeled(e.corpus);
        e.train.assign(labeled.begin(), labeled.begin() + 800);
        e.eval.assign(labeled.begin() + 800, labeled.end());
        const std::vector<SynthNote> train_notes(e.corpus.begin(), e.corpus.begin() + 800);
        e.sae = train_sae(64, stack_embeddings(train_notes), stage1_config()).params;
        const CodeDescriptions desc = code_descriptions(e.world);
        DilaTrainConfig cfg;
        cfg.lr = 3e-3;
        const DilaTrainResult r = train_dila(make_model(e.sae, desc.codes, desc.embeddings, 1234), e.train, cfg);
        e.model = r.model;
        e.epochs = r.history.size();
        e.result = evaluate_model(e.model, e.eval, cfg.threshold);
        return e;
    }();
    return e;
}

// ---- criteria --------------------------------------------------------------

bool near_kink(const SaeParams& p, const Matrix& x) {
    for (std::size_t t = 0; t < x.rows(); ++t)
        for (std::size_t i = 0; i < p.dict_size(); ++i) {
            double v = p.b_enc(0, i);
            for (std::size_t k = 0; k < x.cols(); ++k) v += (x(t, k) - p.b_dec(0, k)) * p.w_enc(k, i);
            if (std::abs(v) < 1e-3) return true;
        }
    return false;
}

double rel_error(const Matrix& analytic, const Matrix& numeric) {
    return oracle::max_abs_diff(analytic, numeric) / std::max(1.0, oracle::max_abs(numeric));
}

Outcome gradients() {
    oracle::Gen g(2024);
    double worst = 0;
    std::size_t sae_checked = 0, dila_checked = 0;
    while (sae_checked < 25) {
        const std::size_t d = g.between(2, 8), m = g.between(2, 16), s = g.between(1, 5);
        const SaeParams p = g.sae(d, m);
        const Matrix x = g.matrix(s, d);
        if (near_kink(p, x)) continue;
        const double l1 = g.uniform(0, 0.3), l2 = g.uniform(0, 0.3);
        const SaeGrads gr = sae_grads(p, x, l1, l2);
        for (Matrix SaeParams::*block : {&SaeParams::w_enc, &SaeParams::b_enc, &SaeParams::w_dec, &SaeParams::b_dec}) {
            const Matrix numeric = finite_diff_grad(
                [&](const Matrix& theta) {
                    SaeParams q = p;
                    q.*block = theta;
                    return std::get<3>(oracle::sae_loss(q, x, l1, l2));
                },
                p.*block, 1e-6);
            const Matrix& analytic = block == &SaeParams::w_enc   ? gr.w_enc
                                     : block == &SaeParams::b_enc ? gr.b_enc
                                     : block == &SaeParams::w_dec ? gr.w_dec
                                                                  : gr.b_dec;
            worst = std::max(worst, rel_error(analytic, numeric));
        }
        ++sae_checked;
    }
    using Block = Matrix& (*)(DilaModel&);
    const std::vector<std::pair<Block, Matrix DilaGrads::*>> top = {
        {[](DilaModel& t) -> Matrix& { return t.a_ficd; }, &DilaGrads::a_ficd},
        {[](DilaModel& t) -> Matrix& { return t.decision_w; }, &DilaGrads::decision_w},
        {[](DilaModel& t) -> Matrix& { return t.decision_b; }, &DilaGrads::decision_b},
    };
    const std::vector<std::pair<Block, Matrix SaeGrads::*>> inner = {
        {[](DilaModel& t) -> Matrix& { return t.sae.w_enc; }, &SaeGrads::w_enc},
        {[](DilaModel& t) -> Matrix& { return t.sae.b_enc; }, &SaeGrads::b_enc},
        {[](DilaModel& t) -> Matrix& { return t.sae.w_dec; }, &SaeGrads::w_dec},
        {[](DilaModel& t) -> Matrix& { return t.sae.b_dec; }, &SaeGrads::b_dec},
    };
    while (dila_checked < 25) {
        const std::size_t d = g.between(2, 8), m = g.between(2, 16), c = g.between(1, 4), s = g.between(1, 5);
        const DilaModel model = g.model(d, m, c);
        const Matrix x = g.matrix(s, d);
        if (near_kink(model.sae, x)) continue;
        const std::vector<double> y = g.targets(c);
        const LossWeights w{g.uniform(0.01, 1), g.uniform(0, 0.3), g.uniform(0, 0.3)};
        const DilaGrads gr = combined_grads(model, x, y, w);
        auto numeric = [&](Block block) {
            DilaModel start = model;
            return finite_diff_grad(
                [&](const Matrix& theta) {
                    DilaModel q = model;
                    block(q) = theta;
                    const double saenc = std::get<3>(oracle::sae_loss(q.sae, x, w.lambda_l1, w.lambda_l2));
                    return w.lambda_saenc * saenc + oracle::bce(oracle::forward(q, x).p, y);
                },
                block(start), 1e-6);
        };
        for (const auto& [block, field] : top) worst = std::max(worst, rel_error(gr.*field, numeric(block)));
        for (const auto& [block, field] : inner) worst = std::max(worst, rel_error(gr.sae.*field, numeric(block)));
        ++dila_checked;
    }
    return {worst < 1e-5, fmt("%zu SAE + %zu combined-loss instances, worst relative error %.2e (limit 1e-5)",
                              sae_checked, dila_checked, worst)};
}

Outcome locality() {
    const EndToEnd& e = end_to_end();
    const std::vector<SynthNote> notes = gen_corpus(e.world, 100, 16, 32, 99);
    std::size_t identical = 0, moved = 0, perturbations = 0;
    for (std::size_t n = 0; n < notes.size(); ++n) {
        const Matrix& x = notes[n].embeddings;
        const std::size_t j = n % e.model.num_codes();
        DilaModel cut = e.model;
        for (std::size_t i = 0; i < cut.dict_size(); ++i) cut.a_ficd(i, j) = 0.0;
        for (std::size_t k = 0; k < cut.input_dim(); ++k) cut.decision_w(j, k) = 0.0;
        const Prediction before = forward(e.model, x), after = forward(cut, x);
        bool same = true;
        for (std::size_t k = 0; k < before.probabilities.size(); ++k)
            if (k != j && before.probabilities[k] != after.probabilities[k]) same = false;
        identical += same ? 1 : 0;

        for (TokenMode mode : {TokenMode::Ablate, TokenMode::Noise}) {
            TokenPerturbOptions opt;
            opt.seed = n;
            const AblationReport r = token_perturb(e.model, notes[n].id, x, j, mode, opt);
            ++perturbations;
            moved += r.other_abs_delta > 0 ? 1 : 0;
        }
    }
    const double share = static_cast<double>(moved) / static_cast<double>(perturbations);
    return {identical == notes.size() && share >= 0.95,
            fmt("weight ablation bit-identical on %zu/%zu notes; token ablate/noise moved other codes in %zu/%zu "
                "(%.1f%%, need >= 95%%)",
                identical, notes.size(), moved, perturbations, 100 * share)};
}

struct SaeRun {
    PlantedWorld world;
    std::vector<SynthNote> corpus;
    SaeParams sae;
};

const SaeRun& sae_run() {
    static const SaeRun r = [] {
        SaeRun r;
        r.world = gen_world(32, 64, 8, 0.05, 7);
        r.corpus = gen_corpus(r.world, 5000, 16, 32, 11);
        r.sae = train_sae(128, stack_embeddings(r.corpus), stage1_config()).params;
        return r;
    }();
    return r;
}

Outcome sparsity_recovery() {
    const SaeRun& r = sae_run();
    const Matrix x = stack_embeddings(r.corpus);
    const double l0 = mean_l0(r.sae, x);
    const double ratio = reconstruction_mse(r.sae, x) / r.world.noise_floor();
    const Recovery rec = match_features(r.sae, r.world, 0.9);
    const double share = static_cast<double>(rec.directions_recovered) / static_cast<double>(r.world.num_concepts());
    return {l0 < 12.8 && ratio < 1.5 && share >= 0.8,
            fmt("%zu tokens: mean L0 %.2f (< 12.8), MSE %.3f x noise floor (< 1.5), %zu/%zu directions at |cos| >= 0.9",
                x.rows(), l0, ratio, rec.directions_recovered, r.world.num_concepts())};
}

Outcome end_to_end_learning() {
    const EndToEnd& e = end_to_end();
    return {e.result.micro_f1 >= 0.9 && e.epochs <= 20,
            fmt("c=%zu, %zu epochs, held-out micro-F1 %.4f at threshold %.1f (need >= 0.9)", e.model.num_codes(),
                e.epochs, e.result.micro_f1, e.result.threshold)};
}

// Smallest k with P(X <= k) > p for X ~ Binomial(n, q).
std::size_t binomial_quantile(std::size_t n, double q, double p) {
    double cdf = 0;
    for (std::size_t k = 0; k <= n; ++k) {
        const double log_pmf = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) +
                               static_cast<double>(k) * std::log(q) + static_cast<double>(n - k) * std::log1p(-q);
        cdf += std::exp(log_pmf);
        if (cdf > p) return k;
    }
    return n;
}

Outcome identification() {
    const EndToEnd& e = end_to_end();
    const std::vector<SynthNote> train_notes(e.corpus.begin(), e.corpus.begin() + 800);
    const Dataset ds = to_dataset(e.world, train_notes);
    const auto entries = build_dictionary(e.model.sae, ds, 0, ds.records.size());
    const auto pool = sample_outlier_pool(e.model.sae, ds.records, *ds.embeddings, 500, 21);

    const auto tasks200 = make_identification_tasks(entries, pool, 200, 3);
    TruthOracle truth;
    const double oracle_acc = identification_accuracy(run_identification_batch(tasks200, truth, 4), tasks200);
    PlantedWorldEndpoint planted(e.world);
    EndpointAnnotator mock(planted);
    const double mock_acc = identification_accuracy(run_identification_batch(tasks200, mock, 4), tasks200);

    const auto tasks1000 = make_identification_tasks(entries, pool, 1000, 4);
    UniformRandomAnnotator random(8);
    const auto random_responses = run_identification_batch(tasks1000, random, 4);
    const double random_acc = identification_accuracy(random_responses, tasks1000);
    const std::size_t lo = binomial_quantile(1000, 0.2, 0.005), hi = binomial_quantile(1000, 0.2, 0.995);
    const auto hits = static_cast<std::size_t>(std::llround(random_acc * 1000));

    testing::TempDir dir;
    std::vector<AnnotatorResponse> recorded;
    {
        RecordingEndpoint rec(planted, dir / "cassette.json");
        EndpointAnnotator a(rec);
        recorded = run_identification_batch(tasks200, a, 4);
        rec.save();
    }
    ReplayEndpoint replay(dir / "cassette.json");
    EndpointAnnotator replayer(replay);
    const bool replay_same = run_identification_batch(tasks200, replayer, 1) == recorded;
    const bool tasks_same = make_identification_tasks(entries, pool, 1000, 4) == tasks1000;
    const bool random_same = run_identification_batch(tasks1000, random, 1) == random_responses;

    return {tasks200.size() == 200 && tasks1000.size() == 1000 && oracle_acc == 1.0 && hits >= lo && hits <= hi &&
                replay_same && tasks_same && random_same,
            fmt("oracle %.3f on %zu tasks (mock reader %.3f); random %zu/1000 in 99%% interval [%zu, %zu]; replays %s",
                oracle_acc, tasks200.size(), mock_acc, hits, lo, hi,
                replay_same && tasks_same && random_same ? "bit-identical" : "DIFFER")};
}

Outcome dictionary() {
    const EndToEnd& e = end_to_end();
    std::vector<SynthNote> small;
    std::size_t tokens = 0;
    for (const auto& n : gen_corpus(e.world, 200, 16, 32, 31)) {
        if (tokens >= 2000) break;
        tokens += n.tokens.size();
        small.push_back(n);
    }
    const auto streamed = build_dictionary(e.model.sae, small);

    std::map<std::size_t, std::vector<ContextToken>> brute;
    for (const auto& n : small) {
        const Matrix f = oracle::encode(e.model.sae, n.embeddings);
        for (std::size_t t = 0; t < f.rows(); ++t)
            for (std::size_t i = 0; i < f.cols(); ++i)
                if (f(t, i) > 0) brute[i].push_back({n.tokens[t], n.id, t, f(t, i), ""});
    }
    for (auto& [i, list] : brute) {
        std::sort(list.begin(), list.end(), [](const ContextToken& a, const ContextToken& b) {
            if (a.act != b.act) return a.act > b.act;
            if (a.doc != b.doc) return a.doc < b.doc;
            return a.pos < b.pos;
        });
        if (list.size() > kMaxContexts) list.resize(kMaxContexts);
    }
    std::size_t agree = 0;
    for (const auto& entry : streamed) {
        const auto it = brute.find(entry.feature);
        if (it == brute.end() || it->second.size() != entry.contexts.size()) continue;
        bool same = true;
        for (std::size_t r = 0; r < entry.contexts.size(); ++r) {
            const auto& a = entry.contexts[r];
            const auto& b = it->second[r];
            same = same && a.doc == b.doc && a.pos == b.pos && a.token == b.token && std::abs(a.act - b.act) < 1e-12;
        }
        agree += same ? 1 : 0;
    }
    const bool exact = streamed.size() == brute.size() && agree == brute.size();

    const SaeRun& r = sae_run();
    const auto entries = build_dictionary(r.sae, r.corpus);
    const Purity p = context_purity(entries, match_features(r.sae, r.world, 0.9), r.world);
    return {tokens >= 2000 && exact && p.fraction() >= 0.9,
            fmt("%zu tokens: streaming equals full sort on %zu/%zu features; purity %zu/%zu = %.3f (need >= 0.9)", tokens,
                agree, brute.size(), p.pure, p.recovered, p.fraction())};
}

Outcome metrics() {
    std::size_t ok = 0, total = 0;
    double worst_auc = 0;
    for (const auto& fx : fixtures::metric_fixtures()) {
        ++total;
        const EvalResult r = evaluate(fx.scores, fx.targets, fx.threshold);
        // Independent oracle recomputation.
        const std::size_t n = fx.scores.rows(), c = fx.scores.cols();
        std::size_t tp = 0, fp = 0, fn = 0;
        double macro = 0, macro_auc = 0;
        std::size_t defined = 0;
        std::vector<double> all_s, all_y;
        for (std::size_t j = 0; j < c; ++j) {
            std::size_t tpj = 0, fpj = 0, fnj = 0;
            std::vector<double> s, y;
            for (std::size_t i = 0; i < n; ++i) {
                const bool pred = fx.scores(i, j) >= fx.threshold, pos = fx.targets(i, j) > 0.5;
                tpj += pred && pos;
                fpj += pred && !pos;
                fnj += !pred && pos;
                s.push_back(fx.scores(i, j));
                y.push_back(fx.targets(i, j));
            }
            tp += tpj;
            fp += fpj;
            fn += fnj;
            macro += oracle::f1(tpj, fpj, fnj);
            all_s.insert(all_s.end(), s.begin(), s.end());
            all_y.insert(all_y.end(), y.begin(), y.end());
            const double auc = oracle::pair_auc(s, y);
            if (auc >= 0) {
                macro_auc += auc;
                ++defined;
            }
        }
        const double micro = oracle::f1(tp, fp, fn);
        macro /= static_cast<double>(c);
        const double micro_auc = oracle::pair_auc(all_s, all_y);
        // Bit-exact against the formula oracle; hand rationals within rounding of the mean.
        const auto ulps = [](double a, double b) { return std::abs(a - b) <= 4 * 0x1p-52 * std::max(1.0, std::abs(b)); };
        bool pass = r.micro_f1 == micro && r.macro_f1 == macro && ulps(r.micro_f1, fx.micro_f1) &&
                    ulps(r.macro_f1, fx.macro_f1) && r.macro_auc_skipped == fx.skipped;
        pass = pass && r.micro_auc.has_value() == fx.micro_auc.has_value() &&
               r.macro_auc.has_value() == fx.macro_auc.has_value();
        if (pass && r.micro_auc) {
            worst_auc = std::max({worst_auc, std::abs(*r.micro_auc - *fx.micro_auc), std::abs(*r.micro_auc - micro_auc)});
        }
        if (pass && r.macro_auc) {
            const double oracle_macro = macro_auc / static_cast<double>(defined);
            worst_auc = std::max({worst_auc, std::abs(*r.macro_auc - *fx.macro_auc), std::abs(*r.macro_auc - oracle_macro)});
        }
        ok += pass ? 1 : 0;
    }
    return {ok == total && total == 10 && worst_auc <= 1e-12,
            fmt("%zu/%zu fixtures with F1 bit-equal to the formula oracle, worst AUC deviation %.1e (limit 1e-12)", ok, total, worst_auc)};
}

Outcome confound_repair_pattern() {
    const fixtures::ConfoundRun run = fixtures::confound_run();
    const auto eval = run.dataset.labeled_range(run.train_end, run.dataset.records.size());
    const EvalResult before = evaluate_model(run.trained, eval, kDefaultThreshold);
    const EvalResult after = evaluate_model(apply_edit(run.trained, run.repair), eval, kDefaultThreshold);
    const std::size_t j = run.confound.code;
    bool others_same = true;
    for (std::size_t k = 0; k < before.counts.size(); ++k)
        if (k != j && !(before.counts[k] == after.counts[k])) others_same = false;
    return {after.counts[j].fp < before.counts[j].fp && others_same,
            fmt("code %s: FP %zu -> %zu, FN %zu -> %zu over %zu edits; other codes %s",
                run.trained.codes[j].code.c_str(), before.counts[j].fp, after.counts[j].fp, before.counts[j].fn,
                after.counts[j].fn, run.repair.edits.size(), others_same ? "unchanged" : "CHANGED")};
}

Outcome timing() {
    const EndToEnd& e = end_to_end();
    const SaeRun& s = sae_run();
    // Largest desk-scale configuration: the d=32, m=128 dictionary under a c=8 head.
    const CodeDescriptions desc = code_descriptions(s.world);
    const DilaModel big = make_model(s.sae, desc.codes, desc.embeddings, 3);
    double f_note = 0, a_laat = 0, a_ficd = 0;
    for (const DilaModel* m : {&e.model, &big}) {
        for (std::size_t n = 0; n < 20; ++n) {
            const Matrix& x = m == &big ? s.corpus[n].embeddings : e.corpus[800 + n].embeddings;
            const TimingReport t = measure_timing(*m, x, 10);
            f_note = std::max(f_note, t.f_note.max_ms);
            a_laat = std::max(a_laat, t.a_laat.max_ms);
            a_ficd = std::max(a_ficd, t.a_ficd_read.max_ms);
        }
    }
    return {f_note < 100 && a_laat < 100 && a_ficd < 1,
            fmt("worst of 400 timed calls: F_note %.4f ms, A_laat %.4f ms (< 100), A_ficd read %.5f ms (< 1)", f_note,
                a_laat, a_ficd)};
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {"gradient correctness", 30, gradients},
        {"end-to-end learning", 600, end_to_end_learning},
        {"exact ablation locality", 60, locality},
        {"sparsity and recovery", 600, sparsity_recovery},
        {"identification calibration", 600, identification},
        {"dictionary correctness", 600, dictionary},
        {"metrics", 60, metrics},
        {"debugging pattern", 600, confound_repair_pattern},
        {"interpretation timing", 600, timing},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.check();
        } catch (const std::exception& ex) {
            o = {false, std::string("threw: ") + ex.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool pass = o.pass && secs < c.time_limit_s;
        failures += pass ? 0 : 1;
        std::printf("%s  %-28s %s [%.1f s, limit %.0f s]\n", pass ? "PASS" : "FAIL", c.name.c_str(), o.detail.c_str(),
                    secs, c.time_limit_s);
        std::fflush(stdout);
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failures), criteria.size());
    return failures == 0 ? 0 : 1;
}
