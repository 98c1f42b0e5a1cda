#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "dila/ablation.hpp"
#include "dila/dataset.hpp"
#include "dila/dictionary.hpp"
#include "dila/exports.hpp"
#include "dila/interpret.hpp"
#include "dila/io.hpp"
#include "dila/json_views.hpp"
#include "dila/manifest.hpp"
#include "dila/metrics.hpp"
#include "dila/recovery.hpp"
#include "dila/sae.hpp"
#include "dila/server.hpp"
#include "dila/synth.hpp"
#include "json.hpp"

namespace dila::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class ConfigInvalid : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    // Paths. Inputs default to the run directory's fixed names.
    std::string run_dir = "run";
    std::string data;
    std::string sae;
    std::string checkpoint;
    std::string dictionary;
    std::string edits;

    // Planted world and corpus.
    std::size_t d = 16;
    std::size_t concepts = 16;
    std::size_t codes = 8;
    double noise = 0.05;
    std::size_t notes = 500;
    std::size_t min_len = 16;
    std::size_t max_len = 32;
    double concept_token_prob = 0.5;
    std::uint64_t world_seed = 7;
    std::uint64_t corpus_seed = 11;
    bool confound = false;
    double confound_rate = 1.0;
    std::uint64_t confound_seed = 3;
    double eval_fraction = 0.2;

    // Training.
    std::size_t m = 0;  // 0: 4·d
    double lr = 5e-5;
    double lambda_l1 = 1e-4;
    double lambda_l2 = 1e-5;
    double lambda_saenc = 1e-6;
    std::size_t batch = 8;
    std::size_t epochs = 20;
    double dropout = 0.2;
    double threshold = kDefaultThreshold;
    double warmup = 0.1;
    std::uint64_t seed = 1234;
    std::optional<double> sae_lr;
    std::optional<std::size_t> sae_batch;
    std::optional<std::size_t> sae_epochs;
    bool miswire = false;
    double miswire_weight = 5.0;

    // Dictionary and interpretation.
    bool code_drops = false;
    std::size_t tasks = 200;
    std::size_t pool = 500;
    std::string annotator = "oracle";
    std::string cassette;
    std::string record;
    std::size_t workers = 4;
    std::string llm_base_url;
    std::string llm_model;

    // Ablation, evaluation, export.
    std::string note;
    std::string code;
    std::string mode = "ablate";
    std::optional<double> sigma;
    std::vector<std::size_t> tokens;
    std::size_t repeats = 10;
    std::string split = "eval";
    std::string format = "json";
    std::vector<std::string> select_codes;
    std::vector<std::string> select_features;
    std::size_t k = 5;

    // Server.
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string cors = "*";
};

std::vector<std::string> validate(const RunConfig& c) {
    std::vector<std::string> errors;
    auto need = [&](bool ok, const std::string& msg) {
        if (!ok) errors.push_back(msg);
    };
    need(c.d >= 1, "d must be >= 1");
    need(c.concepts >= c.codes && c.codes >= 1, "need concepts >= codes >= 1");
    need(c.noise >= 0, "noise must be >= 0");
    need(c.notes >= 1, "notes must be >= 1");
    need(c.min_len >= 1 && c.min_len <= c.max_len, "need 1 <= min-len <= max-len");
    need(c.concept_token_prob > 0 && c.concept_token_prob <= 1, "concept-token-prob must be in (0, 1]");
    need(c.confound_rate >= 0 && c.confound_rate <= 1, "confound-rate must be in [0, 1]");
    need(c.eval_fraction >= 0 && c.eval_fraction < 1, "eval-fraction must be in [0, 1)");
    need(c.lr > 0, "lr must be > 0");
    need(!c.sae_lr || *c.sae_lr > 0, "sae-lr must be > 0");
    need(c.lambda_l1 >= 0 && c.lambda_l2 >= 0 && c.lambda_saenc >= 0, "lambdas must be >= 0");
    need(c.batch >= 1 && (!c.sae_batch || *c.sae_batch >= 1), "batch sizes must be >= 1");
    need(c.epochs >= 1 && (!c.sae_epochs || *c.sae_epochs >= 1), "epochs must be >= 1");
    need(c.dropout >= 0 && c.dropout < 1, "dropout must be in [0, 1)");
    need(c.threshold > 0 && c.threshold < 1, "threshold must be in (0, 1)");
    need(c.warmup >= 0 && c.warmup <= 1, "warmup must be in [0, 1]");
    need(c.workers >= 1, "workers must be >= 1");
    need(c.repeats >= 1, "repeats must be >= 1");
    need(c.k >= 1, "k must be >= 1");
    need(!c.sigma || *c.sigma > 0, "sigma must be > 0");
    need(c.port >= 0 && c.port <= 65535, "port must be in [0, 65535]");
    need(c.split == "train" || c.split == "eval" || c.split == "all", "split must be train, eval or all");
    need(c.format == "json" || c.format == "csv", "format must be json or csv");
    need(c.mode == "ablate" || c.mode == "noise" || c.mode == "replace", "mode must be ablate, noise or replace");
    static const std::set<std::string> annotators{"oracle", "random", "planted", "llm", "replay"};
    need(annotators.count(c.annotator) == 1, "annotator must be oracle, random, planted, llm or replay");
    return errors;
}

// One command invocation: resolved config, the files it read and wrote.
class Run {
public:
    Run(const RunConfig& cfg, std::string command, std::vector<std::string> argv, std::string config_text,
        std::ostream& out)
        : cfg(cfg), out(out), command_(std::move(command)), argv_(std::move(argv)),
          config_text_(std::move(config_text)) {}

    const RunConfig& cfg;
    std::ostream& out;

    std::string data_dir() const { return cfg.data.empty() ? cfg.run_dir : cfg.data; }
    std::string sae_path() const { return cfg.sae.empty() ? cfg.run_dir + "/sae.dila" : cfg.sae; }
    std::string checkpoint_path() const {
        return cfg.checkpoint.empty() ? cfg.run_dir + "/checkpoint.dila" : cfg.checkpoint;
    }
    std::string dictionary_path() const {
        return cfg.dictionary.empty() ? cfg.run_dir + "/dictionary.jsonl" : cfg.dictionary;
    }

    void input(const std::string& path) {
        if (!fs::exists(path)) throw std::runtime_error("input '" + path + "' does not exist");
        inputs_.push_back(hash_file(path));
        input_paths_.insert(fs::weakly_canonical(path));
    }

    Dataset dataset() {
        const std::string dir = data_dir();
        for (const char* f : {"corpus.jsonl", "embeddings.emb1", "codes.json", "descriptions.emb1"})
            input(dir + "/" + f);
        for (const char* f : {"world.json", "confound.json"})
            if (fs::exists(dir + "/" + f)) input(dir + "/" + f);
        return load_dataset(dir);
    }

    DilaModel model() {
        const std::string path = checkpoint_path();
        input(path);
        input(codes_sidecar_path(path));
        return load_model(path);
    }

    std::vector<DictionaryEntry> dictionary() {
        input(dictionary_path());
        return load_dictionary(dictionary_path());
    }

    // Path for an output under the run directory; refuses to clobber an input.
    std::string output_path(const std::string& rel) {
        const fs::path p = fs::path(cfg.run_dir) / rel;
        fs::create_directories(p.parent_path());
        if (input_paths_.count(fs::weakly_canonical(p)) != 0)
            throw ConfigInvalid("refusing to overwrite input '" + p.string() + "'; choose another --run-dir");
        return p.string();
    }

    void output(const std::string& path, bool deterministic = true) {
        outputs_.push_back(hash_file(path, deterministic));
        out << "wrote " << path << "\n";
    }

    std::string write_report(const std::string& name, const json& body, bool deterministic = true) {
        const std::string path = output_path("reports/" + name);
        write_file(path, body.dump(2) + "\n");
        output(path, deterministic);
        return path;
    }

    void finish() {
        fs::create_directories(cfg.run_dir);
        append_manifest(cfg.run_dir, {command_, argv_, config_text_, inputs_, outputs_});
    }

private:
    std::string command_;
    std::vector<std::string> argv_;
    std::string config_text_;
    std::vector<ManifestFile> inputs_;
    std::vector<ManifestFile> outputs_;
    std::set<fs::path> input_paths_;
};

const PlantedWorld& need_world(const Dataset& ds) {
    if (!ds.world) throw ConfigInvalid("dataset '" + ds.dir + "' has no world.json (synthetic data required)");
    return *ds.world;
}

std::size_t resolve_code(const DilaModel& model, const std::string& code) {
    if (code.empty()) throw ConfigInvalid("--code is required");
    return resolve_codes(model, {code}).at(0);
}

std::size_t need_note(const Dataset& ds, const std::string& id) {
    if (id.empty()) throw ConfigInvalid("--note is required");
    const auto idx = ds.find(id);
    if (!idx) throw ConfigInvalid("unknown note '" + id + "'");
    return *idx;
}

Matrix stack_rows(const Dataset& ds, std::size_t begin, std::size_t end) {
    std::vector<Matrix> parts;
    std::size_t rows = 0;
    for (std::size_t i = begin; i < end; ++i) {
        parts.push_back(ds.embeddings->embed(ds.records[i].id));
        rows += parts.back().rows();
    }
    Matrix out(rows, ds.embeddings->dim());
    std::size_t r = 0;
    for (const auto& m : parts)
        for (std::size_t t = 0; t < m.rows(); ++t, ++r) std::copy(m.row(t).begin(), m.row(t).end(), out.row(r).begin());
    return out;
}

std::pair<std::size_t, std::size_t> split_range(const Dataset& ds, const RunConfig& cfg, const std::string& split) {
    const std::size_t cut = ds.split_point(cfg.eval_fraction);
    if (split == "train") return {0, cut};
    if (split == "eval") return {cut, ds.records.size()};
    return {0, ds.records.size()};
}

json confound_json(const LabelConfound& c, const PlantedWorld& w) {
    return {{"concept", c.concept_index},
            {"concept_name", w.concept_names.at(c.concept_index)},
            {"code", c.code},
            {"code_id", w.code_ids.at(c.code)},
            {"rate", c.rate}};
}

// ---- synth-gen -------------------------------------------------------------

void cmd_synth_gen(Run& run) {
    const RunConfig& c = run.cfg;
    const PlantedWorld world = gen_world(c.d, c.concepts, c.codes, c.noise, c.world_seed);
    CorpusOptions co;
    co.concept_token_prob = c.concept_token_prob;
    std::vector<SynthNote> notes = gen_corpus(world, c.notes, c.min_len, c.max_len, c.corpus_seed, co);

    const auto cut = static_cast<std::size_t>(std::llround(static_cast<double>(notes.size()) * (1.0 - c.eval_fraction)));
    std::optional<LabelConfound> confound;
    if (c.confound) {
        confound = pick_confound(world);
        confound->rate = c.confound_rate;
        std::vector<SynthNote> train(std::make_move_iterator(notes.begin()),
                                     std::make_move_iterator(notes.begin() + static_cast<std::ptrdiff_t>(cut)));
        apply_label_confound(train, *confound, c.confound_seed);
        std::move(train.begin(), train.end(), notes.begin());
    }

    for (const char* f : {"world.json", "corpus.jsonl", "embeddings.emb1", "codes.json", "descriptions.emb1"})
        run.output_path(f);
    save_dataset(c.run_dir, world, notes);
    for (const char* f : {"world.json", "corpus.jsonl", "embeddings.emb1", "codes.json", "descriptions.emb1"})
        run.output(c.run_dir + "/" + f);
    if (confound) {
        const std::string path = run.output_path("confound.json");
        save_confound(path, *confound);
        run.output(path);
    }

    std::size_t tokens = 0;
    std::vector<std::size_t> positives(world.num_codes(), 0);
    for (const auto& n : notes) {
        tokens += n.tokens.size();
        for (std::size_t j = 0; j < n.target.size(); ++j) positives[j] += n.target[j] > 0.5 ? 1 : 0;
    }
    json report = {{"notes", notes.size()}, {"tokens", tokens}, {"train_notes", cut},
                   {"code_ids", world.code_ids}, {"positives", positives},
                   {"noise_floor", world.noise_floor()}};
    report["confound"] = confound ? confound_json(*confound, world) : json(nullptr);
    run.write_report("synth.json", report);
}

// ---- training --------------------------------------------------------------

void cmd_train_sae(Run& run) {
    const RunConfig& c = run.cfg;
    const Dataset ds = run.dataset();
    const auto [begin, end] = split_range(ds, c, "train");
    const Matrix x = stack_rows(ds, begin, end);

    SaeTrainConfig sc;
    sc.lr = c.sae_lr.value_or(c.lr);
    sc.lambda_l1 = c.lambda_l1;
    sc.lambda_l2 = c.lambda_l2;
    sc.batch_size = c.sae_batch.value_or(c.batch);
    sc.epochs = c.sae_epochs.value_or(c.epochs);
    sc.warmup_fraction = c.warmup;
    sc.seed = c.seed;
    const std::string path = run.output_path("sae.dila");
    const std::size_t m = c.m != 0 ? c.m : 4 * x.cols();
    const SaeTrainResult result = train_sae(m, x, sc);
    save_sae(path, result.params);
    run.output(path);

    const double mse = reconstruction_mse(result.params, x);
    json report = {{"steps", result.history.size()},
                   {"tokens", x.rows()},
                   {"m", m},
                   {"mean_l0", mean_l0(result.params, x)},
                   {"reconstruction_mse", mse}};
    if (!result.history.empty()) {
        const auto& last = result.history.back();
        report["final_loss"] = {{"total", last.total}, {"reconstruction", last.reconstruction},
                                {"l1", last.l1}, {"l2", last.l2}};
    }
    if (ds.world) {
        const Recovery rec = match_features(result.params, *ds.world);
        report["noise_floor"] = ds.world->noise_floor();
        report["mse_over_noise_floor"] = ds.world->noise_floor() > 0 ? json(mse / ds.world->noise_floor()) : json(nullptr);
        report["directions_recovered"] = rec.directions_recovered;
        report["concepts"] = ds.world->num_concepts();
    }
    run.write_report("train-sae.json", report);
    run.out << "mean L0 " << report["mean_l0"].get<double>() << ", reconstruction MSE " << mse << "\n";
}

void cmd_train_dila(Run& run) {
    const RunConfig& c = run.cfg;
    const Dataset ds = run.dataset();
    run.input(run.sae_path());
    SaeParams sae = load_sae(run.sae_path());
    DilaModel model = make_model(sae, ds.codes, ds.description_embeddings, c.seed);
    const auto [tb, te] = split_range(ds, c, "train");
    const auto [eb, ee] = split_range(ds, c, "eval");

    json report;
    if (c.miswire) {
        if (!ds.confound) throw ConfigInvalid("--miswire needs a dataset generated with --confound");
        const auto dictionary = build_dictionary(sae, ds, tb, te);
        const auto planted = plant_miswire(model, dictionary, need_world(ds), *ds.confound, c.miswire_weight);
        report["miswired_features"] = planted;
        report["miswire_weight"] = c.miswire_weight;
    }

    DilaTrainConfig dc;
    dc.lr = c.lr;
    dc.batch_size = c.batch;
    dc.epochs = c.epochs;
    dc.dropout = c.dropout;
    dc.threshold = c.threshold;
    dc.warmup_fraction = c.warmup;
    dc.weights = {c.lambda_saenc, c.lambda_l1, c.lambda_l2};
    dc.seed = c.seed;
    const auto train = ds.labeled_range(tb, te);
    const auto eval = ds.labeled_range(eb, ee);
    const std::string path = run.output_path("checkpoint.dila");
    run.output_path("checkpoint.codes.json");
    const DilaTrainResult result = train_dila(std::move(model), train, dc, eval);
    save_model(path, result.model);
    run.output(path);
    run.output(codes_sidecar_path(path));

    json history = json::array();
    for (const auto& h : result.history)
        history.push_back({{"epoch", h.epoch}, {"mean_loss", h.mean_loss}, {"mean_bce", h.mean_bce},
                           {"train_micro_f1", h.train_micro_f1},
                           {"eval_micro_f1", h.eval_micro_f1 ? json(*h.eval_micro_f1) : json(nullptr)},
                           {"negative_a_ficd", h.negative_a_ficd}});
    report["history"] = history;
    if (!eval.empty()) {
        const EvalResult r = evaluate_model(result.model, eval, c.threshold);
        report["eval"] = eval_json(r, result.model.codes);
        run.out << "eval micro-F1 " << r.micro_f1 << "\n";
    }
    run.write_report("train-dila.json", report);
}

// ---- dictionary and interpretation ----------------------------------------

json verdict_counts(const std::vector<DictionaryEntry>& entries) {
    json counts = {{"identified", 0}, {"unidentified", 0}, {"insufficient-contexts", 0}};
    for (const auto& e : entries) counts[to_string(e.verdict)] = counts[to_string(e.verdict)].get<int>() + 1;
    return counts;
}

void cmd_build_dict(Run& run) {
    const RunConfig& c = run.cfg;
    const Dataset ds = run.dataset();
    const DilaModel model = run.model();
    const auto [begin, end] = split_range(ds, c, "train");
    auto entries = build_dictionary(model.sae, ds, begin, end);
    if (c.code_drops) attach_code_drops(entries, model, *ds.embeddings);
    const std::string path = run.output_path("dictionary.jsonl");
    save_dictionary(path, entries);
    run.output(path);

    json report = {{"entries", entries.size()}, {"features", model.dict_size()}, {"verdicts", verdict_counts(entries)}};
    if (ds.world) {
        const Recovery rec = match_features(model.sae, *ds.world);
        const Purity p = context_purity(entries, rec, *ds.world);
        report["recovered_features"] = p.recovered;
        report["pure_features"] = p.pure;
        report["purity"] = p.fraction();
    }
    run.write_report("dictionary.json", report);
    run.out << entries.size() << " dictionary entries\n";
}

// Owns whatever endpoint the configured annotator needs.
struct EndpointChoice {
    std::unique_ptr<ChatEndpoint> base;
    std::unique_ptr<RecordingEndpoint> recorder;
    ChatEndpoint* active = nullptr;
};

EndpointChoice make_endpoint(Run& run, const Dataset& ds) {
    const RunConfig& c = run.cfg;
    EndpointChoice ch;
    if (c.annotator == "planted") {
        ch.base = std::make_unique<PlantedWorldEndpoint>(need_world(ds));
    } else if (c.annotator == "llm") {
        HttpEndpointConfig hc = HttpEndpointConfig::from_env();
        if (!c.llm_base_url.empty()) hc.base_url = c.llm_base_url;
        if (!c.llm_model.empty()) hc.model = c.llm_model;
        if (hc.base_url.empty() || hc.model.empty())
            throw ConfigInvalid("annotator llm needs a base URL and model (flags or DILA_LLM_* environment)");
        ch.base = std::make_unique<HttpChatEndpoint>(hc);
    } else if (c.annotator == "replay") {
        if (c.cassette.empty()) throw ConfigInvalid("annotator replay needs --cassette");
        run.input(c.cassette);
        ch.base = std::make_unique<ReplayEndpoint>(c.cassette);
    } else {
        throw ConfigInvalid("annotator '" + c.annotator + "' has no chat endpoint");
    }
    ch.active = ch.base.get();
    if (!c.record.empty()) {
        ch.recorder = std::make_unique<RecordingEndpoint>(*ch.base, run.output_path(c.record));
        ch.active = ch.recorder.get();
    }
    return ch;
}

void save_recording(Run& run, EndpointChoice& ch) {
    if (!ch.recorder) return;
    ch.recorder->save();
    run.output(run.output_path(run.cfg.record));
}

void cmd_identify(Run& run) {
    const RunConfig& c = run.cfg;
    const Dataset ds = run.dataset();
    const DilaModel model = run.model();
    auto entries = run.dictionary();
    const auto [begin, end] = split_range(ds, c, "train");
    const std::vector<CorpusRecord> records(ds.records.begin() + static_cast<std::ptrdiff_t>(begin),
                                            ds.records.begin() + static_cast<std::ptrdiff_t>(end));
    const auto pool = sample_outlier_pool(model.sae, records, *ds.embeddings, c.pool, c.seed);
    const auto tasks = make_identification_tasks(entries, pool, c.tasks, c.seed);
    if (tasks.empty()) throw std::runtime_error("no dictionary entry has enough contexts for a task");

    std::unique_ptr<Annotator> annotator;
    EndpointChoice endpoint;
    if (c.annotator == "oracle") {
        annotator = std::make_unique<TruthOracle>();
    } else if (c.annotator == "random") {
        annotator = std::make_unique<UniformRandomAnnotator>(c.seed);
    } else {
        endpoint = make_endpoint(run, ds);
        annotator = std::make_unique<EndpointAnnotator>(*endpoint.active);
    }
    const auto responses = run_identification_batch(tasks, *annotator, c.workers);
    save_recording(run, endpoint);
    apply_verdicts(entries, tasks, responses, annotator->provenance());

    const std::string dict_path = run.output_path("dictionary.jsonl");
    save_dictionary(dict_path, entries);
    run.output(dict_path);
    for (const auto& [name, body] : {std::pair{"tasks.jsonl", tasks_jsonl(tasks)},
                                     std::pair{"responses.jsonl", responses_jsonl(responses)},
                                     std::pair{"responses.csv", responses_csv(responses, tasks)}}) {
        const std::string path = run.output_path(std::string("reports/") + name);
        write_file(path, body);
        run.output(path);
    }
    std::size_t abstained = 0;
    for (const auto& r : responses) abstained += r.choice ? 0 : 1;
    const double accuracy = identification_accuracy(responses, tasks);
    run.write_report("identify.json", {{"annotator", annotator->id()},
                                       {"tasks", tasks.size()},
                                       {"accuracy", accuracy},
                                       {"abstained", abstained},
                                       {"verdicts", verdict_counts(entries)}});
    run.out << "identification accuracy " << accuracy << " over " << tasks.size() << " tasks\n";
}

void cmd_summarize(Run& run) {
    const Dataset ds = run.dataset();
    auto entries = run.dictionary();
    EndpointChoice endpoint = make_endpoint(run, ds);
    json summaries = json::array();
    std::size_t failed = 0;
    for (auto& e : entries) {
        if (e.verdict != Verdict::Identified) continue;
        const SummaryResult r = summarize_feature(e, *endpoint.active);
        failed += r.error ? 1 : 0;
        summaries.push_back({{"feature", e.feature}, {"summary", r.error ? json(nullptr) : json(r.text)},
                             {"truncated", r.truncated}, {"error", r.error ? json(*r.error) : json(nullptr)}});
    }
    save_recording(run, endpoint);
    const std::string path = run.output_path("dictionary.jsonl");
    save_dictionary(path, entries);
    run.output(path);
    run.write_report("summaries.json", {{"summaries", summaries}, {"failed", failed}});
    run.out << summaries.size() << " features summarized, " << failed << " failed\n";
}

// ---- ablation --------------------------------------------------------------

void cmd_ablate_weights(Run& run) {
    const Dataset ds = run.dataset();
    const DilaModel model = run.model();
    const std::size_t idx = need_note(ds, run.cfg.note);
    const std::size_t code = resolve_code(model, run.cfg.code);
    const LabeledNote note = ds.labeled(idx);
    const AblationReport r = ablate_code_weights(model, note.id, note.embeddings, code);
    run.write_report("ablate-weights.json", ablation_report_json(r), false);
    run.out << "code " << r.code_id << ": " << r.target_before << " -> " << r.target_after << "\n";
}

void cmd_ablate_tokens(Run& run) {
    const RunConfig& c = run.cfg;
    const Dataset ds = run.dataset();
    const DilaModel model = run.model();
    const std::size_t idx = need_note(ds, c.note);
    const std::size_t code = resolve_code(model, c.code);
    const LabeledNote note = ds.labeled(idx);
    TokenPerturbOptions opts;
    opts.sigma = c.sigma;
    opts.seed = c.seed;
    const TokenMode mode = parse_token_mode(c.mode);
    if (mode == TokenMode::Replace) opts.replacement_pool = filler_replacement_pool(need_world(ds));
    const AblationReport r = c.tokens.empty() ? token_perturb(model, note.id, note.embeddings, code, mode, opts)
                                              : token_perturb(model, note.id, note.embeddings, code, mode, c.tokens, opts);
    run.write_report("ablate-tokens.json", ablation_report_json(r), false);
    run.out << "code " << r.code_id << ": " << r.target_before << " -> " << r.target_after
            << ", other codes moved " << r.other_abs_delta << "\n";
}

json eval_diff(const EvalResult& before, const EvalResult& after, const std::vector<CodeEntry>& codes) {
    json per_code = json::array();
    for (std::size_t j = 0; j < before.counts.size(); ++j) {
        const auto& b = before.counts[j];
        const auto& a = after.counts[j];
        if (b == a) continue;
        per_code.push_back({{"code", codes[j].code},
                            {"before", counts_json(b)},
                            {"after", counts_json(a)}});
    }
    return {{"micro_f1", {before.micro_f1, after.micro_f1}}, {"changed_codes", per_code}};
}

void cmd_ablate_edit(Run& run) {
    const RunConfig& c = run.cfg;
    const Dataset ds = run.dataset();
    const DilaModel model = run.model();
    if (c.edits.empty()) throw ConfigInvalid("--edits is required");
    run.input(c.edits);
    const EditSet edits = load_edit_set(c.edits);
    edits.validate(model.dict_size(), model.num_codes());
    const DilaModel edited = apply_edit(model, edits);

    const std::string path = run.output_path("checkpoint.dila");
    run.output_path("checkpoint.codes.json");
    save_model(path, edited);
    run.output(path);
    run.output(codes_sidecar_path(path));
    const std::string log = run.output_path("edits.log");
    write_file(log, edit_log_line(edits, model_fingerprint(model), model_fingerprint(edited)) + "\n");
    run.output(log);

    const auto [b, e] = split_range(ds, c, c.split);
    const auto notes = ds.labeled_range(b, e);
    const EvalResult before = evaluate_model(model, notes, c.threshold);
    const EvalResult after = evaluate_model(edited, notes, c.threshold);
    run.write_report("edit.json", {{"edits", json::parse(edit_set_json(edits))},
                                   {"affected_codes", edits.affected_codes()},
                                   {"before", eval_json(before, model.codes)},
                                   {"after", eval_json(after, edited.codes)},
                                   {"diff", eval_diff(before, after, model.codes)}});
    for (std::size_t j : edits.affected_codes())
        run.out << "code " << model.codes[j].code << ": FP " << before.counts[j].fp << " -> " << after.counts[j].fp
                << ", FN " << before.counts[j].fn << " -> " << after.counts[j].fn << "\n";
}

void cmd_ablate_repair(Run& run) {
    const Dataset ds = run.dataset();
    const DilaModel model = run.model();
    const auto entries = run.dictionary();
    if (!ds.confound) throw ConfigInvalid("dataset has no confound.json");
    const EditSet edits = confound_repair(model, entries, need_world(ds), *ds.confound);
    const std::string path = run.output_path("edits.json");
    save_edit_set(path, edits);
    run.output(path);
    run.out << edits.edits.size() << " edits: " << edits.note << "\n";
}

void cmd_ablate_timing(Run& run) {
    const Dataset ds = run.dataset();
    const DilaModel model = run.model();
    const std::size_t idx = run.cfg.note.empty() ? 0 : need_note(ds, run.cfg.note);
    const LabeledNote note = ds.labeled(idx);
    const TimingReport t = measure_timing(model, note.embeddings, run.cfg.repeats);
    run.write_report("timing.json", json::parse(timing_json(t)), false);
    run.out << "F_note " << t.f_note.mean_ms << " ms, A_laat " << t.a_laat.mean_ms << " ms, A_ficd read "
            << t.a_ficd_read.mean_ms << " ms\n";
}

// ---- evaluation and export -------------------------------------------------

void cmd_eval(Run& run) {
    const RunConfig& c = run.cfg;
    const Dataset ds = run.dataset();
    const DilaModel model = run.model();
    const auto [b, e] = split_range(ds, c, c.split);
    const EvalResult r = evaluate_model(model, ds.labeled_range(b, e), c.threshold);
    json report = eval_json(r, model.codes);
    report["split"] = c.split;
    run.write_report("eval.json", report);
    const std::string csv = run.output_path("reports/eval.csv");
    write_file(csv, eval_csv(r, model.codes));
    run.output(csv);
    run.out << "micro-F1 " << r.micro_f1 << ", macro-F1 " << r.macro_f1 << "\n";
}

std::string write_export(Run& run, const std::string& name, const std::string& body) {
    const std::string path = run.output_path("reports/" + name + "." + run.cfg.format);
    write_file(path, body);
    run.output(path);
    return path;
}

SummaryIndex summaries_if_present(Run& run) {
    const std::string path = run.dictionary_path();
    if (!fs::exists(path)) return {};
    return SummaryIndex(run.dictionary());
}

void cmd_export_heatmap(Run& run) {
    const DilaModel model = run.model();
    const SummaryIndex summaries = summaries_if_present(run);
    const auto slice = export_heatmap(model, resolve_features(model, run.cfg.select_features),
                                      resolve_codes(model, run.cfg.select_codes), summaries);
    write_export(run, "heatmap", run.cfg.format == "json" ? heatmap_json(slice, 2) + "\n" : heatmap_csv(slice));
}

void cmd_export_bars(Run& run) {
    const DilaModel model = run.model();
    const SummaryIndex summaries = summaries_if_present(run);
    const auto codes = resolve_codes(model, run.cfg.select_codes);
    write_export(run, "bars",
                 run.cfg.format == "json" ? bars_json(model, codes, run.cfg.k, summaries, 2) + "\n"
                                          : bars_csv(model, codes, run.cfg.k, summaries));
}

void cmd_export_pca2(Run& run) {
    const DilaModel model = run.model();
    write_export(run, "pca2",
                 run.cfg.format == "json" ? pca2_json(model.sae, run.cfg.seed, 2) + "\n" : pca2_csv(model.sae, run.cfg.seed));
}

// ---- serve -----------------------------------------------------------------

void cmd_serve(Run& run) {
    const RunConfig& c = run.cfg;
    Dataset ds = run.dataset();
    DilaModel model = run.model();
    auto entries = run.dictionary();
    ServerConfig sc;
    sc.host = c.host;
    sc.port = c.port;
    sc.cors_origin = c.cors;
    sc.threshold = c.threshold;
    sc.eval_fraction = c.eval_fraction;
    sc.seed = c.seed;
    DebugServer server(std::move(model), std::move(entries), std::move(ds), sc);
    if (!server.bind()) throw std::runtime_error("cannot bind " + c.host + ":" + std::to_string(c.port));
    run.finish();
    run.out << "listening on http://" << c.host << ":" << server.port() << "\n" << std::flush;
    server.listen();
}

// ---- command table ---------------------------------------------------------

void add_options(CLI::App& app, RunConfig& c) {
    const char* paths = "Paths";
    app.add_option("--run-dir", c.run_dir, "Output directory for this run")->capture_default_str()->group(paths);
    app.add_option("--data", c.data, "Dataset directory (default: run dir)")->group(paths);
    app.add_option("--sae", c.sae, "Stage-1 SAE checkpoint (default: <run-dir>/sae.dila)")->group(paths);
    app.add_option("--checkpoint", c.checkpoint, "DILA checkpoint (default: <run-dir>/checkpoint.dila)")->group(paths);
    app.add_option("--dictionary", c.dictionary, "Dictionary (default: <run-dir>/dictionary.jsonl)")->group(paths);
    app.add_option("--edits", c.edits, "EditSet JSON for ablate edit")->group(paths);

    const char* synth = "Synthetic data";
    app.add_option("--d", c.d, "Embedding dimension")->capture_default_str()->group(synth);
    app.add_option("--concepts", c.concepts, "Planted concept count")->capture_default_str()->group(synth);
    app.add_option("--codes", c.codes, "Code count")->capture_default_str()->group(synth);
    app.add_option("--noise", c.noise, "Embedding noise sigma")->capture_default_str()->group(synth);
    app.add_option("--notes", c.notes, "Corpus size")->capture_default_str()->group(synth);
    app.add_option("--min-len", c.min_len, "Shortest note")->capture_default_str()->group(synth);
    app.add_option("--max-len", c.max_len, "Longest note")->capture_default_str()->group(synth);
    app.add_option("--concept-token-prob", c.concept_token_prob, "Chance a token is a concept token")
        ->capture_default_str()->group(synth);
    app.add_option("--world-seed", c.world_seed, "World seed")->capture_default_str()->group(synth);
    app.add_option("--corpus-seed", c.corpus_seed, "Corpus seed")->capture_default_str()->group(synth);
    app.add_flag("--confound", c.confound, "Plant a label confound in the training split")->group(synth);
    app.add_option("--confound-rate", c.confound_rate, "Share of concept notes relabelled")
        ->capture_default_str()->group(synth);
    app.add_option("--confound-seed", c.confound_seed, "Confound seed")->capture_default_str()->group(synth);
    app.add_option("--eval-fraction", c.eval_fraction, "Trailing share of notes held out")
        ->capture_default_str()->group(synth);

    const char* train = "Training";
    app.add_option("--m", c.m, "Dictionary size (0: 4 x d)")->capture_default_str()->group(train);
    app.add_option("--lr", c.lr, "Learning rate")->capture_default_str()->group(train);
    app.add_option("--lambda-l1", c.lambda_l1, "SAE L1 weight")->capture_default_str()->group(train);
    app.add_option("--lambda-l2", c.lambda_l2, "SAE L2 weight")->capture_default_str()->group(train);
    app.add_option("--lambda-saenc", c.lambda_saenc, "SAE loss weight in stage 2")->capture_default_str()->group(train);
    app.add_option("--batch", c.batch, "Batch size")->capture_default_str()->group(train);
    app.add_option("--epochs", c.epochs, "Epochs")->capture_default_str()->group(train);
    app.add_option("--dropout", c.dropout, "Stage-2 dropout")->capture_default_str()->group(train);
    app.add_option("--threshold", c.threshold, "Decision threshold")->capture_default_str()->group(train);
    app.add_option("--warmup", c.warmup, "Warmup share of steps")->capture_default_str()->group(train);
    app.add_option("--seed", c.seed, "Training and sampling seed")->capture_default_str()->group(train);
    app.add_option("--sae-lr", c.sae_lr, "Stage-1 learning rate (default: --lr)")->group(train);
    app.add_option("--sae-batch", c.sae_batch, "Stage-1 batch size (default: --batch)")->group(train);
    app.add_option("--sae-epochs", c.sae_epochs, "Stage-1 epochs (default: --epochs)")->group(train);
    app.add_flag("--miswire", c.miswire, "Plant the confound's mis-wired weights before stage 2")->group(train);
    app.add_option("--miswire-weight", c.miswire_weight, "Planted weight")->capture_default_str()->group(train);

    const char* interp = "Interpretation";
    app.add_flag("--code-drops", c.code_drops, "Attach top codes per feature to the dictionary")->group(interp);
    app.add_option("--tasks", c.tasks, "Identification tasks")->capture_default_str()->group(interp);
    app.add_option("--pool", c.pool, "Outlier pool size")->capture_default_str()->group(interp);
    app.add_option("--annotator", c.annotator, "oracle, random, planted, llm or replay")
        ->capture_default_str()->group(interp);
    app.add_option("--cassette", c.cassette, "Recorded exchanges to replay")->group(interp);
    app.add_option("--record", c.record, "Record exchanges to this file under the run dir")->group(interp);
    app.add_option("--workers", c.workers, "Requests in flight")->capture_default_str()->group(interp);
    app.add_option("--llm-base-url", c.llm_base_url, "Chat endpoint base URL (or DILA_LLM_BASE_URL)")->group(interp);
    app.add_option("--llm-model", c.llm_model, "Chat model (or DILA_LLM_MODEL)")->group(interp);

    const char* abl = "Ablation, evaluation, export";
    app.add_option("--note", c.note, "Note id")->group(abl);
    app.add_option("--code", c.code, "Code id or index")->group(abl);
    app.add_option("--mode", c.mode, "Token mode: ablate, noise or replace")->capture_default_str()->group(abl);
    app.add_option("--sigma", c.sigma, "Noise sigma (default: per-dimension std)")->group(abl);
    app.add_option("--tokens", c.tokens, "Explicit token positions")->delimiter(',')->group(abl);
    app.add_option("--repeats", c.repeats, "Timing repeats")->capture_default_str()->group(abl);
    app.add_option("--split", c.split, "train, eval or all")->capture_default_str()->group(abl);
    app.add_option("--format", c.format, "json or csv")->capture_default_str()->group(abl);
    app.add_option("--select-codes", c.select_codes, "Codes to export (default: all)")->delimiter(',')->group(abl);
    app.add_option("--select-features", c.select_features, "Features to export (default: all)")
        ->delimiter(',')->group(abl);
    app.add_option("--k", c.k, "Top-k for bars")->capture_default_str()->group(abl);

    const char* srv = "Server";
    app.add_option("--host", c.host, "Bind address")->capture_default_str()->group(srv);
    app.add_option("--port", c.port, "Port (0 picks one)")->capture_default_str()->group(srv);
    app.add_option("--cors", c.cors, "Allowed CORS origin")->capture_default_str()->group(srv);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    CLI::App app{"DILA: sparse dictionary label attention for multilabel classification", "dila"};
    app.fallthrough();
    app.require_subcommand(1);
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.set_config("--config", "", "TOML key = value file; flags win");
    bool print_config = false;
    app.add_flag("--print-config", print_config, "Print the resolved configuration and exit");
    add_options(app, cfg);

    using Handler = void (*)(Run&);
    std::vector<std::pair<CLI::App*, Handler>> leaves;
    auto leaf = [&](CLI::App* parent, const std::string& name, const std::string& help, Handler h) {
        CLI::App* sub = parent->add_subcommand(name, help);
        leaves.emplace_back(sub, h);
        return sub;
    };
    leaf(&app, "synth-gen", "Generate a planted world and corpus into the run dir", cmd_synth_gen);
    leaf(&app, "train-sae", "Stage 1: train the sparse autoencoder", cmd_train_sae);
    leaf(&app, "train-dila", "Stage 2: train the label-attention model end to end", cmd_train_dila);
    leaf(&app, "build-dict", "Collect top contexts per feature", cmd_build_dict);
    CLI::App* interpret = app.add_subcommand("interpret", "Automated feature interpretation");
    interpret->require_subcommand(1);
    leaf(interpret, "identify", "Run outlier-identification tasks and set verdicts", cmd_identify);
    leaf(interpret, "summarize", "Ask for short summaries of identified features", cmd_summarize);
    CLI::App* ablate = app.add_subcommand("ablate", "Interventions on a trained model");
    ablate->require_subcommand(1);
    leaf(ablate, "weights", "Zero a code's weights for the note's active features", cmd_ablate_weights);
    leaf(ablate, "tokens", "Perturb the tokens a code attends to", cmd_ablate_tokens);
    leaf(ablate, "edit", "Apply an EditSet and write a new checkpoint", cmd_ablate_edit);
    leaf(ablate, "repair", "Derive the EditSet that repairs the dataset's planted confound", cmd_ablate_repair);
    leaf(ablate, "timing", "Time the interpretation reads for one note", cmd_ablate_timing);
    leaf(&app, "eval", "Evaluate a checkpoint", cmd_eval);
    CLI::App* exp = app.add_subcommand("export", "Export visualization data");
    exp->require_subcommand(1);
    leaf(exp, "heatmap", "A_ficd slice", cmd_export_heatmap);
    leaf(exp, "bars", "Top features per code", cmd_export_bars);
    leaf(exp, "pca2", "2-D PCA of decoder rows", cmd_export_pca2);
    leaf(&app, "serve", "Serve the debugger API", cmd_serve);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::FileError& e) {
        err << "config: " << e.what() << "\n";
        return kConfigInvalid;
    } catch (const CLI::ConfigError& e) {
        err << "config: " << e.what() << "\n";
        return kConfigInvalid;
    } catch (const CLI::ConversionError& e) {
        err << "config: " << e.what() << "\n";
        return kConfigInvalid;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n\n" << app.help();
        return kUsage;
    }

    const std::string config_text = app.config_to_str(true, false);
    if (print_config) {
        out << config_text;
        return kOk;
    }
    const auto errors = validate(cfg);
    if (!errors.empty()) {
        for (const auto& e : errors) err << "config: " << e << "\n";
        return kConfigInvalid;
    }

    const auto it = std::find_if(leaves.begin(), leaves.end(), [](const auto& l) { return l.first->parsed(); });
    if (it == leaves.end()) {
        err << "no command given\n\n" << app.help();
        return kUsage;
    }
    std::string command;
    for (const CLI::App* a = it->first; a != nullptr && a->get_parent() != nullptr; a = a->get_parent())
        command = a->get_name() + (command.empty() ? "" : " " + command);

    try {
        Run r(cfg, command, args, config_text, out);
        it->second(r);
        if (command != "serve") r.finish();
        return kOk;
    } catch (const ConfigInvalid& e) {
        err << "config: " << e.what() << "\n";
        return kConfigInvalid;
    } catch (const std::exception& e) {
        err << command << ": " << e.what() << "\n";
        return kRuntimeFailure;
    }
}

}  // namespace dila::cli
